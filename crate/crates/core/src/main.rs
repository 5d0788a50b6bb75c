use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pnp_mmse::experiment::{
    self, parse_solver_list, ExperimentConfig, SolverKind, TrialFailure, DEFAULT_CONVERGENCE_RATE,
};
use pnp_mmse::validation::run_validation_suite;
use pnp_mmse::Error;

#[derive(Parser)]
#[command(name = "pnp-mmse", version, about = "PnP-ISTA with an exact Bernoulli-Gaussian MMSE denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-iteration cost and SNR at a single measurement rate
    Converge(CommonArgs),
    /// Final SNR against the measurement rate
    Sweep(CommonArgs),
    /// Small-scale invariant checks; exits 1 if any fails
    Validate(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML config file; command-line flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Signal dimension
    #[arg(long)]
    n: Option<usize>,
    /// Fraction of nonzero signal entries
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated measurement rates m/n, ascending
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    rates: Option<Vec<f64>>,
    /// Comma-separated subset of pnp,lasso,gamp
    #[arg(long)]
    solvers: Option<String>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// n = 4096 and 100 trials (explicit --n/--trials still win)
    #[arg(long)]
    full_scale: bool,
    /// Output directory for CSV files
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn build(&self, default_rates: Vec<f64>) -> Result<ExperimentConfig, Error> {
        let mut c = ExperimentConfig {
            measurement_rates: default_rates,
            ..ExperimentConfig::default()
        };
        if let Some(path) = &self.config {
            c = c.load(path)?;
        }
        if self.full_scale {
            c = c.full_scale();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.n {
            c.n = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.trials {
            c.trials = v;
        }
        if let Some(v) = &self.rates {
            c.measurement_rates = v.clone();
        }
        if let Some(v) = &self.solvers {
            c.solvers = parse_solver_list(v)?;
        }
        if let Some(v) = self.max_iter {
            c.max_iter = v;
        }
        if let Some(v) = &self.out {
            c.output_dir = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::FailureBudget { .. } | Error::NumericalFailure { .. } => 3,
        Error::Io(_) | Error::Csv(_) => 1,
    }
}

fn report_failures(failures: &[TrialFailure], rates: &[f64]) {
    for f in failures {
        eprintln!("trial {} at rate {} failed: {}", f.trial, rates[f.rate_index], f.message);
    }
}

fn run(command: Command) -> Result<u8, Error> {
    match command {
        Command::Converge(args) => {
            let c = args.build(vec![DEFAULT_CONVERGENCE_RATE])?;
            let report = experiment::run_convergence_experiment(&c)?;
            report_failures(&report.trials.failures, &c.measurement_rates);
            for path in experiment::write_convergence_csv(&report, &c.output_dir)? {
                println!("wrote {}", path.display());
            }
            for solver in SolverKind::ALL {
                if let Some(row) = report.snr.iter().rev().find(|r| r.solver == solver) {
                    println!("{solver:<6} final SNR mean {:.2} dB (min {:.2}, max {:.2})", row.snr.mean, row.snr.min, row.snr.max);
                }
            }
            Ok(0)
        }
        Command::Sweep(args) => {
            let c = args.build(experiment::default_rates())?;
            let report = experiment::run_rate_sweep(&c)?;
            report_failures(&report.trials.failures, &c.measurement_rates);
            for path in experiment::write_sweep_csv(&report, &c.output_dir)? {
                println!("wrote {}", path.display());
            }
            for row in &report.rows {
                println!("rate {:<5} {:<6} SNR mean {:.2} dB", row.rate, row.solver.to_string(), row.snr.mean);
            }
            Ok(0)
        }
        Command::Validate(args) => {
            let c = args.build(experiment::default_rates())?;
            let report = run_validation_suite(&c)?;
            print!("{}", report.table());
            let path = report.write_csv(&c.output_dir)?;
            println!("wrote {}", path.display());
            Ok(if report.passed() { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
