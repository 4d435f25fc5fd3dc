//! `wdro` — sensitivity analysis of Wasserstein distributionally robust
//! optimization problems from the command line.
//!
//! Exit codes: 0 success, 2 input/validation error, 3 numerical failure.

mod commands;
mod spec;

use clap::{Parser, Subcommand};
use commands::{NumericalFailure, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "wdro",
    about = "First-order sensitivities of Wasserstein DRO problems, with a brute-force dual oracle"
)]
struct Cli {
    /// Output directory for reports and CSV files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Seed recorded in every output and used by randomized restarts.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Decreasing radius grid for oracle sweeps, e.g. 0.04,0.02,0.01.
    #[arg(long, global = true, value_delimiter = ',',
          default_value = "0.04,0.02,0.01,0.005")]
    deltas: Vec<f64>,
    /// Relative oracle tolerance override.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Value sensitivity (constrained when the spec lists constraints).
    Upsilon {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Optimizer sensitivity.
    Beth {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Robust values over the radius grid via the dual oracle.
    Oracle {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Formula-vs-oracle comparison table (pass/fail at 2%/5%).
    Validate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Figure data: robust call value, sensitivity-vs-Vega, LASSO shrinkage.
    Figures,
    /// Out-of-sample CLT study.
    Clt {
        /// Study kind: tracking | regression.
        #[arg(long, default_value = "tracking")]
        kind: String,
        /// Sample size per replication (robust radius is 1/sqrt(N)).
        #[arg(long, default_value_t = 400)]
        n: usize,
        /// Replications.
        #[arg(long, default_value_t = 200)]
        m: usize,
        /// Reference-sample size for the population predictions.
        #[arg(long, default_value_t = 100_000)]
        reference_size: usize,
    },
}

fn main() {
    // WDRO_THREADS caps internal parallelism.
    if let Ok(threads) = std::env::var("WDRO_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let cli = Cli::parse();
    let run = RunConfig {
        out: cli.out,
        seed: cli.seed,
        deltas: cli.deltas,
        tol: cli.tol,
    };
    let result = run.validate().and_then(|()| match &cli.command {
        Command::Upsilon { spec } => {
            let problem = spec::load(spec)?;
            commands::cmd_upsilon(&problem, &run)
        }
        Command::Beth { spec } => {
            let problem = spec::load(spec)?;
            commands::cmd_beth(&problem, &run)
        }
        Command::Oracle { spec } => {
            let problem = spec::load(spec)?;
            commands::cmd_oracle(&problem, &run)
        }
        Command::Validate { spec } => {
            let problem = spec::load(spec)?;
            commands::cmd_validate(&problem, &run)
        }
        Command::Figures => commands::cmd_figures(&run),
        Command::Clt {
            kind,
            n,
            m,
            reference_size,
        } => commands::cmd_clt(&run, kind, *n, *m, *reference_size),
    });
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            // Numerical failures (post-validation) exit 3, everything else 2.
            let code = if e.chain().any(|c| c.is::<NumericalFailure>()) {
                3
            } else {
                2
            };
            std::process::exit(code);
        }
    }
}
