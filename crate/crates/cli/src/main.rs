use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use levsim::runner::{self, ExperimentConfig, PlotKind, WORKERS_ENV};
use levsim::Scheme;

#[derive(Parser)]
#[command(name = "levsim", version, about = "Leverage-cycle market simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file with flat parameter keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set rho=0.98` or `--set lambda_max_grid=[1,5,10]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a single cell (one scheme, one lambda_max) for one seed.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long)]
        lambda_max: Option<f64>,
        /// Seed passed straight to the RNG.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<u64>,
        /// Write the per-step trace to this CSV file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run every (scheme, lambda_max) cell of the grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        output_dir: Option<PathBuf>,
        #[arg(short, long, env = WORKERS_ENV)]
        workers: Option<usize>,
    },
    /// Project an aggregate table into per-figure data files.
    Plotdata {
        /// aggregate.csv written by `sweep`.
        #[arg(long)]
        table: PathBuf,
        /// One or more of: volatility, volume, leverage, interest, default,
        /// returns, returns_lifetime, profit, bank_losses, return_dist, all.
        #[arg(long, required = true, num_args = 1..)]
        kind: Vec<String>,
        #[arg(short, long, default_value = "plots")]
        out: PathBuf,
        /// lambda_max of the return distributions.
        #[arg(long, default_value_t = 15.0)]
        dist_lambda: f64,
    },
    /// Check a config and print its normalised form.
    ValidateConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { config, scheme, lambda_max, seed, steps, trace } => {
            let cfg = config.load()?;
            let params = cfg.params.with_scheme(
                scheme.unwrap_or(cfg.params.scheme),
                lambda_max.unwrap_or(cfg.params.lambda_max),
            );
            params.validate()?;
            let steps = steps.unwrap_or(cfg.steps);
            match runner::run_simulation(&params, steps, seed, trace.is_some()) {
                Ok(out) => {
                    if let (Some(path), Some(reports)) = (&trace, &out.trace) {
                        runner::write_trace(path, reports)?;
                    }
                    print!("{}", toml::to_string(&out.summary.metrics)?);
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("run failed: {e}");
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Command::Sweep { config, output_dir, workers } => {
            let mut cfg = config.load()?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if workers.is_some() {
                cfg.workers = workers;
            }
            cfg.validate()?;
            let outcome = runner::sweep(&cfg)?;
            let resumed = outcome.cells.iter().filter(|c| c.resumed).count();
            eprintln!(
                "{} cells ({} resumed), {} runs failed; aggregate: {}",
                outcome.cells.len(),
                resumed,
                outcome.failed_runs(),
                outcome.aggregate_path.display()
            );
            for c in &outcome.cells {
                for (rec, msg) in c.failures() {
                    eprintln!("failed: {} run {} seed {}: {msg}", c.cell.key(), rec.run, rec.seed);
                }
            }
            Ok(if outcome.all_succeeded() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Plotdata { table, kind, out, dist_lambda } => {
            let kinds: Vec<PlotKind> = if kind.iter().any(|k| k == "all") {
                PlotKind::ALL.to_vec()
            } else {
                kind.iter().map(|k| k.parse()).collect::<Result<_, _>>()?
            };
            for k in kinds {
                let files = runner::emit_plot_data(&table, &out, k, dist_lambda)
                    .with_context(|| format!("plot kind {}", k.as_str()))?;
                for f in files {
                    println!("{}", f.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateConfig { config } => {
            let cfg = config.load()?;
            print!("{}", cfg.to_toml());
            eprintln!("config ok: {} cells, hash {}", cfg.cells().len(), cfg.config_hash());
            Ok(ExitCode::SUCCESS)
        }
    }
}
