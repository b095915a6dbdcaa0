use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfsl::config::{parse_config, ExperimentConfig, Variant};
use cfsl::experiment::{emit_plot_data, run_experiment, sweep, ExperimentError, Figure, SweepAxis};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfsl", version, about = "Clustered federated semi-supervised learning simulator")]
struct Cli {
    /// Override run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Override run.variant (cfsl | cfl-fully-labeled | hfl-ssl).
    #[arg(long, global = true)]
    baseline: Option<Variant>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run { config: PathBuf },
    /// Run one experiment per axis value.
    Sweep {
        config: PathBuf,
        /// labeled_fraction | phi | seed
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Build a plot table from a metrics file.
    Plot {
        metrics: PathBuf,
        /// accuracy | labeling-accuracy | labeling-latency.
        #[arg(long)]
        figure: Figure,
    },
}

fn load(path: &Path, cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = parse_config(&text)?;
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(v) = cli.baseline {
        cfg.run.variant = v;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), ExperimentError> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(config, cli)?;
            let s = run_experiment(&cfg, &cli.out_dir)?;
            println!(
                "{} rounds ({}); metrics: {}; events: {}",
                s.rounds,
                s.termination,
                s.metrics_path.display(),
                s.events_path.display()
            );
        }
        Command::Sweep { config, axis, values } => {
            let cfg = load(config, cli)?;
            let s = sweep(&cfg, *axis, values, &cli.out_dir)?;
            for (v, r) in &s.runs {
                match r {
                    Ok(n) => println!("{axis}={v}: {n} rounds"),
                    Err(e) => println!("{axis}={v}: failed: {e}"),
                }
            }
            println!(
                "{} of {} runs succeeded; combined: {}",
                s.runs.len() - s.failures(),
                s.runs.len(),
                s.combined_path.display()
            );
            if s.failures() > 0 {
                return Err(ExperimentError::Schema(format!("{} sweep runs failed", s.failures())));
            }
        }
        Command::Plot { metrics, figure } => {
            let p = emit_plot_data(metrics, *figure, &cli.out_dir)?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
