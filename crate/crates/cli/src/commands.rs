//! Argument parsing and command dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use log::info;

use fedsim_core::runlog::Metric;
use fedsim_core::verify::{component_names, gradient_suite, TOLERANCE};
use fedsim_core::Error;

use crate::config::ExperimentConfig;
use crate::experiment::{simulate, write_partition, Stage};
use crate::report::{format_table, summarize_files, write_chart};

#[derive(Debug, Parser)]
#[command(name = "fedsim", version, about = "Deterministic federated learning simulator")]
pub struct Cli {
    /// Experiment config (`dotted.key = value` lines); defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads for client-parallel work.
    #[arg(long, global = true, env = "FEDSIM_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the client partition, label histograms and the dataset.
    Partition,
    /// Run the federation and write metrics, checkpoints and a manifest.
    Simulate,
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Fault injection: scale this component's analytic gradient.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Compare runs by final, best and convergence round of one metric.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "acc")]
        metric: String,
        /// Write an SVG line chart here.
        #[arg(long)]
        chart: Option<PathBuf>,
    },
}

impl Cli {
    /// Config from `--config` (or defaults) with the command-line overrides.
    pub fn experiment_config(&self) -> Result<ExperimentConfig, Error> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::parse("")?,
        };
        if let Some(seed) = self.seed {
            config = config.with_seed(seed);
        }
        if let Some(out) = &self.out {
            config = config.with_output(out.clone());
        }
        Ok(config)
    }
}

/// Runs the parsed command on a pool of `--threads` workers.
pub fn run(cli: Cli) -> Result<(), Stage> {
    let pool = match cli.threads {
        Some(0) => {
            return Err(Stage::Validation(Error::config("threads", "must be >= 1")));
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| Stage::Runtime(Error::Parameter(format!("thread pool: {e}"))))?;
    pool.install(|| dispatch(&cli))
}

fn dispatch(cli: &Cli) -> Result<(), Stage> {
    match &cli.command {
        Command::Partition => {
            let config = cli.experiment_config().map_err(Stage::Validation)?;
            let data = write_partition(&config, &config.output).map_err(Stage::Validation)?;
            let sizes: Vec<usize> = data.clients.iter().map(|d| d.len()).collect();
            println!("wrote partition of {} clients to {}", sizes.len(), config.output.display());
            println!("client sizes: {sizes:?}");
            Ok(())
        }
        Command::Simulate => {
            let config = cli.experiment_config().map_err(Stage::Validation)?;
            let out = config.output.clone();
            let run = simulate(config)?;
            println!(
                "completed {} rounds; artifacts in {}",
                run.final_state.round,
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck { trials, corrupt } => gradcheck(cli.seed.unwrap_or(0), *trials, corrupt.as_deref()),
        Command::Report { csv, metric, chart } => {
            let metric: Metric = metric
                .parse()
                .map_err(|e: String| Stage::Validation(Error::config("metric", e)))?;
            let rows = summarize_files(csv, metric).map_err(Stage::Runtime)?;
            print!("{}", format_table(&rows, metric));
            if let Some(path) = chart {
                write_chart(&rows, metric, path).map_err(Stage::Runtime)?;
            }
            Ok(())
        }
    }
}

fn gradcheck(seed: u64, trials: usize, corrupt: Option<&str>) -> Result<(), Stage> {
    if let Some(name) = corrupt {
        if !component_names().contains(&name) {
            return Err(Stage::Validation(Error::config(
                "corrupt",
                format!("unknown component `{name}`"),
            )));
        }
    }
    if trials == 0 {
        return Err(Stage::Validation(Error::config("trials", "must be >= 1")));
    }
    let start = std::time::Instant::now();
    let checks = gradient_suite(seed, trials, corrupt).map_err(Stage::Runtime)?;
    println!("{:<26} {:>6} {:>8} {:>14}  status", "component", "trials", "coords", "max_rel_err");
    for c in &checks {
        println!(
            "{:<26} {:>6} {:>8} {:>14.3e}  {}",
            c.name,
            c.trials,
            c.coordinates,
            c.max_rel_error,
            if c.passed() { "pass" } else { "FAIL" }
        );
    }
    info!("gradient checks took {:.2?}", start.elapsed());
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Stage::Runtime(Error::GradCheck {
            coordinate: 0,
            message: format!(
                "max relative error >= {TOLERANCE:e} in: {}",
                failed.join(", ")
            ),
        }))
    }
}
