//! Experiment runner for resampled-base normalizing flows: JSON configs,
//! checkpoints, CSV ingestion and the `lars-flows` command line.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod hexfloat;
pub mod manifest;
pub mod sweeps;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lars_flows::exec::{configure_threads, set_execution, Execution};

use config::ExperimentConfig;
use error::ConfigError;
use experiment::{data_ll, density_grid, evaluate, load_for_eval, metrics_csv, sample_csv, EvalSelection, MetricRow};
use manifest::{write_atomic, write_manifest, MANIFEST_NAME};

/// Environment variable capping intra-step parallelism (0 = automatic).
pub const THREADS_ENV: &str = "LARS_FLOWS_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "lars-flows",
    version,
    about = "Train and evaluate normalizing flows with resampled base distributions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the model described by a config file.
    Train { config: PathBuf },
    /// Print evaluation metrics of a checkpoint as `metric,value,stderr`.
    Eval {
        checkpoint: PathBuf,
        /// Histogram KL divergence on the evaluation grid.
        #[arg(long)]
        grid: bool,
        /// Quadrature KL divergence.
        #[arg(long)]
        kld: bool,
        /// Mean log-likelihood of the rows of a CSV file.
        #[arg(long, value_name = "CSV")]
        ll: Option<PathBuf>,
        /// Also write the table to this file.
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(short = 'n')]
        n: usize,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Export model (and target) log densities on the evaluation grid.
    Grid {
        checkpoint: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Train once per rejection-rate penalty weight.
    Zsweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train once per acceptance-network depth and width.
    Archsweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        units: Vec<usize>,
    },
}

/// Applies `LARS_FLOWS_THREADS`: `1` runs sequentially, `n > 1` caps the
/// worker pool, `0` or unset keeps the default.
pub fn apply_thread_setting(value: Option<&str>) -> Result<(), ConfigError> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| ConfigError::new(THREADS_ENV, format!("{v:?} is not a thread count")))?;
    match n {
        0 => {}
        1 => set_execution(Execution::Sequential),
        n => configure_threads(n),
    }
    Ok(())
}

/// Rewrites the manifest of the checkpoint's run directory if `written`
/// lies inside it.
fn refresh_run_manifest(checkpoint: &Path, written: &Path) -> Result<()> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let dir = dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf());
    let file = written.canonicalize().unwrap_or_else(|_| written.to_path_buf());
    if file.starts_with(&dir) && dir.join(MANIFEST_NAME).is_file() {
        write_manifest(&dir)?;
    }
    Ok(())
}

fn write_output(checkpoint: &Path, path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    refresh_run_manifest(checkpoint, path)
}

fn eval_command(checkpoint: &Path, grid: bool, kld: bool, ll: Option<&Path>, output: Option<&Path>) -> Result<String> {
    let mut loaded = load_for_eval(checkpoint)?;
    let any = grid || kld || ll.is_some();
    let which = if any {
        EvalSelection {
            kld,
            histogram: grid,
            ll: false,
        }
    } else {
        EvalSelection::ALL
    };
    if (grid || kld) && loaded.data.target().is_none() {
        bail!("--grid and --kld need a checkpoint trained on a target density");
    }
    let cfg = loaded.checkpoint.config.clone();
    let mut rows = evaluate(&loaded.model, &cfg, &loaded.data, which, &mut loaded.rng)?;
    if let Some(path) = ll {
        let has_header = cfg.data.csv.as_ref().is_some_and(|c| c.has_header);
        let raw = dataset::read_numeric_csv(path, has_header)?;
        if raw.cols() != loaded.model.dim() {
            bail!(
                "{}: {} columns, model dimension is {}",
                path.display(),
                raw.cols(),
                loaded.model.dim()
            );
        }
        let st = loaded.data.standardization();
        let x = st.map_or(raw.clone(), |s| s.apply(&raw));
        let s = data_ll(&loaded.model, &x, st)?;
        rows.push(MetricRow {
            metric: "ll".into(),
            value: s.mean,
            stderr: Some(s.std_error),
        });
    }
    let text = metrics_csv(&rows);
    if let Some(out) = output {
        write_output(checkpoint, out, &text)?;
    }
    Ok(text)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = experiment::run_training(&cfg)?;
            print!("{}", metrics_csv(&summary.metrics));
        }
        Command::Eval {
            checkpoint,
            grid,
            kld,
            ll,
            output,
        } => {
            print!(
                "{}",
                eval_command(&checkpoint, grid, kld, ll.as_deref(), output.as_deref())?
            );
        }
        Command::Sample { checkpoint, n, output } => {
            if n == 0 {
                return Err(ConfigError::new("-n", "must be positive").into());
            }
            let loaded = load_for_eval(&checkpoint)?;
            write_output(&checkpoint, &output, &sample_csv(&loaded, n)?)?;
        }
        Command::Grid { checkpoint, output } => {
            let loaded = load_for_eval(&checkpoint)?;
            write_output(&checkpoint, &output, &density_grid(&loaded)?.to_csv())
                .with_context(|| format!("writing {}", output.display()))?;
        }
        Command::Zsweep { config, lambdas, seeds } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rows = sweeps::zsweep(&cfg, &lambdas, &seeds)?;
            println!("lambda,final_Z,final_kld");
            for r in rows {
                println!(
                    "{:?},{:?},{}",
                    r.lambda,
                    r.final_z,
                    r.final_kld.map(|v| format!("{v:?}")).unwrap_or_default()
                );
            }
        }
        Command::Archsweep { config, layers, units } => {
            let cfg = ExperimentConfig::load(&config)?;
            sweeps::archsweep(&cfg, &layers, &units)?;
            print!(
                "{}",
                std::fs::read_to_string(cfg.output_dir.join(sweeps::ARCHSWEEP_FILE))?
            );
        }
    }
    Ok(())
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for invalid arguments or configs, 1 for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = apply_thread_setting(std::env::var(THREADS_ENV).ok().as_deref()) {
        eprintln!("error: {e}");
        return 2;
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
