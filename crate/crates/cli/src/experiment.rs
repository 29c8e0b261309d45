//! Building, training and evaluating the model described by a config.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use lars_flows::evaluation::{
    dataset_ll, export_density_grid, histogram_kld, log_density_on_grid, quadrature_kld, refresh_z, DensityGrid,
    HistReference, LlSummary, ZRefresh,
};
use lars_flows::flow::FlowModel;
use lars_flows::rng::{derive_seed, RngStream};
use lars_flows::targets::Target2D;
use lars_flows::training::{DataSource, EvalFn, Objective, Trainer};
use lars_flows::Matrix;

use crate::checkpoint::Checkpoint;
use crate::config::{BaseSection, DataChoice, ExperimentConfig};
use crate::dataset::{load_csv_dataset, Dataset, Standardization};
use crate::manifest::{write_atomic, write_manifest};

/// Seed purposes.
const INIT_PURPOSE: u64 = 0x1417;
/// Stream id of the evaluation stream stored in checkpoints.
pub const EVAL_STREAM: u64 = 0xe7a1;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVALS_FILE: &str = "evals.csv";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Initializes the model for `cfg` on `R^dim`. Parameters depend only on the
/// config (including its seed).
pub fn build_model(cfg: &ExperimentConfig, dim: usize) -> Result<FlowModel> {
    let mut rng = RngStream::new(derive_seed(cfg.seed, 0, INIT_PURPOSE), 0);
    let mut model = FlowModel::real_nvp(dim, &cfg.base_kind(), &cfg.flow_arch(), &mut rng)?;
    if let (
        BaseSection::Resampled {
            z_samples, ema_decay, ..
        },
        Some(r),
    ) = (&cfg.model.base, model.base_mut().as_resampled_mut())
    {
        *r = r.clone().with_ema_decay(*ema_decay)?.with_mc_samples(*z_samples)?;
    }
    Ok(model)
}

/// Loaded training data.
pub enum Data {
    Target(Target2D),
    Csv(Dataset),
}

impl Data {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.data_choice()? {
            DataChoice::Target(t) => Data::Target(Target2D::new(t)),
            DataChoice::Csv(c) => Data::Csv(load_csv_dataset(
                &c.path,
                c.has_header,
                c.standardize,
                c.split,
                cfg.seed,
            )?),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Data::Target(_) => 2,
            Data::Csv(d) => d.train.cols(),
        }
    }

    pub fn target(&self) -> Option<&Target2D> {
        match self {
            Data::Target(t) => Some(t),
            Data::Csv(_) => None,
        }
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        match self {
            Data::Target(_) => None,
            Data::Csv(d) => d.standardization.as_ref(),
        }
    }
}

/// One row of `eval_metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

impl MetricRow {
    fn plain(metric: &str, value: f64) -> Self {
        Self {
            metric: metric.into(),
            value,
            stderr: None,
        }
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,value,stderr\n");
    for r in rows {
        let se = r.stderr.map(|v| format!("{v:?}")).unwrap_or_default();
        writeln!(s, "{},{:?},{}", r.metric, r.value, se).unwrap();
    }
    s
}

/// Sets the model's `Z` to a high-precision value: quadrature on the config's
/// `z_grid` for two-dimensional groups, Monte Carlo otherwise.
pub fn refresh_model_z(model: &mut FlowModel, cfg: &ExperimentConfig, rng: &mut RngStream) -> Result<Vec<f64>> {
    let how = match model.base().as_resampled() {
        Some(r) if r.group_dim() == 2 => ZRefresh::Quadrature(cfg.eval.z_grid.clone()),
        Some(_) => ZRefresh::MonteCarlo(cfg.eval.z_mc_samples),
        None => return Ok(Vec::new()),
    };
    Ok(refresh_z(model, &how, rng)?)
}

/// Held-out log-likelihood in the units of the original data.
pub fn data_ll(model: &FlowModel, data: &Matrix, st: Option<&Standardization>) -> Result<LlSummary> {
    let mut s = dataset_ll(model, data)?;
    if let Some(st) = st {
        s.mean += st.log_det();
    }
    Ok(s)
}

/// Mean over groups of the stored `Z` (1 without a resampled base).
pub fn mean_z(model: &FlowModel) -> f64 {
    model
        .base()
        .as_resampled()
        .map_or(1.0, |r| r.z_value().iter().sum::<f64>() / r.num_groups() as f64)
}

/// Which metrics [`evaluate`] computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSelection {
    pub kld: bool,
    pub histogram: bool,
    pub ll: bool,
}

impl EvalSelection {
    pub const ALL: Self = Self {
        kld: true,
        histogram: true,
        ll: true,
    };
}

/// Final metrics of a model whose `Z` has already been refreshed.
pub fn evaluate(
    model: &FlowModel,
    cfg: &ExperimentConfig,
    data: &Data,
    which: EvalSelection,
    rng: &mut RngStream,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    if let Some(r) = model.base().as_resampled() {
        if r.num_groups() == 1 {
            rows.push(MetricRow::plain("z", r.z_value()[0]));
        } else {
            for (k, z) in r.z_value().iter().enumerate() {
                rows.push(MetricRow::plain(&format!("z_{k}"), *z));
            }
        }
    }
    match data {
        Data::Target(t) => {
            if which.kld {
                rows.push(MetricRow::plain("kld", quadrature_kld(model, t, &cfg.eval.grid)?));
            }
            if which.histogram {
                let samples = model.sample(cfg.eval.histogram_samples, rng)?;
                let lt = log_density_on_grid(t, &cfg.eval.grid)?;
                let reference = HistReference::Density {
                    grid: &cfg.eval.grid,
                    log_density: &lt,
                };
                rows.push(MetricRow::plain(
                    "histogram_kld",
                    histogram_kld(&samples.x, reference, cfg.eval.histogram_bins)?,
                ));
            }
        }
        Data::Csv(d) => {
            if which.ll {
                for (name, m) in [("val_ll", &d.val), ("test_ll", &d.test)] {
                    if m.rows() > 0 {
                        let s = data_ll(model, m, d.standardization.as_ref())?;
                        rows.push(MetricRow {
                            metric: name.into(),
                            value: s.mean,
                            stderr: Some(s.std_error),
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Outcome of a completed training run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub final_z: f64,
    pub metrics: Vec<MetricRow>,
}

impl RunSummary {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|r| r.metric == name).map(|r| r.value)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Trains the configured model and writes its artifacts to `cfg.output_dir`.
///
/// If training fails part way, the last good state is still written as a
/// checkpoint (with the metrics so far and a manifest) before the error is
/// returned.
pub fn run_training(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let data = Data::load(cfg)?;
    let model = build_model(cfg, data.dim())?;
    let mut trainer = Trainer::new(model, cfg.train_config())?;
    let eval_rng = RngStream::new(cfg.seed, EVAL_STREAM);
    let periodic = |m: &FlowModel| -> lars_flows::Result<Vec<(String, f64)>> {
        let mut m = m.clone();
        let mut rng = eval_rng.clone();
        refresh_model_z(&mut m, cfg, &mut rng).map_err(to_flow_error)?;
        let which = EvalSelection {
            kld: true,
            histogram: false,
            ll: true,
        };
        let rows = evaluate(&m, cfg, &data, which, &mut rng).map_err(to_flow_error)?;
        Ok(rows.into_iter().map(|r| (r.metric, r.value)).collect())
    };
    let hook: Option<&EvalFn<'_>> = Some(&periodic);
    let result = match (&data, cfg.train.objective) {
        (Data::Target(t), Objective::Ml) => trainer.train_ml(DataSource::Target(t), hook),
        (Data::Csv(d), Objective::Ml) => trainer.train_ml(DataSource::Dataset(&d.train), hook),
        (Data::Target(t), Objective::Kl) => trainer.train_kl(t, hook),
        (Data::Csv(_), Objective::Kl) => bail!("kl training needs a target density"),
    };
    let snapshot = serde_json::to_string_pretty(cfg)? + "\n";
    write_text(&out.join(CONFIG_FILE), &snapshot)?;
    write_text(&out.join(METRICS_FILE), &trainer.metrics.to_csv())?;
    write_text(&out.join(EVALS_FILE), &trainer.metrics.evals_to_csv())?;
    let ckpt = Checkpoint::capture(&trainer, cfg, eval_rng.state(), data.standardization().cloned());
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    if let Err(e) = result {
        write_manifest(out)?;
        return Err(anyhow::Error::new(e).context(format!(
            "training stopped at iteration {}; last good state saved to {}",
            trainer.iteration,
            out.join(CHECKPOINT_FILE).display()
        )));
    }
    let mut model = trainer.eval_model()?;
    let mut rng = eval_rng.clone();
    refresh_model_z(&mut model, cfg, &mut rng)?;
    let metrics = evaluate(&model, cfg, &data, EvalSelection::ALL, &mut rng)?;
    write_text(&out.join(EVAL_METRICS_FILE), &metrics_csv(&metrics))?;
    write_manifest(out)?;
    Ok(RunSummary {
        final_z: mean_z(&model),
        metrics,
    })
}

fn to_flow_error(e: anyhow::Error) -> lars_flows::FlowError {
    match e.downcast::<lars_flows::FlowError>() {
        Ok(f) => f,
        Err(e) => lars_flows::FlowError::InvalidParameter(e.to_string()),
    }
}

/// A checkpoint together with its evaluation model and data.
pub struct Loaded {
    pub checkpoint: Checkpoint,
    /// Polyak-averaged if enabled, with `Z` refreshed.
    pub model: FlowModel,
    pub data: Data,
    /// Evaluation stream positioned after the `Z` refresh.
    pub rng: RngStream,
}

pub fn load_for_eval(path: &Path) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(path)?;
    let trainer = checkpoint.restore()?;
    let mut model = trainer.eval_model()?;
    let cfg = &checkpoint.config;
    let data = Data::load(cfg)?;
    let mut rng = RngStream::from_state(checkpoint.rng);
    refresh_model_z(&mut model, cfg, &mut rng)?;
    Ok(Loaded {
        checkpoint,
        model,
        data,
        rng,
    })
}

/// Density grid of a two-dimensional model (and its target, if any).
pub fn density_grid(loaded: &Loaded) -> Result<DensityGrid> {
    if loaded.model.dim() != 2 {
        bail!(
            "density grids need a two-dimensional model (got {})",
            loaded.model.dim()
        );
    }
    let target = loaded.data.target().map(|t| t as &dyn lars_flows::targets::LogDensity);
    Ok(export_density_grid(
        &loaded.model,
        target,
        &loaded.checkpoint.config.eval.grid,
    )?)
}

/// Draws `n` samples in data units; CSV header `x1..xd,log_prob`.
pub fn sample_csv(loaded: &Loaded, n: usize) -> Result<String> {
    let mut rng = loaded.rng.clone();
    let s = loaded.model.sample(n, &mut rng)?;
    let (x, shift) = match loaded.data.standardization() {
        Some(st) => (st.invert(&s.x), st.log_det()),
        None => (s.x, 0.0),
    };
    let d = x.cols();
    let mut out = (1..=d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push_str(",log_prob\n");
    for (row, lp) in x.iter_rows().zip(&s.log_prob) {
        for v in row {
            write!(out, "{v:?},").unwrap();
        }
        writeln!(out, "{:?}", lp + shift).unwrap();
    }
    Ok(out)
}
