//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lars_flows::base::{AcceptanceNet, DEFAULT_EMA_DECAY, DEFAULT_MC_SAMPLES, DEFAULT_TRUNCATION};
use lars_flows::evaluation::{default_kld_grid, default_z_grid};
use lars_flows::flow::{BaseKind, FlowArch};
use lars_flows::nets::Activation;
use lars_flows::numerics::Grid2D;
use lars_flows::targets::TargetKind;
use lars_flows::training::{LrSchedule, Objective, TrainConfig};

use crate::error::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Relative paths are resolved against the config file's directory.
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub base: BaseSection,
    #[serde(default)]
    pub flow: FlowSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseSection {
    Gaussian,
    Mixture {
        components: usize,
    },
    Resampled {
        #[serde(default = "default_truncation")]
        truncation: u32,
        /// Proposal draws per `Z` estimate during training.
        #[serde(default = "default_z_samples")]
        z_samples: usize,
        #[serde(default = "default_ema_decay")]
        ema_decay: f64,
        #[serde(default)]
        acceptance: AcceptanceSection,
        #[serde(default = "one")]
        groups: usize,
    },
}

fn default_truncation() -> u32 {
    DEFAULT_TRUNCATION
}

fn default_z_samples() -> usize {
    DEFAULT_MC_SAMPLES
}

fn default_ema_decay() -> f64 {
    DEFAULT_EMA_DECAY
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceSection {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for AcceptanceSection {
    fn default() -> Self {
        let a = AcceptanceNet::default();
        Self {
            hidden_layers: a.hidden_layers,
            hidden_units: a.hidden_units,
            activation: a.activation,
            dropout: a.dropout_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub coupling_layers: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "yes")]
    pub linear_between_pairs: bool,
}

fn yes() -> bool {
    true
}

impl Default for FlowSection {
    fn default() -> Self {
        let a = FlowArch::default();
        Self {
            coupling_layers: a.coupling_layers,
            hidden_layers: a.hidden_layers,
            hidden_units: a.hidden_units,
            activation: a.activation,
            linear_between_pairs: a.linear_between_pairs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSection {
    pub path: PathBuf,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default)]
    pub standardize: bool,
    /// Train, validation and test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub objective: Objective,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub lambda_z: f64,
    #[serde(default)]
    pub polyak_rate: Option<f64>,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Grid for quadrature KL divergences and density export.
    #[serde(default = "default_kld_grid")]
    pub grid: Grid2D,
    /// Grid for computing `Z` of two-dimensional acceptance groups.
    #[serde(default = "default_z_grid")]
    pub z_grid: Grid2D,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default = "default_hist_samples")]
    pub histogram_samples: usize,
    /// Proposal draws for `Z` when quadrature does not apply.
    #[serde(default = "default_z_mc")]
    pub z_mc_samples: usize,
}

fn default_bins() -> usize {
    100
}

fn default_hist_samples() -> usize {
    100_000
}

fn default_z_mc() -> usize {
    1_000_000
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            grid: default_kld_grid(),
            z_grid: default_z_grid(),
            histogram_bins: default_bins(),
            histogram_samples: default_hist_samples(),
            z_mc_samples: default_z_mc(),
        }
    }
}

/// The data source after validation.
#[derive(Clone, Debug, PartialEq)]
pub enum DataChoice<'a> {
    Target(TargetKind),
    Csv(&'a CsvSection),
}

impl ExperimentConfig {
    /// Reads, parses and validates a config file, resolving relative paths
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(dir);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses JSON text; errors carry the dotted path of the offending field.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            ConfigError::new(if field == "." { "" } else { &field }, e.into_inner().to_string())
        })
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        if self.output_dir.is_relative() {
            self.output_dir = dir.join(&self.output_dir);
        }
        if let Some(csv) = &mut self.data.csv {
            if csv.path.is_relative() {
                csv.path = dir.join(&csv.path);
            }
        }
    }

    pub fn data_choice(&self) -> Result<DataChoice<'_>, ConfigError> {
        match (&self.data.target, &self.data.csv) {
            (Some(t), None) => Ok(DataChoice::Target(*t)),
            (None, Some(c)) => Ok(DataChoice::Csv(c)),
            _ => Err(ConfigError::new("data", "exactly one of `target` or `csv` is required")),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let data = self.data_choice()?;
        if let DataChoice::Csv(c) = data {
            if !c.path.is_file() {
                return Err(ConfigError::new(
                    "data.csv.path",
                    format!("{} does not exist", c.path.display()),
                ));
            }
            if c.split.iter().any(|f| !(*f >= 0.0)) || (c.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(ConfigError::new(
                    "data.csv.split",
                    "fractions must be non-negative and sum to 1",
                ));
            }
            if !(c.split[0] > 0.0) {
                return Err(ConfigError::new("data.csv.split", "training fraction must be positive"));
            }
        }
        let t = &self.train;
        if t.objective == Objective::Kl && !matches!(data, DataChoice::Target(_)) {
            return Err(ConfigError::new(
                "train.objective",
                "kl training needs a target density",
            ));
        }
        match &self.model.base {
            BaseSection::Gaussian => {}
            BaseSection::Mixture { components } => {
                if *components == 0 {
                    return Err(ConfigError::new("model.base.components", "must be positive"));
                }
            }
            BaseSection::Resampled {
                truncation,
                z_samples,
                ema_decay,
                acceptance,
                groups,
            } => {
                if *truncation == 0 {
                    return Err(ConfigError::new("model.base.truncation", "must be at least 1"));
                }
                if *z_samples == 0 {
                    return Err(ConfigError::new("model.base.z_samples", "must be positive"));
                }
                if !(*ema_decay > 0.0 && *ema_decay <= 1.0) {
                    return Err(ConfigError::new("model.base.ema_decay", "must lie in (0, 1]"));
                }
                if *groups == 0 {
                    return Err(ConfigError::new("model.base.groups", "must be positive"));
                }
                if !(acceptance.dropout >= 0.0 && acceptance.dropout < 1.0) {
                    return Err(ConfigError::new("model.base.acceptance.dropout", "must lie in [0, 1)"));
                }
                if acceptance.hidden_units == 0 && acceptance.hidden_layers > 0 {
                    return Err(ConfigError::new(
                        "model.base.acceptance.hidden_units",
                        "must be positive",
                    ));
                }
            }
        }
        let f = &self.model.flow;
        if f.coupling_layers > 0 && f.hidden_units == 0 {
            return Err(ConfigError::new("model.flow.hidden_units", "must be positive"));
        }
        if let Err(e) = self.train_config().validate() {
            return Err(ConfigError::new("train", e.to_string()));
        }
        for (name, g) in [("eval.grid", &self.eval.grid), ("eval.z_grid", &self.eval.z_grid)] {
            if let Err(e) = g.validate() {
                return Err(ConfigError::new(name, e.to_string()));
            }
        }
        if self.eval.histogram_bins < lars_flows::evaluation::MIN_BINS {
            return Err(ConfigError::new("eval.histogram_bins", "must be at least 10"));
        }
        if self.eval.histogram_samples < lars_flows::evaluation::MIN_HISTOGRAM_SAMPLES {
            return Err(ConfigError::new("eval.histogram_samples", "must be at least 1000"));
        }
        if self.eval.z_mc_samples == 0 {
            return Err(ConfigError::new("eval.z_mc_samples", "must be positive"));
        }
        Ok(())
    }

    pub fn base_kind(&self) -> BaseKind {
        match &self.model.base {
            BaseSection::Gaussian => BaseKind::Gaussian,
            BaseSection::Mixture { components } => BaseKind::Mixture {
                components: *components,
            },
            BaseSection::Resampled {
                truncation,
                acceptance,
                groups,
                ..
            } => BaseKind::Resampled {
                acceptance: AcceptanceNet {
                    hidden_layers: acceptance.hidden_layers,
                    hidden_units: acceptance.hidden_units,
                    activation: acceptance.activation,
                    dropout_rate: acceptance.dropout,
                },
                truncation: *truncation,
                groups: *groups,
            },
        }
    }

    pub fn flow_arch(&self) -> FlowArch {
        let f = &self.model.flow;
        FlowArch {
            coupling_layers: f.coupling_layers,
            hidden_layers: f.hidden_layers,
            hidden_units: f.hidden_units,
            activation: f.activation,
            linear_between_pairs: f.linear_between_pairs,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut c = TrainConfig::new(t.objective, t.iterations, t.batch_size, t.learning_rate, self.seed);
        c.schedule = t.schedule.clone();
        c.lambda_z = t.lambda_z;
        c.polyak_rate = t.polyak_rate;
        c.eval_every = t.eval_every;
        c.grad_clip = t.grad_clip;
        if let BaseSection::Resampled { z_samples, .. } = &self.model.base {
            c.z_samples = *z_samples;
        }
        c
    }
}
