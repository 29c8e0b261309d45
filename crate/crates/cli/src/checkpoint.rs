//! Versioned JSON checkpoints with bit-exact floating-point payloads.
//!
//! Every float that is part of the training state is stored as a
//! hexadecimal float string (see [`crate::hexfloat`]). Training draws its
//! per-iteration randomness from streams derived from `(seed, iteration)`,
//! so the iteration counter is what resumes the training randomness; the
//! stored RNG state is the evaluation stream.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use lars_flows::layers::Layer;
use lars_flows::rng::{RngState, RNG_ALGORITHM};
use lars_flows::training::{Adam, Trainer};

use crate::config::ExperimentConfig;
use crate::dataset::Standardization;
use crate::experiment::build_model;
use crate::hexfloat;

pub const FORMAT: &str = "lars-flows-checkpoint";
pub const VERSION: u32 = 1;

/// Row order and signs of one learned invertible linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearStructure {
    /// Position in the layer stack.
    pub layer: usize,
    pub permutation: Vec<usize>,
    pub signs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub dim: usize,
    pub iteration: u64,
    pub params: Vec<f64>,
    pub polyak: Option<Vec<f64>>,
    pub z_ema: Vec<f64>,
    pub ema_started: bool,
    pub adam_step: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub linear: Vec<LinearStructure>,
    pub rng: RngState,
    pub standardization: Option<Standardization>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Wire {
    format: String,
    version: u32,
    config: ExperimentConfig,
    dim: usize,
    iteration: u64,
    params: Vec<String>,
    polyak: Option<Vec<String>>,
    z_ema: Vec<String>,
    ema_started: bool,
    adam: WireAdam,
    linear_layers: Vec<LinearStructure>,
    rng: WireRng,
    standardization: Option<WireStandardization>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireAdam {
    step: u64,
    m: Vec<String>,
    v: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRng {
    algorithm: String,
    seed: u64,
    stream: u64,
    /// Decimal, since it may exceed 64 bits.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireStandardization {
    mean: Vec<String>,
    std: Vec<String>,
}

fn encode_all(v: &[f64]) -> Vec<String> {
    v.iter().map(|&x| hexfloat::encode(x)).collect()
}

fn decode_all(field: &str, v: &[String]) -> Result<Vec<f64>> {
    v.iter()
        .enumerate()
        .map(|(i, s)| hexfloat::decode(s).map_err(|e| anyhow!("checkpoint field `{field}[{i}]`: {e}")))
        .collect()
}

impl Checkpoint {
    /// Captures the resumable state of `trainer`.
    pub fn capture(
        trainer: &Trainer,
        config: &ExperimentConfig,
        rng: RngState,
        standardization: Option<Standardization>,
    ) -> Self {
        let model = &trainer.model;
        let (z_ema, ema_started) = match model.base().as_resampled() {
            Some(r) => (r.z_value().to_vec(), r.ema_started()),
            None => (Vec::new(), false),
        };
        let linear = model
            .layers()
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Linear(lin) => Some(LinearStructure {
                    layer: i,
                    permutation: lin.permutation().to_vec(),
                    signs: lin.signs().to_vec(),
                }),
                _ => None,
            })
            .collect();
        Self {
            config: config.clone(),
            dim: model.dim(),
            iteration: trainer.iteration,
            params: model.params(),
            polyak: trainer.polyak.clone(),
            z_ema,
            ema_started,
            adam_step: trainer.adam.steps(),
            adam_m: trainer.adam.first_moment().to_vec(),
            adam_v: trainer.adam.second_moment().to_vec(),
            linear,
            rng,
            standardization,
        }
    }

    /// Rebuilds the trainer this checkpoint was captured from.
    pub fn restore(&self) -> Result<Trainer> {
        let mut model = build_model(&self.config, self.dim)?;
        for s in &self.linear {
            match model.layers_mut().get_mut(s.layer) {
                Some(Layer::Linear(lin)) => lin
                    .set_structure(s.permutation.clone(), s.signs.clone())
                    .with_context(|| format!("checkpoint field `linear_layers` (layer {})", s.layer))?,
                _ => bail!(
                    "checkpoint field `linear_layers`: layer {} is not a linear layer",
                    s.layer
                ),
            }
        }
        if self.params.len() != model.num_params() {
            bail!(
                "checkpoint field `params`: {} values, but the configured model has {}",
                self.params.len(),
                model.num_params()
            );
        }
        model.set_params(&self.params)?;
        match model.base_mut().as_resampled_mut() {
            Some(r) => r
                .restore_ema(&self.z_ema, self.ema_started)
                .context("checkpoint field `z_ema`")?,
            None if self.z_ema.is_empty() => {}
            None => bail!("checkpoint field `z_ema`: model has no resampled base"),
        }
        let mut trainer = Trainer::new(model, self.config.train_config())?;
        trainer.adam = Adam::from_parts(self.adam_m.clone(), self.adam_v.clone(), self.adam_step)
            .context("checkpoint field `adam`")?;
        if trainer.adam.first_moment().len() != self.params.len() {
            bail!("checkpoint field `adam.m`: length does not match `params`");
        }
        if let Some(p) = &self.polyak {
            if p.len() != self.params.len() {
                bail!("checkpoint field `polyak`: length does not match `params`");
            }
        }
        trainer.polyak = self.polyak.clone();
        trainer.iteration = self.iteration;
        Ok(trainer)
    }

    pub fn to_json(&self) -> String {
        let wire = Wire {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            dim: self.dim,
            iteration: self.iteration,
            params: encode_all(&self.params),
            polyak: self.polyak.as_deref().map(encode_all),
            z_ema: encode_all(&self.z_ema),
            ema_started: self.ema_started,
            adam: WireAdam {
                step: self.adam_step,
                m: encode_all(&self.adam_m),
                v: encode_all(&self.adam_v),
            },
            linear_layers: self.linear.clone(),
            rng: WireRng {
                algorithm: RNG_ALGORITHM.into(),
                seed: self.rng.seed,
                stream: self.rng.stream_id,
                word_pos: self.rng.word_pos.to_string(),
            },
            standardization: self.standardization.as_ref().map(|s| WireStandardization {
                mean: encode_all(&s.mean),
                std: encode_all(&s.std),
            }),
        };
        let mut s = serde_json::to_string_pretty(&wire).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| anyhow!("checkpoint is truncated or not valid JSON: {e}"))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(FORMAT) => {}
            _ => bail!("checkpoint field `format`: expected {FORMAT:?}"),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == VERSION as u64 => {}
            Some(v) => bail!("checkpoint version {v} is not supported (this build reads version {VERSION})"),
            None => bail!("checkpoint field `version`: missing or not an integer"),
        }
        let wire: Wire = serde_path_to_error::deserialize(value)
            .map_err(|e| anyhow!("checkpoint field `{}`: {}", e.path(), e.inner()))?;
        if wire.rng.algorithm != RNG_ALGORITHM {
            bail!(
                "checkpoint field `rng.algorithm`: unsupported generator {:?}",
                wire.rng.algorithm
            );
        }
        let word_pos: u128 = wire
            .rng
            .word_pos
            .parse()
            .map_err(|_| anyhow!("checkpoint field `rng.word_pos`: not a non-negative integer"))?;
        let standardization = match &wire.standardization {
            Some(s) => Some(Standardization {
                mean: decode_all("standardization.mean", &s.mean)?,
                std: decode_all("standardization.std", &s.std)?,
            }),
            None => None,
        };
        Ok(Self {
            config: wire.config,
            dim: wire.dim,
            iteration: wire.iteration,
            params: decode_all("params", &wire.params)?,
            polyak: wire.polyak.as_deref().map(|p| decode_all("polyak", p)).transpose()?,
            z_ema: decode_all("z_ema", &wire.z_ema)?,
            ema_started: wire.ema_started,
            adam_step: wire.adam.step,
            adam_m: decode_all("adam.m", &wire.adam.m)?,
            adam_v: decode_all("adam.v", &wire.adam.v)?,
            linear: wire.linear_layers,
            rng: RngState {
                seed: wire.rng.seed,
                stream_id: wire.rng.stream,
                word_pos,
            },
            standardization,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::manifest::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("loading {}", path.display()))
    }
}
