//! Objectives and optimization: maximum likelihood with the optional
//! rejection-rate penalty, reverse-KL gradients for a known unnormalized
//! target, Adam, Polyak averaging and the training loop.

use serde::{Deserialize, Serialize};

use crate::base::{mean_attempts, ZEstimate};
use crate::error::{check_dim, FlowError, Result};
use crate::exec::{map_chunks, tree_sum_scalars};
use crate::flow::FlowModel;
use crate::matrix::Matrix;
use crate::nets::Mode;
use crate::numerics::draw_standard_normal;
use crate::rng::{derive_seed, RngStream};
use crate::targets::{LogDensity, Target2D};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_POLYAK_RATE: f64 = 1e-2;
pub const DEFAULT_KL_CLIP: f64 = 100.0;
/// Share of non-finite samples above which a KL step fails.
pub const MAX_DROPPED_FRACTION: f64 = 0.1;

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn from_parts(m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<Self> {
        check_dim(m.len(), v.len())?;
        Ok(Self { m, v, step })
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        check_dim(self.m.len(), params.len())?;
        check_dim(self.m.len(), grads.len())?;
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// `average ← (1 − rate)·average + rate·params`.
pub fn polyak_update(average: &mut [f64], params: &[f64], rate: f64) -> Result<()> {
    check_dim(average.len(), params.len())?;
    if !(rate > 0.0 && rate < 1.0) {
        return Err(FlowError::InvalidParameter(format!(
            "Polyak rate {rate} outside (0, 1)"
        )));
    }
    for (a, &p) in average.iter_mut().zip(params) {
        *a = (1.0 - rate) * *a + rate * p;
    }
    Ok(())
}

/// Euclidean norm, summed in a fixed order.
pub fn grad_norm(g: &[f64]) -> f64 {
    let sq: Vec<f64> = g.iter().map(|v| v * v).collect();
    tree_sum_scalars(&sq).sqrt()
}

/// Rescales `g` to norm `max` if it is longer; returns the original norm.
pub fn clip_grad_norm(g: &mut [f64], max: f64) -> f64 {
    let n = grad_norm(g);
    if n > max {
        let s = max / n;
        g.iter_mut().for_each(|v| *v *= s);
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply by `factor` every `every` iterations.
    StepDecay { every: u64, factor: f64 },
    /// `rates[i]` applies from `boundaries[i]` on; the base rate before the first boundary.
    Piecewise { boundaries: Vec<u64>, rates: Vec<f64> },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Constant => Ok(()),
            LrSchedule::StepDecay { every, factor } => {
                if *every == 0 || !(*factor > 0.0) {
                    return Err(FlowError::InvalidParameter(
                        "step decay needs every ≥ 1 and factor > 0".into(),
                    ));
                }
                Ok(())
            }
            LrSchedule::Piecewise { boundaries, rates } => {
                if boundaries.len() != rates.len() {
                    return Err(FlowError::InvalidParameter(
                        "piecewise schedule needs one rate per boundary".into(),
                    ));
                }
                if boundaries.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(FlowError::InvalidParameter(
                        "schedule boundaries must be strictly increasing".into(),
                    ));
                }
                if rates.iter().any(|r| !(*r > 0.0)) {
                    return Err(FlowError::InvalidParameter("learning rates must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn rate_at(&self, base: f64, iteration: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { every, factor } => base * factor.powi((iteration / every) as i32),
            LrSchedule::Piecewise { boundaries, rates } => boundaries
                .iter()
                .zip(rates)
                .filter(|(b, _)| iteration >= **b)
                .map(|(_, r)| *r)
                .last()
                .unwrap_or(base),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ml,
    Kl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Weight of the `−λ_Z·Ẑ` penalty (ML only).
    #[serde(default)]
    pub lambda_z: f64,
    /// Proposal draws per `Z` update.
    #[serde(default = "default_z_samples")]
    pub z_samples: usize,
    /// Polyak averaging rate; `None` disables averaging.
    #[serde(default)]
    pub polyak_rate: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every this many iterations (0 disables).
    #[serde(default)]
    pub eval_every: u64,
    /// Gradient-norm limit; KL training defaults to 100.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_z_samples() -> usize {
    crate::base::DEFAULT_MC_SAMPLES
}

impl TrainConfig {
    pub fn new(objective: Objective, iterations: u64, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            objective,
            iterations,
            batch_size,
            learning_rate,
            schedule: LrSchedule::Constant,
            lambda_z: 0.0,
            z_samples: default_z_samples(),
            polyak_rate: None,
            seed,
            eval_every: 0,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlowError::InvalidParameter(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.objective == Objective::Kl && self.batch_size < 2 {
            return bad("KL training needs batch_size ≥ 2");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda_z >= 0.0) {
            return bad("lambda_z must be non-negative");
        }
        if self.z_samples == 0 {
            return bad("z_samples must be positive");
        }
        if let Some(r) = self.polyak_rate {
            if !(r > 0.0 && r < 1.0) {
                return bad("polyak_rate must lie in (0, 1)");
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        self.schedule.validate()
    }

    pub fn effective_clip(&self) -> Option<f64> {
        match (self.grad_clip, self.objective) {
            (Some(c), _) => Some(c),
            (None, Objective::Kl) => Some(DEFAULT_KL_CLIP),
            (None, Objective::Ml) => None,
        }
    }
}

/// Loss and gradient of one objective evaluation.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    /// Batch `Ẑ` per group (resampled base only).
    pub z_batch: Vec<f64>,
    pub mean_attempts: f64,
    pub dropped: usize,
}

fn estimate_z_for_step(
    model: &FlowModel,
    draws: Option<&Matrix>,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Option<ZEstimate>> {
    match (model.base().as_resampled(), draws) {
        (Some(r), Some(d)) => {
            let mut dropout = rng.fork().stream(0);
            Ok(Some(r.estimate_z_from_draws(d, mode, Some(&mut dropout))?))
        }
        _ => Ok(None),
    }
}

/// Expected proposals per accepted sample under truncation `T`.
fn expected_attempts(model: &FlowModel) -> f64 {
    match model.base().as_resampled() {
        Some(r) => {
            let t = r.truncation() as i32;
            r.z_value().iter().map(|&z| (1.0 - (1.0 - z).powi(t)) / z).sum()
        }
        None => 1.0,
    }
}

/// ML step with explicit proposal draws for the `Z` update; see [`nll_step`].
pub fn nll_step_with_draws(
    model: &mut FlowModel,
    batch: &Matrix,
    lambda_z: f64,
    draws: Option<&Matrix>,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<StepOutput> {
    if batch.rows() == 0 {
        return Err(FlowError::InvalidParameter("empty batch".into()));
    }
    let est = estimate_z_for_step(model, draws, mode, rng)?;
    if let (Some(e), Some(r)) = (&est, model.base_mut().as_resampled_mut()) {
        r.update_ema(&e.values)?;
    }
    let (lp, trace) = model.log_prob_traced(batch, mode, Some(rng))?;
    let n = batch.rows() as f64;
    let z_batch = est.as_ref().map(|e| e.values.clone()).unwrap_or_default();
    let loss = -tree_sum_scalars(&lp) / n - lambda_z * z_batch.iter().sum::<f64>();
    if !loss.is_finite() {
        return Err(FlowError::NonFiniteLoss { iteration: 0 });
    }
    let weights = vec![-1.0 / n; batch.rows()];
    let mut g = model.backward(&trace, None, &weights)?;
    if let (Some(e), Some(r)) = (&est, model.base().as_resampled()) {
        let coeffs: Vec<f64> = g.z_value.iter().map(|c| c - lambda_z).collect();
        let nb = model.num_base_params();
        r.z_backward(e, &coeffs, &mut g.params[..nb])?;
    }
    Ok(StepOutput {
        loss,
        grads: g.params,
        z_batch,
        mean_attempts: expected_attempts(model),
        dropped: 0,
    })
}

/// Negative mean log-likelihood of `batch` minus `λ_Z·Ẑ`. For a resampled
/// base, `Ẑ` comes from `z_samples` fresh proposal draws; the EMA is updated
/// with it before the loss is formed, and the gradient flows through the
/// batch estimate.
pub fn nll_step(
    model: &mut FlowModel,
    batch: &Matrix,
    lambda_z: f64,
    z_samples: usize,
    rng: &mut RngStream,
) -> Result<StepOutput> {
    let draws = model
        .base()
        .as_resampled()
        .map(|r| draw_standard_normal(rng, z_samples, r.group_dim()));
    nll_step_with_draws(model, batch, lambda_z, draws.as_ref(), Mode::Train, rng)
}

/// Options for [`kl_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlOptions {
    pub samples: usize,
    pub z_samples: usize,
    /// Fold the batch `Ẑ` into the EMA before use. When false the stored
    /// value is used unchanged and the draws only feed `∇Ẑ`.
    pub update_z: bool,
}

/// Reverse-KL gradient estimate with per-sample integrands.
#[derive(Clone, Debug)]
pub struct KlEstimate {
    pub step: StepOutput,
    /// `f_i = log p_φ(z_i) − log|det J(z_i)| − log p̂*(F(z_i))` for kept samples.
    pub integrand: Vec<f64>,
}

/// Which samples survive the finiteness filter.
fn finite_rows(values: &[&[f64]]) -> Vec<usize> {
    (0..values[0].len())
        .filter(|&i| values.iter().all(|v| v[i].is_finite()))
        .collect()
}

/// Estimates `∇ KL(p_model ‖ p*)` from `opts.samples` model draws.
///
/// Base parameters use the baseline-subtracted covariance estimator
/// `(1/n) Σ (f_i − f̄) ∇_φ log p_φ(z_i)`, including the path through `Ẑ`.
/// Flow parameters use `−(1/n) Σ ∇_θ [log p̂*(F(z_i)) + log|det J(z_i)|]`
/// with the draws held fixed. `integrand_shift` is added to every `f_i`.
pub fn kl_gradients_shifted(
    model: &mut FlowModel,
    target: &dyn LogDensity,
    opts: KlOptions,
    integrand_shift: f64,
    rng: &mut RngStream,
) -> Result<KlEstimate> {
    if opts.samples < 2 {
        return Err(FlowError::InvalidParameter(
            "KL gradients need at least 2 samples".into(),
        ));
    }
    check_dim(model.dim(), target.dim())?;
    let draws = model
        .base()
        .as_resampled()
        .map(|r| draw_standard_normal(rng, opts.z_samples, r.group_dim()));
    let est = estimate_z_for_step(model, draws.as_ref(), Mode::Eval, rng)?;
    if opts.update_z {
        if let (Some(e), Some(r)) = (&est, model.base_mut().as_resampled_mut()) {
            r.update_ema(&e.values)?;
        }
    }
    let (z_all, attempts) = model.base().sample_batch(opts.samples, rng)?;

    // values first, so non-finite samples can be dropped before tracing
    let base_lp = model.base().log_prob_batch(&z_all)?;
    let (x_all, ld_all) = match model.forward(&z_all) {
        Ok(v) => v,
        Err(FlowError::NumericalOverflow { .. }) => {
            let (mut x, mut ld) = (Matrix::zeros(z_all.rows(), z_all.cols()), vec![0.0; z_all.rows()]);
            for i in 0..z_all.rows() {
                let zi = z_all.slice_rows(i, i + 1);
                match model.forward(&zi) {
                    Ok((xi, li)) => {
                        x.row_mut(i).copy_from_slice(xi.row(0));
                        ld[i] = li[0];
                    }
                    Err(_) => {
                        x.row_mut(i).iter_mut().for_each(|v| *v = f64::NAN);
                        ld[i] = f64::NAN;
                    }
                }
            }
            (x, ld)
        }
        Err(e) => return Err(e),
    };
    let d = model.dim();
    let target_parts = map_chunks(x_all.rows(), |r| {
        let mut vals = Vec::with_capacity(r.len());
        let mut grads = Vec::with_capacity(r.len() * d);
        let mut g = vec![0.0; d];
        for i in r {
            let row = x_all.row(i);
            let v = if row.iter().all(|v| v.is_finite()) {
                target.log_density_grad(row, &mut g)
            } else {
                g.iter_mut().for_each(|v| *v = f64::NAN);
                f64::NAN
            };
            vals.push(v);
            grads.extend_from_slice(&g);
        }
        (vals, grads)
    });
    let mut t_val = Vec::with_capacity(x_all.rows());
    let mut t_grad = Vec::with_capacity(x_all.rows() * d);
    for (v, g) in target_parts {
        t_val.extend(v);
        t_grad.extend(g);
    }
    let integrand: Vec<f64> = (0..z_all.rows())
        .map(|i| base_lp[i] - ld_all[i] - t_val[i] + integrand_shift)
        .collect();
    let grad_ok: Vec<f64> = (0..z_all.rows())
        .map(|i| {
            if t_grad[i * d..(i + 1) * d].iter().all(|v| v.is_finite()) {
                0.0
            } else {
                f64::NAN
            }
        })
        .collect();
    let keep = finite_rows(&[&integrand, &grad_ok]);
    let dropped = z_all.rows() - keep.len();
    if dropped as f64 > MAX_DROPPED_FRACTION * z_all.rows() as f64 {
        return Err(FlowError::TooManyNonFinite {
            dropped,
            total: z_all.rows(),
        });
    }
    let (z, f, tg) = if dropped == 0 {
        (z_all, integrand, Matrix::from_vec(keep.len(), d, t_grad)?)
    } else {
        let mut tg = Matrix::zeros(keep.len(), d);
        for (r, &i) in keep.iter().enumerate() {
            tg.row_mut(r).copy_from_slice(&t_grad[i * d..(i + 1) * d]);
        }
        (
            z_all.select_rows(&keep),
            keep.iter().map(|&i| integrand[i]).collect(),
            tg,
        )
    };
    let n = keep.len() as f64;
    let f_mean = tree_sum_scalars(&f) / n;
    let nb = model.num_base_params();
    let total = model.num_params();
    let mut grads = vec![0.0; total];

    // base parameters: covariance estimator
    if nb > 0 {
        let (_, base_trace) = model.base().log_prob_traced(&z, Mode::Eval, None)?;
        let w: Vec<f64> = f.iter().map(|fi| (fi - f_mean) / n).collect();
        let bg = model.base().backward(&base_trace, &w, &mut grads[..nb])?;
        if let (Some(e), Some(r)) = (&est, model.base().as_resampled()) {
            r.z_backward(e, &bg.dz_value, &mut grads[..nb])?;
        }
    }

    // flow parameters: pathwise with z fixed
    if total > nb {
        let (_, _, trace) = model.forward_traced(&z)?;
        let mut dx = tg;
        dx.as_mut_slice().iter_mut().for_each(|v| *v *= -1.0 / n);
        let dld = vec![-1.0 / n; z.rows()];
        let g = model.backward(&trace, Some(&dx), &dld)?;
        for (a, b) in grads[nb..].iter_mut().zip(&g.params[nb..]) {
            *a += b;
        }
    }

    Ok(KlEstimate {
        step: StepOutput {
            loss: f_mean - integrand_shift,
            grads,
            z_batch: est.map(|e| e.values).unwrap_or_default(),
            mean_attempts: mean_attempts(&attempts),
            dropped,
        },
        integrand: f,
    })
}

pub fn kl_gradients(
    model: &mut FlowModel,
    target: &dyn LogDensity,
    opts: KlOptions,
    rng: &mut RngStream,
) -> Result<KlEstimate> {
    kl_gradients_shifted(model, target, opts, 0.0, rng)
}

/// Base-parameter part of [`kl_gradients`].
pub fn kl_grad_phi(
    model: &mut FlowModel,
    target: &dyn LogDensity,
    opts: KlOptions,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let nb = model.num_base_params();
    let mut g = kl_gradients(model, target, opts, rng)?.step.grads;
    g.truncate(nb);
    Ok(g)
}

/// Flow-parameter part of [`kl_gradients`].
pub fn kl_grad_theta(
    model: &mut FlowModel,
    target: &dyn LogDensity,
    opts: KlOptions,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let nb = model.num_base_params();
    let g = kl_gradients(model, target, opts, rng)?.step.grads;
    Ok(g[nb..].to_vec())
}

/// One row of the per-iteration trace.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub iter: u64,
    pub loss: f64,
    /// Mean of the stored `Z` over groups; 1 for bases without rejection.
    pub z_ema: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Observed mean proposals per sample (KL) or the value implied by
    /// `Z` and `T` (ML).
    pub mean_attempts: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub iter: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTrace {
    pub records: Vec<MetricRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Shortest round-trip representation.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl MetricsTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss,z_ema,grad_norm,mean_attempts\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iter,
                fmt_f64(r.loss),
                fmt_f64(r.z_ema),
                fmt_f64(r.grad_norm),
                fmt_f64(r.mean_attempts)
            ));
        }
        s
    }

    pub fn evals_to_csv(&self) -> String {
        let mut s = String::from("iter,metric,value\n");
        for e in &self.evals {
            s.push_str(&format!("{},{},{}\n", e.iter, e.metric, fmt_f64(e.value)));
        }
        s
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }
}

/// Where ML training batches come from.
#[derive(Clone, Copy, Debug)]
pub enum DataSource<'a> {
    /// Fresh exact samples every iteration.
    Target(&'a Target2D),
    /// Epoch-shuffled minibatches of a fixed dataset.
    Dataset(&'a Matrix),
}

/// Purposes for per-iteration random streams.
const STREAM_BATCH: u64 = 1;
const STREAM_STEP: u64 = 2;

/// Deterministic shuffle of `0..n` for `epoch`.
fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = RngStream::new(derive_seed(seed, epoch, 0x5eed), 7);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        p.swap(i, j);
    }
    p
}

/// Indices of minibatch `iteration` when batches are cut consecutively from
/// per-epoch shuffles (a batch may straddle two epochs).
fn minibatch_indices(n: usize, batch: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let start = iteration as u128 * batch as u128;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = (start / n as u128) as u64;
    let mut pos = (start % n as u128) as usize;
    let mut perm = epoch_permutation(n, seed, epoch);
    while out.len() < batch {
        if pos == n {
            epoch += 1;
            pos = 0;
            perm = epoch_permutation(n, seed, epoch);
        }
        out.push(perm[pos]);
        pos += 1;
    }
    out
}

/// Training state: model, optimizer, averaged parameters and progress.
/// Each iteration draws from streams derived from `(seed, iteration)`, so
/// the state below is all that is needed to resume exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FlowModel,
    pub adam: Adam,
    pub polyak: Option<Vec<f64>>,
    pub iteration: u64,
    pub config: TrainConfig,
    pub metrics: MetricsTrace,
}

/// Evaluation hook: metric rows for the (possibly averaged) model.
pub type EvalFn<'a> = dyn Fn(&FlowModel) -> Result<Vec<(String, f64)>> + 'a;

impl Trainer {
    pub fn new(model: FlowModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = model.num_params();
        let polyak = config.polyak_rate.map(|_| model.params());
        Ok(Self {
            model,
            adam: Adam::new(n),
            polyak,
            iteration: 0,
            config,
            metrics: MetricsTrace::default(),
        })
    }

    /// The model used for evaluation: Polyak-averaged parameters if enabled.
    pub fn eval_model(&self) -> Result<FlowModel> {
        let mut m = self.model.clone();
        if let Some(avg) = &self.polyak {
            m.set_params(avg)?;
        }
        Ok(m)
    }

    fn step_rng(&self, purpose: u64) -> RngStream {
        RngStream::new(derive_seed(self.config.seed, self.iteration, purpose), 0)
    }

    fn ml_batch(&self, source: DataSource<'_>) -> Result<Matrix> {
        let bs = self.config.batch_size;
        match source {
            DataSource::Target(t) => Ok(t.rejection_sample(bs, &mut self.step_rng(STREAM_BATCH))?.samples),
            DataSource::Dataset(data) => {
                if data.rows() == 0 {
                    return Err(FlowError::InvalidParameter("empty dataset".into()));
                }
                let idx = minibatch_indices(data.rows(), bs, self.config.seed, self.iteration);
                Ok(data.select_rows(&idx))
            }
        }
    }

    /// One optimizer step. On error the trainer state is left untouched.
    pub fn step_ml(&mut self, source: DataSource<'_>) -> Result<()> {
        let batch = self.ml_batch(source)?;
        let mut rng = self.step_rng(STREAM_STEP);
        let mut candidate = self.model.clone();
        let out = nll_step(
            &mut candidate,
            &batch,
            self.config.lambda_z,
            self.config.z_samples,
            &mut rng,
        )
        .map_err(|e| self.with_iteration(e))?;
        self.apply(candidate, out)
    }

    pub fn step_kl(&mut self, target: &dyn LogDensity) -> Result<()> {
        let mut rng = self.step_rng(STREAM_STEP);
        let opts = KlOptions {
            samples: self.config.batch_size,
            z_samples: self.config.z_samples,
            update_z: true,
        };
        let mut candidate = self.model.clone();
        let est = kl_gradients(&mut candidate, target, opts, &mut rng).map_err(|e| self.with_iteration(e))?;
        self.apply(candidate, est.step)
    }

    fn with_iteration(&self, e: FlowError) -> FlowError {
        match e {
            FlowError::NonFiniteLoss { .. } => FlowError::NonFiniteLoss {
                iteration: self.iteration as usize,
            },
            other => other,
        }
    }

    fn apply(&mut self, mut candidate: FlowModel, mut out: StepOutput) -> Result<()> {
        if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
            return Err(FlowError::NonFiniteLoss {
                iteration: self.iteration as usize,
            });
        }
        let norm = match self.config.effective_clip() {
            Some(c) => clip_grad_norm(&mut out.grads, c),
            None => grad_norm(&out.grads),
        };
        let lr = self.config.schedule.rate_at(self.config.learning_rate, self.iteration);
        let mut p = candidate.params();
        let mut adam = self.adam.clone();
        adam.step(&mut p, &out.grads, lr)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteLoss {
                iteration: self.iteration as usize,
            });
        }
        candidate.set_params(&p)?;
        if let (Some(avg), Some(rate)) = (self.polyak.as_mut(), self.config.polyak_rate) {
            polyak_update(avg, &p, rate)?;
        }
        let z_ema = candidate
            .base()
            .as_resampled()
            .map_or(1.0, |r| r.z_value().iter().sum::<f64>() / r.num_groups() as f64);
        self.model = candidate;
        self.adam = adam;
        self.metrics.records.push(MetricRecord {
            iter: self.iteration,
            loss: out.loss,
            z_ema,
            grad_norm: norm,
            mean_attempts: out.mean_attempts,
        });
        self.iteration += 1;
        Ok(())
    }

    fn maybe_eval(&mut self, eval: Option<&EvalFn<'_>>) -> Result<()> {
        let every = self.config.eval_every;
        if let Some(f) = eval {
            if every > 0 && (self.iteration % every == 0 || self.iteration == self.config.iterations) {
                let m = self.eval_model()?;
                for (metric, value) in f(&m)? {
                    self.metrics.evals.push(EvalRecord {
                        iter: self.iteration,
                        metric,
                        value,
                    });
                }
            }
        }
        Ok(())
    }

    /// Runs the remaining iterations of maximum-likelihood training.
    pub fn train_ml(&mut self, source: DataSource<'_>, eval: Option<&EvalFn<'_>>) -> Result<()> {
        if self.config.objective != Objective::Ml {
            return Err(FlowError::InvalidParameter("config objective is not ml".into()));
        }
        while self.iteration < self.config.iterations {
            self.step_ml(source)?;
            self.maybe_eval(eval)?;
        }
        Ok(())
    }

    /// Runs the remaining iterations of reverse-KL training.
    pub fn train_kl(&mut self, target: &dyn LogDensity, eval: Option<&EvalFn<'_>>) -> Result<()> {
        if self.config.objective != Objective::Kl {
            return Err(FlowError::InvalidParameter("config objective is not kl".into()));
        }
        while self.iteration < self.config.iterations {
            self.step_kl(target)?;
            self.maybe_eval(eval)?;
        }
        Ok(())
    }
}

/// Maximum-likelihood training from scratch; returns the trained model and its trace.
pub fn train_ml(model: FlowModel, source: DataSource<'_>, config: TrainConfig) -> Result<(FlowModel, MetricsTrace)> {
    let mut t = Trainer::new(model, config)?;
    t.train_ml(source, None)?;
    Ok((t.model, t.metrics))
}

/// Reverse-KL training from scratch; returns the trained model and its trace.
pub fn train_kl(model: FlowModel, target: &dyn LogDensity, config: TrainConfig) -> Result<(FlowModel, MetricsTrace)> {
    let mut t = Trainer::new(model, config)?;
    t.train_kl(target, None)?;
    Ok((t.model, t.metrics))
}
