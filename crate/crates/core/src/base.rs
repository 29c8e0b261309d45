//! Base distributions: standard Gaussian, Gaussian mixture and the truncated
//! learned-rejection (resampled) Gaussian.
//!
//! The resampled base has density
//!
//! ```text
//! p(z) = π(z) · (α + (1 − α) · a(z) / Z),   α = (1 − Z)^(T − 1)
//! ```
//!
//! where `π = N(0, I)`, `a` is a sigmoid-headed network and `Z = E_π[a]`. It
//! optionally factorizes into `G` equally sized groups that share one
//! acceptance network with `G` outputs; group `k` reads output `k`. With a
//! single group this is the plain resampled base.

use crate::error::{check_dim, FlowError, Result};
use crate::exec::{map_chunks, map_indexed, tree_sum, tree_sum_scalars, CHUNK_ROWS};
use crate::matrix::Matrix;
use crate::nets::{Activation, ForwardCache, Mlp, MlpSpec, Mode, OutputHead};
use crate::numerics::{log_sum_exp_weights, std_normal_log_density, Grid2D, RunningMoments, LN_2PI};
use crate::rng::RngStream;

/// `Z` is clamped to this interval before the truncation weight is formed.
pub const Z_CLAMP: (f64, f64) = (1e-6, 1.0 - 1e-6);
/// Floor for the argument of the log in the truncated density.
pub const LOG_ARG_FLOOR: f64 = 1e-38;

pub const DEFAULT_TRUNCATION: u32 = 100;
pub const DEFAULT_EMA_DECAY: f64 = 0.05;
pub const DEFAULT_MC_SAMPLES: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct StandardGaussian {
    pub dim: usize,
}

impl StandardGaussian {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim, z.len())?;
        Ok(std_normal_log_density(z))
    }
}

/// Diagonal Gaussian mixture. Parameters are stored as means (`K × d`),
/// log-variances (`K × d`) and unnormalized log-weights (`K`), in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: usize,
    means: Vec<f64>,
    log_vars: Vec<f64>,
    logits: Vec<f64>,
}

impl GaussianMixture {
    /// Means uniform in `[−2.5, 2.5]^d`, variances 0.5, equal weights.
    pub fn init(components: usize, dim: usize, rng: &mut RngStream) -> Result<Self> {
        if components == 0 || dim == 0 {
            return Err(FlowError::InvalidParameter(
                "mixture needs at least one component and dimension".into(),
            ));
        }
        let means = (0..components * dim).map(|_| -2.5 + 5.0 * rng.uniform()).collect();
        Ok(Self {
            dim,
            components,
            means,
            log_vars: vec![0.5f64.ln(); components * dim],
            logits: vec![0.0; components],
        })
    }

    pub fn from_parts(dim: usize, means: Vec<f64>, log_vars: Vec<f64>, logits: Vec<f64>) -> Result<Self> {
        let k = logits.len();
        if k == 0 || dim == 0 {
            return Err(FlowError::InvalidParameter("empty mixture".into()));
        }
        check_dim(k * dim, means.len())?;
        check_dim(k * dim, log_vars.len())?;
        Ok(Self {
            dim,
            components: k,
            means,
            log_vars,
            logits,
        })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_vars.iter().map(|v| v.exp()).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.components];
        log_sum_exp_weights(&self.logits, &mut w);
        w
    }

    fn num_params(&self) -> usize {
        self.components * (2 * self.dim + 1)
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.means.clone();
        p.extend_from_slice(&self.log_vars);
        p.extend_from_slice(&self.logits);
        p
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim(self.num_params(), p.len())?;
        let kd = self.components * self.dim;
        self.means.copy_from_slice(&p[..kd]);
        self.log_vars.copy_from_slice(&p[kd..2 * kd]);
        self.logits.copy_from_slice(&p[2 * kd..]);
        Ok(())
    }

    fn component_log_terms(&self, z: &[f64], out: &mut [f64]) {
        let lse_w = {
            let mut w = vec![0.0; self.components];
            log_sum_exp_weights(&self.logits, &mut w)
        };
        for (k, o) in out.iter_mut().enumerate() {
            let mut s = self.logits[k] - lse_w;
            for j in 0..self.dim {
                let lv = self.log_vars[k * self.dim + j];
                let diff = z[j] - self.means[k * self.dim + j];
                s += -0.5 * (LN_2PI + lv) - 0.5 * diff * diff * (-lv).exp();
            }
            *o = s;
        }
    }

    /// Log density plus component responsibilities.
    fn log_prob_resp(&self, z: &[f64], resp: &mut [f64]) -> f64 {
        let mut terms = vec![0.0; self.components];
        self.component_log_terms(z, &mut terms);
        log_sum_exp_weights(&terms, resp)
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim, z.len())?;
        let mut resp = vec![0.0; self.components];
        Ok(self.log_prob_resp(z, &mut resp))
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let w = self.weights();
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = self.components - 1;
        for (i, wi) in w.iter().enumerate() {
            acc += wi;
            if u < acc {
                k = i;
                break;
            }
        }
        (0..self.dim)
            .map(|j| {
                let idx = k * self.dim + j;
                self.means[idx] + (0.5 * self.log_vars[idx]).exp() * rng.standard_normal()
            })
            .collect()
    }

    /// Adds `weight · ∇_params log p(z)` into `grads` and `weight · ∇_z log p(z)` into `dz`.
    fn accumulate_grad(&self, z: &[f64], resp: &[f64], weight: f64, grads: &mut [f64], dz: &mut [f64]) {
        let kd = self.components * self.dim;
        let w = self.weights();
        for k in 0..self.components {
            let g = resp[k] * weight;
            for j in 0..self.dim {
                let idx = k * self.dim + j;
                let prec = (-self.log_vars[idx]).exp();
                let diff = z[j] - self.means[idx];
                grads[idx] += g * diff * prec;
                grads[kd + idx] += g * (-0.5 + 0.5 * diff * diff * prec);
                dz[j] -= g * diff * prec;
            }
            grads[2 * kd + k] += weight * (resp[k] - w[k]);
        }
    }
}

/// Log of the truncated-density factor and its partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LarsFactor {
    pub log_q: f64,
    /// ∂ log q / ∂a
    pub d_accept: f64,
    /// ∂ log q / ∂Z
    pub d_z: f64,
}

/// Truncation weight `α_T = (1 − Z)^(T−1)` and its derivative in `Z`, with `Z` clamped.
pub fn truncation_weight(z_value: f64, truncation: u32) -> (f64, f64) {
    let zc = z_value.clamp(Z_CLAMP.0, Z_CLAMP.1);
    if truncation <= 1 {
        return (1.0, 0.0);
    }
    let t = truncation as i32;
    let alpha = (1.0 - zc).powi(t - 1);
    let d_alpha = -((t - 1) as f64) * (1.0 - zc).powi(t - 2);
    (alpha, d_alpha)
}

/// `log(α + (1 − α) a / Z)` with derivatives.
pub fn lars_factor(accept: f64, z_value: f64, truncation: u32) -> LarsFactor {
    let (alpha, d_alpha) = truncation_weight(z_value, truncation);
    let ratio = accept / z_value;
    let delta = (1.0 - alpha) * (ratio - 1.0);
    let q = alpha + (1.0 - alpha) * ratio;
    if q < LOG_ARG_FLOOR {
        return LarsFactor {
            log_q: LOG_ARG_FLOOR.ln(),
            d_accept: 0.0,
            d_z: 0.0,
        };
    }
    // ln_1p keeps constant-acceptance and T = 1 cases exactly at zero
    let log_q = if delta > -0.5 { delta.ln_1p() } else { q.ln() };
    LarsFactor {
        log_q,
        d_accept: (1.0 - alpha) / (z_value * q),
        d_z: (d_alpha * (1.0 - ratio) - (1.0 - alpha) * ratio / z_value) / q,
    }
}

/// Monte Carlo estimate of `Z` (one value per group) with the retained graph
/// needed for `∇_φ Ẑ`.
#[derive(Clone, Debug)]
pub struct ZEstimate {
    pub values: Vec<f64>,
    pub std_devs: Vec<f64>,
    pub samples: usize,
    caches: Vec<ForwardCache>,
}

/// Resampled (learned accept/reject) Gaussian base, optionally grouped.
#[derive(Clone, Debug)]
pub struct ResampledBase {
    num_groups: usize,
    group_dim: usize,
    net: Mlp,
    truncation: u32,
    ema_decay: f64,
    mc_samples: usize,
    z_value: Vec<f64>,
    ema_started: bool,
}

/// Settings for the acceptance network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcceptanceNet {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl Default for AcceptanceNet {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            hidden_units: 256,
            activation: Activation::Tanh,
            dropout_rate: 0.0,
        }
    }
}

impl ResampledBase {
    /// Single-group resampled base on `R^d`.
    pub fn new(dim: usize, acceptance: AcceptanceNet, truncation: u32, rng: &mut RngStream) -> Result<Self> {
        Self::grouped(1, dim, acceptance, truncation, rng)
    }

    /// `num_groups` factors of dimension `group_dim` sharing one network.
    pub fn grouped(
        num_groups: usize,
        group_dim: usize,
        acceptance: AcceptanceNet,
        truncation: u32,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let spec = MlpSpec::new(
            group_dim,
            acceptance.hidden_layers,
            acceptance.hidden_units,
            num_groups,
            acceptance.activation,
            OutputHead::Sigmoid,
        )
        .with_dropout(acceptance.dropout_rate);
        let net = Mlp::new(spec, rng)?;
        Self::from_net(num_groups, net, truncation)
    }

    pub fn from_net(num_groups: usize, net: Mlp, truncation: u32) -> Result<Self> {
        if num_groups == 0 {
            return Err(FlowError::InvalidParameter("at least one group required".into()));
        }
        if truncation == 0 {
            return Err(FlowError::InvalidParameter("truncation T must be at least 1".into()));
        }
        if net.spec().output_head != OutputHead::Sigmoid {
            return Err(FlowError::InvalidParameter(
                "acceptance network needs a sigmoid head".into(),
            ));
        }
        check_dim(num_groups, net.spec().output_dim)?;
        // exact for the zero-initialized final layer
        let z0 = net.eval_one(&vec![0.0; net.spec().input_dim])?;
        let const_net = net.weight(net.num_layers() - 1).iter().all(|&w| w == 0.0);
        let z_value = if const_net { z0 } else { vec![0.5; num_groups] };
        Ok(Self {
            num_groups,
            group_dim: net.spec().input_dim,
            net,
            truncation,
            ema_decay: DEFAULT_EMA_DECAY,
            mc_samples: DEFAULT_MC_SAMPLES,
            z_value,
            ema_started: false,
        })
    }

    pub fn with_ema_decay(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(FlowError::InvalidParameter(format!("EMA decay {eps} outside (0, 1]")));
        }
        self.ema_decay = eps;
        Ok(self)
    }

    pub fn with_mc_samples(mut self, s: usize) -> Result<Self> {
        if s == 0 {
            return Err(FlowError::InvalidParameter("Z needs at least one sample".into()));
        }
        self.mc_samples = s;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.num_groups * self.group_dim
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn group_dim(&self) -> usize {
        self.group_dim
    }

    pub fn truncation(&self) -> u32 {
        self.truncation
    }

    pub fn ema_decay(&self) -> f64 {
        self.ema_decay
    }

    pub fn mc_samples(&self) -> usize {
        self.mc_samples
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Value of `Z` (per group) used by the density.
    pub fn z_value(&self) -> &[f64] {
        &self.z_value
    }

    pub fn ema_started(&self) -> bool {
        self.ema_started
    }

    /// Overrides the stored `Z` (e.g. with a high-precision estimate).
    pub fn set_z_value(&mut self, values: &[f64]) -> Result<()> {
        check_dim(self.num_groups, values.len())?;
        for &v in values {
            check_z(v)?;
        }
        self.z_value.copy_from_slice(values);
        Ok(())
    }

    /// Restores EMA state from a checkpoint.
    pub fn restore_ema(&mut self, values: &[f64], started: bool) -> Result<()> {
        self.set_z_value(values)?;
        self.ema_started = started;
        Ok(())
    }

    /// First call stores the batch estimate; later calls blend it in with
    /// weight `ε`.
    pub fn update_ema(&mut self, batch: &[f64]) -> Result<()> {
        check_dim(self.num_groups, batch.len())?;
        for &b in batch {
            check_z(b)?;
        }
        if !self.ema_started {
            self.z_value.copy_from_slice(batch);
            self.ema_started = true;
        } else {
            let eps = self.ema_decay;
            for (z, &b) in self.z_value.iter_mut().zip(batch) {
                *z = ((1.0 - eps) * *z + eps * b).min(1.0);
            }
        }
        Ok(())
    }

    pub fn acceptance(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.net.eval_one(v)
    }

    /// `log p(z)` with explicit `Z` values.
    pub fn log_prob_with_z(&self, z: &[f64], z_values: &[f64]) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        check_dim(self.num_groups, z_values.len())?;
        for &v in z_values {
            check_z(v)?;
        }
        let g = self.group_dim;
        let input = Matrix::from_vec(self.num_groups, g, z.to_vec())?;
        let out = self.net.forward_eval(&input)?;
        let mut lp = std_normal_log_density(z);
        for k in 0..self.num_groups {
            lp += lars_factor(out.get(k, k), z_values[k], self.truncation).log_q;
        }
        Ok(lp)
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        self.log_prob_with_z(z, &self.z_value)
    }

    fn group_rows(&self, z: &Matrix) -> Result<Matrix> {
        check_dim(self.dim(), z.cols())?;
        Matrix::from_vec(z.rows() * self.num_groups, self.group_dim, z.as_slice().to_vec())
    }

    /// Draws one sample by truncated rejection sampling, independently per
    /// group. Returns the sample and the total number of proposals.
    pub fn sample(&self, rng: &mut RngStream) -> Result<(Vec<f64>, u32)> {
        let g = self.group_dim;
        let mut z = vec![0.0; self.dim()];
        let mut attempts = 0u32;
        for k in 0..self.num_groups {
            for t in 1..=self.truncation {
                attempts += 1;
                let v: Vec<f64> = (0..g).map(|_| rng.standard_normal()).collect();
                let accept = if t == self.truncation {
                    true
                } else {
                    let u = rng.uniform();
                    u < self.net.eval_one(&v)?[k]
                };
                if accept {
                    z[k * g..(k + 1) * g].copy_from_slice(&v);
                    break;
                }
            }
        }
        Ok((z, attempts))
    }

    /// Monte Carlo estimate of `Z` from explicit proposal draws (`S × g`),
    /// keeping the graph for [`ResampledBase::z_backward`].
    pub fn estimate_z_from_draws(&self, draws: &Matrix, mode: Mode, rng: Option<&mut RngStream>) -> Result<ZEstimate> {
        check_dim(self.group_dim, draws.cols())?;
        if draws.rows() == 0 {
            return Err(FlowError::InvalidParameter("Z needs at least one sample".into()));
        }
        let mut caches = Vec::new();
        let mut moments = vec![RunningMoments::default(); self.num_groups];
        let mut rng = rng;
        for start in (0..draws.rows()).step_by(CHUNK_ROWS) {
            let end = (start + CHUNK_ROWS).min(draws.rows());
            let block = draws.slice_rows(start, end);
            let (out, cache) = self.net.forward(&block, mode, rng.as_deref_mut())?;
            for r in 0..out.rows() {
                for (k, m) in moments.iter_mut().enumerate() {
                    m.push(out.get(r, k));
                }
            }
            caches.push(cache);
        }
        Ok(ZEstimate {
            values: moments.iter().map(|m| m.mean()).collect(),
            std_devs: moments.iter().map(|m| m.std_dev()).collect(),
            samples: draws.rows(),
            caches,
        })
    }

    /// `Ẑ = (1/S) Σ a(z_s)`, `z_s ~ N(0, I)`, with the gradient graph.
    pub fn estimate_z(&self, samples: usize, rng: &mut RngStream) -> Result<ZEstimate> {
        let draws = crate::numerics::draw_standard_normal(rng, samples, self.group_dim);
        self.estimate_z_from_draws(&draws, Mode::Eval, None)
    }

    /// Adds `Σ_k coeffs[k] · ∇_φ Ẑ_k` into `grads` (acceptance-net slice).
    pub fn z_backward(&self, est: &ZEstimate, coeffs: &[f64], grads: &mut [f64]) -> Result<()> {
        check_dim(self.num_groups, coeffs.len())?;
        let scale: Vec<f64> = coeffs.iter().map(|c| c / est.samples as f64).collect();
        for cache in &est.caches {
            let mut cot = Matrix::zeros(cache.rows(), self.num_groups);
            for r in 0..cache.rows() {
                cot.row_mut(r).copy_from_slice(&scale);
            }
            self.net.backward_params(cache, &cot, grads)?;
        }
        Ok(())
    }

    /// Large-budget estimate without a gradient graph; chunks run in parallel
    /// with per-chunk streams, so the result does not depend on thread count.
    pub fn estimate_z_value(&self, samples: usize, rng: &mut RngStream) -> Result<(Vec<f64>, Vec<f64>)> {
        if samples == 0 {
            return Err(FlowError::InvalidParameter("Z needs at least one sample".into()));
        }
        const BLOCK: usize = 4096;
        let family = rng.fork();
        let blocks = samples.div_ceil(BLOCK);
        let parts = map_indexed(blocks, |b| -> Result<Vec<RunningMoments>> {
            let n = BLOCK.min(samples - b * BLOCK);
            let mut r = family.stream(b as u64);
            let draws = crate::numerics::draw_standard_normal(&mut r, n, self.group_dim);
            let out = self.net.forward_eval(&draws)?;
            let mut m = vec![RunningMoments::default(); self.num_groups];
            for row in out.iter_rows() {
                for (mk, &a) in m.iter_mut().zip(row) {
                    mk.push(a);
                }
            }
            Ok(m)
        });
        let mut total = vec![RunningMoments::default(); self.num_groups];
        for p in parts {
            let p = p?;
            for (t, m) in total.iter_mut().zip(&p) {
                *t = t.merge(m);
            }
        }
        Ok((
            total.iter().map(|m| m.mean()).collect(),
            total.iter().map(|m| m.std_dev()).collect(),
        ))
    }

    /// Midpoint-rule value of `∫ π(v) a_k(v) dv` per group; requires
    /// two-dimensional groups.
    pub fn exact_z_quadrature(&self, grid: &Grid2D) -> Result<Vec<f64>> {
        if self.group_dim != 2 {
            return Err(FlowError::InvalidParameter(format!(
                "quadrature Z needs two-dimensional groups, got {}",
                self.group_dim
            )));
        }
        grid.validate()?;
        let area = grid.cell_area();
        let parts = map_chunks(grid.len(), |range| -> Result<Vec<f64>> {
            let nodes = grid.node_block(range.start, range.end);
            let out = self.net.forward_eval(&nodes)?;
            let mut s = vec![0.0; self.num_groups];
            for (r, row) in out.iter_rows().enumerate() {
                let w = std_normal_log_density(nodes.row(r)).exp() * area;
                for (sk, a) in s.iter_mut().zip(row) {
                    *sk += w * a;
                }
            }
            Ok(s)
        });
        let parts: Vec<Vec<f64>> = parts.into_iter().collect::<Result<_>>()?;
        Ok(tree_sum(parts).expect("non-empty grid"))
    }
}

fn check_z(v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(FlowError::InvalidParameter(format!("Z value {v} outside (0, 1]")))
    }
}

#[derive(Clone, Debug)]
pub enum Base {
    Gaussian(StandardGaussian),
    Mixture(GaussianMixture),
    Resampled(ResampledBase),
}

/// Values recorded by [`Base::log_prob_traced`].
#[derive(Clone, Debug)]
pub struct BaseTrace {
    z: Matrix,
    kind: TraceKind,
}

#[derive(Clone, Debug)]
enum TraceKind {
    Gaussian,
    Mixture {
        resp: Vec<f64>,
    },
    Resampled {
        cache: ForwardCache,
        factors: Vec<LarsFactor>,
    },
}

/// Gradient of a weighted sum of base log densities.
#[derive(Clone, Debug)]
pub struct BaseGrad {
    /// `Σ_b w_b ∇_z log p(z_b)`, row per sample.
    pub dz: Matrix,
    /// `Σ_b w_b ∂ log p(z_b) / ∂Z_k` per group (empty for other bases).
    pub dz_value: Vec<f64>,
}

impl Base {
    pub fn dim(&self) -> usize {
        match self {
            Base::Gaussian(g) => g.dim,
            Base::Mixture(m) => m.dim,
            Base::Resampled(r) => r.dim(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Base::Gaussian(_) => 0,
            Base::Mixture(m) => m.num_params(),
            Base::Resampled(r) => r.net.num_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Base::Gaussian(_) => Vec::new(),
            Base::Mixture(m) => m.params(),
            Base::Resampled(r) => r.net.params().to_vec(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        match self {
            Base::Gaussian(_) => check_dim(0, p.len()),
            Base::Mixture(m) => m.set_params(p),
            Base::Resampled(r) => r.net.set_params(p),
        }
    }

    pub fn as_resampled(&self) -> Option<&ResampledBase> {
        match self {
            Base::Resampled(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_resampled_mut(&mut self) -> Option<&mut ResampledBase> {
        match self {
            Base::Resampled(r) => Some(r),
            _ => None,
        }
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        match self {
            Base::Gaussian(g) => g.log_prob(z),
            Base::Mixture(m) => m.log_prob(z),
            Base::Resampled(r) => r.log_prob(z),
        }
    }

    /// Batched log density without a trace.
    pub fn log_prob_batch(&self, z: &Matrix) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.cols())?;
        match self {
            Base::Gaussian(_) => Ok(z.iter_rows().map(std_normal_log_density).collect()),
            Base::Mixture(m) => z.iter_rows().map(|r| m.log_prob(r)).collect(),
            Base::Resampled(r) => {
                let out = r.net.forward_eval(&r.group_rows(z)?)?;
                let g = r.num_groups;
                Ok(z.iter_rows()
                    .enumerate()
                    .map(|(b, row)| {
                        let mut lp = std_normal_log_density(row);
                        for k in 0..g {
                            lp += lars_factor(out.get(b * g + k, k), r.z_value[k], r.truncation).log_q;
                        }
                        lp
                    })
                    .collect())
            }
        }
    }

    /// Batched log density recording what [`Base::backward`] needs.
    pub fn log_prob_traced(
        &self,
        z: &Matrix,
        mode: Mode,
        rng: Option<&mut RngStream>,
    ) -> Result<(Vec<f64>, BaseTrace)> {
        check_dim(self.dim(), z.cols())?;
        match self {
            Base::Gaussian(_) => Ok((
                z.iter_rows().map(std_normal_log_density).collect(),
                BaseTrace {
                    z: z.clone(),
                    kind: TraceKind::Gaussian,
                },
            )),
            Base::Mixture(m) => {
                let k = m.components;
                let mut resp = vec![0.0; z.rows() * k];
                let lp = z
                    .iter_rows()
                    .enumerate()
                    .map(|(b, row)| m.log_prob_resp(row, &mut resp[b * k..(b + 1) * k]))
                    .collect();
                Ok((
                    lp,
                    BaseTrace {
                        z: z.clone(),
                        kind: TraceKind::Mixture { resp },
                    },
                ))
            }
            Base::Resampled(r) => {
                let (out, cache) = r.net.forward(&r.group_rows(z)?, mode, rng)?;
                let g = r.num_groups;
                let mut factors = Vec::with_capacity(z.rows() * g);
                let lp = z
                    .iter_rows()
                    .enumerate()
                    .map(|(b, row)| {
                        let mut lp = std_normal_log_density(row);
                        for k in 0..g {
                            let f = lars_factor(out.get(b * g + k, k), r.z_value[k], r.truncation);
                            lp += f.log_q;
                            factors.push(f);
                        }
                        lp
                    })
                    .collect();
                Ok((
                    lp,
                    BaseTrace {
                        z: z.clone(),
                        kind: TraceKind::Resampled { cache, factors },
                    },
                ))
            }
        }
    }

    /// Reverse pass for `Σ_b weights[b] · log p(z_b)`. Parameter gradients
    /// are added into `grads` (length [`Base::num_params`]).
    pub fn backward(&self, trace: &BaseTrace, weights: &[f64], grads: &mut [f64]) -> Result<BaseGrad> {
        let z = &trace.z;
        check_dim(z.rows(), weights.len())?;
        check_dim(self.num_params(), grads.len())?;
        let mut dz = Matrix::zeros(z.rows(), z.cols());
        for (b, &w) in weights.iter().enumerate() {
            for (d, &v) in dz.row_mut(b).iter_mut().zip(z.row(b)) {
                *d = -w * v;
            }
        }
        match (self, &trace.kind) {
            (Base::Gaussian(_), TraceKind::Gaussian) => Ok(BaseGrad {
                dz,
                dz_value: Vec::new(),
            }),
            (Base::Mixture(m), TraceKind::Mixture { resp }) => {
                let k = m.components;
                // the generic −w·z term belongs to the standard normal only
                let mut dz = Matrix::zeros(z.rows(), z.cols());
                for (b, &w) in weights.iter().enumerate() {
                    m.accumulate_grad(z.row(b), &resp[b * k..(b + 1) * k], w, grads, dz.row_mut(b));
                }
                Ok(BaseGrad {
                    dz,
                    dz_value: Vec::new(),
                })
            }
            (Base::Resampled(r), TraceKind::Resampled { cache, factors }) => {
                let g = r.num_groups;
                let gd = r.group_dim;
                let mut cot = Matrix::zeros(z.rows() * g, g);
                let mut dz_value = vec![0.0; g];
                for (b, &w) in weights.iter().enumerate() {
                    for k in 0..g {
                        let f = factors[b * g + k];
                        cot.set(b * g + k, k, w * f.d_accept);
                        dz_value[k] += w * f.d_z;
                    }
                }
                let din = r.net.backward(cache, &cot, grads)?;
                for b in 0..z.rows() {
                    let row = dz.row_mut(b);
                    for k in 0..g {
                        for j in 0..gd {
                            row[k * gd + j] += din.get(b * g + k, j);
                        }
                    }
                }
                Ok(BaseGrad { dz, dz_value })
            }
            _ => Err(FlowError::StaleCache),
        }
    }

    /// One draw from the base and the number of proposals it took.
    pub fn sample(&self, rng: &mut RngStream) -> Result<(Vec<f64>, u32)> {
        match self {
            Base::Gaussian(g) => Ok(((0..g.dim).map(|_| rng.standard_normal()).collect(), 1)),
            Base::Mixture(m) => Ok((m.sample(rng), 1)),
            Base::Resampled(r) => r.sample(rng),
        }
    }

    /// `n` draws; sample `i` uses child stream `i` of a family forked from `rng`.
    pub fn sample_batch(&self, n: usize, rng: &mut RngStream) -> Result<(Matrix, Vec<u32>)> {
        let family = rng.fork();
        let d = self.dim();
        let parts = map_chunks(n, |range| -> Result<(Vec<f64>, Vec<u32>)> {
            let mut data = Vec::with_capacity(range.len() * d);
            let mut att = Vec::with_capacity(range.len());
            for i in range {
                let (z, a) = self.sample(&mut family.stream(i as u64))?;
                data.extend_from_slice(&z);
                att.push(a);
            }
            Ok((data, att))
        });
        let mut data = Vec::with_capacity(n * d);
        let mut attempts = Vec::with_capacity(n);
        for p in parts {
            let (z, a) = p?;
            data.extend(z);
            attempts.extend(a);
        }
        Ok((Matrix::from_vec(n, d, data)?, attempts))
    }
}

/// Mean of attempts, as reported in training metrics.
pub fn mean_attempts(attempts: &[u32]) -> f64 {
    let v: Vec<f64> = attempts.iter().map(|&a| a as f64).collect();
    tree_sum_scalars(&v) / attempts.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(seed: u64, bias: f64) -> Mlp {
        let spec = MlpSpec::new(2, 1, 8, 1, Activation::Tanh, OutputHead::Sigmoid);
        let mut rng = RngStream::new(seed, 0);
        let mut net = Mlp::new(spec, &mut rng).unwrap();
        let mut p: Vec<f64> = net.params().iter().map(|_| 0.8 * rng.standard_normal()).collect();
        let n = p.len();
        p[n - 1] = bias;
        net.set_params(&p).unwrap();
        net
    }

    fn constant_net(c: f64) -> Mlp {
        let spec = MlpSpec::new(2, 1, 4, 1, Activation::Tanh, OutputHead::Sigmoid);
        let mut net = Mlp::new(spec, &mut RngStream::new(1, 1)).unwrap();
        let mut p = net.params().to_vec();
        let n = p.len();
        p[n - 1] = (c / (1.0 - c)).ln();
        net.set_params(&p).unwrap();
        net
    }

    #[test]
    fn std_normal_values() {
        let g = StandardGaussian::new(2);
        assert!((g.log_prob(&[0.0, 0.0]).unwrap() + 1.837877066409345).abs() < 1e-12);
        let g1 = StandardGaussian::new(1);
        assert!((g1.log_prob(&[1.0]).unwrap() + 1.418938533204673).abs() < 1e-12);
        let a = g.log_prob(&[0.3, -1.0]).unwrap();
        let b = g.log_prob(&[2.0, 0.5]).unwrap();
        assert!(((a - b) - ((4.0 + 0.25) - (0.09 + 1.0)) / 2.0).abs() < 1e-12);
        assert!(g.log_prob(&[0.0]).is_err());
    }

    #[test]
    fn mixture_init_ranges() {
        let m = GaussianMixture::init(10, 2, &mut RngStream::new(3, 0)).unwrap();
        assert!(m.means().iter().all(|v| (-2.5..=2.5).contains(v)));
        assert!(m.variances().iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert!(m.weights().iter().all(|w| (w - 0.1).abs() < 1e-15));
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let m2 = GaussianMixture::init(10, 2, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn single_component_matches_closed_form() {
        let m = GaussianMixture::from_parts(2, vec![0.5, -1.0], vec![0.2f64.ln(), 3.0f64.ln()], vec![0.7]).unwrap();
        let z = [0.1, 0.4];
        let expected = -LN_2PI - 0.5 * (0.2f64 * 3.0).ln() - 0.5 * (0.16 / 0.2 + 1.96 / 3.0);
        assert!((m.log_prob(&z).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicate_components_equal_standard_normal() {
        let m = GaussianMixture::from_parts(2, vec![0.0; 4], vec![0.0; 4], vec![0.0, 0.0]).unwrap();
        let z = [0.4, -0.9];
        assert!((m.log_prob(&z).unwrap() - std_normal_log_density(&z)).abs() < 1e-14);
    }

    #[test]
    fn far_apart_components() {
        let m = GaussianMixture::from_parts(1, vec![-5.0, 5.0], vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let direct = (0.5f64).ln() + std_normal_log_density(&[0.0]);
        let other = (0.5f64).ln() + std_normal_log_density(&[10.0]);
        let expected = direct + (other - direct).exp().ln_1p();
        assert!((m.log_prob(&[-5.0]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn mixture_sampling_frequencies() {
        let m = GaussianMixture::from_parts(1, vec![-10.0, 10.0], vec![0.0, 0.0], vec![0.0, 0.5]).unwrap();
        let w = m.weights();
        let mut rng = RngStream::new(8, 0);
        let n = 100_000;
        let right = (0..n).filter(|_| m.sample(&mut rng)[0] > 0.0).count() as f64;
        let sd = (n as f64 * w[1] * w[0]).sqrt();
        assert!((right - n as f64 * w[1]).abs() < 3.0 * sd);
    }

    #[test]
    fn mixture_gradients_match_finite_differences() {
        let mut m = GaussianMixture::init(3, 2, &mut RngStream::new(4, 4)).unwrap();
        m.logits = vec![0.3, -0.2, 0.9];
        m.log_vars[1] = 0.4;
        let base = Base::Mixture(m);
        let z = Matrix::from_rows(&[[0.3, -0.7], [1.2, 0.8]]);
        let w = [0.7, -1.3];
        let (_, tr) = base.log_prob_traced(&z, Mode::Eval, None).unwrap();
        let mut g = vec![0.0; base.num_params()];
        let bg = base.backward(&tr, &w, &mut g).unwrap();
        let f = |b: &Base, z: &Matrix| -> f64 { b.log_prob_batch(z).unwrap().iter().zip(&w).map(|(a, c)| a * c).sum() };
        let p0 = base.params();
        let h = 1e-6;
        for i in 0..p0.len() {
            let mut b = base.clone();
            let mut p = p0.clone();
            p[i] += h;
            b.set_params(&p).unwrap();
            let fp = f(&b, &z);
            p[i] -= 2.0 * h;
            b.set_params(&p).unwrap();
            let fm = f(&b, &z);
            assert!(((fp - fm) / (2.0 * h) - g[i]).abs() < 1e-7, "param {i}");
        }
        for i in 0..4 {
            let mut zp = z.clone();
            zp.as_mut_slice()[i] += h;
            let fp = f(&base, &zp);
            zp.as_mut_slice()[i] -= 2.0 * h;
            let fm = f(&base, &zp);
            assert!(((fp - fm) / (2.0 * h) - bg.dz.as_slice()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn lars_factor_degenerate_cases() {
        // T = 1 ignores the acceptance entirely
        for a in [0.01, 0.4, 0.99] {
            assert_eq!(lars_factor(a, 0.3, 1).log_q, 0.0);
        }
        // a / Z = 1 for constant acceptance
        for t in [1, 2, 10, 100] {
            assert_eq!(lars_factor(0.37, 0.37, t).log_q, 0.0);
        }
        // Z = 1 (clamped) gives α ≈ 0
        let f = lars_factor(1.0 - 1e-12, 1.0 - 1e-12, 100);
        assert_eq!(f.log_q, 0.0);
    }

    #[test]
    fn lars_factor_derivatives() {
        for &(a, z, t) in &[(0.3, 0.5, 100u32), (0.9, 0.2, 10), (0.05, 0.6, 3), (0.5, 0.02, 20)] {
            let f = lars_factor(a, z, t);
            let h = 1e-7;
            let da = (lars_factor(a + h, z, t).log_q - lars_factor(a - h, z, t).log_q) / (2.0 * h);
            let dz = (lars_factor(a, z + h, t).log_q - lars_factor(a, z - h, t).log_q) / (2.0 * h);
            assert!((da - f.d_accept).abs() < 1e-6 * da.abs().max(1.0));
            assert!((dz - f.d_z).abs() < 1e-6 * dz.abs().max(1.0));
        }
    }

    #[test]
    fn truncation_weight_range() {
        for &z in &[1e-9, 0.1, 0.5, 0.999999999, 1.0] {
            for &t in &[1u32, 2, 20, 100] {
                let (a, _) = truncation_weight(z, t);
                assert!((0.0..=1.0).contains(&a));
            }
        }
        assert_eq!(truncation_weight(0.3, 1), (1.0, 0.0));
    }

    #[test]
    fn constant_acceptance_gives_proposal_density() {
        let net = constant_net(0.3);
        for t in [1, 2, 10, 100] {
            let mut base = ResampledBase::from_net(1, net.clone(), t).unwrap();
            let (z, _) = base.estimate_z_value(1000, &mut RngStream::new(0, 0)).unwrap();
            base.set_z_value(&z).unwrap();
            let x = [0.7, -1.1];
            assert_eq!(base.log_prob(&x).unwrap(), std_normal_log_density(&x));
        }
    }

    #[test]
    fn near_one_acceptance_is_proposal() {
        let spec = MlpSpec::new(2, 1, 4, 1, Activation::Tanh, OutputHead::Sigmoid);
        let mut net = Mlp::zeros(spec).unwrap();
        let mut p = net.params().to_vec();
        let n = p.len();
        p[n - 1] = 1e3;
        net.set_params(&p).unwrap();
        let mut base = ResampledBase::from_net(1, net, 100).unwrap();
        let est = base.estimate_z(100, &mut RngStream::new(1, 0)).unwrap();
        base.update_ema(&est.values).unwrap();
        let x = [0.2, 0.3];
        assert_eq!(base.log_prob(&x).unwrap(), std_normal_log_density(&x));
        let (_, att) = base.sample(&mut RngStream::new(2, 0)).unwrap();
        assert_eq!(att, 1);
    }

    #[test]
    fn zero_init_base_starts_at_half() {
        let base = ResampledBase::new(
            2,
            AcceptanceNet {
                hidden_units: 16,
                ..Default::default()
            },
            100,
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        assert_eq!(base.z_value(), &[0.5]);
        let x = [1.0, 2.0];
        assert_eq!(base.log_prob(&x).unwrap(), std_normal_log_density(&x));
        let est = base.estimate_z(17, &mut RngStream::new(3, 3)).unwrap();
        assert_eq!(est.values, vec![0.5]);
    }

    #[test]
    fn constant_acceptance_estimate_is_exact() {
        let base = ResampledBase::from_net(1, constant_net(0.3), 100).unwrap();
        let c = base.acceptance(&[0.0, 0.0]).unwrap()[0];
        for s in [1, 7, 1000] {
            let est = base.estimate_z(s, &mut RngStream::new(s as u64, 0)).unwrap();
            assert_eq!(est.values[0], c);
        }
        let (v, _) = base.estimate_z_value(10_000, &mut RngStream::new(5, 0)).unwrap();
        assert_eq!(v[0], c);
    }

    #[test]
    fn t_one_sampling_is_proposal() {
        let base = ResampledBase::from_net(1, small_net(3, -2.0), 1).unwrap();
        let mut r1 = RngStream::new(10, 0);
        let mut r2 = RngStream::new(10, 0);
        for _ in 0..20 {
            let (z, att) = base.sample(&mut r1).unwrap();
            assert_eq!(att, 1);
            let expect = [r2.standard_normal(), r2.standard_normal()];
            assert_eq!(z, expect);
        }
    }

    #[test]
    fn half_acceptance_attempts_follow_truncated_geometric() {
        let base = ResampledBase::from_net(1, constant_net(0.5), 100).unwrap();
        let n = 100_000;
        let (_, att) = Base::Resampled(base)
            .sample_batch(n, &mut RngStream::new(12, 0))
            .unwrap();
        // truncated geometric with p = 1/2: mean 2 − 2^{1−T}·..., variance ≈ 2
        let p: f64 = 0.5;
        let t_max = 100;
        let probs: Vec<f64> = (1..=t_max)
            .map(|t| {
                if t < t_max {
                    (1.0 - p).powi(t - 1) * p
                } else {
                    (1.0 - p).powi(t_max - 1)
                }
            })
            .collect();
        let mean: f64 = probs.iter().enumerate().map(|(i, q)| (i + 1) as f64 * q).sum();
        let var: f64 = probs
            .iter()
            .enumerate()
            .map(|(i, q)| ((i + 1) as f64 - mean).powi(2) * q)
            .sum();
        let emp = mean_attempts(&att);
        assert!((emp - mean).abs() < 3.0 * (var / n as f64).sqrt(), "{emp} vs {mean}");
        assert!(att.iter().all(|&a| (1..=100).contains(&a)));
    }

    #[test]
    fn ema_recursion() {
        let mut base = ResampledBase::from_net(1, constant_net(0.5), 100).unwrap();
        base.update_ema(&[0.5]).unwrap();
        assert_eq!(base.z_value(), &[0.5]);
        base.update_ema(&[0.7]).unwrap();
        assert!((base.z_value()[0] - 0.51).abs() < 1e-15);
        assert!(base.update_ema(&[0.0]).is_err());
        assert!(base.update_ema(&[1.5]).is_err());

        let mut c = ResampledBase::from_net(1, constant_net(0.5), 100).unwrap();
        for _ in 0..50 {
            c.update_ema(&[0.3]).unwrap();
            assert_eq!(c.z_value(), &[0.3]);
        }
        let mut e1 = ResampledBase::from_net(1, constant_net(0.5), 100)
            .unwrap()
            .with_ema_decay(1.0)
            .unwrap();
        for v in [0.2, 0.9, 0.4] {
            e1.update_ema(&[v]).unwrap();
            assert_eq!(e1.z_value(), &[v]);
        }
    }

    #[test]
    fn log_prob_requires_positive_z() {
        let base = ResampledBase::from_net(1, small_net(1, 0.0), 10).unwrap();
        assert!(base.log_prob_with_z(&[0.0, 0.0], &[0.0]).is_err());
        assert!(base.log_prob_with_z(&[0.0, 0.0], &[-0.1]).is_err());
    }

    #[test]
    fn quadrature_z_constant_cases() {
        let grid = Grid2D::square(6.0, 400).unwrap();
        let one = {
            let spec = MlpSpec::new(2, 1, 4, 1, Activation::Tanh, OutputHead::Sigmoid);
            let mut net = Mlp::zeros(spec).unwrap();
            let mut p = net.params().to_vec();
            let n = p.len();
            p[n - 1] = 1e3;
            net.set_params(&p).unwrap();
            ResampledBase::from_net(1, net, 100).unwrap()
        };
        assert!((one.exact_z_quadrature(&grid).unwrap()[0] - 1.0).abs() < 1e-4);
        let c = ResampledBase::from_net(1, constant_net(0.3), 100).unwrap();
        assert!((c.exact_z_quadrature(&grid).unwrap()[0] - 0.3).abs() < 1e-4);
        let three_d = ResampledBase::new(
            3,
            AcceptanceNet {
                hidden_units: 4,
                ..Default::default()
            },
            10,
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        assert!(three_d.exact_z_quadrature(&grid).is_err());
    }

    #[test]
    fn quadrature_z_converges_under_refinement() {
        let base = ResampledBase::from_net(1, small_net(21, 0.3), 100).unwrap();
        let v: Vec<f64> = [200, 400, 800]
            .iter()
            .map(|&n| base.exact_z_quadrature(&Grid2D::square(6.0, n).unwrap()).unwrap()[0])
            .collect();
        assert!((v[1] - v[0]).abs() < 1e-5, "{v:?}");
        assert!((v[2] - v[1]).abs() < 1e-5, "{v:?}");
    }

    #[test]
    fn mc_estimate_agrees_with_quadrature() {
        let base = ResampledBase::from_net(1, small_net(31, 0.2), 100).unwrap();
        let exact = base.exact_z_quadrature(&Grid2D::square(6.0, 400).unwrap()).unwrap()[0];
        let s = 100_000;
        let est = base.estimate_z(s, &mut RngStream::new(2, 0)).unwrap();
        assert!((est.values[0] - exact).abs() < 4.0 * est.std_devs[0] / (s as f64).sqrt());
    }

    #[test]
    fn z_gradient_matches_finite_differences() {
        let mut base = ResampledBase::from_net(1, small_net(41, 0.1), 100).unwrap();
        let draws = crate::numerics::draw_standard_normal(&mut RngStream::new(6, 0), 200, 2);
        let est = base.estimate_z_from_draws(&draws, Mode::Eval, None).unwrap();
        let mut g = vec![0.0; base.net().num_params()];
        base.z_backward(&est, &[1.0], &mut g).unwrap();
        let p0 = base.net().params().to_vec();
        let h = 1e-5;
        for i in 0..p0.len() {
            let mut p = p0.clone();
            p[i] += h;
            base.net_mut().set_params(&p).unwrap();
            let fp = base.estimate_z_from_draws(&draws, Mode::Eval, None).unwrap().values[0];
            p[i] -= 2.0 * h;
            base.net_mut().set_params(&p).unwrap();
            let fm = base.estimate_z_from_draws(&draws, Mode::Eval, None).unwrap().values[0];
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * fd.abs().max(g[i].abs()).max(1e-4),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn grouped_single_group_matches_plain() {
        let net = small_net(51, 0.0);
        let plain = ResampledBase::from_net(1, net.clone(), 50).unwrap();
        let grouped = ResampledBase::from_net(1, net, 50).unwrap();
        let z = Matrix::from_rows(&[[0.1, 0.2], [-1.0, 0.5]]);
        assert_eq!(
            Base::Resampled(plain).log_prob_batch(&z).unwrap(),
            Base::Resampled(grouped).log_prob_batch(&z).unwrap()
        );
    }

    #[test]
    fn grouped_all_ones_is_standard_normal() {
        let spec = MlpSpec::new(2, 1, 4, 2, Activation::Tanh, OutputHead::Sigmoid);
        let mut net = Mlp::zeros(spec).unwrap();
        let mut p = net.params().to_vec();
        let n = p.len();
        p[n - 1] = 1e3;
        p[n - 2] = 1e3;
        net.set_params(&p).unwrap();
        let mut base = ResampledBase::from_net(2, net, 100).unwrap();
        let est = base.estimate_z(10, &mut RngStream::new(0, 0)).unwrap();
        base.update_ema(&est.values).unwrap();
        let z = [0.3, -0.2, 1.1, 0.4];
        assert_eq!(base.log_prob(&z).unwrap(), std_normal_log_density(&z));
    }

    #[test]
    fn grouped_dimension_checks() {
        let spec = MlpSpec::new(2, 1, 4, 2, Activation::Tanh, OutputHead::Sigmoid);
        let base = ResampledBase::from_net(2, Mlp::zeros(spec).unwrap(), 10).unwrap();
        assert_eq!(base.dim(), 4);
        assert!(base.log_prob(&[0.0; 3]).is_err());
        assert!(Base::Resampled(base).log_prob_batch(&Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn resampled_backward_matches_finite_differences() {
        let spec = MlpSpec::new(2, 1, 5, 2, Activation::Tanh, OutputHead::Sigmoid);
        let mut rng = RngStream::new(61, 0);
        let mut net = Mlp::new(spec, &mut rng).unwrap();
        let p: Vec<f64> = net.params().iter().map(|_| 0.7 * rng.standard_normal()).collect();
        net.set_params(&p).unwrap();
        let mut rb = ResampledBase::from_net(2, net, 7).unwrap();
        rb.set_z_value(&[0.4, 0.6]).unwrap();
        let base = Base::Resampled(rb);
        let z = Matrix::from_rows(&[[0.3, -0.7, 0.1, 0.2], [1.2, 0.8, -0.5, -1.0]]);
        let w = [0.9, -0.4];
        let (_, tr) = base.log_prob_traced(&z, Mode::Eval, None).unwrap();
        let mut g = vec![0.0; base.num_params()];
        let bg = base.backward(&tr, &w, &mut g).unwrap();
        let f = |b: &Base, z: &Matrix| -> f64 { b.log_prob_batch(z).unwrap().iter().zip(&w).map(|(a, c)| a * c).sum() };
        let h = 1e-6;
        let p0 = base.params();
        for i in 0..p0.len() {
            let mut b = base.clone();
            let mut p = p0.clone();
            p[i] += h;
            b.set_params(&p).unwrap();
            let fp = f(&b, &z);
            p[i] -= 2.0 * h;
            b.set_params(&p).unwrap();
            let fm = f(&b, &z);
            assert!(((fp - fm) / (2.0 * h) - g[i]).abs() < 1e-6, "param {i}");
        }
        for i in 0..z.as_slice().len() {
            let mut zp = z.clone();
            zp.as_mut_slice()[i] += h;
            let fp = f(&base, &zp);
            zp.as_mut_slice()[i] -= 2.0 * h;
            let fm = f(&base, &zp);
            assert!(((fp - fm) / (2.0 * h) - bg.dz.as_slice()[i]).abs() < 1e-6);
        }
        // Z path
        for k in 0..2 {
            let mut b = base.clone();
            let r = b.as_resampled_mut().unwrap();
            let mut zv = r.z_value().to_vec();
            zv[k] += h;
            r.set_z_value(&zv).unwrap();
            let fp = f(&b, &z);
            let r = b.as_resampled_mut().unwrap();
            zv[k] -= 2.0 * h;
            r.set_z_value(&zv).unwrap();
            let fm = f(&b, &z);
            assert!(((fp - fm) / (2.0 * h) - bg.dz_value[k]).abs() < 1e-6);
        }
    }
}
