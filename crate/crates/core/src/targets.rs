//! Unnormalized two-dimensional benchmark densities with analytic gradients
//! and an exact envelope rejection sampler.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, FlowError, Result};
use crate::exec::{map_chunks, map_indexed, CHUNK_ROWS};
use crate::matrix::Matrix;
use crate::numerics::{log_sum_exp_weights, sigmoid, softplus, Grid2D};
use crate::rng::RngStream;

/// A differentiable unnormalized log density on `R^d`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Value of the log density; writes its gradient into `grad`.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.log_density_grad(x, &mut g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    DualMoon,
    CircleOfGaussians,
    TwoRings,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [
        TargetKind::DualMoon,
        TargetKind::CircleOfGaussians,
        TargetKind::TwoRings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::DualMoon => "dual_moon",
            TargetKind::CircleOfGaussians => "circle_of_gaussians",
            TargetKind::TwoRings => "two_rings",
        }
    }

    /// Half-width of the square proposal box used for rejection sampling.
    pub fn box_half_width(self) -> f64 {
        match self {
            TargetKind::DualMoon => 3.0,
            TargetKind::CircleOfGaussians | TargetKind::TwoRings => 4.0,
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetKind {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        TargetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| FlowError::InvalidParameter(format!("unknown target {s:?}")))
    }
}

/// Variance of each component of the circle of Gaussians.
pub const CIRCLE_VARIANCE: f64 = (2.0 - std::f64::consts::SQRT_2) / 9.0;
pub const ENVELOPE_SAFETY: f64 = 1.1;
pub const ENVELOPE_GRID_POINTS: usize = 1000;
const MIN_ACCEPTANCE_RATE: f64 = 1e-4;
const MIN_PROPOSALS_FOR_RATE: u64 = 1_000_000;

fn dual_moon(z: &[f64], g: &mut [f64]) -> f64 {
    let (z1, z2) = (z[0], z[1]);
    let r = (z1 * z1 + z2 * z2).sqrt();
    let u = -4.0 * z1 / 0.09;
    let v = -(r - 1.0).powi(2) / 0.08 - (z1.abs() - 2.0).powi(2) / 0.18 + softplus(u);
    let dr = -2.0 * (r - 1.0) / 0.08;
    let (rx, ry) = if r > 0.0 { (z1 / r, z2 / r) } else { (0.0, 0.0) };
    let sign = if z1 == 0.0 { 0.0 } else { z1.signum() };
    g[0] = dr * rx - 2.0 * (z1.abs() - 2.0) * sign / 0.18 - sigmoid(u) * 4.0 / 0.09;
    g[1] = dr * ry;
    v
}

fn circle_means() -> [[f64; 2]; 8] {
    let mut m = [[0.0; 2]; 8];
    for (i, mi) in m.iter_mut().enumerate() {
        let theta = 2.0 * PI * (i + 1) as f64 / 8.0;
        *mi = [2.0 * theta.sin(), 2.0 * theta.cos()];
    }
    m
}

fn circle_of_gaussians(z: &[f64], g: &mut [f64]) -> f64 {
    let log_norm = -(2.0 * PI * CIRCLE_VARIANCE).ln();
    let means = circle_means();
    let mut terms = [0.0; 8];
    for (t, m) in terms.iter_mut().zip(&means) {
        let d2 = (z[0] - m[0]).powi(2) + (z[1] - m[1]).powi(2);
        *t = log_norm - d2 / (2.0 * CIRCLE_VARIANCE);
    }
    let mut w = [0.0; 8];
    let v = log_sum_exp_weights(&terms, &mut w);
    g[0] = 0.0;
    g[1] = 0.0;
    for (wi, m) in w.iter().zip(&means) {
        g[0] -= wi * (z[0] - m[0]) / CIRCLE_VARIANCE;
        g[1] -= wi * (z[1] - m[1]) / CIRCLE_VARIANCE;
    }
    v
}

fn two_rings(z: &[f64], g: &mut [f64]) -> f64 {
    let r = (z[0] * z[0] + z[1] * z[1]).sqrt();
    let c = (32.0 / PI).ln();
    let terms = [c - 32.0 * (r - 2.0).powi(2), c - 32.0 * (r - 3.0).powi(2)];
    let mut w = [0.0; 2];
    let v = log_sum_exp_weights(&terms, &mut w);
    let dr = -64.0 * (w[0] * (r - 2.0) + w[1] * (r - 3.0));
    if r > 0.0 {
        g[0] = dr * z[0] / r;
        g[1] = dr * z[1] / r;
    } else {
        g[0] = 0.0;
        g[1] = 0.0;
    }
    v
}

/// A benchmark target with its rejection-sampling envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct Target2D {
    kind: TargetKind,
    half_width: f64,
    /// log of the padded envelope `ENVELOPE_SAFETY · max exp(log p̂)`
    log_envelope: f64,
}

/// Rejection samples and the number of proposals used.
#[derive(Clone, Debug)]
pub struct RejectionSamples {
    pub samples: Matrix,
    pub proposals: u64,
}

impl Target2D {
    /// Builds the target and its envelope from the maximum over a
    /// `1000 × 1000` grid on the proposal box.
    pub fn new(kind: TargetKind) -> Self {
        let half_width = kind.box_half_width();
        let grid = Grid2D::square(half_width, ENVELOPE_GRID_POINTS).expect("valid grid");
        let t = Self {
            kind,
            half_width,
            log_envelope: 0.0,
        };
        let maxes = map_chunks(grid.len(), |r| {
            r.map(|k| t.log_unnorm(&grid.node(k))).fold(f64::NEG_INFINITY, f64::max)
        });
        let log_max = maxes.into_iter().fold(f64::NEG_INFINITY, f64::max);
        Self {
            log_envelope: log_max + ENVELOPE_SAFETY.ln(),
            ..t
        }
    }

    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// log of the padded envelope constant.
    pub fn log_envelope(&self) -> f64 {
        self.log_envelope
    }

    pub fn log_unnorm(&self, z: &[f64]) -> f64 {
        let mut g = [0.0; 2];
        self.log_unnorm_grad(z, &mut g)
    }

    pub fn log_unnorm_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        match self.kind {
            TargetKind::DualMoon => dual_moon(z, grad),
            TargetKind::CircleOfGaussians => circle_of_gaussians(z, grad),
            TargetKind::TwoRings => two_rings(z, grad),
        }
    }

    pub fn log_unnorm_checked(&self, z: &[f64]) -> Result<f64> {
        check_dim(2, z.len())?;
        Ok(self.log_unnorm(z))
    }

    pub fn log_unnorm_batch(&self, z: &Matrix) -> Result<Vec<f64>> {
        check_dim(2, z.cols())?;
        let parts = map_chunks(z.rows(), |r| r.map(|i| self.log_unnorm(z.row(i))).collect::<Vec<_>>());
        Ok(parts.into_iter().flatten().collect())
    }

    /// Midpoint-rule `log ∫ exp(log p̂)` over `grid`.
    pub fn log_normalizer(&self, grid: &Grid2D) -> Result<f64> {
        grid.validate()?;
        let vals = map_chunks(grid.len(), |r| {
            r.map(|k| self.log_unnorm(&grid.node(k))).collect::<Vec<_>>()
        });
        let vals: Vec<f64> = vals.into_iter().flatten().collect();
        Ok(crate::numerics::log_sum_exp(&vals)? + grid.cell_area().ln())
    }

    fn propose_until_accept(&self, rng: &mut RngStream, cap: u64) -> Result<([f64; 2], u64)> {
        let w = self.half_width;
        for n in 1..=cap {
            let z = [-w + 2.0 * w * rng.uniform(), -w + 2.0 * w * rng.uniform()];
            let u = rng.uniform();
            if u.ln() < self.log_unnorm(&z) - self.log_envelope {
                return Ok((z, n));
            }
        }
        Err(FlowError::DegenerateEnvelope { rate: 0.0 })
    }

    /// `n` exact draws; draw `i` uses child stream `i` of a family forked
    /// from `rng`.
    pub fn rejection_sample(&self, n: usize, rng: &mut RngStream) -> Result<RejectionSamples> {
        let family = rng.fork();
        let blocks = n.div_ceil(CHUNK_ROWS);
        let parts = map_indexed(blocks, |b| -> Result<(Vec<f64>, u64)> {
            let end = ((b + 1) * CHUNK_ROWS).min(n);
            let mut data = Vec::with_capacity(2 * (end - b * CHUNK_ROWS));
            let mut proposals = 0;
            for i in b * CHUNK_ROWS..end {
                let (z, p) = self.propose_until_accept(&mut family.stream(i as u64), MIN_PROPOSALS_FOR_RATE)?;
                data.extend_from_slice(&z);
                proposals += p;
            }
            Ok((data, proposals))
        });
        let mut data = Vec::with_capacity(2 * n);
        let mut proposals = 0;
        for p in parts {
            let (d, c) = p?;
            data.extend(d);
            proposals += c;
        }
        let rate = n as f64 / proposals.max(1) as f64;
        if proposals >= MIN_PROPOSALS_FOR_RATE && rate < MIN_ACCEPTANCE_RATE {
            return Err(FlowError::DegenerateEnvelope { rate });
        }
        Ok(RejectionSamples {
            samples: Matrix::from_vec(n, 2, data)?,
            proposals,
        })
    }
}

impl LogDensity for Target2D {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.log_unnorm_grad(x, grad)
    }
}
