//! Scalar helpers, Gaussian draws and the midpoint quadrature grid.

use crate::error::{FlowError, Result};
use crate::matrix::Matrix;
use crate::rng::RngStream;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `n × d` matrix of i.i.d. standard normal draws, filled row by row.
pub fn draw_standard_normal(rng: &mut RngStream, n: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for v in m.as_mut_slice() {
        *v = rng.standard_normal();
    }
    m
}

/// `log Σ exp(v_i)`, shifted by the maximum.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or(FlowError::EmptyReduction)?;
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return Ok(max);
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + s.ln())
}

/// `log Σ exp(v_i)` together with the softmax weights `exp(v_i − lse)`.
pub fn log_sum_exp_weights(values: &[f64], weights: &mut [f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        weights.iter_mut().for_each(|w| *w = 0.0);
        return max;
    }
    let mut s = 0.0;
    for (w, v) in weights.iter_mut().zip(values) {
        *w = (v - max).exp();
        s += *w;
    }
    for w in weights.iter_mut() {
        *w /= s;
    }
    max + s.ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log density of `N(0, I_d)` at `z`.
#[inline]
pub fn std_normal_log_density(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * z.len() as f64 * LN_2PI - 0.5 * sq
}

/// Streaming mean and variance (Welford). A constant stream has a mean equal
/// to that constant bit for bit.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&self, other: &RunningMoments) -> RunningMoments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * (other.n as f64 / n as f64);
        let m2 = self.m2 + other.m2 + delta * delta * (self.n as f64 * other.n as f64 / n as f64);
        RunningMoments { n, mean, m2 }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two values.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Midpoint-rule grid over an axis-aligned box in the plane.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid2D {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub points_per_dim: usize,
}

impl Grid2D {
    pub fn new(lo: [f64; 2], hi: [f64; 2], points_per_dim: usize) -> Result<Self> {
        let g = Self { lo, hi, points_per_dim };
        g.validate()?;
        Ok(g)
    }

    pub fn square(half_width: f64, points_per_dim: usize) -> Result<Self> {
        Self::new([-half_width, -half_width], [half_width, half_width], points_per_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo[0] < self.hi[0] && self.lo[1] < self.hi[1]) {
            return Err(FlowError::InvalidParameter(
                "grid requires lo < hi in every coordinate".into(),
            ));
        }
        if self.points_per_dim < 2 {
            return Err(FlowError::InvalidParameter(
                "grid requires at least 2 points per dimension".into(),
            ));
        }
        Ok(())
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.points_per_dim as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.step(0) * self.step(1)
    }

    pub fn coord(&self, axis: usize, index: usize) -> f64 {
        self.lo[axis] + (index as f64 + 0.5) * self.step(axis)
    }

    pub fn len(&self) -> usize {
        self.points_per_dim * self.points_per_dim
    }

    pub fn is_empty(&self) -> bool {
        self.points_per_dim == 0
    }

    /// Node `k` in row-major order: the first coordinate varies slowest.
    pub fn node(&self, k: usize) -> [f64; 2] {
        let i = k / self.points_per_dim;
        let j = k % self.points_per_dim;
        [self.coord(0, i), self.coord(1, j)]
    }

    pub fn nodes(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), 2);
        for k in 0..self.len() {
            m.row_mut(k).copy_from_slice(&self.node(k));
        }
        m
    }

    /// Nodes `start..end` in row-major order.
    pub fn node_block(&self, start: usize, end: usize) -> Matrix {
        let mut m = Matrix::zeros(end - start, 2);
        for k in start..end {
            m.row_mut(k - start).copy_from_slice(&self.node(k));
        }
        m
    }
}
