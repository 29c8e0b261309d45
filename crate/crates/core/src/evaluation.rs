//! Evaluation metrics: grid-quadrature KL divergence, histogram KL
//! divergence, held-out log-likelihood and density-grid export.

use crate::error::{check_dim, FlowError, Result};
use crate::exec::{map_chunks, tree_sum_scalars};
use crate::flow::FlowModel;
use crate::matrix::Matrix;
use crate::numerics::{log_sum_exp, Grid2D};
use crate::rng::RngStream;
use crate::targets::LogDensity;

/// Minimum grid mass for quadrature results to be trusted.
pub const MIN_GRID_MASS: f64 = 0.99;
/// Probability added to every histogram bin before renormalizing.
pub const BIN_SMOOTHING: f64 = 1e-10;
pub const MIN_HISTOGRAM_SAMPLES: usize = 1000;
pub const MIN_BINS: usize = 10;
/// Largest share of non-finite rows tolerated by [`dataset_ll`].
pub const MAX_NONFINITE_LL_FRACTION: f64 = 0.01;

/// Default grid for quadrature KL divergences.
pub fn default_kld_grid() -> Grid2D {
    Grid2D::square(5.0, 500).expect("valid grid")
}

/// Default grid for computing `Z` of two-dimensional acceptance groups.
pub fn default_z_grid() -> Grid2D {
    Grid2D::square(6.0, 400).expect("valid grid")
}

/// How to set the stored `Z` of a resampled base before evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum ZRefresh {
    /// Midpoint rule on a grid (two-dimensional groups only).
    Quadrature(Grid2D),
    /// Monte Carlo with this many proposal draws.
    MonteCarlo(usize),
}

/// Replaces the stored `Z` with a high-precision value; no-op for other bases.
/// Returns the new values.
pub fn refresh_z(model: &mut FlowModel, how: &ZRefresh, rng: &mut RngStream) -> Result<Vec<f64>> {
    let Some(r) = model.base_mut().as_resampled_mut() else {
        return Ok(Vec::new());
    };
    let z = match how {
        ZRefresh::Quadrature(grid) => r.exact_z_quadrature(grid)?,
        ZRefresh::MonteCarlo(s) => r.estimate_z_value(*s, rng)?.0,
    };
    let z: Vec<f64> = z.into_iter().map(|v| v.clamp(f64::MIN_POSITIVE, 1.0)).collect();
    r.set_z_value(&z)?;
    Ok(z)
}

/// Evaluates a log density at every grid node in row-major order.
pub fn log_density_on_grid(density: &dyn LogDensity, grid: &Grid2D) -> Result<Vec<f64>> {
    check_dim(2, density.dim())?;
    grid.validate()?;
    let parts = map_chunks(grid.len(), |r| {
        let mut g = [0.0; 2];
        r.map(|k| density.log_density_grad(&grid.node(k), &mut g))
            .collect::<Vec<_>>()
    });
    Ok(parts.into_iter().flatten().collect())
}

/// Midpoint-rule log mass of `exp(values)` on `grid`.
fn log_grid_mass(values: &[f64], grid: &Grid2D) -> Result<f64> {
    Ok(log_sum_exp(values)? + grid.cell_area().ln())
}

fn widened(grid: &Grid2D) -> Result<Grid2D> {
    let (cx, cy) = (0.5 * (grid.lo[0] + grid.hi[0]), 0.5 * (grid.lo[1] + grid.hi[1]));
    let (hx, hy) = (grid.hi[0] - grid.lo[0], grid.hi[1] - grid.lo[1]);
    Grid2D::new([cx - hx, cy - hy], [cx + hx, cy + hy], 2 * grid.points_per_dim)
}

/// `KL(model ‖ target)` by the midpoint rule on `grid`, with both densities
/// normalized by their grid integrals.
///
/// The model must carry an accurate `Z` (see [`refresh_z`]). Fails with
/// [`FlowError::GridTooSmall`] if the model's grid mass is below 0.99, or if
/// the target's mass on `grid` is below 0.99 of its mass on a grid twice as
/// wide with the same spacing.
pub fn quadrature_kld(model: &FlowModel, target: &dyn LogDensity, grid: &Grid2D) -> Result<f64> {
    check_dim(2, model.dim())?;
    check_dim(2, target.dim())?;
    grid.validate()?;
    let lm = model.log_prob(&grid.nodes())?;
    let lt = log_density_on_grid(target, grid)?;
    let log_mm = log_grid_mass(&lm, grid)?;
    let mass = log_mm.exp();
    if !(mass >= MIN_GRID_MASS) {
        return Err(FlowError::GridTooSmall { mass });
    }
    let log_mt = log_grid_mass(&lt, grid)?;
    let wide = widened(grid)?;
    let log_mt_wide = log_grid_mass(&log_density_on_grid(target, &wide)?, &wide)?;
    let target_share = (log_mt - log_mt_wide).exp();
    if !(target_share >= MIN_GRID_MASS) {
        return Err(FlowError::GridTooSmall { mass: target_share });
    }
    let area = grid.cell_area();
    let terms: Vec<f64> = lm
        .iter()
        .zip(&lt)
        .map(|(&m, &t)| {
            let pm = (m - log_mm).exp() * area;
            if pm == 0.0 {
                0.0
            } else {
                pm * ((m - log_mm) - (t - log_mt))
            }
        })
        .collect();
    Ok(tree_sum_scalars(&terms))
}

/// Reference distribution for [`histogram_kld`].
#[derive(Clone, Copy, Debug)]
pub enum HistReference<'a> {
    Samples(&'a Matrix),
    /// Log density values at the nodes of a two-dimensional grid.
    Density {
        grid: &'a Grid2D,
        log_density: &'a [f64],
    },
}

struct Lattice {
    lo: Vec<f64>,
    width: Vec<f64>,
    bins: usize,
}

impl Lattice {
    fn index(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0;
        for (j, &v) in x.iter().enumerate() {
            let t = (v - self.lo[j]) / self.width[j];
            if !(t >= 0.0 && t <= self.bins as f64) {
                return None;
            }
            let b = (t as usize).min(self.bins - 1);
            idx = idx * self.bins + b;
        }
        Some(idx)
    }
}

fn normalized_smoothed(counts: &[f64]) -> Vec<f64> {
    let total = tree_sum_scalars(counts);
    let smoothed: Vec<f64> = counts.iter().map(|c| c / total + BIN_SMOOTHING).collect();
    let z = tree_sum_scalars(&smoothed);
    smoothed.into_iter().map(|p| p / z).collect()
}

/// `KL(p ‖ reference)` between histograms on a shared lattice spanning the
/// reference's range (`bins` per dimension). Samples of `p` outside the
/// lattice are ignored. Every bin gets `1e-10` extra probability before
/// renormalization.
pub fn histogram_kld(samples_p: &Matrix, reference: HistReference<'_>, bins: usize) -> Result<f64> {
    if samples_p.rows() < MIN_HISTOGRAM_SAMPLES {
        return Err(FlowError::InvalidParameter(format!(
            "histogram KLD needs at least {MIN_HISTOGRAM_SAMPLES} samples, got {}",
            samples_p.rows()
        )));
    }
    if bins < MIN_BINS {
        return Err(FlowError::InvalidParameter(format!(
            "need at least {MIN_BINS} bins per dimension"
        )));
    }
    let d = samples_p.cols();
    let cells = (bins as f64).powi(d as i32);
    if cells > 1e8 {
        return Err(FlowError::InvalidParameter(format!(
            "{cells} histogram cells is too many"
        )));
    }
    let cells = cells as usize;
    let (lattice, ref_counts) = match reference {
        HistReference::Samples(r) => {
            check_dim(d, r.cols())?;
            if r.rows() == 0 {
                return Err(FlowError::InvalidParameter("empty reference sample".into()));
            }
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for row in r.iter_rows() {
                for j in 0..d {
                    lo[j] = lo[j].min(row[j]);
                    hi[j] = hi[j].max(row[j]);
                }
            }
            let width = lo
                .iter()
                .zip(&hi)
                .map(|(a, b)| ((b - a) / bins as f64).max(f64::MIN_POSITIVE))
                .collect();
            let lattice = Lattice { lo, width, bins };
            let mut counts = vec![0.0; cells];
            for row in r.iter_rows() {
                if let Some(i) = lattice.index(row) {
                    counts[i] += 1.0;
                }
            }
            (lattice, counts)
        }
        HistReference::Density { grid, log_density } => {
            check_dim(2, d)?;
            check_dim(grid.len(), log_density.len())?;
            let lattice = Lattice {
                lo: grid.lo.to_vec(),
                width: (0..2).map(|j| (grid.hi[j] - grid.lo[j]) / bins as f64).collect(),
                bins,
            };
            let shift = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut mass = vec![0.0; cells];
            for (k, &l) in log_density.iter().enumerate() {
                if let Some(i) = lattice.index(&grid.node(k)) {
                    mass[i] += (l - shift).exp();
                }
            }
            (lattice, mass)
        }
    };
    let mut p_counts = vec![0.0; cells];
    for row in samples_p.iter_rows() {
        if let Some(i) = lattice.index(row) {
            p_counts[i] += 1.0;
        }
    }
    let non_empty = p_counts.iter().filter(|&&c| c > 0.0).count();
    if non_empty < MIN_BINS {
        return Err(FlowError::TooFewBins(non_empty));
    }
    let p = normalized_smoothed(&p_counts);
    let q = normalized_smoothed(&ref_counts);
    let terms: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).collect();
    Ok(tree_sum_scalars(&terms))
}

/// Mean held-out log-likelihood and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LlSummary {
    pub mean: f64,
    pub std_error: f64,
    /// Rows whose log-likelihood was not finite (excluded from the mean).
    pub non_finite: usize,
}

/// Mean and standard error of the model log density over the rows of
/// `data`. The result does not depend on row order.
pub fn dataset_ll(model: &FlowModel, data: &Matrix) -> Result<LlSummary> {
    if data.rows() == 0 {
        return Err(FlowError::InvalidParameter("empty dataset".into()));
    }
    let lp = model.log_prob(data)?;
    let mut vals: Vec<f64> = lp.iter().copied().filter(|v| v.is_finite()).collect();
    let non_finite = lp.len() - vals.len();
    if non_finite as f64 > MAX_NONFINITE_LL_FRACTION * lp.len() as f64 {
        return Err(FlowError::TooManyNonFinite {
            dropped: non_finite,
            total: lp.len(),
        });
    }
    vals.sort_by(f64::total_cmp);
    let n = vals.len() as f64;
    let mean = tree_sum_scalars(&vals) / n;
    let sq: Vec<f64> = vals.iter().map(|v| (v - mean).powi(2)).collect();
    let var = if vals.len() > 1 {
        tree_sum_scalars(&sq) / (n - 1.0)
    } else {
        0.0
    };
    Ok(LlSummary {
        mean,
        std_error: (var / n).sqrt(),
        non_finite,
    })
}

/// Model (and optionally target) log densities on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub grid: Grid2D,
    pub model: Vec<f64>,
    pub target: Option<Vec<f64>>,
}

impl DensityGrid {
    /// CSV with header `x1,x2,log_p_model[,log_p_target]`, rows in grid order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x1,x2,log_p_model");
        if self.target.is_some() {
            s.push_str(",log_p_target");
        }
        s.push('\n');
        for k in 0..self.grid.len() {
            let [a, b] = self.grid.node(k);
            s.push_str(&format!("{a:?},{b:?},{:?}", self.model[k]));
            if let Some(t) = &self.target {
                s.push_str(&format!(",{:?}", t[k]));
            }
            s.push('\n');
        }
        s
    }
}

pub fn export_density_grid(model: &FlowModel, target: Option<&dyn LogDensity>, grid: &Grid2D) -> Result<DensityGrid> {
    check_dim(2, model.dim())?;
    grid.validate()?;
    let model_vals = model.log_prob(&grid.nodes())?;
    let target_vals = target.map(|t| log_density_on_grid(t, grid)).transpose()?;
    Ok(DensityGrid {
        grid: grid.clone(),
        model: model_vals,
        target: target_vals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{Base, StandardGaussian};
    use crate::layers::{AffineConstant, Layer};
    use crate::numerics::{draw_standard_normal, LN_2PI};

    fn gaussian_model(shift: [f64; 2]) -> FlowModel {
        let layer = Layer::Affine(AffineConstant::new(vec![0.0, 0.0], shift.to_vec()).unwrap());
        FlowModel::new(Base::Gaussian(StandardGaussian::new(2)), vec![layer]).unwrap()
    }

    struct ModelDensity(FlowModel);

    impl LogDensity for ModelDensity {
        fn dim(&self) -> usize {
            self.0.dim()
        }

        fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            grad.iter_mut().for_each(|g| *g = 0.0);
            self.0.log_prob_one(x).unwrap()
        }
    }

    #[test]
    fn kld_of_model_with_itself_is_zero() {
        let m = gaussian_model([0.3, -0.2]);
        let k = quadrature_kld(&m, &ModelDensity(m.clone()), &Grid2D::square(6.0, 200).unwrap()).unwrap();
        assert!(k.abs() < 1e-6);
    }

    #[test]
    fn kld_between_shifted_gaussians() {
        let m = gaussian_model([0.0, 0.0]);
        let t = ModelDensity(gaussian_model([1.0, 0.0]));
        let k = quadrature_kld(&m, &t, &Grid2D::square(7.0, 400).unwrap()).unwrap();
        assert!((k - 0.5).abs() < 1e-3, "{k}");
    }

    #[test]
    fn kld_rejects_small_grids() {
        let m = gaussian_model([0.0, 0.0]);
        let t = ModelDensity(gaussian_model([0.0, 0.0]));
        let err = quadrature_kld(&m, &t, &Grid2D::square(1.0, 50).unwrap()).unwrap_err();
        assert!(matches!(err, FlowError::GridTooSmall { .. }));
        // model fine, target escaping the box
        let far = ModelDensity(gaussian_model([4.5, 0.0]));
        let err = quadrature_kld(&m, &far, &Grid2D::square(5.0, 100).unwrap()).unwrap_err();
        assert!(matches!(err, FlowError::GridTooSmall { .. }));
    }

    #[test]
    fn kld_is_non_negative() {
        let mut rng = RngStream::new(1, 0);
        for _ in 0..5 {
            let a = [0.5 * rng.standard_normal(), 0.5 * rng.standard_normal()];
            let b = [0.5 * rng.standard_normal(), 0.5 * rng.standard_normal()];
            let k = quadrature_kld(
                &gaussian_model(a),
                &ModelDensity(gaussian_model(b)),
                &Grid2D::square(6.0, 100).unwrap(),
            )
            .unwrap();
            assert!(k >= -1e-9);
        }
    }

    #[test]
    fn histogram_identical_samples_is_zero() {
        let s = draw_standard_normal(&mut RngStream::new(2, 0), 5000, 2);
        assert_eq!(histogram_kld(&s, HistReference::Samples(&s), 20).unwrap(), 0.0);
    }

    #[test]
    fn histogram_two_normal_draws() {
        let a = draw_standard_normal(&mut RngStream::new(3, 0), 1_000_000, 1);
        let b = draw_standard_normal(&mut RngStream::new(4, 0), 1_000_000, 1);
        let k = histogram_kld(&a, HistReference::Samples(&b), 100).unwrap();
        assert!(k < 5e-4, "{k}");
    }

    #[test]
    fn histogram_preconditions() {
        let s = draw_standard_normal(&mut RngStream::new(2, 0), 999, 2);
        assert!(histogram_kld(&s, HistReference::Samples(&s), 20).is_err());
        let s = draw_standard_normal(&mut RngStream::new(2, 0), 2000, 2);
        assert!(histogram_kld(&s, HistReference::Samples(&s), 9).is_err());
        let point = Matrix::zeros(2000, 1);
        let spread = draw_standard_normal(&mut RngStream::new(2, 0), 2000, 1);
        assert!(matches!(
            histogram_kld(&point, HistReference::Samples(&spread), 50),
            Err(FlowError::TooFewBins(1))
        ));
    }

    #[test]
    fn histogram_against_density_reference() {
        let m = gaussian_model([0.0, 0.0]);
        let grid = Grid2D::square(5.0, 500).unwrap();
        let lp = m.log_prob(&grid.nodes()).unwrap();
        let s = m.sample(200_000, &mut RngStream::new(5, 0)).unwrap().x;
        let k = histogram_kld(
            &s,
            HistReference::Density {
                grid: &grid,
                log_density: &lp,
            },
            50,
        )
        .unwrap();
        assert!(k < 0.01, "{k}");
    }

    #[test]
    fn dataset_ll_examples() {
        let m = FlowModel::new(Base::Gaussian(StandardGaussian::new(2)), vec![]).unwrap();
        let s = dataset_ll(&m, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(s.mean, -LN_2PI);
        assert_eq!(s.std_error, 0.0);
        assert!(dataset_ll(&m, &Matrix::zeros(0, 2)).is_err());

        let data = draw_standard_normal(&mut RngStream::new(6, 0), 100_000, 2);
        let s = dataset_ll(&m, &data).unwrap();
        assert!((s.mean + 2.837_877_066_409_345_3).abs() < 3.0 * s.std_error);
        let rev: Vec<usize> = (0..data.rows()).rev().collect();
        assert_eq!(dataset_ll(&m, &data.select_rows(&rev)).unwrap(), s);
    }

    #[test]
    fn grid_export_layout() {
        let m = gaussian_model([0.0, 0.0]);
        let grid = Grid2D::new([0.0, 0.0], [1.0, 1.0], 3).unwrap();
        let g = export_density_grid(&m, None, &grid).unwrap();
        let csv = g.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x1,x2,log_p_model");
        assert_eq!(lines.len(), 10);
        let coords = [1.0 / 6.0, 0.5, 5.0 / 6.0];
        for (k, line) in lines[1..].iter().enumerate() {
            let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert!((v[0] - coords[k / 3]).abs() < 1e-15);
            assert!((v[1] - coords[k % 3]).abs() < 1e-15);
            assert_eq!(v[2], m.log_prob_one(&[v[0], v[1]]).unwrap());
        }
        let with_target = export_density_grid(&m, Some(&ModelDensity(m.clone())), &grid).unwrap();
        assert!(with_target.to_csv().starts_with("x1,x2,log_p_model,log_p_target\n"));
    }
}
