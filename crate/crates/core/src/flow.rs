//! Flow models: a base distribution pushed through a stack of invertible
//! layers listed in base-to-data order.

use crate::base::{AcceptanceNet, Base, BaseTrace, GaussianMixture, ResampledBase, StandardGaussian};
use crate::error::{check_dim, FlowError, Result};
use crate::exec::{map_chunks, map_indexed, tree_sum, CHUNK_ROWS};
use crate::layers::{alternating_mask, AffineConstant, CouplingLayer, Direction, InvertibleLinear, Layer, LayerCache};
use crate::matrix::Matrix;
use crate::nets::{Activation, Mode};
use crate::rng::{RngStream, StreamFamily};

#[derive(Clone, Debug)]
pub struct FlowModel {
    base: Base,
    layers: Vec<Layer>,
}

/// Which base distribution a built model starts from.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseKind {
    Gaussian,
    Mixture {
        components: usize,
    },
    Resampled {
        acceptance: AcceptanceNet,
        truncation: u32,
        /// Number of equally sized factors; 1 gives a single resampled base.
        groups: usize,
    },
}

/// Real NVP stack layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowArch {
    pub coupling_layers: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub activation: Activation,
    /// Insert a learned invertible linear map after every pair of couplings.
    pub linear_between_pairs: bool,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            coupling_layers: 16,
            hidden_layers: 2,
            hidden_units: 32,
            activation: Activation::Tanh,
            linear_between_pairs: true,
        }
    }
}

/// Cached values of one traced pass over a row chunk.
#[derive(Clone, Debug)]
struct ChunkTrace {
    rows: usize,
    caches: Vec<(usize, LayerCache)>,
    base: Option<BaseTrace>,
}

/// Cached values of a traced pass, needed by [`FlowModel::backward`].
#[derive(Clone, Debug)]
pub struct FlowTrace {
    direction: Direction,
    chunks: Vec<ChunkTrace>,
}

impl FlowTrace {
    pub fn rows(&self) -> usize {
        self.chunks.iter().map(|c| c.rows).sum()
    }
}

/// Result of [`FlowModel::backward`].
#[derive(Clone, Debug)]
pub struct FlowGrad {
    /// Gradient over the flat parameter vector.
    pub params: Vec<f64>,
    /// Cotangent of the pass input (data side for log-prob traces, base side
    /// for forward traces).
    pub input: Matrix,
    /// Coefficients of `∂/∂Z_k` for a resampled base (empty otherwise).
    pub z_value: Vec<f64>,
}

/// Draws from [`FlowModel::sample`].
#[derive(Clone, Debug)]
pub struct FlowSamples {
    pub x: Matrix,
    pub log_prob: Vec<f64>,
    pub attempts: Vec<u32>,
}

fn overflow_check(m: &Matrix, layer: usize) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(FlowError::NumericalOverflow { layer })
    }
}

impl FlowModel {
    pub fn new(base: Base, layers: Vec<Layer>) -> Result<Self> {
        let d = base.dim();
        for l in &layers {
            check_dim(d, l.dim())?;
        }
        Ok(Self { base, layers })
    }

    /// Builds a real NVP model. A constant affine layer follows the base;
    /// then `arch.coupling_layers` couplings with alternating masks.
    pub fn real_nvp(dim: usize, base: &BaseKind, arch: &FlowArch, rng: &mut RngStream) -> Result<Self> {
        if dim < 2 && arch.coupling_layers > 0 {
            return Err(FlowError::InvalidParameter("coupling layers need dim ≥ 2".into()));
        }
        let base = match base {
            BaseKind::Gaussian => Base::Gaussian(StandardGaussian::new(dim)),
            BaseKind::Mixture { components } => Base::Mixture(GaussianMixture::init(*components, dim, rng)?),
            BaseKind::Resampled {
                acceptance,
                truncation,
                groups,
            } => {
                if *groups == 0 || dim % groups != 0 {
                    return Err(FlowError::InvalidParameter(format!(
                        "{groups} groups do not divide dimension {dim}"
                    )));
                }
                Base::Resampled(ResampledBase::grouped(
                    *groups,
                    dim / groups,
                    *acceptance,
                    *truncation,
                    rng,
                )?)
            }
        };
        let mut layers = vec![Layer::Affine(AffineConstant::identity(dim))];
        for i in 0..arch.coupling_layers {
            layers.push(Layer::Coupling(CouplingLayer::new(
                alternating_mask(dim, i),
                arch.hidden_layers,
                arch.hidden_units,
                arch.activation,
                rng,
            )?));
            if arch.linear_between_pairs && i % 2 == 1 && i + 1 < arch.coupling_layers {
                layers.push(Layer::Linear(InvertibleLinear::random_orthogonal(dim, rng)?));
            }
        }
        Self::new(base, layers)
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn base(&self) -> &Base {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut Base {
        &mut self.base
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Parameter ranges: base first, then each layer in order.
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut off = vec![0, self.base.num_params()];
        for l in &self.layers {
            off.push(off.last().copied().unwrap_or(0) + l.num_params());
        }
        off
    }

    pub fn num_params(&self) -> usize {
        *self.param_offsets().last().expect("non-empty offsets")
    }

    pub fn num_base_params(&self) -> usize {
        self.base.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.base.params();
        for l in &self.layers {
            p.extend(l.params());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let off = self.param_offsets();
        check_dim(off[off.len() - 1], p.len())?;
        self.base.set_params(&p[off[0]..off[1]])?;
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.set_params(&p[off[i + 1]..off[i + 2]])?;
        }
        Ok(())
    }

    /// `z = F⁻¹(x)` and the summed inverse-direction log-determinants.
    pub fn inverse(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        check_dim(self.dim(), x.cols())?;
        let mut z = x.clone();
        let mut ld = vec![0.0; x.rows()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (next, l) = layer.apply_eval(&z, Direction::Inverse)?;
            overflow_check(&next, i)?;
            for (a, b) in ld.iter_mut().zip(&l) {
                *a += b;
            }
            z = next;
        }
        Ok((z, ld))
    }

    /// `x = F(z)` and the summed forward log-determinants.
    pub fn forward(&self, z: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        check_dim(self.dim(), z.cols())?;
        let mut x = z.clone();
        let mut ld = vec![0.0; z.rows()];
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, l) = layer.apply_eval(&x, Direction::Forward)?;
            overflow_check(&next, i)?;
            for (a, b) in ld.iter_mut().zip(&l) {
                *a += b;
            }
            x = next;
        }
        Ok((x, ld))
    }

    /// `log p(x) = log p_base(F⁻¹(x)) + Σ inverse log-dets`, evaluated in
    /// parallel over row chunks.
    pub fn log_prob(&self, x: &Matrix) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.cols())?;
        let parts = map_chunks(x.rows(), |r| -> Result<Vec<f64>> {
            let (z, ld) = self.inverse(&x.slice_rows(r.start, r.end))?;
            let lp = self.base.log_prob_batch(&z)?;
            Ok(lp.iter().zip(&ld).map(|(a, b)| a + b).collect())
        });
        let mut out = Vec::with_capacity(x.rows());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn log_prob_one(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_prob(&Matrix::from_vec(1, x.len(), x.to_vec())?)?[0])
    }

    /// Traced version of [`FlowModel::log_prob`]. In train mode the
    /// acceptance network's dropout draws from child streams of `rng`.
    pub fn log_prob_traced(
        &self,
        x: &Matrix,
        mode: Mode,
        rng: Option<&mut RngStream>,
    ) -> Result<(Vec<f64>, FlowTrace)> {
        check_dim(self.dim(), x.cols())?;
        let family = rng.map(|r| r.fork());
        let ranges = crate::exec::chunk_ranges(x.rows(), CHUNK_ROWS);
        let parts = map_indexed(ranges.len(), |c| -> Result<(Vec<f64>, ChunkTrace)> {
            let r = &ranges[c];
            let mut z = x.slice_rows(r.start, r.end);
            let mut ld = vec![0.0; z.rows()];
            let mut caches = Vec::with_capacity(self.layers.len());
            for (i, layer) in self.layers.iter().enumerate().rev() {
                let (next, l, cache) = layer.apply(&z, Direction::Inverse)?;
                overflow_check(&next, i)?;
                for (a, b) in ld.iter_mut().zip(&l) {
                    *a += b;
                }
                caches.push((i, cache));
                z = next;
            }
            let mut stream = family.as_ref().map(|f: &StreamFamily| f.stream(c as u64));
            let (lp, base_trace) = self.base.log_prob_traced(&z, mode, stream.as_mut())?;
            let lp = lp.iter().zip(&ld).map(|(a, b)| a + b).collect();
            Ok((
                lp,
                ChunkTrace {
                    rows: z.rows(),
                    caches,
                    base: Some(base_trace),
                },
            ))
        });
        let mut lp = Vec::with_capacity(x.rows());
        let mut chunks = Vec::with_capacity(parts.len());
        for p in parts {
            let (l, t) = p?;
            lp.extend(l);
            chunks.push(t);
        }
        Ok((
            lp,
            FlowTrace {
                direction: Direction::Inverse,
                chunks,
            },
        ))
    }

    /// Traced `x = F(z)` with per-sample forward log-determinants.
    pub fn forward_traced(&self, z: &Matrix) -> Result<(Matrix, Vec<f64>, FlowTrace)> {
        check_dim(self.dim(), z.cols())?;
        let parts = map_chunks(z.rows(), |r| -> Result<(Matrix, Vec<f64>, ChunkTrace)> {
            let mut x = z.slice_rows(r.start, r.end);
            let mut ld = vec![0.0; x.rows()];
            let mut caches = Vec::with_capacity(self.layers.len());
            for (i, layer) in self.layers.iter().enumerate() {
                let (next, l, cache) = layer.apply(&x, Direction::Forward)?;
                overflow_check(&next, i)?;
                for (a, b) in ld.iter_mut().zip(&l) {
                    *a += b;
                }
                caches.push((i, cache));
                x = next;
            }
            let rows = x.rows();
            Ok((
                x,
                ld,
                ChunkTrace {
                    rows,
                    caches,
                    base: None,
                },
            ))
        });
        let mut xs = Vec::with_capacity(parts.len());
        let mut ld = Vec::with_capacity(z.rows());
        let mut chunks = Vec::with_capacity(parts.len());
        for p in parts {
            let (x, l, t) = p?;
            xs.push(x);
            ld.extend(l);
            chunks.push(t);
        }
        let x = if xs.is_empty() {
            Matrix::zeros(0, self.dim())
        } else {
            Matrix::vstack(&xs)
        };
        Ok((
            x,
            ld,
            FlowTrace {
                direction: Direction::Forward,
                chunks,
            },
        ))
    }

    /// Reverse pass. For a log-prob trace the objective is
    /// `Σ_b weights[b] · log p(x_b)` and `output_cot` must be `None`. For a
    /// forward trace it is `⟨output_cot, x⟩ + Σ_b weights[b] · logdet_b`.
    /// Per-chunk gradients are combined by a fixed pairwise tree.
    pub fn backward(&self, trace: &FlowTrace, output_cot: Option<&Matrix>, weights: &[f64]) -> Result<FlowGrad> {
        check_dim(trace.rows(), weights.len())?;
        if let Some(c) = output_cot {
            check_dim(trace.rows(), c.rows())?;
            check_dim(self.dim(), c.cols())?;
        }
        let off = self.param_offsets();
        let total = off[off.len() - 1];
        let nb = off[1];
        let starts: Vec<usize> = trace
            .chunks
            .iter()
            .scan(0, |s, c| {
                let st = *s;
                *s += c.rows;
                Some(st)
            })
            .collect();
        let parts = map_indexed(trace.chunks.len(), |c| -> Result<(Vec<f64>, Matrix)> {
            let chunk = &trace.chunks[c];
            let (start, end) = (starts[c], starts[c] + chunk.rows);
            let w = &weights[start..end];
            let mut grads = vec![0.0; total + self.z_len()];
            let mut cot = match trace.direction {
                Direction::Inverse => {
                    let bt = chunk.base.as_ref().ok_or(FlowError::StaleCache)?;
                    let bg = self.base.backward(bt, w, &mut grads[..nb])?;
                    grads[total..].copy_from_slice(&bg.dz_value);
                    bg.dz
                }
                Direction::Forward => match output_cot {
                    Some(m) => m.slice_rows(start, end),
                    None => Matrix::zeros(chunk.rows, self.dim()),
                },
            };
            // caches are stored in application order; undo them backwards
            for (i, cache) in chunk.caches.iter().rev() {
                let g = &mut grads[off[i + 1]..off[i + 2]];
                cot = self.layers[*i].backward(cache, &cot, w, g)?;
            }
            Ok((grads, cot))
        });
        let mut grads = Vec::with_capacity(parts.len());
        let mut cots = Vec::with_capacity(parts.len());
        for p in parts {
            let (g, c) = p?;
            grads.push(g);
            cots.push(c);
        }
        let mut params = tree_sum(grads).unwrap_or_else(|| vec![0.0; total + self.z_len()]);
        let z_value = params.split_off(total);
        let input = if cots.is_empty() {
            Matrix::zeros(0, self.dim())
        } else {
            Matrix::vstack(&cots)
        };
        Ok(FlowGrad { params, input, z_value })
    }

    fn z_len(&self) -> usize {
        self.base.as_resampled().map_or(0, |r| r.num_groups())
    }

    /// Draws `n` samples through the flow together with their log densities.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<FlowSamples> {
        if n == 0 {
            return Err(FlowError::InvalidParameter("sample count must be at least 1".into()));
        }
        let (z, attempts) = self.base.sample_batch(n, rng)?;
        let base_lp = self.base.log_prob_batch(&z)?;
        let (x, ld) = self.forward(&z)?;
        let log_prob = base_lp.iter().zip(&ld).map(|(a, b)| a - b).collect();
        Ok(FlowSamples { x, log_prob, attempts })
    }
}
