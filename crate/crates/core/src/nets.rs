//! Fully connected networks with explicit forward caches and reverse-mode
//! gradient accumulation.
//!
//! Parameters are kept in one flat vector. Layer `l` contributes its weight
//! matrix (`fan_in × fan_out`, row-major, so `W[k][j]` maps input `k` to output
//! `j`) followed by its bias vector; layers appear from input to output.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, FlowError, Result};
use crate::matrix::Matrix;
use crate::numerics::sigmoid;
use crate::rng::RngStream;

/// Sigmoid outputs are kept inside `[SIGMOID_FLOOR, 1 − SIGMOID_FLOOR]`.
pub const SIGMOID_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_head: OutputHead,
    pub dropout_rate: f64,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_layers: usize,
        hidden_units: usize,
        output_dim: usize,
        hidden_activation: Activation,
        output_head: OutputHead,
    ) -> Self {
        Self {
            input_dim,
            hidden_layers,
            hidden_units,
            output_dim,
            hidden_activation,
            output_head,
            dropout_rate: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(FlowError::InvalidParameter(
                "network input and output dimensions must be positive".into(),
            ));
        }
        if self.hidden_layers > 0 && self.hidden_units == 0 {
            return Err(FlowError::InvalidParameter(
                "hidden layers need a positive unit count".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(FlowError::InvalidParameter(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden_units));
            fan_in = self.hidden_units;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
    offsets: Vec<usize>,
    id: u64,
}

/// Activations recorded by a forward pass, valid only for the parameter
/// version and input that produced them.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    id: u64,
    /// Input of every affine layer (post-dropout for hidden layers).
    inputs: Vec<Matrix>,
    /// Hidden activations before dropout, when dropout was applied.
    undropped: Vec<Option<Matrix>>,
    /// Dropout scale per hidden entry (0 or 1/(1−rate)).
    masks: Vec<Option<Vec<f64>>>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn rows(&self) -> usize {
        self.output.rows()
    }
}

fn affine(input: &Matrix, w: &[f64], b: &[f64], fan_out: usize) -> Matrix {
    let n = input.rows();
    let mut out = Matrix::zeros(n, fan_out);
    for r in 0..n {
        let orow = out.row_mut(r);
        orow.copy_from_slice(b);
        for (k, &xk) in input.row(r).iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let wrow = &w[k * fan_out..(k + 1) * fan_out];
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += xk * wv;
            }
        }
    }
    out
}

impl Mlp {
    /// Hidden weights uniform in `±√(6/(fan_in+fan_out))`, all biases zero and
    /// the final layer zeroed, so a sigmoid head starts at exactly 0.5 and a
    /// linear head at exactly 0.
    pub fn new(spec: MlpSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut net = Self::zeros(spec)?;
        let dims = net.spec.layer_dims();
        for (l, &(fi, fo)) in dims.iter().enumerate().take(dims.len() - 1) {
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            let off = net.offsets[l];
            for w in &mut net.params[off..off + fi * fo] {
                *w = bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        Ok(net)
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut offsets = Vec::new();
        let mut total = 0;
        for (i, o) in spec.layer_dims() {
            offsets.push(total);
            total += i * o + o;
        }
        Ok(Self {
            spec,
            params: vec![0.0; total],
            offsets,
            id: fresh_id(),
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim(self.params.len(), p.len())?;
        self.params.copy_from_slice(p);
        self.id = fresh_id();
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.offsets.len()
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        let (fi, fo) = self.spec.layer_dims()[layer];
        &self.params[self.offsets[layer]..self.offsets[layer] + fi * fo]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (fi, fo) = self.spec.layer_dims()[layer];
        let s = self.offsets[layer] + fi * fo;
        &self.params[s..s + fo]
    }

    /// Structured view: `(weights, bias)` per layer.
    pub fn layers(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..self.num_layers())
            .map(|l| (self.weight(l).to_vec(), self.bias(l).to_vec()))
            .collect()
    }

    /// Rebuilds the flat vector from a structured view.
    pub fn set_layers(&mut self, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        check_dim(self.num_layers(), layers.len())?;
        let mut flat = Vec::with_capacity(self.params.len());
        for (l, (w, b)) in layers.iter().enumerate() {
            let (fi, fo) = self.spec.layer_dims()[l];
            check_dim(fi * fo, w.len())?;
            check_dim(fo, b.len())?;
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        self.set_params(&flat)
    }

    fn head(&self, out: &mut Matrix) {
        if self.spec.output_head == OutputHead::Sigmoid {
            for v in out.as_mut_slice() {
                *v = sigmoid(*v).clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR);
            }
        }
    }

    fn activate(&self, m: &mut Matrix) {
        match self.spec.hidden_activation {
            Activation::Tanh => m.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Relu => m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0)),
        }
    }

    /// Forward pass recording a cache for [`Mlp::backward`]. `rng` is needed
    /// only in train mode with a positive dropout rate.
    pub fn forward(&self, x: &Matrix, mode: Mode, mut rng: Option<&mut RngStream>) -> Result<(Matrix, ForwardCache)> {
        check_dim(self.spec.input_dim, x.cols())?;
        let dims = self.spec.layer_dims();
        let dropout = mode == Mode::Train && self.spec.dropout_rate > 0.0;
        if dropout && rng.is_none() {
            return Err(FlowError::InvalidParameter(
                "dropout in train mode requires a random stream".into(),
            ));
        }
        let keep_scale = 1.0 / (1.0 - self.spec.dropout_rate);
        let mut inputs = Vec::with_capacity(dims.len());
        let mut undropped = Vec::with_capacity(dims.len());
        let mut masks = Vec::with_capacity(dims.len());
        let mut h = x.clone();
        for (l, &(_, fo)) in dims.iter().enumerate() {
            let mut next = affine(&h, self.weight(l), self.bias(l), fo);
            inputs.push(h);
            if l + 1 < dims.len() {
                self.activate(&mut next);
                if dropout {
                    let r = rng.as_deref_mut().expect("checked above");
                    let mask: Vec<f64> = (0..next.as_slice().len())
                        .map(|_| {
                            if r.uniform() < self.spec.dropout_rate {
                                0.0
                            } else {
                                keep_scale
                            }
                        })
                        .collect();
                    let raw = next.clone();
                    for (v, m) in next.as_mut_slice().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    undropped.push(Some(raw));
                    masks.push(Some(mask));
                } else {
                    undropped.push(None);
                    masks.push(None);
                }
            } else {
                self.head(&mut next);
            }
            h = next;
        }
        let cache = ForwardCache {
            id: self.id,
            inputs,
            undropped,
            masks,
            output: h.clone(),
        };
        Ok((h, cache))
    }

    /// Forward pass without a cache (eval mode, dropout off).
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        check_dim(self.spec.input_dim, x.cols())?;
        let dims = self.spec.layer_dims();
        let mut h = affine(x, self.weight(0), self.bias(0), dims[0].1);
        for (l, &(_, fo)) in dims.iter().enumerate().skip(1) {
            self.activate(&mut h);
            h = affine(&h, self.weight(l), self.bias(l), fo);
        }
        self.head(&mut h);
        Ok(h)
    }

    /// Single-input evaluation.
    pub fn eval_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward_eval(&m)?.into_vec())
    }

    /// Reverse-mode pass for `⟨cotangent, output⟩`. Parameter gradients are
    /// added into `grads` (so repeated calls accumulate); the input gradient
    /// is returned.
    pub fn backward(&self, cache: &ForwardCache, cotangent: &Matrix, grads: &mut [f64]) -> Result<Matrix> {
        Ok(self
            .backward_impl(cache, cotangent, grads, true)?
            .expect("input gradient requested"))
    }

    /// As [`Mlp::backward`] but skips the input gradient.
    pub fn backward_params(&self, cache: &ForwardCache, cotangent: &Matrix, grads: &mut [f64]) -> Result<()> {
        self.backward_impl(cache, cotangent, grads, false)?;
        Ok(())
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        cotangent: &Matrix,
        grads: &mut [f64],
        want_input: bool,
    ) -> Result<Option<Matrix>> {
        if cache.id != self.id || cache.inputs.len() != self.num_layers() {
            return Err(FlowError::StaleCache);
        }
        check_dim(self.params.len(), grads.len())?;
        check_dim(cache.output.rows(), cotangent.rows())?;
        check_dim(self.spec.output_dim, cotangent.cols())?;
        let dims = self.spec.layer_dims();
        let last = dims.len() - 1;

        // cotangent of the final pre-activation
        let mut delta = cotangent.clone();
        if self.spec.output_head == OutputHead::Sigmoid {
            for (d, &y) in delta.as_mut_slice().iter_mut().zip(cache.output.as_slice()) {
                let clamped = y <= SIGMOID_FLOOR || y >= 1.0 - SIGMOID_FLOOR;
                *d *= if clamped { 0.0 } else { y * (1.0 - y) };
            }
        }

        for l in (0..=last).rev() {
            let (fi, fo) = dims[l];
            let input = &cache.inputs[l];
            let off = self.offsets[l];
            {
                let (gw, gb) = grads[off..off + fi * fo + fo].split_at_mut(fi * fo);
                for r in 0..input.rows() {
                    let drow = delta.row(r);
                    for (g, d) in gb.iter_mut().zip(drow) {
                        *g += d;
                    }
                    for (k, &a) in input.row(r).iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        for (g, d) in gw[k * fo..(k + 1) * fo].iter_mut().zip(drow) {
                            *g += a * d;
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                return Ok(None);
            }
            // d input = delta · Wᵀ, accumulated over output units so the
            // inner loop runs over contiguous input entries
            let w = self.weight(l);
            let mut wt = vec![0.0; fi * fo];
            for k in 0..fi {
                for j in 0..fo {
                    wt[j * fi + k] = w[k * fo + j];
                }
            }
            let mut din = Matrix::zeros(input.rows(), fi);
            for r in 0..input.rows() {
                let drow = delta.row(r);
                let out = din.row_mut(r);
                for (j, &d) in drow.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (o, wv) in out.iter_mut().zip(&wt[j * fi..(j + 1) * fi]) {
                        *o += d * wv;
                    }
                }
            }
            if l == 0 {
                return Ok(Some(din));
            }
            // through dropout and the hidden activation of layer l-1
            let h = l - 1;
            let act_out = cache.undropped[h].as_ref().unwrap_or(&cache.inputs[l]);
            if let Some(mask) = &cache.masks[h] {
                for (v, m) in din.as_mut_slice().iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            match self.spec.hidden_activation {
                Activation::Tanh => {
                    for (v, &y) in din.as_mut_slice().iter_mut().zip(act_out.as_slice()) {
                        *v *= 1.0 - y * y;
                    }
                }
                Activation::Relu => {
                    for (v, &y) in din.as_mut_slice().iter_mut().zip(act_out.as_slice()) {
                        if y <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
            delta = din;
        }
        unreachable!("loop returns at layer 0")
    }
}
