//! Invertible layers. Each layer maps the base side to the data side in the
//! forward direction and reports the per-sample log-determinant of the
//! direction it was applied in.

use crate::error::{check_dim, FlowError, Result};
use crate::matrix::Matrix;
use crate::nets::{Activation, ForwardCache, Mlp, MlpSpec, Mode, OutputHead};
use crate::rng::RngStream;

/// Scale outputs are squashed to `s_max · tanh(s / s_max)`.
pub const DEFAULT_SCALE_LIMIT: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Real NVP affine coupling. Coordinates with `mask[j] == true` pass through
/// unchanged and condition the scale and shift of the others.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    cond: Vec<usize>,
    rest: Vec<usize>,
    scale_net: Mlp,
    shift_net: Mlp,
    scale_limit: f64,
}

/// Alternating mask: coordinate `j` conditions when `j % 2 == parity % 2`.
pub fn alternating_mask(dim: usize, parity: usize) -> Vec<bool> {
    (0..dim).map(|j| j % 2 == parity % 2).collect()
}

impl CouplingLayer {
    pub fn new(
        mask: Vec<bool>,
        hidden_layers: usize,
        hidden_units: usize,
        activation: Activation,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let cond: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
        let rest: Vec<usize> = (0..mask.len()).filter(|&j| !mask[j]).collect();
        if cond.is_empty() || rest.is_empty() {
            return Err(FlowError::InvalidParameter(
                "coupling mask needs both conditioning and transformed coordinates".into(),
            ));
        }
        let spec = MlpSpec::new(
            cond.len(),
            hidden_layers,
            hidden_units,
            rest.len(),
            activation,
            OutputHead::Linear,
        );
        let scale_net = Mlp::new(spec.clone(), rng)?;
        let shift_net = Mlp::new(spec, rng)?;
        Ok(Self {
            mask,
            cond,
            rest,
            scale_net,
            shift_net,
            scale_limit: DEFAULT_SCALE_LIMIT,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn scale_limit(&self) -> f64 {
        self.scale_limit
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn shift_net(&self) -> &Mlp {
        &self.shift_net
    }

    fn gather(&self, x: &Matrix, idx: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(x.rows(), idx.len());
        for r in 0..x.rows() {
            let src = x.row(r);
            for (o, &j) in m.row_mut(r).iter_mut().zip(idx) {
                *o = src[j];
            }
        }
        m
    }

    /// Returns (squashed scale, tanh(s_raw / s_max), shift).
    fn scale_shift(&self, s_raw: &Matrix, t: Matrix) -> (Matrix, Matrix, Matrix) {
        let lim = self.scale_limit;
        let mut th = s_raw.clone();
        th.as_mut_slice().iter_mut().for_each(|v| *v = (*v / lim).tanh());
        let mut s = th.clone();
        s.as_mut_slice().iter_mut().for_each(|v| *v *= lim);
        (s, th, t)
    }

    fn transform(&self, x: &Matrix, s: &Matrix, t: &Matrix, dir: Direction) -> (Matrix, Vec<f64>) {
        let mut y = x.clone();
        let mut ld = vec![0.0; x.rows()];
        for r in 0..x.rows() {
            let (sr, tr) = (s.row(r), t.row(r));
            let row = y.row_mut(r);
            let mut acc = 0.0;
            for (k, &j) in self.rest.iter().enumerate() {
                row[j] = match dir {
                    Direction::Forward => row[j] * sr[k].exp() + tr[k],
                    Direction::Inverse => (row[j] - tr[k]) * (-sr[k]).exp(),
                };
                acc += sr[k];
            }
            ld[r] = if dir == Direction::Forward { acc } else { -acc };
        }
        (y, ld)
    }

    fn apply_eval(&self, x: &Matrix, dir: Direction) -> Result<(Matrix, Vec<f64>)> {
        let xc = self.gather(x, &self.cond);
        let s_raw = self.scale_net.forward_eval(&xc)?;
        let t = self.shift_net.forward_eval(&xc)?;
        let (s, _, t) = self.scale_shift(&s_raw, t);
        Ok(self.transform(x, &s, &t, dir))
    }

    fn apply(&self, x: &Matrix, dir: Direction) -> Result<(Matrix, Vec<f64>, LayerCache)> {
        let xc = self.gather(x, &self.cond);
        let (s_raw, s_cache) = self.scale_net.forward(&xc, Mode::Eval, None)?;
        let (t, t_cache) = self.shift_net.forward(&xc, Mode::Eval, None)?;
        let (s, th, t) = self.scale_shift(&s_raw, t);
        let (y, ld) = self.transform(x, &s, &t, dir);
        let cache = LayerCache::Coupling {
            dir,
            input: x.clone(),
            output: y.clone(),
            s,
            th,
            s_cache,
            t_cache,
        };
        Ok((y, ld, cache))
    }

    fn backward(&self, cache: &LayerCache, dy: &Matrix, dld: &[f64], grads: &mut [f64]) -> Result<Matrix> {
        let LayerCache::Coupling {
            dir,
            input,
            output,
            s,
            th,
            s_cache,
            t_cache,
        } = cache
        else {
            return Err(FlowError::StaleCache);
        };
        let n = input.rows();
        let r = self.rest.len();
        let mut dx = dy.clone();
        let mut ds_raw = Matrix::zeros(n, r);
        let mut dt = Matrix::zeros(n, r);
        for b in 0..n {
            let (sr, thr) = (s.row(b), th.row(b));
            let dyr = dy.row(b);
            let dxr = dx.row_mut(b);
            for (k, &j) in self.rest.iter().enumerate() {
                let ds = match dir {
                    Direction::Forward => {
                        let e = sr[k].exp();
                        dxr[j] = dyr[j] * e;
                        dt.set(b, k, dyr[j]);
                        dyr[j] * input.get(b, j) * e + dld[b]
                    }
                    Direction::Inverse => {
                        let e = (-sr[k]).exp();
                        dxr[j] = dyr[j] * e;
                        dt.set(b, k, -dyr[j] * e);
                        -dyr[j] * output.get(b, j) - dld[b]
                    }
                };
                ds_raw.set(b, k, ds * (1.0 - thr[k] * thr[k]));
            }
        }
        let ns = self.scale_net.num_params();
        let (gs, gt) = grads.split_at_mut(ns);
        let dc_s = self.scale_net.backward(s_cache, &ds_raw, gs)?;
        let dc_t = self.shift_net.backward(t_cache, &dt, gt)?;
        for b in 0..n {
            let row = dx.row_mut(b);
            for (k, &j) in self.cond.iter().enumerate() {
                row[j] += dc_s.get(b, k) + dc_t.get(b, k);
            }
        }
        Ok(dx)
    }
}

/// Learned invertible linear map `W = P L U` with a fixed permutation `P`,
/// unit lower-triangular `L` and upper-triangular `U` whose diagonal is
/// `sign · exp(log_abs_diag)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertibleLinear {
    dim: usize,
    /// `(P v)[i] = v[perm[i]]`
    perm: Vec<usize>,
    /// strict lower part of `L`, row-major over `i > j`
    lower: Vec<f64>,
    /// strict upper part of `U`, row-major over `i < j`
    upper: Vec<f64>,
    log_abs_diag: Vec<f64>,
    sign: Vec<f64>,
}

fn lower_index(i: usize, j: usize) -> usize {
    i * (i - 1) / 2 + j
}

fn upper_index(dim: usize, i: usize, j: usize) -> usize {
    // rows 0..i hold (dim-1) + (dim-2) + ... entries
    i * (2 * dim - i - 1) / 2 + (j - i - 1)
}

impl InvertibleLinear {
    /// Starts from the LU factorization of a random orthogonal matrix.
    pub fn random_orthogonal(dim: usize, rng: &mut RngStream) -> Result<Self> {
        if dim == 0 {
            return Err(FlowError::InvalidParameter("linear layer needs dim ≥ 1".into()));
        }
        // Gram-Schmidt on a Gaussian matrix, columns as the vectors
        let mut q = vec![0.0; dim * dim];
        for c in 0..dim {
            loop {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
                for _ in 0..2 {
                    for p in 0..c {
                        let dot: f64 = (0..dim).map(|r| q[r * dim + p] * v[r]).sum();
                        for (r, vr) in v.iter_mut().enumerate() {
                            *vr -= dot * q[r * dim + p];
                        }
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    for r in 0..dim {
                        q[r * dim + c] = v[r] / norm;
                    }
                    break;
                }
            }
        }
        Self::from_matrix(dim, &q)
    }

    /// LU factorization with partial pivoting of a dense row-major matrix.
    pub fn from_matrix(dim: usize, w: &[f64]) -> Result<Self> {
        check_dim(dim * dim, w.len())?;
        let mut a = w.to_vec();
        let mut piv: Vec<usize> = (0..dim).collect();
        for c in 0..dim {
            let p = (c..dim)
                .max_by(|&x, &y| a[x * dim + c].abs().total_cmp(&a[y * dim + c].abs()))
                .expect("non-empty range");
            if a[p * dim + c] == 0.0 {
                return Err(FlowError::InvalidParameter("singular matrix".into()));
            }
            if p != c {
                for k in 0..dim {
                    a.swap(c * dim + k, p * dim + k);
                }
                piv.swap(c, p);
            }
            for r in c + 1..dim {
                let f = a[r * dim + c] / a[c * dim + c];
                a[r * dim + c] = f;
                for k in c + 1..dim {
                    a[r * dim + k] -= f * a[c * dim + k];
                }
            }
        }
        // rows of (L U) are rows piv[i] of W, so W row k = (LU) row piv⁻¹[k]
        let mut perm = vec![0; dim];
        for (i, &p) in piv.iter().enumerate() {
            perm[p] = i;
        }
        let mut lower = vec![0.0; dim * dim.saturating_sub(1) / 2];
        let mut upper = vec![0.0; lower.len()];
        let mut log_abs_diag = vec![0.0; dim];
        let mut sign = vec![0.0; dim];
        for i in 0..dim {
            for j in 0..dim {
                let v = a[i * dim + j];
                if i > j {
                    lower[lower_index(i, j)] = v;
                } else if i < j {
                    upper[upper_index(dim, i, j)] = v;
                } else {
                    log_abs_diag[i] = v.abs().ln();
                    sign[i] = v.signum();
                }
            }
        }
        Ok(Self {
            dim,
            perm,
            lower,
            upper,
            log_abs_diag,
            sign,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fixed row permutation: `(P v)[i] = v[perm[i]]`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Fixed signs of `diag U`.
    pub fn signs(&self) -> &[f64] {
        &self.sign
    }

    /// Replaces the non-learnable part of the factorization.
    pub fn set_structure(&mut self, perm: Vec<usize>, sign: Vec<f64>) -> Result<()> {
        check_dim(self.dim, perm.len())?;
        check_dim(self.dim, sign.len())?;
        let mut seen = vec![false; self.dim];
        for &p in &perm {
            if p >= self.dim || seen[p] {
                return Err(FlowError::InvalidParameter("not a permutation".into()));
            }
            seen[p] = true;
        }
        if sign.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(FlowError::InvalidParameter("signs must be ±1".into()));
        }
        self.perm = perm;
        self.sign = sign;
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.lower.len() + self.upper.len() + self.dim
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.lower.clone();
        p.extend_from_slice(&self.upper);
        p.extend_from_slice(&self.log_abs_diag);
        p
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim(self.num_params(), p.len())?;
        let (nl, nu) = (self.lower.len(), self.upper.len());
        self.lower.copy_from_slice(&p[..nl]);
        self.upper.copy_from_slice(&p[nl..nl + nu]);
        self.log_abs_diag.copy_from_slice(&p[nl + nu..]);
        Ok(())
    }

    fn l_at(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.lower[lower_index(i, j)],
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => 0.0,
        }
    }

    fn u_at(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => self.upper[upper_index(self.dim, i, j)],
            std::cmp::Ordering::Equal => self.sign[i] * self.log_abs_diag[i].exp(),
            std::cmp::Ordering::Greater => 0.0,
        }
    }

    /// Dense `W = P L U`, row-major.
    pub fn matrix(&self) -> Vec<f64> {
        let d = self.dim;
        let mut lu = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                lu[i * d + j] = (0..=i.min(j)).map(|k| self.l_at(i, k) * self.u_at(k, j)).sum();
            }
        }
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d..(i + 1) * d].copy_from_slice(&lu[self.perm[i] * d..(self.perm[i] + 1) * d]);
        }
        w
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_abs_diag.iter().sum()
    }

    fn dense_factors(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut l = vec![0.0; d * d];
        let mut u = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                l[i * d + j] = self.l_at(i, j);
                u[i * d + j] = self.u_at(i, j);
            }
        }
        (l, u)
    }

    fn map_rows(&self, x: &Matrix, dir: Direction, keep_mid: bool) -> (Matrix, Option<Matrix>) {
        let d = self.dim;
        let (l, u) = self.dense_factors();
        let mut y = Matrix::zeros(x.rows(), d);
        let mut mid = keep_mid.then(|| Matrix::zeros(x.rows(), d));
        let mut v = vec![0.0; d];
        let mut w = vec![0.0; d];
        for b in 0..x.rows() {
            let xr = x.row(b);
            match dir {
                Direction::Forward => {
                    // v = U x, w = L v, y = P w
                    for i in 0..d {
                        v[i] = (i..d).map(|j| u[i * d + j] * xr[j]).sum();
                    }
                    for i in 0..d {
                        w[i] = v[i] + (0..i).map(|j| l[i * d + j] * v[j]).sum::<f64>();
                    }
                    let yr = y.row_mut(b);
                    for i in 0..d {
                        yr[i] = w[self.perm[i]];
                    }
                }
                Direction::Inverse => {
                    // w = Pᵀ x, solve L v = w, then U y = v
                    for i in 0..d {
                        w[self.perm[i]] = xr[i];
                    }
                    for i in 0..d {
                        v[i] = w[i] - (0..i).map(|j| l[i * d + j] * v[j]).sum::<f64>();
                    }
                    let yr = y.row_mut(b);
                    for i in (0..d).rev() {
                        let s: f64 = (i + 1..d).map(|j| u[i * d + j] * yr[j]).sum();
                        yr[i] = (v[i] - s) / u[i * d + i];
                    }
                }
            }
            if let Some(m) = mid.as_mut() {
                m.row_mut(b).copy_from_slice(&v);
            }
        }
        (y, mid)
    }

    fn signed_log_det(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Forward => self.log_abs_det(),
            Direction::Inverse => -self.log_abs_det(),
        }
    }

    fn apply_eval(&self, x: &Matrix, dir: Direction) -> Result<(Matrix, Vec<f64>)> {
        check_dim(self.dim, x.cols())?;
        let (y, _) = self.map_rows(x, dir, false);
        Ok((y, vec![self.signed_log_det(dir); x.rows()]))
    }

    fn apply(&self, x: &Matrix, dir: Direction) -> Result<(Matrix, Vec<f64>, LayerCache)> {
        check_dim(self.dim, x.cols())?;
        let (y, mid) = self.map_rows(x, dir, true);
        let (upper_in, upper_out) = match dir {
            Direction::Forward => (x.clone(), mid.expect("requested")),
            Direction::Inverse => (y.clone(), mid.expect("requested")),
        };
        let cache = LayerCache::Linear {
            dir,
            upper_in,
            upper_out,
        };
        Ok((y, vec![self.signed_log_det(dir); x.rows()], cache))
    }

    fn backward(&self, cache: &LayerCache, dy: &Matrix, dld: &[f64], grads: &mut [f64]) -> Result<Matrix> {
        let LayerCache::Linear {
            dir,
            upper_in,
            upper_out,
        } = cache
        else {
            return Err(FlowError::StaleCache);
        };
        let d = self.dim;
        let (l, u) = self.dense_factors();
        let (nl, nu) = (self.lower.len(), self.upper.len());
        let mut dx = Matrix::zeros(dy.rows(), d);
        let mut dw = vec![0.0; d];
        let mut dv = vec![0.0; d];
        for b in 0..dy.rows() {
            let dyr = dy.row(b);
            // u-side input `x` and mid `v` with v = U x, w = L v
            let (xr, vr) = (upper_in.row(b), upper_out.row(b));
            match dir {
                Direction::Forward => {
                    for i in 0..d {
                        dw[self.perm[i]] = dyr[i];
                    }
                    for j in 0..d {
                        dv[j] = dw[j] + (j + 1..d).map(|i| l[i * d + j] * dw[i]).sum::<f64>();
                    }
                    for i in 1..d {
                        for j in 0..i {
                            grads[lower_index(i, j)] += dw[i] * vr[j];
                        }
                    }
                    for i in 0..d {
                        for j in i + 1..d {
                            grads[nl + upper_index(d, i, j)] += dv[i] * xr[j];
                        }
                        grads[nl + nu + i] += dv[i] * xr[i] * u[i * d + i] + dld[b];
                    }
                    let out = dx.row_mut(b);
                    for j in 0..d {
                        out[j] = (0..=j).map(|i| u[i * d + j] * dv[i]).sum();
                    }
                }
                Direction::Inverse => {
                    // output x = U⁻¹ v: solve Uᵀ dv = dx
                    for j in 0..d {
                        let s: f64 = (0..j).map(|i| u[i * d + j] * dv[i]).sum();
                        dv[j] = (dyr[j] - s) / u[j * d + j];
                    }
                    for i in 0..d {
                        for j in i + 1..d {
                            grads[nl + upper_index(d, i, j)] -= dv[i] * xr[j];
                        }
                        grads[nl + nu + i] -= dv[i] * xr[i] * u[i * d + i] + dld[b];
                    }
                    // v = L⁻¹ w: solve Lᵀ dw = dv
                    for j in (0..d).rev() {
                        let s: f64 = (j + 1..d).map(|i| l[i * d + j] * dw[i]).sum();
                        dw[j] = dv[j] - s;
                    }
                    for i in 1..d {
                        for j in 0..i {
                            grads[lower_index(i, j)] -= dw[i] * vr[j];
                        }
                    }
                    let out = dx.row_mut(b);
                    for i in 0..d {
                        out[i] = dw[self.perm[i]];
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Elementwise `x = exp(log_scale) ⊙ z + shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineConstant {
    log_scale: Vec<f64>,
    shift: Vec<f64>,
}

impl AffineConstant {
    pub fn identity(dim: usize) -> Self {
        Self {
            log_scale: vec![0.0; dim],
            shift: vec![0.0; dim],
        }
    }

    pub fn new(log_scale: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        check_dim(log_scale.len(), shift.len())?;
        Ok(Self { log_scale, shift })
    }

    pub fn log_scale(&self) -> &[f64] {
        &self.log_scale
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    fn apply_eval(&self, x: &Matrix, dir: Direction) -> Result<(Matrix, Vec<f64>)> {
        check_dim(self.log_scale.len(), x.cols())?;
        let mut y = x.clone();
        for b in 0..x.rows() {
            for ((v, &ls), &sh) in y.row_mut(b).iter_mut().zip(&self.log_scale).zip(&self.shift) {
                *v = match dir {
                    Direction::Forward => *v * ls.exp() + sh,
                    Direction::Inverse => (*v - sh) * (-ls).exp(),
                };
            }
        }
        let s: f64 = self.log_scale.iter().sum();
        let ld = if dir == Direction::Forward { s } else { -s };
        Ok((y, vec![ld; x.rows()]))
    }

    fn backward(&self, cache: &LayerCache, dy: &Matrix, dld: &[f64], grads: &mut [f64]) -> Result<Matrix> {
        let LayerCache::Affine { dir, input, output } = cache else {
            return Err(FlowError::StaleCache);
        };
        let d = self.log_scale.len();
        let mut dx = dy.clone();
        for b in 0..dy.rows() {
            let dyr = dy.row(b);
            let out = dx.row_mut(b);
            for j in 0..d {
                let ls = self.log_scale[j];
                match dir {
                    Direction::Forward => {
                        let e = ls.exp();
                        out[j] = dyr[j] * e;
                        grads[j] += dyr[j] * e * input.get(b, j) + dld[b];
                        grads[d + j] += dyr[j];
                    }
                    Direction::Inverse => {
                        let e = (-ls).exp();
                        out[j] = dyr[j] * e;
                        grads[j] -= dyr[j] * output.get(b, j) + dld[b];
                        grads[d + j] -= dyr[j] * e;
                    }
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Coupling(CouplingLayer),
    Linear(InvertibleLinear),
    Affine(AffineConstant),
}

/// Values recorded by [`Layer::apply`] for [`Layer::backward`].
#[derive(Clone, Debug)]
pub enum LayerCache {
    Coupling {
        dir: Direction,
        input: Matrix,
        output: Matrix,
        s: Matrix,
        th: Matrix,
        s_cache: ForwardCache,
        t_cache: ForwardCache,
    },
    Linear {
        dir: Direction,
        upper_in: Matrix,
        upper_out: Matrix,
    },
    Affine {
        dir: Direction,
        input: Matrix,
        output: Matrix,
    },
}

impl Layer {
    pub fn dim(&self) -> usize {
        match self {
            Layer::Coupling(c) => c.mask.len(),
            Layer::Linear(l) => l.dim,
            Layer::Affine(a) => a.log_scale.len(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Layer::Coupling(c) => c.scale_net.num_params() + c.shift_net.num_params(),
            Layer::Linear(l) => l.num_params(),
            Layer::Affine(a) => 2 * a.log_scale.len(),
        }
    }

    /// Flat parameters. Coupling: scale net then shift net. Linear: strict
    /// lower of `L`, strict upper of `U`, log-magnitudes of `diag U`.
    /// Affine: log-scale then shift.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Layer::Coupling(c) => {
                let mut p = c.scale_net.params().to_vec();
                p.extend_from_slice(c.shift_net.params());
                p
            }
            Layer::Linear(l) => l.params(),
            Layer::Affine(a) => {
                let mut p = a.log_scale.clone();
                p.extend_from_slice(&a.shift);
                p
            }
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim(self.num_params(), p.len())?;
        match self {
            Layer::Coupling(c) => {
                let ns = c.scale_net.num_params();
                c.scale_net.set_params(&p[..ns])?;
                c.shift_net.set_params(&p[ns..])
            }
            Layer::Linear(l) => l.set_params(p),
            Layer::Affine(a) => {
                let d = a.log_scale.len();
                a.log_scale.copy_from_slice(&p[..d]);
                a.shift.copy_from_slice(&p[d..]);
                Ok(())
            }
        }
    }

    /// Output and per-sample log-determinant, without a cache.
    pub fn apply_eval(&self, x: &Matrix, dir: Direction) -> Result<(Matrix, Vec<f64>)> {
        check_dim(self.dim(), x.cols())?;
        match self {
            Layer::Coupling(c) => c.apply_eval(x, dir),
            Layer::Linear(l) => l.apply_eval(x, dir),
            Layer::Affine(a) => a.apply_eval(x, dir),
        }
    }

    /// Output, per-sample log-determinant and the cache for [`Layer::backward`].
    pub fn apply(&self, x: &Matrix, dir: Direction) -> Result<(Matrix, Vec<f64>, LayerCache)> {
        check_dim(self.dim(), x.cols())?;
        match self {
            Layer::Coupling(c) => c.apply(x, dir),
            Layer::Linear(l) => l.apply(x, dir),
            Layer::Affine(a) => {
                let (y, ld) = a.apply_eval(x, dir)?;
                let cache = LayerCache::Affine {
                    dir,
                    input: x.clone(),
                    output: y.clone(),
                };
                Ok((y, ld, cache))
            }
        }
    }

    /// Given cotangents of the output (`dy`) and of the per-sample
    /// log-determinant (`dld`), adds parameter gradients into `grads` and
    /// returns the input cotangent.
    pub fn backward(&self, cache: &LayerCache, dy: &Matrix, dld: &[f64], grads: &mut [f64]) -> Result<Matrix> {
        check_dim(self.num_params(), grads.len())?;
        check_dim(self.dim(), dy.cols())?;
        check_dim(dy.rows(), dld.len())?;
        match self {
            Layer::Coupling(c) => c.backward(cache, dy, dld, grads),
            Layer::Linear(l) => l.backward(cache, dy, dld, grads),
            Layer::Affine(a) => a.backward(cache, dy, dld, grads),
        }
    }
}
