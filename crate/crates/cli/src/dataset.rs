//! Numeric CSV ingestion with a seeded train/validation/test split.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use lars_flows::rng::RngStream;
use lars_flows::Matrix;

/// Stream id used for the split shuffle.
const SPLIT_STREAM: u64 = 0x5017;

/// Per-column affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Mean and population standard deviation of every column; columns with
    /// zero spread keep a scale of 1.
    pub fn fit(data: &Matrix) -> Self {
        let n = data.rows() as f64;
        let mean = data.column_means();
        let mut std = vec![0.0; data.cols()];
        for row in data.iter_rows() {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if !(*s > 0.0) {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, data: &Matrix) -> Matrix {
        let mut out = data.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, data: &Matrix) -> Matrix {
        let mut out = data.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }

    /// `log |det|` of the map from data units to standardized units.
    pub fn log_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Matrix,
    pub val: Matrix,
    pub test: Matrix,
    pub standardization: Option<Standardization>,
}

/// Reads a rectangular numeric CSV. Row and column indices in errors are
/// 1-based and count the header line if present.
pub fn read_numeric_csv(path: &Path, has_header: bool) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut data = Vec::new();
    let mut width = None;
    let offset = usize::from(has_header) + 1;
    for (i, rec) in reader.records().enumerate() {
        let line = i + offset;
        let rec = rec.with_context(|| format!("{}: unreadable row {line}", path.display()))?;
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                bail!("{}: row {line} has {} columns, expected {w}", path.display(), rec.len())
            }
            _ => {}
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                anyhow!(
                    "{}: row {line}, column {}: {cell:?} is not a number",
                    path.display(),
                    j + 1
                )
            })?;
            if !v.is_finite() {
                bail!("{}: row {line}, column {}: value is not finite", path.display(), j + 1);
            }
            data.push(v);
        }
    }
    let w = width.ok_or_else(|| anyhow!("{}: no data rows", path.display()))?;
    if w == 0 {
        bail!("{}: rows have no columns", path.display());
    }
    Ok(Matrix::from_vec(data.len() / w, w, data)?)
}

/// Sizes of the three parts: train and validation sizes are rounded, the
/// test part takes the rest.
pub fn split_sizes(n: usize, split: [f64; 3]) -> [usize; 3] {
    let train = ((split[0] * n as f64).round() as usize).min(n);
    let val = ((split[1] * n as f64).round() as usize).min(n - train);
    [train, val, n - train - val]
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = RngStream::new(seed, SPLIT_STREAM);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        p.swap(i, j);
    }
    p
}

/// Loads, shuffles and splits a dataset; standardization statistics come
/// from the training part only and are applied to all three parts.
pub fn load_csv_dataset(
    path: &Path,
    has_header: bool,
    standardize: bool,
    split: [f64; 3],
    seed: u64,
) -> Result<Dataset> {
    if split.iter().any(|f| !(*f >= 0.0)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        bail!("split fractions {split:?} must be non-negative and sum to 1");
    }
    let all = read_numeric_csv(path, has_header)?;
    let perm = shuffled_indices(all.rows(), seed);
    let [a, b, _] = split_sizes(all.rows(), split);
    let train = all.select_rows(&perm[..a]);
    let val = all.select_rows(&perm[a..a + b]);
    let test = all.select_rows(&perm[a + b..]);
    if train.rows() == 0 {
        bail!("{}: training split is empty", path.display());
    }
    if !standardize {
        return Ok(Dataset {
            train,
            val,
            test,
            standardization: None,
        });
    }
    let st = Standardization::fit(&train);
    Ok(Dataset {
        train: st.apply(&train),
        val: st.apply(&val),
        test: st.apply(&test),
        standardization: Some(st),
    })
}
