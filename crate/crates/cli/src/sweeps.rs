//! Sweeps over the rejection-rate penalty and the acceptance-network size.
//! Runs are independent and may execute concurrently; each writes to its
//! own subdirectory.

use std::fmt::Write as _;

use anyhow::Result;

use lars_flows::exec::map_indexed;

use crate::config::{BaseSection, ExperimentConfig};
use crate::error::ConfigError;
use crate::experiment::{run_training, RunSummary};
use crate::manifest::{write_atomic, write_manifest};

pub const ZSWEEP_FILE: &str = "zsweep.csv";
pub const ZSWEEP_RUNS_FILE: &str = "zsweep_runs.csv";
pub const ARCHSWEEP_FILE: &str = "archsweep.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct ZSweepRow {
    pub lambda: f64,
    /// Seed average of the final `Z`.
    pub final_z: f64,
    /// Seed average of the final quadrature KL divergence (targets only).
    pub final_kld: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains one model per `(λ_Z, seed)` pair. Results are written to
/// `zsweep.csv` (`lambda,final_Z,final_kld`, one row per λ) and
/// `zsweep_runs.csv` (one row per run) in the config's output directory.
pub fn zsweep(cfg: &ExperimentConfig, lambdas: &[f64], seeds: &[u64]) -> Result<Vec<ZSweepRow>> {
    if lambdas.is_empty() {
        return Err(ConfigError::new("--lambdas", "at least one value is required").into());
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(ConfigError::new("--lambdas", format!("{l} is not a non-negative number")).into());
    }
    let seeds = if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    };
    let runs: Vec<(usize, u64)> = (0..lambdas.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let root = cfg.output_dir.join("zsweep");
    let results: Vec<Result<RunSummary>> = map_indexed(runs.len(), |r| {
        let (i, seed) = runs[r];
        let mut c = cfg.clone();
        c.seed = seed;
        c.train.lambda_z = lambdas[i];
        c.output_dir = root.join(format!("lambda_{i}_seed_{seed}"));
        run_training(&c)
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut per_run = String::from("lambda,seed,final_Z,final_kld\n");
    for ((i, seed), s) in runs.iter().zip(&results) {
        writeln!(
            per_run,
            "{:?},{seed},{:?},{}",
            lambdas[*i],
            s.final_z,
            opt(s.metric("kld"))
        )
        .unwrap();
    }
    let rows: Vec<ZSweepRow> = lambdas
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let mine: Vec<&RunSummary> = runs
                .iter()
                .zip(&results)
                .filter(|((j, _), _)| *j == i)
                .map(|(_, s)| s)
                .collect();
            let z: Vec<f64> = mine.iter().map(|s| s.final_z).collect();
            let kld: Option<Vec<f64>> = mine.iter().map(|s| s.metric("kld")).collect();
            ZSweepRow {
                lambda,
                final_z: mean(&z),
                final_kld: kld.map(|k| mean(&k)),
            }
        })
        .collect();
    let mut table = String::from("lambda,final_Z,final_kld\n");
    for r in &rows {
        writeln!(table, "{:?},{:?},{}", r.lambda, r.final_z, opt(r.final_kld)).unwrap();
    }
    write_atomic(&cfg.output_dir.join(ZSWEEP_FILE), table.as_bytes())?;
    write_atomic(&cfg.output_dir.join(ZSWEEP_RUNS_FILE), per_run.as_bytes())?;
    write_manifest(&cfg.output_dir)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSweepRow {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub final_z: f64,
    /// `kld` for a target, `test_ll` (or `val_ll`) for a dataset.
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

/// Trains one model per acceptance-network `(layers, units)` pair, all with
/// the config's seed so every run sees the same data split and batches.
/// Writes `archsweep.csv` in the config's output directory.
pub fn archsweep(cfg: &ExperimentConfig, layers: &[usize], units: &[usize]) -> Result<Vec<ArchSweepRow>> {
    if !matches!(cfg.model.base, BaseSection::Resampled { .. }) {
        return Err(ConfigError::new("model.base.kind", "archsweep needs a resampled base").into());
    }
    if layers.is_empty() || units.is_empty() {
        return Err(ConfigError::new("--layers/--units", "at least one value each is required").into());
    }
    if units.contains(&0) {
        return Err(ConfigError::new("--units", "must be positive").into());
    }
    let pairs: Vec<(usize, usize)> = layers
        .iter()
        .flat_map(|&l| units.iter().map(move |&u| (l, u)))
        .collect();
    let root = cfg.output_dir.join("archsweep");
    let results: Vec<Result<RunSummary>> = map_indexed(pairs.len(), |i| {
        let (l, u) = pairs[i];
        let mut c = cfg.clone();
        if let BaseSection::Resampled { acceptance, .. } = &mut c.model.base {
            acceptance.hidden_layers = l;
            acceptance.hidden_units = u;
        }
        c.output_dir = root.join(format!("layers_{l}_units_{u}"));
        run_training(&c)
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let rows: Vec<ArchSweepRow> = pairs
        .iter()
        .zip(&results)
        .map(|(&(l, u), s)| {
            let m = ["kld", "test_ll", "val_ll"]
                .iter()
                .find_map(|name| s.metrics.iter().find(|r| r.metric == *name))
                .cloned();
            ArchSweepRow {
                hidden_layers: l,
                hidden_units: u,
                final_z: s.final_z,
                metric: m.as_ref().map_or(String::new(), |r| r.metric.clone()),
                value: m.as_ref().map_or(f64::NAN, |r| r.value),
                stderr: m.and_then(|r| r.stderr),
            }
        })
        .collect();
    let mut table = String::from("hidden_layers,hidden_units,final_Z,metric,value,stderr\n");
    for r in &rows {
        writeln!(
            table,
            "{},{},{:?},{},{:?},{}",
            r.hidden_layers,
            r.hidden_units,
            r.final_z,
            r.metric,
            r.value,
            opt(r.stderr)
        )
        .unwrap();
    }
    write_atomic(&cfg.output_dir.join(ARCHSWEEP_FILE), table.as_bytes())?;
    write_manifest(&cfg.output_dir)?;
    Ok(rows)
}
