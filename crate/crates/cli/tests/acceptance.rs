//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line per criterion. With `ACCEPTANCE_STRICT=1` the process
//! exits non-zero if any criterion fails.
//!
//! Criterion numbers given as arguments restrict the run, e.g.
//! `cargo test -p lars-flows-cli --test acceptance -- 3 4`.

use std::path::Path;
use std::time::Instant;

use cpu_time::ProcessTime;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use lars_flows::base::{AcceptanceNet, Base, ResampledBase};
use lars_flows::evaluation::{
    default_kld_grid, default_z_grid, histogram_kld, log_density_on_grid, quadrature_kld, refresh_z, HistReference,
    ZRefresh,
};
use lars_flows::flow::{BaseKind, FlowArch, FlowModel};
use lars_flows::layers::{AffineConstant, Layer};
use lars_flows::matrix::Matrix;
use lars_flows::nets::{Activation, Mlp, MlpSpec, Mode, OutputHead};
use lars_flows::numerics::{draw_standard_normal, std_normal_log_density, Grid2D};
use lars_flows::targets::{LogDensity, Target2D, TargetKind};
use lars_flows::training::{kl_gradients, nll_step_with_draws, DataSource, KlOptions, Objective, TrainConfig, Trainer};
use lars_flows::RngStream;
use lars_flows_cli::checkpoint::Checkpoint;
use lars_flows_cli::config::ExperimentConfig;
use lars_flows_cli::experiment::{build_model, run_training};
use lars_flows_cli::sweeps::zsweep;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// `|a − b| / max(|a|, |b|, 1e-3)`.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn randomize(m: &mut FlowModel, rng: &mut RngStream, scale: f64) {
    let p: Vec<f64> = m.params().iter().map(|v| v + scale * rng.standard_normal()).collect();
    m.set_params(&p).unwrap();
}

fn central_difference(p0: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut p = p0.to_vec();
    p[i] += h;
    let fp = f(&p);
    p[i] -= 2.0 * h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

// 1. Analytic gradients against central finite differences.
fn gradient_integrity() -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..100u64 {
        let mut rng = RngStream::new(seed, 1);
        let pick = |rng: &mut RngStream, n: u64| rng.below(n) as usize;

        // acceptance-style network on its own
        let head = if seed % 2 == 0 {
            OutputHead::Sigmoid
        } else {
            OutputHead::Linear
        };
        let spec = MlpSpec::new(
            2,
            1 + pick(&mut rng, 2),
            4 + pick(&mut rng, 8),
            1 + pick(&mut rng, 2),
            Activation::Tanh,
            head,
        );
        let mut net = Mlp::new(spec, &mut rng).unwrap();
        let p: Vec<f64> = net.params().iter().map(|v| v + 0.3 * rng.standard_normal()).collect();
        net.set_params(&p).unwrap();
        let x = draw_standard_normal(&mut rng, 5, 2);
        let out_dim = net.spec().output_dim;
        let cot = draw_standard_normal(&mut rng, 5, out_dim);
        let (_, cache) = net.forward(&x, Mode::Eval, None).unwrap();
        let mut g = vec![0.0; net.num_params()];
        let dx = net.backward(&cache, &cot, &mut g).unwrap();
        let scalar = |net: &Mlp, x: &Matrix| -> f64 {
            let y = net.forward_eval(x).unwrap();
            y.as_slice().iter().zip(cot.as_slice()).map(|(a, b)| a * b).sum()
        };
        for i in 0..p.len() {
            let fd = central_difference(&p, i, h, |q| {
                let mut n = net.clone();
                n.set_params(q).unwrap();
                scalar(&n, &x)
            });
            worst = worst.max(rel_err(fd, g[i]));
        }
        for i in 0..x.as_slice().len() {
            let fd = central_difference(x.as_slice(), i, h, |q| {
                scalar(&net, &Matrix::from_vec(5, 2, q.to_vec()).unwrap())
            });
            worst = worst.max(rel_err(fd, dx.as_slice()[i]));
        }
        checked += p.len() + x.as_slice().len();

        // flow log-prob with a frozen quadrature Z, and the Z coefficient
        let base = BaseKind::Resampled {
            acceptance: AcceptanceNet {
                hidden_layers: 1 + pick(&mut rng, 2),
                hidden_units: 4 + pick(&mut rng, 8),
                ..Default::default()
            },
            truncation: [1, 2, 10, 100][pick(&mut rng, 4)],
            groups: 1,
        };
        let arch = FlowArch {
            coupling_layers: 1 + pick(&mut rng, 4),
            hidden_layers: 1 + pick(&mut rng, 2),
            hidden_units: 4 + pick(&mut rng, 8),
            activation: Activation::Tanh,
            linear_between_pairs: seed % 3 == 0,
        };
        let mut m = FlowModel::real_nvp(2, &base, &arch, &mut rng).unwrap();
        randomize(&mut m, &mut rng, 0.2);
        {
            let r = m.base_mut().as_resampled_mut().unwrap();
            let z = r.exact_z_quadrature(&default_z_grid()).unwrap();
            r.set_z_value(&z).unwrap();
        }
        let x = draw_standard_normal(&mut rng, 6, 2);
        let w: Vec<f64> = (0..6).map(|_| rng.standard_normal()).collect();
        let (_, trace) = m.log_prob_traced(&x, Mode::Eval, None).unwrap();
        let g = m.backward(&trace, None, &w).unwrap();
        let weighted = |m: &FlowModel| -> f64 { m.log_prob(&x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum() };
        let p0 = m.params();
        for i in 0..p0.len() {
            let fd = central_difference(&p0, i, h, |q| {
                let mut mm = m.clone();
                mm.set_params(q).unwrap();
                weighted(&mm)
            });
            worst = worst.max(rel_err(fd, g.params[i]));
        }
        let z0 = m.base().as_resampled().unwrap().z_value().to_vec();
        let fd = central_difference(&z0, 0, h, |q| {
            let mut mm = m.clone();
            mm.base_mut().as_resampled_mut().unwrap().set_z_value(q).unwrap();
            weighted(&mm)
        });
        worst = worst.max(rel_err(fd, g.z_value[0]));
        checked += p0.len() + 1;

        // full ML step: penalty and the path through the batch Z estimate
        let lambda = [0.0, 0.5, 3.0][pick(&mut rng, 3)];
        let batch = draw_standard_normal(&mut rng, 8, 2);
        let draws = draw_standard_normal(&mut rng, 32, 2);
        let step = |m: &FlowModel| {
            // a fresh estimate state takes the batch estimate as its Z
            let mut m = m.clone();
            let r = m.base_mut().as_resampled_mut().unwrap();
            r.restore_ema(&[0.5], false).unwrap();
            nll_step_with_draws(
                &mut m,
                &batch,
                lambda,
                Some(&draws),
                Mode::Eval,
                &mut RngStream::new(0, 0),
            )
            .unwrap()
        };
        let g = step(&m).grads;
        for i in 0..p0.len() {
            let fd = central_difference(&p0, i, h, |q| {
                let mut mm = m.clone();
                mm.set_params(q).unwrap();
                step(&mm).loss
            });
            worst = worst.max(rel_err(fd, g[i]));
        }
        checked += p0.len();
    }
    outcome(
        worst < 1e-4,
        format!("max rel err {worst:.2e} over {checked} coordinates in 100 configurations (tol 1e-4)"),
    )
}

fn random_model(rng: &mut RngStream, dim: usize) -> FlowModel {
    let base = match rng.below(3) {
        0 => BaseKind::Gaussian,
        1 => BaseKind::Mixture {
            components: 1 + rng.below(4) as usize,
        },
        _ => BaseKind::Resampled {
            acceptance: AcceptanceNet {
                hidden_layers: 1,
                hidden_units: 8,
                ..Default::default()
            },
            truncation: 10,
            groups: 1,
        },
    };
    let arch = FlowArch {
        coupling_layers: 1 + rng.below(8) as usize,
        hidden_layers: 1 + rng.below(2) as usize,
        hidden_units: 4 + rng.below(29) as usize,
        activation: if rng.below(2) == 0 {
            Activation::Tanh
        } else {
            Activation::Relu
        },
        linear_between_pairs: rng.below(2) == 0,
    };
    let mut m = FlowModel::real_nvp(dim, &base, &arch, rng).unwrap();
    randomize(&mut m, rng, 0.1);
    m
}

// 2. Round trips through the flow and log-determinants against numerical Jacobians.
fn invertibility() -> Outcome {
    let mut worst_inv: f64 = 0.0;
    let mut worst_ld: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = RngStream::new(seed, 2);
        let dim = [2, 2, 3, 5][rng.below(4) as usize];
        let m = random_model(&mut rng, dim);
        let z = draw_standard_normal(&mut rng, 200, dim);
        let (x, ld) = m.forward(&z).unwrap();
        let (back, _) = m.inverse(&x).unwrap();
        for (a, b) in back.as_slice().iter().zip(z.as_slice()) {
            worst_inv = worst_inv.max((a - b).abs());
        }
        if dim != 2 {
            continue;
        }
        let h = 1e-6;
        for i in 0..20 {
            let z0 = z.row(i);
            let mut jac = [[0.0; 2]; 2];
            for (k, col) in [0usize, 1].iter().enumerate() {
                let mut zp = z0.to_vec();
                zp[*col] += h;
                let mut zm = z0.to_vec();
                zm[*col] -= h;
                let (xp, _) = m.forward(&Matrix::from_rows(&[zp])).unwrap();
                let (xm, _) = m.forward(&Matrix::from_rows(&[zm])).unwrap();
                for r in 0..2 {
                    jac[r][k] = (xp.get(0, r) - xm.get(0, r)) / (2.0 * h);
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            worst_ld = worst_ld.max((det.abs().ln() - ld[i]).abs());
        }
    }
    outcome(
        worst_inv < 1e-9 && worst_ld < 1e-6,
        format!("max |F^-1(F(z)) - z| {worst_inv:.2e} (tol 1e-9), max log-det error {worst_ld:.2e} (tol 1e-6)"),
    )
}

fn random_resampled(rng: &mut RngStream, truncation: u32, scale: f64) -> ResampledBase {
    let acc = AcceptanceNet {
        hidden_layers: 2,
        hidden_units: 16,
        ..Default::default()
    };
    let mut r = ResampledBase::new(2, acc, truncation, rng).unwrap();
    let p: Vec<f64> = r
        .net()
        .params()
        .iter()
        .map(|v| v + scale * rng.standard_normal())
        .collect();
    r.net_mut().set_params(&p).unwrap();
    r
}

// 3. The truncated resampled density integrates to one.
fn normalization() -> Outcome {
    let grid = Grid2D::square(6.0, 400).unwrap();
    let nodes = grid.nodes();
    let mut worst: f64 = 0.0;
    let mut t1_exact = true;
    for seed in 0..5u64 {
        for t in [1u32, 2, 10, 100] {
            let mut r = random_resampled(&mut RngStream::new(seed, 3), t, 1.0);
            let z = r.exact_z_quadrature(&grid).unwrap();
            r.set_z_value(&z).unwrap();
            let base = Base::Resampled(r);
            let lp = base.log_prob_batch(&nodes).unwrap();
            let mass: f64 = lp.iter().map(|v| v.exp()).sum::<f64>() * grid.cell_area();
            worst = worst.max((mass - 1.0).abs());
            if t == 1 {
                for (k, v) in lp.iter().enumerate() {
                    if v.to_bits() != std_normal_log_density(nodes.row(k)).to_bits() {
                        t1_exact = false;
                    }
                }
            }
        }
    }
    outcome(
        worst < 1e-3 && t1_exact,
        format!("max |mass - 1| {worst:.2e} (tol 1e-3); T = 1 equals the standard normal bit for bit: {t1_exact}"),
    )
}

// 4. Monte Carlo Z against quadrature, and the constant-acceptance case.
fn z_estimator() -> Outcome {
    let s = 100_000;
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..5u64 {
        let r = random_resampled(&mut RngStream::new(seed, 4), 100, 1.0);
        let zq = r.exact_z_quadrature(&Grid2D::square(7.0, 500).unwrap()).unwrap()[0];
        let est = r.estimate_z(s, &mut RngStream::new(seed, 40)).unwrap();
        let se = est.std_devs[0] / (s as f64).sqrt();
        worst_ratio = worst_ratio.max((est.values[0] - zq).abs() / se);
    }
    let spec = MlpSpec::new(2, 2, 8, 1, Activation::Tanh, OutputHead::Sigmoid);
    let mut net = Mlp::zeros(spec).unwrap();
    let mut p = net.params().to_vec();
    *p.last_mut().unwrap() = 0.7;
    net.set_params(&p).unwrap();
    let c = net.eval_one(&[0.3, -1.2]).unwrap()[0];
    let r = ResampledBase::from_net(1, net, 100).unwrap();
    let est = r.estimate_z(s, &mut RngStream::new(9, 4)).unwrap();
    let exact = est.values[0] == c && r.estimate_z_value(s, &mut RngStream::new(9, 5)).unwrap().0[0] == c;
    outcome(
        worst_ratio < 4.0 && exact,
        format!(
            "max |Z_mc - Z_quad| / SE = {worst_ratio:.2} (tol 4); constant acceptance {c} returned exactly: {exact}"
        ),
    )
}

fn tiny_kl_model(rng: &mut RngStream, scale: f64) -> FlowModel {
    let spec = MlpSpec::new(2, 1, 8, 1, Activation::Tanh, OutputHead::Sigmoid);
    let net = if scale > 0.0 {
        let mut net = Mlp::new(spec, rng).unwrap();
        let p: Vec<f64> = net.params().iter().map(|v| v + scale * rng.standard_normal()).collect();
        net.set_params(&p).unwrap();
        net
    } else {
        Mlp::zeros(spec).unwrap()
    };
    let base = ResampledBase::from_net(1, net, 100).unwrap();
    FlowModel::new(Base::Resampled(base), vec![Layer::Affine(AffineConstant::identity(2))]).unwrap()
}

fn with_quadrature_z(m: &FlowModel) -> FlowModel {
    let mut m = m.clone();
    refresh_z(
        &mut m,
        &ZRefresh::Quadrature(default_z_grid()),
        &mut RngStream::new(0, 0),
    )
    .unwrap();
    m
}

/// Mean and standard error over `batches` independent gradient estimates.
fn kl_gradient_stats(m: &FlowModel, target: &dyn LogDensity, batches: u64, per_batch: usize) -> (Vec<f64>, Vec<f64>) {
    let opts = KlOptions {
        samples: per_batch,
        z_samples: 100_000,
        update_z: false,
    };
    let runs: Vec<Vec<f64>> = (0..batches)
        .map(|b| {
            let mut mm = m.clone();
            kl_gradients(&mut mm, target, opts, &mut RngStream::new(500 + b, 5))
                .unwrap()
                .step
                .grads
        })
        .collect();
    let n = runs.len() as f64;
    let dim = runs[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| runs.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let se: Vec<f64> = (0..dim)
        .map(|j| (runs.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt())
        .collect();
    (mean, se)
}

// 5. Reverse-KL gradient estimators against differences of the quadrature KL divergence.
fn kl_gradient_oracle() -> Outcome {
    let target = Target2D::new(TargetKind::DualMoon);
    let grid = Grid2D::square(6.0, 400).unwrap();
    let m = with_quadrature_z(&tiny_kl_model(&mut RngStream::new(21, 5), 0.5));
    let (mean, se) = kl_gradient_stats(&m, &target, 20, 50_000);
    let p0 = m.params();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    let mut compared = 0;
    let mut notes = Vec::new();
    for i in 0..p0.len() {
        let fd = central_difference(&p0, i, h, |q| {
            let mut mm = m.clone();
            mm.set_params(q).unwrap();
            quadrature_kld(&with_quadrature_z(&mm), &target, &grid).unwrap()
        });
        if fd.abs() > 1e-3 || mean[i].abs() > 1e-3 {
            let e = (mean[i] - fd).abs() / fd.abs().max(mean[i].abs());
            worst = worst.max(e);
            worst_z = worst_z.max((mean[i] - fd).abs() / se[i]);
            if e >= 0.05 {
                notes.push(format!(
                    "coord {i}: estimate {:.4e} (se {:.1e}) vs fd {fd:.4e}",
                    mean[i], se[i]
                ));
            }
            compared += 1;
        }
    }
    // constant acceptance: the final bias cannot change the density
    let m0 = with_quadrature_z(&tiny_kl_model(&mut RngStream::new(22, 5), 0.0));
    let (mean0, se0) = kl_gradient_stats(&m0, &target, 20, 50_000);
    let bias = m0.num_base_params() - 1;
    let zero_ok = mean0[bias].abs() <= 4.0 * se0[bias];
    let mut detail = format!(
        "max rel err {worst:.3} over {compared} coordinates (tol 0.05), max |estimate - fd| / SE {worst_z:.2}; constant-acceptance bias gradient {:.2e} with SE {:.1e} (within 4 SE: {zero_ok})",
        mean0[bias], se0[bias]
    );
    if !notes.is_empty() {
        detail.push_str(&format!("; {}", notes.join("; ")));
    }
    outcome(worst < 0.05 && zero_ok, detail)
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn arch_2d() -> FlowArch {
    FlowArch {
        coupling_layers: 8,
        hidden_layers: 2,
        hidden_units: 32,
        ..Default::default()
    }
}

fn resampled_2d(truncation: u32) -> BaseKind {
    BaseKind::Resampled {
        acceptance: AcceptanceNet {
            hidden_layers: 2,
            hidden_units: 64,
            ..Default::default()
        },
        truncation,
        groups: 1,
    }
}

fn final_kld(t: &Trainer, target: &Target2D) -> Result<f64, String> {
    let m = with_quadrature_z(&t.eval_model().map_err(|e| e.to_string())?);
    quadrature_kld(&m, target, &default_kld_grid()).map_err(|e| e.to_string())
}

fn train_one(target: &Target2D, base: &BaseKind, objective: Objective, seed: u64) -> Result<Trainer, String> {
    let m = FlowModel::real_nvp(2, base, &arch_2d(), &mut RngStream::new(seed, 100)).map_err(|e| e.to_string())?;
    let cfg = match objective {
        Objective::Ml => {
            let mut c = TrainConfig::new(Objective::Ml, 5000, 256, 1e-3, seed);
            c.polyak_rate = Some(1e-2);
            c
        }
        Objective::Kl => TrainConfig::new(Objective::Kl, 5000, 256, 1e-4, seed),
    };
    let mut t = Trainer::new(m, cfg).map_err(|e| e.to_string())?;
    match objective {
        Objective::Ml => t.train_ml(DataSource::Target(target), None),
        Objective::Kl => t.train_kl(target, None),
    }
    .map_err(|e| e.to_string())?;
    Ok(t)
}

/// Trains Gaussian- and resampled-base flows on each target over all seeds and
/// requires the resampled mean KL divergence to be lower on every target.
fn ordering(kinds: &[TargetKind], objective: Objective) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for &kind in kinds {
        let target = Target2D::new(kind);
        let mut means = [0.0; 2];
        let mut runs = Vec::new();
        for (b, (name, base)) in [("gaussian", BaseKind::Gaussian), ("resampled", resampled_2d(100))]
            .iter()
            .enumerate()
        {
            for &seed in &SEEDS {
                match train_one(&target, base, objective, seed).and_then(|t| final_kld(&t, &target)) {
                    Ok(k) => {
                        means[b] += k / SEEDS.len() as f64;
                        runs.push(format!("{name}/{seed}={k:.4}"));
                    }
                    Err(e) => {
                        means[b] = f64::NAN;
                        runs.push(format!("{name}/{seed} failed: {e}"));
                    }
                }
            }
        }
        let ok = means[1] < means[0];
        pass &= ok;
        parts.push(format!(
            "{}: gaussian {:.4} vs resampled {:.4} [{}] {}",
            kind.name(),
            means[0],
            means[1],
            runs.join(" "),
            if ok { "ok" } else { "wrong order" }
        ));
    }
    outcome(pass, parts.join("; "))
}

// 6. Maximum likelihood: resampled base beats the Gaussian base on every target.
fn ml_ordering() -> Outcome {
    ordering(&TargetKind::ALL, Objective::Ml)
}

// 7. Reverse KL: resampled base beats the Gaussian base.
fn kl_ordering() -> Outcome {
    ordering(&[TargetKind::DualMoon, TargetKind::TwoRings], Objective::Kl)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            r[idx[k]] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn experiment_config(dir: &Path, base: &str, target: &str, iterations: u64, extra_train: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
        "seed": 0,
        "output_dir": {dir:?},
        "model": {{"base": {base}, "flow": {{"coupling_layers": 8, "hidden_layers": 2, "hidden_units": 32}}}},
        "data": {{"target": "{target}"}},
        "train": {{"objective": "ml", "iterations": {iterations}, "batch_size": 256, "learning_rate": 0.001,
                   "polyak_rate": 0.01 {extra_train}}},
        "eval": {{"histogram_bins": 20, "histogram_samples": 5000}}
    }}"#
    );
    ExperimentConfig::parse(&text).unwrap()
}

// 8. The rejection-rate penalty raises Z.
fn z_penalty_trend() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = r#"{"kind": "resampled", "truncation": 20, "acceptance": {"hidden_layers": 2, "hidden_units": 64}}"#;
    let cfg = experiment_config(dir.path(), base, "dual_moon", 2000, "");
    let lambdas = [0.0, 0.1, 1.0, 10.0];
    let rows = match zsweep(&cfg, &lambdas, &SEEDS) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("zsweep failed: {e:#}")),
    };
    let z: Vec<f64> = rows.iter().map(|r| r.final_z).collect();
    let rho = spearman(&lambdas, &z);
    let gain = z[3] - z[0];
    let listing: Vec<String> = rows
        .iter()
        .map(|r| format!("Z({})={:.4}", r.lambda, r.final_z))
        .collect();
    outcome(
        rho >= 0.8 && gain >= 0.1,
        format!(
            "{}; Spearman {rho:.2} (min 0.8), Z(10) - Z(0) = {gain:.4} (min 0.1)",
            listing.join(" ")
        ),
    )
}

// 9. Sampler and density agree.
fn sampler_consistency() -> Outcome {
    let target = Target2D::new(TargetKind::CircleOfGaussians);
    let m = FlowModel::real_nvp(
        2,
        &resampled_2d(100),
        &FlowArch {
            coupling_layers: 4,
            ..arch_2d()
        },
        &mut RngStream::new(3, 100),
    )
    .unwrap();
    let mut cfg = TrainConfig::new(Objective::Ml, 1000, 256, 1e-3, 3);
    cfg.polyak_rate = Some(1e-2);
    let mut t = Trainer::new(m, cfg).unwrap();
    if let Err(e) = t.train_ml(DataSource::Target(&target), None) {
        return outcome(false, format!("training failed: {e}"));
    }
    let model = with_quadrature_z(&t.eval_model().unwrap());
    let base = model.base();
    let n = 1_000_000;

    // base samples against cell masses on a 50 x 50 lattice over [-4, 4]^2
    let cells = 50;
    let sub = 8;
    let fine = Grid2D::square(4.0, cells * sub).unwrap();
    let lp = base.log_prob_batch(&fine.nodes()).unwrap();
    let mut expected = vec![0.0; cells * cells];
    for (k, v) in lp.iter().enumerate() {
        let (i, j) = (k / (cells * sub), k % (cells * sub));
        expected[(i / sub) * cells + j / sub] += v.exp() * fine.cell_area();
    }
    let (draws, _) = base.sample_batch(n, &mut RngStream::new(3, 900)).unwrap();
    let mut observed = vec![0.0; cells * cells];
    let mut outside = 0.0;
    let width = 8.0 / cells as f64;
    for row in draws.iter_rows() {
        let i = ((row[0] + 4.0) / width).floor();
        let j = ((row[1] + 4.0) / width).floor();
        if (0.0..cells as f64).contains(&i) && (0.0..cells as f64).contains(&j) {
            observed[i as usize * cells + j as usize] += 1.0;
        } else {
            outside += 1.0;
        }
    }
    // cells with small expected counts are pooled with the outside region
    let mut chi2 = 0.0;
    let mut bins = 0usize;
    let mut pooled = (outside, n as f64 * (1.0 - expected.iter().sum::<f64>()));
    for (o, e) in observed.iter().zip(&expected) {
        let e = e * n as f64;
        if e < 5.0 {
            pooled.0 += o;
            pooled.1 += e;
        } else {
            chi2 += (o - e).powi(2) / e;
            bins += 1;
        }
    }
    if pooled.1 > 0.0 {
        chi2 += (pooled.0 - pooled.1).powi(2) / pooled.1;
        bins += 1;
    }
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);

    // histogram against quadrature KL divergence
    let grid = default_kld_grid();
    let reference = log_density_on_grid(&target, &grid).unwrap();
    let samples = model.sample(n, &mut RngStream::new(3, 901)).unwrap().x;
    let hist = histogram_kld(
        &samples,
        HistReference::Density {
            grid: &grid,
            log_density: &reference,
        },
        100,
    )
    .unwrap();
    let quad = quadrature_kld(&model, &target, &grid).unwrap();
    let rel = (hist - quad).abs() / quad.abs();
    outcome(
        p > 0.001 && rel < 0.1,
        format!("chi2 {chi2:.1} on {} dof, p = {p:.4} (min 0.001); histogram KLD {hist:.4} vs quadrature {quad:.4}, rel diff {rel:.3} (max 0.1)", bins - 1),
    )
}

// 10. Checkpoints reproduce evaluation exactly and seeded runs are byte-identical.
fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = r#"{"kind": "resampled", "truncation": 50, "z_samples": 128, "acceptance": {"hidden_layers": 2, "hidden_units": 32}}"#;
    let cfg = experiment_config(&dir.path().join("run"), base, "two_rings", 60, r#", "eval_every": 20"#);

    let mut t = Trainer::new(build_model(&cfg, 2).unwrap(), cfg.train_config()).unwrap();
    t.train_ml(DataSource::Target(&Target2D::new(TargetKind::TwoRings)), None)
        .unwrap();
    let path = dir.path().join("checkpoint.json");
    Checkpoint::capture(&t, &cfg, RngStream::new(0, 1).state(), None)
        .save(&path)
        .unwrap();
    let restored = Checkpoint::load(&path).unwrap().restore().unwrap();
    let x = draw_standard_normal(&mut RngStream::new(10, 10), 1000, 2);
    let same = |a: &FlowModel, b: &FlowModel| -> bool {
        let (pa, pb) = (a.log_prob(&x).unwrap(), b.log_prob(&x).unwrap());
        pa.iter().zip(&pb).all(|(u, v)| u.to_bits() == v.to_bits())
    };
    let exact = same(&t.model, &restored.model) && same(&t.eval_model().unwrap(), &restored.eval_model().unwrap());

    let files = [
        "config.json",
        "metrics.csv",
        "evals.csv",
        "checkpoint.json",
        "eval_metrics.csv",
        "manifest.json",
    ];
    let snapshot = || -> Vec<Vec<u8>> {
        run_training(&cfg).unwrap();
        files
            .iter()
            .map(|f| std::fs::read(cfg.output_dir.join(f)).unwrap())
            .collect()
    };
    let first = snapshot();
    std::fs::remove_dir_all(&cfg.output_dir).unwrap();
    let identical = first == snapshot();
    outcome(
        exact && identical,
        format!("restored log-probs bit-exact on 1000 inputs: {exact}; repeated runs byte-identical over {} files: {identical}", files.len()),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome, f64);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient integrity", gradient_integrity, 120.0),
    (2, "invertibility and log-det", invertibility, 60.0),
    (3, "truncated density normalization", normalization, 60.0),
    (4, "Z estimator", z_estimator, 30.0),
    (5, "KL gradient oracle", kl_gradient_oracle, 300.0),
    (6, "ML base ordering", ml_ordering, 1800.0),
    (7, "KL base ordering", kl_ordering, 1800.0),
    (8, "Z penalty trend", z_penalty_trend, 1200.0),
    (9, "sampler/density consistency", sampler_consistency, 300.0),
    (10, "persistence and determinism", persistence, 300.0),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, run, limit) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let (wall, cpu) = (Instant::now(), ProcessTime::now());
        let o = run();
        let secs = cpu.elapsed().as_secs_f64();
        let pass = o.pass && secs <= limit;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {id} ({name}): {} | {} | {secs:.1}s CPU (limit {limit:.0}s), {:.1}s wall",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            wall.elapsed().as_secs_f64()
        );
    }
    println!("{failures} criteria failed");
    if failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
