//! Self-checks runnable from the command line. Each suite compares a
//! production routine against a slow independent reference.

use pointfuse_tensor::rng::standard_normal;
use pointfuse_tensor::{grad_check_store, ParamStore, RngStreams, Tape, Var};
use rand::Rng;
use serde::Serialize;

use crate::degrade::{make_pair, synth_scene, DegradationSpec, SceneKind};
use crate::diffusion::{make_schedule, q_sample};
use crate::error::{Error, Result};
use crate::geometry::{dist2, KnnIndex, Point};
use crate::metrics::{dcd, emd_exact};
use crate::model::{Model, ModelConfig, PreparedInput};

pub const SUITES: [&str; 5] = ["fd", "emd", "knn", "forward", "dcd"];

#[derive(Clone, Debug, Serialize)]
pub struct OracleResult {
    pub suite: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub passed: bool,
    pub results: Vec<OracleResult>,
}

fn result(suite: &str, measured: f64, tolerance: f64, detail: String) -> OracleResult {
    OracleResult {
        suite: suite.into(),
        passed: measured.is_finite() && measured <= tolerance,
        measured,
        tolerance,
        detail,
    }
}

/// Runs the named suites, or all of them when `suites` is empty.
pub fn run_oracles(suites: &[String], seed: u64, inject_grad_bug: bool) -> Result<OracleReport> {
    let streams = RngStreams::new(seed);
    let names: Vec<String> = if suites.is_empty() {
        SUITES.iter().map(|s| s.to_string()).collect()
    } else {
        suites.to_vec()
    };
    let mut results = Vec::new();
    for name in &names {
        let mut rng = streams.stream(&format!("oracle.{name}"));
        results.push(match name.as_str() {
            "fd" => fd_suite(seed, inject_grad_bug)?,
            "emd" => emd_suite(&mut rng)?,
            "knn" => knn_suite(&mut rng)?,
            "forward" => forward_suite(&mut rng)?,
            "dcd" => dcd_suite(&mut rng)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown oracle suite {other:?}, expected one of {SUITES:?}"
                )))
            }
        });
    }
    Ok(OracleReport {
        passed: results.iter().all(|r| r.passed),
        results,
    })
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        c1: 3,
        c2: 3,
        c_local: 4,
        z_dim: 4,
        d_k: 3,
        local_widths: [4, 4],
        widths: [5, 5, 5],
        ..ModelConfig::default()
    }
}

/// Identity whose backward scales the gradient by 1.5.
fn faulty_identity(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let value = tape.value(x).to_vec();
    Ok(tape.custom(
        &[x],
        shape,
        value,
        Box::new(|_, _, g| vec![g.iter().map(|v| 1.5 * v).collect()]),
    )?)
}

fn fd_suite(seed: u64, inject_bug: bool) -> Result<OracleResult> {
    let cfg = toy_config();
    let spec = DegradationSpec {
        keep_ratio: 0.25,
        ..DegradationSpec::default()
    };
    let (gt, image, camera) = synth_scene(SceneKind::Cube, 128, seed, 16)?;
    let pair = make_pair(&gt, &image, &camera, &spec)?;
    let prep = PreparedInput::new(&cfg, &pair.input, &pair.image, &pair.camera)?;
    let streams = RngStreams::new(seed);
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store, &mut streams.stream("oracle.fd.init"))?;
    let mut rng = streams.stream("oracle.fd.params");
    for (_, t) in store.tensors_mut() {
        let vals: Vec<f32> = standard_normal(&mut rng, t.numel());
        t.data_mut()
            .iter_mut()
            .zip(vals)
            .for_each(|(d, v)| *d = 0.5 * v);
    }
    let store = store.cast::<f64>();
    let schedule = make_schedule(100, 1e-4, 0.02)?;
    let n = 32;
    let x0: Vec<f64> = prep.encode_target(&pair.target, 3)?[..n * 3]
        .iter()
        .map(|&v| v as f64)
        .collect();
    let eps: Vec<f64> = standard_normal(&mut rng, n * 3);
    let report = grad_check_store(&store, 1e-5, |tape, store| -> Result<Var> {
        let conds = model.conditions(tape, store, &prep)?;
        let loss = model.training_loss(tape, store, &prep, &conds, &x0, 40, &eps, &schedule)?;
        if inject_bug {
            faulty_identity(tape, loss)
        } else {
            Ok(loss)
        }
    })?;
    Ok(result(
        "fd",
        report.max_rel_error,
        1e-4,
        format!("{} entries, worst {:?}", report.entries, report.worst),
    ))
}

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect()
}

fn brute_emd(a: &[Point], b: &[Point]) -> f64 {
    fn go(i: usize, a: &[Point], b: &[Point], used: &mut [bool], acc: f64, best: &mut f64) {
        if i == a.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                go(i + 1, a, b, used, acc + dist2(&a[i], &b[j]).sqrt(), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, a, b, &mut vec![false; b.len()], 0.0, &mut best);
    best / a.len() as f64
}

fn emd_suite(rng: &mut impl Rng) -> Result<OracleResult> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let a = random_points(rng, n);
        let b = random_points(rng, n);
        worst = worst.max((emd_exact(&a, &b)? - brute_emd(&a, &b)).abs());
    }
    Ok(result(
        "emd",
        worst,
        1e-9,
        "100 random pairs, n ≤ 6, against permutation search".into(),
    ))
}

fn knn_suite(rng: &mut impl Rng) -> Result<OracleResult> {
    let mut mismatches = 0usize;
    let mut total = 0usize;
    for trial in 0..20 {
        let n = rng.random_range(1..=400);
        let mut pts = random_points(rng, n);
        if trial % 4 == 0 {
            // Flatten to a plane to stress degenerate grids.
            pts.iter_mut().for_each(|p| p[2] = 0.0);
        }
        let queries = random_points(rng, 30);
        let k = rng.random_range(1..=n.min(16));
        let nb = KnnIndex::build(&pts)?.knn(&queries, k)?;
        for (q, qp) in queries.iter().enumerate() {
            let mut all: Vec<(f64, u32)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (dist2(qp, p), i as u32))
                .collect();
            all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let (idx, _) = nb.row(q);
            total += 1;
            if idx.iter().zip(&all).any(|(a, b)| *a != b.1) {
                mismatches += 1;
            }
        }
    }
    Ok(result(
        "knn",
        mismatches as f64,
        0.0,
        format!("{mismatches} of {total} queries differ from brute force"),
    ))
}

fn forward_suite(rng: &mut impl Rng) -> Result<OracleResult> {
    let schedule = make_schedule(1000, 1e-4, 0.02)?;
    let t = 500;
    let ab = schedule.alpha_bar_at(t);
    let samples = 20_000;
    let x0 = vec![0.7f64; samples];
    let eps: Vec<f64> = standard_normal(rng, samples);
    let xt = q_sample(&x0, t, &eps, &schedule)?;
    let m = xt.iter().sum::<f64>() / samples as f64;
    let v = xt.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (samples - 1) as f64;
    let err = (m - ab.sqrt() * 0.7).abs().max((v - (1.0 - ab)).abs());
    Ok(result(
        "forward",
        err,
        0.05,
        format!("mean {m:.4}, variance {v:.4} at t = {t}"),
    ))
}

fn dcd_suite(rng: &mut impl Rng) -> Result<OracleResult> {
    // Two singletons at distance d: both sides give 1 − e^{−αd²}.
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d: f64 = rng.random_range(0.0..0.5);
        let alpha: f64 = rng.random_range(1.0..100.0);
        let got = dcd(&[[0.0, 0.0, 0.0]], &[[d as f32, 0.0, 0.0]], alpha)?;
        let df = d as f32 as f64;
        worst = worst.max((got - (1.0 - (-alpha * df * df).exp())).abs());
    }
    // Identical clouds have zero distance.
    let a = random_points(rng, 64);
    worst = worst.max(dcd(&a, &a, 40.0)?);
    Ok(result(
        "dcd",
        worst,
        1e-12,
        "singleton pairs and identical clouds".into(),
    ))
}
