//! Chamfer, density-aware Chamfer, exact EMD, F1 and color error.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bounding_sphere_radius, dist2, KnnIndex, Point, PointCloud};

pub const DEFAULT_DCD_ALPHA: f64 = 40.0;
pub const DEFAULT_F1_TAU_FRACTION: f64 = 0.01;
pub const DEFAULT_EMD_RESAMPLE: usize = 2048;
pub const EMD_MAX_POINTS: usize = 4096;

fn nonempty(op: &'static str, a: &[Point], b: &[Point]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid(op, "empty point set"));
    }
    Ok(())
}

/// Squared distance from every point of `from` to its nearest point in `to`.
pub fn nearest_sq(from: &[Point], to: &[Point]) -> Result<Vec<f64>> {
    let index = KnnIndex::build(to)?;
    let nb = index.knn(from, 1)?;
    Ok(nb.distances.iter().map(|d| d * d).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn chamfer(s1: &[Point], s2: &[Point]) -> Result<f64> {
    nonempty("chamfer", s1, s2)?;
    Ok(0.5 * (mean(&nearest_sq(s1, s2)?) + mean(&nearest_sq(s2, s1)?)))
}

pub fn dcd(s1: &[Point], s2: &[Point], alpha: f64) -> Result<f64> {
    nonempty("dcd", s1, s2)?;
    if !(alpha > 0.0) {
        return Err(Error::invalid(
            "dcd",
            format!("alpha must be positive, got {alpha}"),
        ));
    }
    // 1 − e^{−αd²} is monotone in d, so the nearest point minimizes it.
    let side = |a, b| -> Result<f64> {
        let d = nearest_sq(a, b)?;
        Ok(d.iter().map(|d| -(-alpha * d).exp_m1()).sum::<f64>() / d.len() as f64)
    };
    Ok(0.5 * (side(s1, s2)? + side(s2, s1)?))
}

/// Minimum-cost perfect matching of an `n × n` cost function by shortest
/// augmenting paths with potentials. Returns `assignment[row] = col`.
pub fn solve_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[matched[j] - 1] = j - 1;
    }
    assignment
}

/// Mean Euclidean distance under the optimal one-to-one matching.
pub fn emd_exact(s1: &[Point], s2: &[Point]) -> Result<f64> {
    nonempty("emd_exact", s1, s2)?;
    if s1.len() != s2.len() {
        return Err(Error::invalid(
            "emd_exact",
            format!(
                "cardinalities differ ({} vs {}); resample first",
                s1.len(),
                s2.len()
            ),
        ));
    }
    let n = s1.len();
    if n > EMD_MAX_POINTS {
        return Err(Error::invalid(
            "emd_exact",
            format!("{n} points exceeds the exact-solver cap of {EMD_MAX_POINTS}; resample first"),
        ));
    }
    let cost = |i: usize, j: usize| dist2(&s1[i], &s2[j]).sqrt();
    let assignment = solve_assignment(n, cost);
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost(i, j))
        .sum::<f64>()
        / n as f64)
}

/// Uniform subset without replacement when `n < len`, else the points as is.
pub fn resample_to(points: &[Point], n: usize, rng: &mut impl Rng) -> Vec<Point> {
    if n >= points.len() {
        return points.to_vec();
    }
    let mut idx = sample(rng, points.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn f1(pred: &[Point], gt: &[Point], tau: f64) -> Result<F1Score> {
    nonempty("f1", pred, gt)?;
    if !(tau > 0.0) {
        return Err(Error::invalid(
            "f1",
            format!("tau must be positive, got {tau}"),
        ));
    }
    let within = |a, b| -> Result<f64> {
        let d = nearest_sq(a, b)?;
        Ok(d.iter().filter(|&&d| d.sqrt() <= tau).count() as f64 / d.len() as f64)
    };
    let precision = within(pred, gt)?;
    let recall = within(gt, pred)?;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(F1Score {
        f1,
        precision,
        recall,
    })
}

/// Mean squared channel error between each gt point's color and the color of
/// its nearest predicted point.
pub fn color_mse(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    let (pc, gc) = match (pred.colors(), gt.colors()) {
        (Some(p), Some(g)) => (p, g),
        _ => return Err(Error::invalid("color_mse", "both clouds need colors")),
    };
    let index = KnnIndex::build(pred.positions())?;
    let nb = index.knn(gt.positions(), 1)?;
    let mut total = 0.0;
    for (g, &p) in nb.indices.iter().enumerate() {
        for c in 0..3 {
            let d = pc[3 * p as usize + c] as f64 - gc[3 * g + c] as f64;
            total += d * d;
        }
    }
    Ok(total / (3 * gt.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub alpha: f64,
    pub tau: f64,
    pub resample_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: f64,
    pub dcd: f64,
    pub emd: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub color_mse: Option<f64>,
    pub params: MetricParams,
}

/// All metrics for one prediction. `tau_fraction` scales the gt
/// bounding-sphere radius; EMD runs on `min(|pred|, |gt|, emd_cap)` points.
pub fn evaluate(
    pred: &PointCloud,
    gt: &PointCloud,
    alpha: f64,
    tau_fraction: f64,
    emd_cap: usize,
    rng: &mut impl Rng,
) -> Result<MetricReport> {
    let (p, g) = (pred.positions(), gt.positions());
    let tau = tau_fraction * bounding_sphere_radius(gt);
    let tau = if tau > 0.0 { tau } else { tau_fraction };
    let n = p.len().min(g.len()).min(emd_cap);
    let ps = resample_to(p, n, rng);
    let gs = resample_to(g, n, rng);
    let score = f1(p, g, tau)?;
    let color_mse = match (pred.colors(), gt.colors()) {
        (Some(_), Some(_)) => Some(color_mse(pred, gt)?),
        _ => None,
    };
    Ok(MetricReport {
        cd: chamfer(p, g)?,
        dcd: dcd(p, g, alpha)?,
        emd: emd_exact(&ps, &gs)?,
        f1: score.f1,
        precision: score.precision,
        recall: score.recall,
        color_mse,
        params: MetricParams {
            alpha,
            tau,
            resample_n: n,
        },
    })
}
