//! The noise-prediction network: three set-abstraction levels over the noisy
//! cloud (the first at full resolution), mirrored feature propagation, local
//! features merged after the first level and the global code injected by
//! concatsquash at every level.

use pointfuse_tensor::{ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{canonical_start, farthest_point_order, idw_weights, KnnIndex, Point};
use crate::model::ModelConfig;
use crate::nn::{concatsquash_params, linear_params, mlp_params, ConcatSquash, Linear, Mlp};

/// Centers picked by farthest-point sampling plus their kNN groups.
#[derive(Clone, Debug)]
pub struct Grouping {
    pub centers: Vec<u32>,
    pub center_pos: Vec<Point>,
    pub k: usize,
    /// `centers × k` neighbour indices into the source points.
    pub neighbors: Vec<u32>,
    /// `centers × k × 3` neighbour offsets from their center.
    pub offsets: Vec<f32>,
}

impl Grouping {
    /// FPS anchored at the point farthest from the centroid, so the result
    /// does not depend on input order.
    pub fn build(points: &[Point], m: usize, k: usize) -> Result<Self> {
        if m >= points.len() {
            return Err(Error::invalid(
                "set_abstraction",
                format!(
                    "downsample count {m} must be below the point count {}",
                    points.len()
                ),
            ));
        }
        let centers = farthest_point_order(points, m, canonical_start(points))?;
        Self::with_centers(points, centers, k)
    }

    pub fn with_centers(points: &[Point], centers: Vec<u32>, k: usize) -> Result<Self> {
        let center_pos: Vec<Point> = centers.iter().map(|&i| points[i as usize]).collect();
        let index = KnnIndex::build(points)?;
        let nb = index.knn(&center_pos, k)?;
        let mut offsets = Vec::with_capacity(nb.indices.len() * 3);
        for (c, row) in nb.indices.chunks_exact(k).enumerate() {
            for &i in row {
                let p = points[i as usize];
                offsets.extend((0..3).map(|a| p[a] - center_pos[c][a]));
            }
        }
        Ok(Self {
            centers,
            center_pos,
            k,
            neighbors: nb.indices,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Inverse-distance weights from a source point set onto targets.
#[derive(Clone, Debug)]
pub struct Interp {
    pub k: usize,
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
}

impl Interp {
    pub fn build(source: &[Point], targets: &[Point], k: usize) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::invalid("feature_propagation", "empty coarse set"));
        }
        let index = KnnIndex::build(source)?;
        let w = idw_weights(&index, targets, k.min(source.len()))?;
        Ok(Self {
            k: w.k,
            indices: w.indices,
            weights: w.weights,
        })
    }

    pub fn apply<R: Real>(&self, tape: &mut Tape<R>, feats: Var) -> Result<Var> {
        let w: Vec<R> = self.weights.iter().map(|&w| R::of(w)).collect();
        Ok(tape.mix_rows(feats, &self.indices, &w, self.k)?)
    }
}

pub fn points_tensor<R: Real>(points: &[Point]) -> Tensor<R> {
    let data = points.iter().flatten().map(|&v| R::of(v as f64)).collect();
    Tensor::new([points.len(), 3], data).expect("n × 3")
}

/// Group, lift `(offset ∥ feature)` through a shared MLP and max-pool.
pub fn set_abstraction<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    mlp: &Mlp,
    grouping: &Grouping,
    feats: Var,
) -> Result<Var> {
    let (m, k) = (grouping.len(), grouping.k);
    let offsets = Tensor::new(
        [m * k, 3],
        grouping.offsets.iter().map(|&v| R::of(v as f64)).collect(),
    )?;
    let offsets = tape.constant(offsets);
    let gathered = tape.gather_rows(feats, &grouping.neighbors)?;
    let x = tape.concat(&[offsets, gathered])?;
    let h = mlp.forward(tape, store, x)?;
    let h = tape.reshape(h, &[m, k, mlp.out_width()])?;
    Ok(tape.max_axis(h, 1)?)
}

/// Interpolate coarse features onto fine points, append skip features and
/// apply a per-point MLP.
pub fn feature_propagation<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    mlp: &Mlp,
    interp: &Interp,
    coarse: Var,
    skip: Var,
) -> Result<Var> {
    let up = interp.apply(tape, coarse)?;
    let x = tape.concat(&[up, skip])?;
    mlp.forward(tape, store, x)
}

/// kNN/FPS structure of one noisy cloud, independent of parameters.
#[derive(Clone, Debug)]
pub struct TrunkStructure {
    pub n: usize,
    /// Every point is a center; groups are its kNN.
    pub level1: Grouping,
    pub level2: Grouping,
    pub level3: Grouping,
    pub up3: Interp,
    pub up2: Interp,
    pub local: Interp,
}

impl TrunkStructure {
    pub fn build(cfg: &ModelConfig, points: &[Point], local_pos: &[Point]) -> Result<Self> {
        let n = points.len();
        let level1 = Grouping::with_centers(points, (0..n as u32).collect(), cfg.k_group.min(n))?;
        let m2 = n.div_ceil(4);
        let level2 = Grouping::build(points, m2, cfg.k_group.min(n))?;
        let m3 = n.div_ceil(16);
        let level3 = Grouping::build(&level2.center_pos, m3, cfg.k_group.min(m2))?;
        let up3 = Interp::build(&level3.center_pos, &level2.center_pos, cfg.k_prop)?;
        let up2 = Interp::build(&level2.center_pos, points, cfg.k_prop)?;
        let local = Interp::build(local_pos, points, cfg.k_interp)?;
        Ok(Self {
            n,
            level1,
            level2,
            level3,
            up3,
            up2,
            local,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub dim: usize,
    lift: Mlp,
    enc1: Mlp,
    merge: Linear,
    enc2: Mlp,
    enc3: Mlp,
    dec3: Mlp,
    dec2: Mlp,
    dec1: Mlp,
    head: Linear,
    squash: [ConcatSquash; 6],
}

impl Denoiser {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let [w1, w2, w3] = cfg.widths;
        let ctx = 3 + cfg.z_dim;
        let sq = |store: &mut ParamStore, name: &str, c, rng: &mut _| {
            ConcatSquash::new(store, name, ctx, c, rng)
        };
        Ok(Self {
            dim: cfg.dim,
            lift: Mlp::new(
                store,
                "trunk.lift",
                &[cfg.dim + cfg.raw_width(), w1, w1],
                true,
                rng,
            )?,
            enc1: Mlp::new(store, "trunk.enc1", &[3 + w1, w1, w1], true, rng)?,
            merge: Linear::new(store, "trunk.merge", w1 + cfg.local_width(), w1, true, rng)?,
            enc2: Mlp::new(store, "trunk.enc2", &[3 + w1, w2, w2], true, rng)?,
            enc3: Mlp::new(store, "trunk.enc3", &[3 + w2, w3, w3], true, rng)?,
            dec3: Mlp::new(store, "trunk.dec3", &[w3 + w2, w2], true, rng)?,
            dec2: Mlp::new(store, "trunk.dec2", &[w2 + w1, w1], true, rng)?,
            dec1: Mlp::new(store, "trunk.dec1", &[w1 + w1, w1], true, rng)?,
            head: Linear::zeros(store, "trunk.head", w1, cfg.dim, true)?,
            squash: [
                sq(store, "trunk.squash1", w1, rng)?,
                sq(store, "trunk.squash2", w2, rng)?,
                sq(store, "trunk.squash3", w3, rng)?,
                sq(store, "trunk.squash4", w2, rng)?,
                sq(store, "trunk.squash5", w1, rng)?,
                sq(store, "trunk.squash6", w1, rng)?,
            ],
        })
    }

    pub fn num_params(&self) -> usize {
        [
            &self.lift, &self.enc1, &self.enc2, &self.enc3, &self.dec3, &self.dec2, &self.dec1,
        ]
        .iter()
        .map(|m| m.num_params())
        .sum::<usize>()
            + self.merge.num_params()
            + self.head.num_params()
            + self
                .squash
                .iter()
                .map(ConcatSquash::num_params)
                .sum::<usize>()
    }

    /// Analytic parameter count from config widths.
    pub fn expected_params(cfg: &ModelConfig) -> usize {
        let [w1, w2, w3] = cfg.widths;
        let ctx = 3 + cfg.z_dim;
        mlp_params(&[cfg.dim + cfg.raw_width(), w1, w1])
            + mlp_params(&[3 + w1, w1, w1])
            + linear_params(w1 + cfg.local_width(), w1, true)
            + mlp_params(&[3 + w1, w2, w2])
            + mlp_params(&[3 + w2, w3, w3])
            + mlp_params(&[w3 + w2, w2])
            + mlp_params(&[w2 + w1, w1])
            + mlp_params(&[w1 + w1, w1])
            + linear_params(w1, cfg.dim, true)
            + [w1, w2, w3, w2, w1, w1]
                .iter()
                .map(|&c| concatsquash_params(ctx, c))
                .sum::<usize>()
    }

    /// `x_t` is `N × D`, `c_raw` is `N × (3 + C1 + C2)`, `c_local` is
    /// `N_l × (3 + C_l)` and `context` is the `1 × (3 + Z)` time/latent row.
    /// Returns `ε̂` as `N × D`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        structure: &TrunkStructure,
        x_t: Var,
        c_raw: Var,
        c_local: Var,
        context: Var,
    ) -> Result<Var> {
        let n = structure.n;
        let stage_check =
            |tape: &Tape<R>, v: Var, stage: &str, rows: usize, cols: usize| -> Result<()> {
                let s = tape.shape(v);
                if s != [rows, cols] {
                    return Err(Error::invalid(
                        "denoiser_forward",
                        format!("{stage}: expected {rows}×{cols}, got {s:?}"),
                    ));
                }
                Ok(())
            };
        stage_check(tape, x_t, "x_t", n, self.dim)?;
        stage_check(
            tape,
            c_raw,
            "c_raw",
            n,
            self.lift.layers[0].fan_in - self.dim,
        )?;
        let local_cols = self.merge.fan_in - self.lift.out_width();
        let local_rows = tape.shape(c_local).first().copied().unwrap_or(0);
        stage_check(tape, c_local, "c_local", local_rows, local_cols)?;
        let ctx_cols = self.squash[0].gate.fan_in;
        stage_check(tape, context, "context", 1, ctx_cols)?;

        let x = tape.concat(&[x_t, c_raw])?;
        let p0 = self.lift.forward(tape, store, x)?;
        let p1 = set_abstraction(tape, store, &self.enc1, &structure.level1, p0)?;
        let local = structure.local.apply(tape, c_local)?;
        let merged = tape.concat(&[p1, local])?;
        let p1 = self.merge.forward(tape, store, merged)?;
        let p1 = tape.silu(p1)?;
        let p1 = self.squash[0].forward(tape, store, p1, context)?;

        let p2 = set_abstraction(tape, store, &self.enc2, &structure.level2, p1)?;
        let p2 = self.squash[1].forward(tape, store, p2, context)?;
        let p3 = set_abstraction(tape, store, &self.enc3, &structure.level3, p2)?;
        let p3 = self.squash[2].forward(tape, store, p3, context)?;

        let d3 = feature_propagation(tape, store, &self.dec3, &structure.up3, p3, p2)?;
        let d3 = self.squash[3].forward(tape, store, d3, context)?;
        let d2 = feature_propagation(tape, store, &self.dec2, &structure.up2, d3, p1)?;
        let d2 = self.squash[4].forward(tape, store, d2, context)?;
        // Last level shares positions with the first, so no interpolation.
        let x = tape.concat(&[d2, p0])?;
        let d1 = self.dec1.forward(tape, store, x)?;
        let d1 = self.squash[5].forward(tape, store, d1, context)?;
        self.head.forward(tape, store, d1)
    }
}
