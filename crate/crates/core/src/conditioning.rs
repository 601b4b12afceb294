//! Raw, local and global conditions built from the degraded input cloud and
//! its image.

use pointfuse_tensor::{ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::denoiser::{points_tensor, set_abstraction, Grouping, Interp};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, project_points, splat_zbuffer, Camera, Point};
use crate::io::RgbImage;
use crate::model::ModelConfig;
use crate::nn::{linear_params, mlp_params, Linear, Mlp};

/// Per-point input channels: xyz plus colors mapped to `[-1, 1]`, zeros when
/// the cloud is colorless.
pub const INPUT_FEATURES: usize = 6;

pub const MIN_IMAGE_SIZE: usize = 16;
pub const MIN_INPUT_POINTS: usize = 16;

/// Parameter-free structure derived from the input cloud and image size.
#[derive(Clone, Debug)]
pub struct LocalStructure {
    pub level_a: Grouping,
    pub level_b: Grouping,
    pub up: Interp,
    pub pool_idx: Vec<u32>,
    pub pool_w: Vec<f64>,
    pub pool_k: usize,
    pub tokens: usize,
}

impl LocalStructure {
    pub fn build(
        cfg: &ModelConfig,
        input_pos: &[Point],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let n = input_pos.len();
        if n < MIN_INPUT_POINTS {
            return Err(Error::invalid(
                "encode_points_local",
                format!("input cloud has {n} points, need at least {MIN_INPUT_POINTS}"),
            ));
        }
        let m_a = n.div_ceil(4);
        let level_a = Grouping::build(input_pos, m_a, cfg.k_group.min(n))?;
        let m_b = n.div_ceil(16);
        let level_b = Grouping::build(&level_a.center_pos, m_b, cfg.k_group.min(m_a))?;
        let up = Interp::build(&level_b.center_pos, &level_a.center_pos, cfg.k_interp)?;
        let (pool_idx, pool_w, pool_k, tokens) = patch_pooling(width, height, cfg.image_pool);
        Ok(Self {
            level_a,
            level_b,
            up,
            pool_idx,
            pool_w,
            pool_k,
            tokens,
        })
    }

    pub fn local_positions(&self) -> &[Point] {
        &self.level_a.center_pos
    }
}

/// Mean over `p × p` pixel blocks, row-major over the block grid.
fn patch_pooling(width: usize, height: usize, p: usize) -> (Vec<u32>, Vec<f64>, usize, usize) {
    let p = p.max(1);
    let (bw, bh) = (width.div_ceil(p), height.div_ceil(p));
    let k = p * p;
    let mut idx = Vec::with_capacity(bw * bh * k);
    let mut w = Vec::with_capacity(bw * bh * k);
    for by in 0..bh {
        for bx in 0..bw {
            let mut cells = Vec::with_capacity(k);
            for y in by * p..((by + 1) * p).min(height) {
                for x in bx * p..((bx + 1) * p).min(width) {
                    cells.push((y * width + x) as u32);
                }
            }
            let share = 1.0 / cells.len() as f64;
            for j in 0..k {
                match cells.get(j) {
                    Some(&c) => {
                        idx.push(c);
                        w.push(share);
                    }
                    None => {
                        idx.push(0);
                        w.push(0.0);
                    }
                }
            }
        }
    }
    (idx, w, k, bw * bh)
}

/// Image taps and input-cloud interpolation for one noisy cloud.
#[derive(Clone, Debug)]
pub struct RawStructure {
    pub taps_idx: Vec<u32>,
    pub taps_w: Vec<f64>,
    pub visible: Vec<bool>,
    pub interp: Interp,
}

impl RawStructure {
    /// `camera` and `depth_tol` must be expressed in the same (normalized)
    /// frame as the points.
    pub fn build(
        cfg: &ModelConfig,
        camera: &Camera,
        depth_tol: f64,
        input_pos: &[Point],
        points: &[Point],
    ) -> Result<Self> {
        let proj = project_points(camera, points);
        let (zbuf, _) = splat_zbuffer(camera, &proj, cfg.splat_radius_px);
        let mut taps_idx = Vec::with_capacity(points.len() * 4);
        let mut taps_w = Vec::with_capacity(points.len() * 4);
        let mut visible = Vec::with_capacity(points.len());
        for p in &proj {
            let vis = p.in_frustum && {
                let (pu, pv) = p.pixel();
                p.depth <= zbuf[pv * camera.width + pu] + depth_tol
            };
            visible.push(vis);
            if vis {
                for (i, w) in bilinear_taps(p.u, p.v, camera.width, camera.height) {
                    taps_idx.push(i);
                    taps_w.push(w);
                }
            } else {
                taps_idx.extend([0; 4]);
                taps_w.extend([0.0; 4]);
            }
        }
        let interp = Interp::build(input_pos, points, cfg.k_interp)?;
        Ok(Self {
            taps_idx,
            taps_w,
            visible,
            interp,
        })
    }
}

/// Condition tensors on a tape. `image` is `(H·W) × C1`, `lifted` is
/// `N_in × C2`, `c_local` is `N_l × (3 + C_l)` and `z` has `Z` entries.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    pub image: Var,
    pub lifted: Var,
    pub c_local: Var,
    pub z: Var,
}

/// Detached condition values, reusable across reverse steps.
#[derive(Clone, Debug, PartialEq)]
pub struct CondValues<R = f32> {
    pub image: Tensor<R>,
    pub lifted: Tensor<R>,
    pub c_local: Tensor<R>,
    pub z: Tensor<R>,
}

impl CondVars {
    pub fn detach<R: Real>(&self, tape: &Tape<R>) -> CondValues<R> {
        CondValues {
            image: tape.tensor(self.image),
            lifted: tape.tensor(self.lifted),
            c_local: tape.tensor(self.c_local),
            z: tape.tensor(self.z),
        }
    }
}

impl<R: Real> CondValues<R> {
    pub fn attach(&self, tape: &mut Tape<R>) -> CondVars {
        CondVars {
            image: tape.constant(self.image.clone()),
            lifted: tape.constant(self.lifted.clone()),
            c_local: tape.constant(self.c_local.clone()),
            z: tape.constant(self.z.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conditioner {
    conv: [Linear; 3],
    point_lift: Mlp,
    local_a: Mlp,
    local_b: Mlp,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    fuse: Mlp,
    lateral: Linear,
    top_down: Linear,
    global: Mlp,
}

impl Conditioner {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let (c1, c2, cl, dk) = (cfg.c1, cfg.c2, cfg.c_local, cfg.d_k);
        let [la, lb] = cfg.local_widths;
        Ok(Self {
            conv: [
                Linear::new(store, "image.conv0", 27, c1, true, rng)?,
                Linear::new(store, "image.conv1", 9 * c1, c1, true, rng)?,
                Linear::new(store, "image.conv2", 9 * c1, c1, true, rng)?,
            ],
            point_lift: Mlp::new(store, "raw.lift", &[INPUT_FEATURES, c2, c2], false, rng)?,
            local_a: Mlp::new(store, "local.sa0", &[3 + INPUT_FEATURES, la, la], true, rng)?,
            local_b: Mlp::new(store, "local.sa1", &[3 + la, lb, lb], true, rng)?,
            wq: Linear::new(store, "local.attn.q", lb, dk, false, rng)?,
            wk: Linear::new(store, "local.attn.k", c1, dk, false, rng)?,
            wv: Linear::new(store, "local.attn.v", c1, dk, false, rng)?,
            wo: Linear::new(store, "local.attn.o", dk, lb, true, rng)?,
            fuse: Mlp::new(store, "local.fuse", &[lb, lb], true, rng)?,
            lateral: Linear::new(store, "local.lateral", la, cl, true, rng)?,
            top_down: Linear::new(store, "local.top_down", lb, cl, false, rng)?,
            global: Mlp::new(
                store,
                "global.mlp",
                &[3 + cl, cfg.z_dim, cfg.z_dim],
                false,
                rng,
            )?,
        })
    }

    pub fn expected_params(cfg: &ModelConfig) -> usize {
        let (c1, c2, cl, dk) = (cfg.c1, cfg.c2, cfg.c_local, cfg.d_k);
        let [la, lb] = cfg.local_widths;
        linear_params(27, c1, true)
            + 2 * linear_params(9 * c1, c1, true)
            + mlp_params(&[INPUT_FEATURES, c2, c2])
            + mlp_params(&[3 + INPUT_FEATURES, la, la])
            + mlp_params(&[3 + la, lb, lb])
            + linear_params(lb, dk, false)
            + 2 * linear_params(c1, dk, false)
            + linear_params(dk, lb, true)
            + mlp_params(&[lb, lb])
            + linear_params(la, cl, true)
            + linear_params(lb, cl, false)
            + mlp_params(&[3 + cl, cfg.z_dim, cfg.z_dim])
    }

    pub fn num_params(&self) -> usize {
        self.conv.iter().map(Linear::num_params).sum::<usize>()
            + [
                &self.point_lift,
                &self.local_a,
                &self.local_b,
                &self.fuse,
                &self.global,
            ]
            .iter()
            .map(|m| m.num_params())
            .sum::<usize>()
            + [
                &self.wq,
                &self.wk,
                &self.wv,
                &self.wo,
                &self.lateral,
                &self.top_down,
            ]
            .iter()
            .map(|l| l.num_params())
            .sum::<usize>()
    }

    /// Three 3×3 same-size convolutions with ReLU; returns `(H·W) × C1`.
    pub fn encode_image<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        image: &RgbImage,
    ) -> Result<Var> {
        let (h, w) = (image.height, image.width);
        if h < MIN_IMAGE_SIZE || w < MIN_IMAGE_SIZE {
            return Err(Error::invalid(
                "encode_image",
                format!("image is {w}×{h}, need at least {MIN_IMAGE_SIZE}×{MIN_IMAGE_SIZE}"),
            ));
        }
        let data = image.data.iter().map(|&v| R::of(v as f64)).collect();
        let mut x = tape.constant(Tensor::new([h, w, 3], data)?);
        let mut out = x;
        for conv in &self.conv {
            let patches = tape.patches3x3(x)?;
            let y = conv.forward(tape, store, patches)?;
            out = tape.relu(y)?;
            x = tape.reshape(out, &[h, w, conv.fan_out])?;
        }
        Ok(out)
    }

    /// Per-point lift of the input cloud features to C2 channels.
    pub fn lift_points<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        input_feats: Var,
    ) -> Result<Var> {
        self.point_lift.forward(tape, store, input_feats)
    }

    /// Two set-abstraction levels over the input cloud.
    pub fn encode_points_local<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        structure: &LocalStructure,
        input_feats: Var,
    ) -> Result<(Var, Var)> {
        let fa = set_abstraction(tape, store, &self.local_a, &structure.level_a, input_feats)?;
        let fb = set_abstraction(tape, store, &self.local_b, &structure.level_b, fa)?;
        Ok((fa, fb))
    }

    /// Point queries attend over pooled image patches; residual plus MLP.
    pub fn cross_attention_fuse<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        tokens: Var,
        points: Var,
    ) -> Result<Var> {
        let (out, _) = self.attend(tape, store, tokens, points)?;
        let o = self.wo.forward(tape, store, out)?;
        let h = tape.add(points, o)?;
        self.fuse.forward(tape, store, h)
    }

    /// Attention output and weights (`queries × tokens`).
    pub fn attend<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        tokens: Var,
        points: Var,
    ) -> Result<(Var, Var)> {
        let q = self.wq.forward(tape, store, points)?;
        let k = self.wk.forward(tape, store, tokens)?;
        let v = self.wv.forward(tape, store, tokens)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.mul_scalar(scores, R::of(1.0 / (self.wq.fan_out as f64).sqrt()))?;
        let attn = tape.softmax(scores, 1)?;
        Ok((tape.matmul(attn, v)?, attn))
    }

    /// `N_l × (3 + C_l)`: level-a positions with the top-down merged map.
    pub fn build_local_condition<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        structure: &LocalStructure,
        input_feats: Var,
        image: Var,
    ) -> Result<Var> {
        let (fa, fb) = self.encode_points_local(tape, store, structure, input_feats)?;
        let tokens = tape.mix_rows(
            image,
            &structure.pool_idx,
            &structure
                .pool_w
                .iter()
                .map(|&w| R::of(w))
                .collect::<Vec<_>>(),
            structure.pool_k,
        )?;
        let fused = self.cross_attention_fuse(tape, store, tokens, fb)?;
        let up = structure.up.apply(tape, fused)?;
        let top = self.top_down.forward(tape, store, up)?;
        let lat = self.lateral.forward(tape, store, fa)?;
        let merged = tape.add(lat, top)?;
        let pos = tape.constant(points_tensor(structure.local_positions()));
        Ok(tape.concat(&[pos, merged])?)
    }

    /// Per-row MLP then channelwise max over rows.
    pub fn build_global_condition<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        c_local: Var,
    ) -> Result<Var> {
        if tape.shape(c_local).first().copied().unwrap_or(0) == 0 {
            return Err(Error::invalid(
                "build_global_condition",
                "empty local condition",
            ));
        }
        let h = self.global.forward(tape, store, c_local)?;
        Ok(tape.max_axis(h, 0)?)
    }

    /// All input-dependent conditions for one sample.
    pub fn build<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        structure: &LocalStructure,
        input_feats: &Tensor<R>,
        image: &RgbImage,
    ) -> Result<CondVars> {
        let feats = tape.constant(input_feats.clone());
        let image = self.encode_image(tape, store, image)?;
        let lifted = self.lift_points(tape, store, feats)?;
        let c_local = self.build_local_condition(tape, store, structure, feats, image)?;
        let z = self.build_global_condition(tape, store, c_local)?;
        Ok(CondVars {
            image,
            lifted,
            c_local,
            z,
        })
    }

    /// `N × (3 + C1 + C2)`: positions, sampled image features (zero where
    /// hidden) and interpolated input-cloud features.
    pub fn build_raw_condition<R: Real>(
        &self,
        tape: &mut Tape<R>,
        structure: &RawStructure,
        conds: &CondVars,
        points: &[Point],
    ) -> Result<Var> {
        let w: Vec<R> = structure.taps_w.iter().map(|&w| R::of(w)).collect();
        let img = tape.mix_rows(conds.image, &structure.taps_idx, &w, 4)?;
        let pts = structure.interp.apply(tape, conds.lifted)?;
        let pos = tape.constant(points_tensor(points));
        Ok(tape.concat(&[pos, img, pts])?)
    }
}
