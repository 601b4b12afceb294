//! The full conditional model: condition encoders plus denoiser, input
//! preparation, the training objective and the reverse-process sampler.

use pointfuse_tensor::rng::standard_normal;
use pointfuse_tensor::{ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{CondVars, Conditioner, LocalStructure, RawStructure, INPUT_FEATURES};
use crate::denoiser::{Denoiser, TrunkStructure};
use crate::diffusion::{q_sample, reverse_update, NoiseSchedule, SamplingPlan};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Normalization, Point, PointCloud};
use crate::io::RgbImage;
use crate::nn::context_row;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 3 for geometry, 6 for xyz + rgb.
    pub dim: usize,
    pub c1: usize,
    pub c2: usize,
    pub c_local: usize,
    pub z_dim: usize,
    pub d_k: usize,
    pub local_widths: [usize; 2],
    pub widths: [usize; 3],
    pub k_group: usize,
    pub k_prop: usize,
    pub k_interp: usize,
    pub image_pool: usize,
    pub splat_radius_px: f64,
    /// Depth tolerance as a fraction of the bounding-sphere radius.
    pub depth_tol: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 3,
            c1: 16,
            c2: 16,
            c_local: 64,
            z_dim: 128,
            d_k: 32,
            local_widths: [32, 64],
            widths: [64, 128, 256],
            k_group: 16,
            k_prop: 8,
            k_interp: 4,
            image_pool: 4,
            splat_radius_px: 2.0,
            depth_tol: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn raw_width(&self) -> usize {
        3 + self.c1 + self.c2
    }

    pub fn local_width(&self) -> usize {
        3 + self.c_local
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 3 && self.dim != 6 {
            return Err(Error::Config(format!(
                "dim must be 3 or 6, got {}",
                self.dim
            )));
        }
        let widths = [
            self.c1,
            self.c2,
            self.c_local,
            self.z_dim,
            self.d_k,
            self.local_widths[0],
            self.local_widths[1],
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.k_group,
            self.k_prop,
            self.k_interp,
            self.image_pool,
        ];
        if widths.contains(&0) {
            return Err(Error::Config(
                "widths and neighbour counts must be positive".into(),
            ));
        }
        if !(self.splat_radius_px > 0.0) || !(self.depth_tol >= 0.0) {
            return Err(Error::Config(
                "splat radius must be positive and depth tolerance nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Which conditions reach the denoiser; a disabled one is replaced by zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub raw: bool,
    pub local: bool,
    pub global: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        raw: true,
        local: true,
        global: true,
    };
}

impl Default for Ablation {
    fn default() -> Self {
        Self::NONE
    }
}

/// Input cloud, image and camera in the normalized frame of the input.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    pub norm: Normalization,
    pub camera: Camera,
    pub depth_tol: f64,
    pub image: RgbImage,
    pub input_pos: Vec<Point>,
    pub input_feats: Tensor<f32>,
    pub local: LocalStructure,
}

impl PreparedInput {
    pub fn new(
        cfg: &ModelConfig,
        input: &PointCloud,
        image: &RgbImage,
        camera: &Camera,
    ) -> Result<Self> {
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::invalid(
                "prepare",
                format!(
                    "image is {}×{} but camera expects {}×{}",
                    image.width, image.height, camera.width, camera.height
                ),
            ));
        }
        let norm = Normalization::fit(input);
        let input_pos: Vec<Point> = input.positions().iter().map(|p| norm.apply(p)).collect();
        let mut feats = Vec::with_capacity(input.len() * INPUT_FEATURES);
        for (i, p) in input_pos.iter().enumerate() {
            feats.extend_from_slice(p);
            match input.colors() {
                Some(c) => feats.extend(c[3 * i..3 * i + 3].iter().map(|&v| 2.0 * v - 1.0)),
                None => feats.extend([0.0; 3]),
            }
        }
        let input_feats = Tensor::new([input.len(), INPUT_FEATURES], feats)?;
        let local = LocalStructure::build(cfg, &input_pos, image.width, image.height)?;
        Ok(Self {
            camera: normalized_camera(camera, &norm),
            depth_tol: cfg.depth_tol,
            norm,
            image: image.clone(),
            input_pos,
            input_feats,
            local,
        })
    }

    /// Target cloud as `N × D` rows in the normalized frame.
    pub fn encode_target(&self, target: &PointCloud, dim: usize) -> Result<Vec<f32>> {
        let colors = match dim {
            6 => Some(target.colors().ok_or_else(|| {
                Error::invalid("encode_target", "colorization needs a colored target")
            })?),
            _ => None,
        };
        let mut out = Vec::with_capacity(target.len() * dim);
        for (i, p) in target.positions().iter().enumerate() {
            out.extend_from_slice(&self.norm.apply(p));
            if let Some(c) = colors {
                out.extend(c[3 * i..3 * i + 3].iter().map(|&v| 2.0 * v - 1.0));
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode_target`](Self::encode_target); colors are clamped
    /// to `[0, 1]`.
    pub fn decode(&self, x: &[f32], dim: usize) -> Result<PointCloud> {
        let rows = x.chunks_exact(dim);
        let positions = rows
            .clone()
            .map(|r| self.norm.invert(&[r[0], r[1], r[2]]))
            .collect();
        if dim == 6 {
            let colors = rows
                .flat_map(|r| r[3..6].iter().map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)))
                .collect();
            PointCloud::with_features(positions, 3, colors)
        } else {
            PointCloud::new(positions)
        }
    }
}

/// The same camera looking at the normalized frame `x_n = (x − c)/s`.
/// Pixel coordinates are unchanged and depths scale by `1/s`.
pub fn normalized_camera(camera: &Camera, norm: &Normalization) -> Camera {
    let r = &camera.rotation;
    let c = norm.center;
    let translation = std::array::from_fn(|i| {
        (r[3 * i] * c[0] + r[3 * i + 1] * c[1] + r[3 * i + 2] * c[2] + camera.translation[i])
            / norm.scale
    });
    Camera {
        translation,
        ..camera.clone()
    }
}

fn positions_of<R: Real>(x: &[R], dim: usize) -> Vec<Point> {
    x.chunks_exact(dim)
        .map(|r| {
            [
                r[0].as_f64() as f32,
                r[1].as_f64() as f32,
                r[2].as_f64() as f32,
            ]
        })
        .collect()
}

fn zeros_like<R: Real>(tape: &mut Tape<R>, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    tape.constant(Tensor::zeros(shape))
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub cond: Conditioner,
    pub net: Denoiser,
}

impl Model {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            cond: Conditioner::new(cfg, store, rng)?,
            net: Denoiser::new(cfg, store, rng)?,
        })
    }

    pub fn expected_params(cfg: &ModelConfig) -> usize {
        Conditioner::expected_params(cfg) + Denoiser::expected_params(cfg)
    }

    pub fn conditions<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        prep: &PreparedInput,
    ) -> Result<CondVars> {
        let feats = prep.input_feats.cast::<R>();
        self.cond
            .build(tape, store, &prep.local, &feats, &prep.image)
    }

    /// `ε̂` for the `N × D` state `x_t` at step `t` of `t_max`.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_noise<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        prep: &PreparedInput,
        conds: &CondVars,
        x_t: &[R],
        t: usize,
        t_max: usize,
        ablation: Ablation,
    ) -> Result<Var> {
        let dim = self.cfg.dim;
        if x_t.is_empty() || x_t.len() % dim != 0 {
            return Err(Error::invalid(
                "denoiser_forward",
                format!("{} values is not N × {dim}", x_t.len()),
            ));
        }
        let points = positions_of(x_t, dim);
        let raw_structure = RawStructure::build(
            &self.cfg,
            &prep.camera,
            prep.depth_tol,
            &prep.input_pos,
            &points,
        )?;
        let trunk = TrunkStructure::build(&self.cfg, &points, prep.local.local_positions())?;
        let mut c_raw = self
            .cond
            .build_raw_condition(tape, &raw_structure, conds, &points)?;
        if !ablation.raw {
            c_raw = zeros_like(tape, c_raw);
        }
        let c_local = if ablation.local {
            conds.c_local
        } else {
            zeros_like(tape, conds.c_local)
        };
        let z = if ablation.global {
            conds.z
        } else {
            zeros_like(tape, conds.z)
        };
        let context = context_row(tape, t, t_max, z)?;
        let x = tape.constant(Tensor::new([points.len(), dim], x_t.to_vec())?);
        self.net
            .forward(tape, store, &trunk, x, c_raw, c_local, context)
    }

    /// `mean((ε − ε_θ(x_t, c, t))²)` with `x_t` drawn in closed form.
    #[allow(clippy::too_many_arguments)]
    pub fn training_loss<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        prep: &PreparedInput,
        conds: &CondVars,
        x0: &[R],
        t: usize,
        eps: &[R],
        schedule: &NoiseSchedule,
    ) -> Result<Var> {
        let x_t = q_sample(x0, t, eps, schedule)?;
        let pred = self.predict_noise(
            tape,
            store,
            prep,
            conds,
            &x_t,
            t,
            schedule.steps(),
            Ablation::NONE,
        )?;
        noise_mse(tape, pred, eps)
    }

    /// Runs the reverse process from `N_out × D` standard normal noise and
    /// returns the final state in the normalized frame.
    pub fn sample_normalized(
        &self,
        store: &ParamStore,
        prep: &PreparedInput,
        n_out: usize,
        plan: &SamplingPlan,
        rng: &mut impl Rng,
        ablation: Ablation,
    ) -> Result<Vec<f32>> {
        if n_out == 0 {
            return Err(Error::invalid(
                "sample",
                "output cardinality must be positive",
            ));
        }
        let dim = self.cfg.dim;
        let values = {
            let mut tape = Tape::no_grad();
            let conds = self.conditions(&mut tape, store, prep)?;
            conds.detach(&tape)
        };
        let mut x: Vec<f32> = standard_normal(rng, n_out * dim);
        for i in (0..plan.len()).rev() {
            let mut tape = Tape::no_grad();
            let conds = values.attach(&mut tape);
            let eps = self.predict_noise(
                &mut tape,
                store,
                prep,
                &conds,
                &x,
                plan.timesteps[i],
                plan.t_max,
                ablation,
            )?;
            let z: Option<Vec<f32>> = (i > 0).then(|| standard_normal(rng, n_out * dim));
            x = reverse_update(&x, tape.value(eps), plan.coefficients(i), z.as_deref())?;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite state at step {}",
                    plan.timesteps[i]
                )));
            }
        }
        Ok(x)
    }

    pub fn sample(
        &self,
        store: &ParamStore,
        prep: &PreparedInput,
        n_out: usize,
        plan: &SamplingPlan,
        rng: &mut impl Rng,
        ablation: Ablation,
    ) -> Result<PointCloud> {
        let x = self.sample_normalized(store, prep, n_out, plan, rng, ablation)?;
        prep.decode(&x, self.cfg.dim)
    }
}

pub fn noise_mse<R: Real>(tape: &mut Tape<R>, pred: Var, eps: &[R]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.iter().product::<usize>() != eps.len() {
        return Err(Error::invalid(
            "training_loss",
            format!(
                "denoiser output {shape:?} does not match {} noise values",
                eps.len()
            ),
        ));
    }
    let target = tape.constant(Tensor::new(shape, eps.to_vec())?);
    let diff = tape.sub(target, pred)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}

/// Output cardinality for an upsampling ratio.
pub fn output_count(n_in: usize, ratio: f64) -> usize {
    (n_in as f64 * ratio).round() as usize
}
