use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::DegradationSpec;
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use pointfuse_tensor::{OptimizerKind, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Completion,
    Upsampling,
    Denoising,
    Colorization,
    Combination,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

/// Every knob of a run as one flat JSON object. Absent keys take defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub dataset: String,
    pub out: String,

    // Dataset generation.
    pub scenes: usize,
    pub scene_kind: String,
    pub n_gt: usize,
    pub image_size: usize,
    pub remove_fraction: Option<f64>,
    pub patch_count: Option<usize>,
    pub keep_ratio: Option<f64>,
    pub noise_level: Option<f64>,
    pub strip_color: Option<bool>,

    // Model widths.
    pub c1: usize,
    pub c2: usize,
    pub c_local: usize,
    pub z_dim: usize,
    pub d_k: usize,
    pub local_width1: usize,
    pub local_width2: usize,
    pub width1: usize,
    pub width2: usize,
    pub width3: usize,
    pub k_group: usize,
    pub k_prop: usize,
    pub k_interp: usize,
    pub image_pool: usize,
    pub splat_radius_px: f64,
    pub depth_tol: f64,

    // Schedule.
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,

    // Optimization.
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: Option<usize>,

    // Sampling.
    pub steps: usize,
    pub upsample_ratio: Option<f64>,

    // Metrics.
    pub dcd_alpha: f64,
    pub f1_tau: f64,
    pub emd_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            task: Task::Combination,
            seed: 0,
            dataset: "data".into(),
            out: "out".into(),
            scenes: 4,
            scene_kind: "mixed".into(),
            n_gt: 2048,
            image_size: 32,
            remove_fraction: None,
            patch_count: None,
            keep_ratio: None,
            noise_level: None,
            strip_color: None,
            c1: m.c1,
            c2: m.c2,
            c_local: m.c_local,
            z_dim: m.z_dim,
            d_k: m.d_k,
            local_width1: m.local_widths[0],
            local_width2: m.local_widths[1],
            width1: m.widths[0],
            width2: m.widths[1],
            width3: m.widths[2],
            k_group: m.k_group,
            k_prop: m.k_prop,
            k_interp: m.k_interp,
            image_pool: m.image_pool,
            splat_radius_px: m.splat_radius_px,
            depth_tol: m.depth_tol,
            t_steps: crate::diffusion::DEFAULT_T,
            beta_min: crate::diffusion::DEFAULT_BETA_MIN,
            beta_max: crate::diffusion::DEFAULT_BETA_MAX,
            optimizer: OptimizerChoice::Adam,
            lr: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            batch_size: 4,
            epochs: 200,
            steps_per_epoch: None,
            steps: 100,
            upsample_ratio: None,
            dcd_alpha: crate::metrics::DEFAULT_DCD_ALPHA,
            f1_tau: crate::metrics::DEFAULT_F1_TAU_FRACTION,
            emd_points: crate::metrics::DEFAULT_EMD_RESAMPLE,
        }
    }
}

/// Keys that fix the trained network; a checkpoint only loads under the
/// same values.
pub const MODEL_KEYS: &[&str] = &[
    "task",
    "c1",
    "c2",
    "c_local",
    "z_dim",
    "d_k",
    "local_width1",
    "local_width2",
    "width1",
    "width2",
    "width3",
    "k_group",
    "k_prop",
    "k_interp",
    "image_pool",
    "splat_radius_px",
    "depth_tol",
    "t_steps",
    "beta_min",
    "beta_max",
];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `overrides` (a JSON object of config keys) on top of `self`.
    pub fn merged(&self, overrides: &serde_json::Map<String, serde_json::Value>) -> Result<Self> {
        let mut value = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        let obj = value
            .as_object_mut()
            .expect("config serializes to an object");
        for (k, v) in overrides {
            obj.insert(k.clone(), v.clone());
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }

    pub fn dim(&self) -> usize {
        if self.task == Task::Colorization {
            6
        } else {
            3
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim(),
            c1: self.c1,
            c2: self.c2,
            c_local: self.c_local,
            z_dim: self.z_dim,
            d_k: self.d_k,
            local_widths: [self.local_width1, self.local_width2],
            widths: [self.width1, self.width2, self.width3],
            k_group: self.k_group,
            k_prop: self.k_prop,
            k_interp: self.k_interp,
            image_pool: self.image_pool,
            splat_radius_px: self.splat_radius_px,
            depth_tol: self.depth_tol,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_steps, self.beta_min, self.beta_max)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn optimizer(&self) -> OptimizerState {
        match self.optimizer {
            OptimizerChoice::Adam => OptimizerState::new(
                OptimizerKind::Adam {
                    beta1: self.beta1,
                    beta2: self.beta2,
                    eps: self.eps_opt,
                },
                self.lr,
            ),
            OptimizerChoice::Sgd => OptimizerState::sgd(self.lr, self.momentum),
        }
    }

    /// Task preset with any explicitly configured defect overriding it.
    pub fn degradation(&self, seed: u64) -> DegradationSpec {
        let base = match self.task {
            Task::Completion => DegradationSpec {
                remove_fraction: 0.5,
                ..DegradationSpec::default()
            },
            Task::Upsampling => DegradationSpec {
                keep_ratio: 0.125,
                ..DegradationSpec::default()
            },
            Task::Denoising => DegradationSpec {
                noise_level: 0.01,
                ..DegradationSpec::default()
            },
            Task::Colorization => DegradationSpec {
                strip_color: true,
                ..DegradationSpec::default()
            },
            Task::Combination => DegradationSpec::combination(0),
        };
        DegradationSpec {
            remove_fraction: self.remove_fraction.unwrap_or(base.remove_fraction),
            patch_count: self.patch_count.unwrap_or(base.patch_count),
            keep_ratio: self.keep_ratio.unwrap_or(base.keep_ratio),
            noise_level: self.noise_level.unwrap_or(base.noise_level),
            strip_color: self.strip_color.unwrap_or(base.strip_color),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.schedule()?;
        self.degradation(0).validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.steps == 0 || self.steps > self.t_steps {
            return Err(Error::Config(format!(
                "steps = {} must be in 1..={}",
                self.steps, self.t_steps
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.upsample_ratio.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("upsample_ratio must be positive".into()));
        }
        if !(self.dcd_alpha > 0.0 && self.f1_tau > 0.0) || self.emd_points == 0 {
            return Err(Error::Config("metric parameters must be positive".into()));
        }
        Ok(())
    }

    /// Model keys whose values differ between `self` and `other`.
    pub fn model_differences(&self, other: &RunConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("serializes");
        let b = serde_json::to_value(other).expect("serializes");
        MODEL_KEYS
            .iter()
            .filter(|k| a.get(**k) != b.get(**k))
            .map(|k| k.to_string())
            .collect()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
