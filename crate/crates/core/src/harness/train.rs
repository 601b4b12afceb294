use std::path::Path;

use pointfuse_tensor::rng::standard_normal;
use pointfuse_tensor::{
    checkpoint, OptimizerState, ParamStore, RngStreams, Tape, Tensor, TensorError,
};
use rand::Rng;

use super::config::RunConfig;
use super::dataset::{list_scenes, read_scene};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{Model, PreparedInput};

/// One training scene with everything that does not change across steps.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub name: String,
    pub prep: PreparedInput,
    pub x0: Vec<f32>,
}

impl TrainSample {
    pub fn from_pair(
        cfg: &RunConfig,
        name: &str,
        pair: &crate::degrade::SamplePair,
    ) -> Result<Self> {
        let model_cfg = cfg.model();
        let prep = PreparedInput::new(&model_cfg, &pair.input, &pair.image, &pair.camera)?;
        let x0 = prep.encode_target(&pair.target, model_cfg.dim)?;
        Ok(Self {
            name: name.to_string(),
            prep,
            x0,
        })
    }
}

pub fn load_training_set(cfg: &RunConfig, dataset: &Path) -> Result<Vec<TrainSample>> {
    list_scenes(dataset)?
        .into_iter()
        .map(|dir| {
            let pair = read_scene(&dir)?;
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            TrainSample::from_pair(cfg, &name, &pair)
        })
        .collect()
}

/// What went into a failed step, for the diagnostic dump.
#[derive(Clone, Debug, serde::Serialize)]
pub struct BatchRecord {
    pub step: u64,
    pub scenes: Vec<String>,
    pub timesteps: Vec<usize>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optim: OptimizerState,
    pub schedule: NoiseSchedule,
    streams: RngStreams,
    pub last_batch: Option<BatchRecord>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let streams = RngStreams::new(cfg.seed);
        let mut store = ParamStore::new();
        let model = Model::new(&cfg.model(), &mut store, &mut streams.stream("init"))?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            optim: cfg.optimizer(),
            schedule: cfg.schedule()?,
            store,
            streams,
            last_batch: None,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step_count()
    }

    /// Mean noise-prediction loss over a batch of `(scene, t, ε)` draws,
    /// followed by one optimizer update.
    pub fn step(&mut self, data: &[TrainSample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("train", "empty training set"));
        }
        let step = self.optim.step_count();
        let mut rng = self.streams.stream(&format!("train.step.{step}"));
        let batch = self.cfg.batch_size;
        let mut record = BatchRecord {
            step,
            scenes: Vec::with_capacity(batch),
            timesteps: Vec::with_capacity(batch),
        };
        let draws: Vec<(usize, usize, Vec<f32>)> = (0..batch)
            .map(|_| {
                let s = rng.random_range(0..data.len());
                let t = rng.random_range(1..=self.schedule.steps());
                let eps = standard_normal(&mut rng, data[s].x0.len());
                record.scenes.push(data[s].name.clone());
                record.timesteps.push(t);
                (s, t, eps)
            })
            .collect();
        self.last_batch = Some(record);

        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(batch);
        for (s, t, eps) in &draws {
            let sample = &data[*s];
            let conds = self
                .model
                .conditions(&mut tape, &self.store, &sample.prep)?;
            let loss = self.model.training_loss(
                &mut tape,
                &self.store,
                &sample.prep,
                &conds,
                &sample.x0,
                *t,
                eps,
                &self.schedule,
            )?;
            losses.push(loss);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let total = tape.mul_scalar(total, 1.0 / batch as f32)?;
        let value = tape.scalar_value(total)? as f64;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss is {value} at step {step}")));
        }
        let grads = tape.backward(total)?;
        grads.accumulate_into(&mut self.store)?;
        self.optim.step(&mut self.store)?;
        if !self.store.all_finite() {
            return Err(Error::Numerical(format!(
                "parameters became non-finite at step {step}"
            )));
        }
        Ok(value)
    }

    /// Parameters, optimizer state and schedule constants.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|(_, name, t)| {
                (
                    name.to_string(),
                    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape"),
                )
            })
            .collect();
        out.extend(self.optim.export(&self.store));
        let sched = |v: &[f64]| {
            Tensor::new([v.len()], v.iter().map(|&x| x as f32).collect()).expect("vector")
        };
        out.push(("schedule.beta".into(), sched(&self.schedule.beta)));
        out.push(("schedule.alpha_bar".into(), sched(&self.schedule.alpha_bar)));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.store.all_finite() {
            return Err(Error::Numerical(
                "refusing to save non-finite parameters".into(),
            ));
        }
        checkpoint::save(path, &self.checkpoint_tensors()).map_err(|e| checkpoint_error(path, e))
    }

    /// Rebuilds a trainer from `cfg` and overwrites its state from a
    /// checkpoint file.
    pub fn restore(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let mut trainer = Self::new(cfg)?;
        let tensors = checkpoint::load(path).map_err(|e| checkpoint_error(path, e))?;
        load_params(&mut trainer.store, &tensors, path)?;
        let lookup = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
        };
        if lookup("optim.step").is_some() {
            trainer
                .optim
                .import(&trainer.store, lookup)
                .map_err(|e| checkpoint_error(path, e))?;
        }
        Ok(trainer)
    }
}

fn checkpoint_error(path: &Path, e: TensorError) -> Error {
    match e {
        TensorError::Io(source) => Error::io(path, source),
        other => Error::format(path, other.to_string()),
    }
}

/// Copies every parameter of `store` from `tensors`, by name, checking shapes.
pub fn load_params(
    store: &mut ParamStore,
    tensors: &[(String, Tensor)],
    path: &Path,
) -> Result<()> {
    let ids: Vec<_> = store
        .iter()
        .map(|(id, name, _)| (id, name.to_string()))
        .collect();
    for (id, name) in ids {
        let t = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(path, format!("checkpoint lacks parameter {name}")))?;
        let dst = store.get_mut(id);
        if t.shape() != dst.shape() {
            return Err(Error::format(
                path,
                format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                ),
            ));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
