use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use pointfuse_tensor::RngStreams;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{
    bytes_hash, dir_hash, list_scenes, scene_name, write_scene, CAMERA_FILE, IMAGE_FILE,
    INPUT_FILE, MANIFEST_FILE, SPEC_FILE,
};
use super::train::{load_training_set, BatchRecord, Trainer};
use crate::degrade::{make_pair, synth_scene, SceneKind};
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_camera, read_ply, read_ppm, write_json, write_ply};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{output_count, Ablation, PreparedInput};

pub const TOOL_VERSION: &str = concat!("pointfuse ", env!("CARGO_PKG_VERSION"));
pub const CHECKPOINT_FILE: &str = "checkpoint.pfck";
pub const BEST_CHECKPOINT_FILE: &str = "best.pfck";
pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const OUTPUT_FILE: &str = "output.ply";
pub const REPORT_FILE: &str = "report.json";

/// Worker cap from `PF_THREADS`, at least one.
pub fn worker_count() -> usize {
    std::env::var("PF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Maps `f` over `items` on up to [`worker_count`] threads, keeping order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = worker_count().min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub scenes: Vec<String>,
    pub config: RunConfig,
}

fn scene_kind(cfg: &RunConfig, i: usize) -> Result<SceneKind> {
    if cfg.scene_kind == "mixed" {
        Ok(SceneKind::ALL[i % SceneKind::ALL.len()])
    } else {
        cfg.scene_kind.parse()
    }
}

/// Synthesizes `cfg.scenes` scenes and their degraded inputs under `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<GenManifest> {
    cfg.validate()?;
    let streams = RngStreams::new(cfg.seed);
    let indices: Vec<usize> = (0..cfg.scenes).collect();
    let results = parallel_map(&indices, |&i| -> Result<String> {
        let name = scene_name(i);
        let scene_seed = streams.child(&format!("scene.{i}")).seed();
        let spec = cfg.degradation(streams.child(&format!("degrade.{i}")).seed());
        let (gt, image, camera) =
            synth_scene(scene_kind(cfg, i)?, cfg.n_gt, scene_seed, cfg.image_size)?;
        let pair = make_pair(&gt, &image, &camera, &spec)?;
        write_scene(&out.join(&name), &pair, &spec)?;
        Ok(name)
    });
    let scenes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = GenManifest {
        tool_version: TOOL_VERSION.into(),
        config_hash: cfg.hash(),
        dataset_hash: dir_hash(out)?,
        scenes,
        config: cfg.clone(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub best_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub parameter_count: usize,
    pub steps: u64,
    pub epoch_losses: Vec<f64>,
    pub final_metrics: Option<MetricReport>,
    pub wall_clock_s: f64,
    pub config: RunConfig,
}

#[derive(Serialize)]
struct NanDump<'a> {
    error: String,
    batch: Option<&'a BatchRecord>,
}

/// Trains on every scene under `dataset`, writing checkpoints, the loss log
/// and a manifest to `out`. With `resume`, continues from `out`'s last
/// checkpoint.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path, resume: bool) -> Result<RunManifest> {
    let start = Instant::now();
    cfg.validate()?;
    let data = load_training_set(cfg, dataset)?;
    let last = out.join(CHECKPOINT_FILE);
    let (mut trainer, mut log) = if resume && last.is_file() {
        let saved = RunConfig::load(&out.join(CONFIG_FILE))?;
        let diffs = saved.model_differences(cfg);
        if !diffs.is_empty() {
            return Err(Error::ConfigMismatch(diffs));
        }
        let log: TrainLog = crate::io::read_json(&out.join(TRAIN_LOG_FILE))?;
        (Trainer::restore(cfg, &last)?, log)
    } else {
        (Trainer::new(cfg)?, TrainLog::default())
    };
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let per_epoch = cfg
        .steps_per_epoch
        .unwrap_or(data.len().div_ceil(cfg.batch_size))
        .max(1) as u64;
    let first_epoch = (trainer.step_count() / per_epoch) as usize;
    for epoch in first_epoch..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..per_epoch {
            match trainer.step(&data) {
                Ok(loss) => total += loss,
                Err(e) => {
                    let numerical = e.exit_code() == 3;
                    if numerical {
                        let dump = NanDump {
                            error: e.to_string(),
                            batch: trainer.last_batch.as_ref(),
                        };
                        write_json(&out.join("nan_dump.json"), &dump)?;
                    }
                    return Err(e);
                }
            }
        }
        let mean = total / per_epoch as f64;
        eprintln!("epoch {:>4}  loss {mean:.6}", epoch + 1);
        log.epoch_losses.push(mean);
        trainer.save(&last)?;
        if log.best_loss.is_none_or(|b| mean < b) {
            log.best_loss = Some(mean);
            trainer.save(&out.join(BEST_CHECKPOINT_FILE))?;
        }
        write_json(&out.join(TRAIN_LOG_FILE), &log)?;
    }
    if !out.join(BEST_CHECKPOINT_FILE).is_file() {
        trainer.save(&out.join(BEST_CHECKPOINT_FILE))?;
        trainer.save(&last)?;
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config_hash: cfg.hash(),
        dataset_hash: dir_hash(dataset)?,
        parameter_count: trainer.store.num_scalars(),
        steps: trainer.step_count(),
        epoch_losses: log.epoch_losses,
        final_metrics: None,
        wall_clock_s: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub checkpoint_hash: String,
    pub input_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub n_out: usize,
}

fn resolve_checkpoint(path: &Path) -> Result<(PathBuf, PathBuf)> {
    if path.is_file() {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        return Ok((dir, path.to_path_buf()));
    }
    for name in [BEST_CHECKPOINT_FILE, CHECKPOINT_FILE] {
        let file = path.join(name);
        if file.is_file() {
            return Ok((path.to_path_buf(), file));
        }
    }
    Err(Error::format(path, "no checkpoint found"))
}

/// Loads the trained config next to `checkpoint`, applies `overrides` and
/// refuses any change to a model key.
pub fn sampling_config(
    checkpoint: &Path,
    overrides: &serde_json::Map<String, serde_json::Value>,
) -> Result<RunConfig> {
    let (dir, _) = resolve_checkpoint(checkpoint)?;
    let trained = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let cfg = trained.merged(overrides)?;
    let diffs = trained.model_differences(&cfg);
    if !diffs.is_empty() {
        return Err(Error::ConfigMismatch(diffs));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the reverse process for every scene under `pairs`.
pub fn cmd_sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    pairs: &Path,
    out: &Path,
) -> Result<Vec<Provenance>> {
    let (_, file) = resolve_checkpoint(checkpoint)?;
    let trainer = Trainer::restore(cfg, &file)?;
    let checkpoint_hash = bytes_hash(&read_bytes(&file)?);
    let plan = trainer.schedule.plan(cfg.steps)?;
    let model_cfg = cfg.model();
    let streams = RngStreams::new(cfg.seed);
    let scenes = list_scenes(pairs)?;
    let results = parallel_map(&scenes, |dir| -> Result<Provenance> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let input = read_ply(&dir.join(INPUT_FILE))?;
        let image = read_ppm(&dir.join(IMAGE_FILE))?;
        let camera = read_camera(&dir.join(CAMERA_FILE))?;
        let prep = PreparedInput::new(&model_cfg, &input, &image, &camera)?;
        let n_out = cfg
            .upsample_ratio
            .map_or(cfg.n_gt, |r| output_count(input.len(), r));
        let mut rng = streams.stream(&format!("sample.{name}"));
        let cloud = trainer.model.sample(
            &trainer.store,
            &prep,
            n_out,
            &plan,
            &mut rng,
            Ablation::NONE,
        )?;
        let dst = out.join(&name);
        write_ply(&dst.join(OUTPUT_FILE), &cloud)?;
        let prov = Provenance {
            tool_version: TOOL_VERSION.into(),
            checkpoint_hash: checkpoint_hash.clone(),
            input_hash: bytes_hash(&read_bytes(&dir.join(INPUT_FILE))?),
            seed: cfg.seed,
            steps: cfg.steps,
            n_out,
        };
        write_json(&dst.join("provenance.json"), &prov)?;
        Ok(prov)
    });
    results.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub scene: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cd: f64,
    pub dcd: f64,
    pub emd: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub color_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairReport>,
    pub mean: Aggregate,
    pub std: Aggregate,
    pub params: EvalParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub alpha: f64,
    pub tau_fraction: f64,
    pub emd_points: usize,
    pub seed: u64,
}

fn aggregate(pairs: &[PairReport], f: impl Fn(&[f64]) -> f64) -> Aggregate {
    let col =
        |g: fn(&MetricReport) -> f64| f(&pairs.iter().map(|p| g(&p.metrics)).collect::<Vec<_>>());
    let colors: Option<Vec<f64>> = pairs.iter().map(|p| p.metrics.color_mse).collect();
    Aggregate {
        cd: col(|m| m.cd),
        dcd: col(|m| m.dcd),
        emd: col(|m| m.emd),
        f1: col(|m| m.f1),
        precision: col(|m| m.precision),
        recall: col(|m| m.recall),
        color_mse: colors.filter(|c| !c.is_empty()).map(|c| f(&c)),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Compares `pred/<scene>/<pred_name>` against `gt/<scene>/<gt_name>` for
/// every scene of `gt`.
pub fn cmd_eval(
    cfg: &RunConfig,
    pred: &Path,
    gt: &Path,
    pred_name: &str,
    gt_name: &str,
) -> Result<EvalReport> {
    cfg.validate()?;
    let scenes = list_scenes(gt)?;
    let streams = RngStreams::new(cfg.seed);
    let results = parallel_map(&scenes, |dir| -> Result<PairReport> {
        let scene = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let pred_dir = if scenes.len() == 1 && dir == gt {
            pred.to_path_buf()
        } else {
            pred.join(&scene)
        };
        let pred_path = pred_dir.join(pred_name);
        if !pred_path.is_file() {
            return Err(Error::format(
                &pred_path,
                format!("missing prediction for {scene}"),
            ));
        }
        let p = read_ply(&pred_path)?;
        let g = read_ply(&dir.join(gt_name))?;
        let mut rng = streams.stream(&format!("eval.{scene}"));
        let metrics = evaluate(&p, &g, cfg.dcd_alpha, cfg.f1_tau, cfg.emd_points, &mut rng)?;
        Ok(PairReport { scene, metrics })
    });
    let pairs = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mean: aggregate(&pairs, mean),
        std: aggregate(&pairs, std),
        pairs,
        params: EvalParams {
            alpha: cfg.dcd_alpha,
            tau_fraction: cfg.f1_tau,
            emd_points: cfg.emd_points,
            seed: cfg.seed,
        },
    })
}

/// Applies the configured degradation to one PLY file.
pub fn cmd_degrade(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let cloud = read_ply(input)?;
    let spec = cfg.degradation(cfg.seed);
    let degraded = spec.apply(&cloud)?;
    write_ply(&out.join(INPUT_FILE), &degraded)?;
    write_json(&out.join(SPEC_FILE), &spec)
}
