use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pointfuse_core::harness::oracle::run_oracles;
use pointfuse_core::harness::{
    cmd_degrade, cmd_eval, cmd_gen, cmd_sample, cmd_train, sampling_config, RunConfig, REPORT_FILE,
};
use pointfuse_core::io::write_json;
use pointfuse_core::{Error, Result};
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(
    name = "pointfuse",
    version,
    about = "Image-guided point cloud restoration by conditional diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize scenes and their degraded inputs.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a denoiser on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Restore every scene of a dataset with a trained checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file, or a training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset or single scene directory holding the inputs.
        #[arg(long)]
        input: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "output.ply")]
        pred_name: String,
        #[arg(long, default_value = "target.ply")]
        gt_name: String,
    },
    /// Run the built-in reference checks.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Suite to run; repeat for several. Runs all when omitted.
        #[arg(long)]
        suite: Vec<String>,
        /// Corrupt one backward pass to confirm the gradient check notices.
        #[arg(long)]
        inject_grad_bug: bool,
    },
    /// Degrade a single PLY file.
    Degrade {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    keys: ConfigArgs,
}

/// One flag per configuration key.
#[derive(Args, Serialize, Default)]
struct ConfigArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    scene_kind: Option<String>,
    #[arg(long)]
    n_gt: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    remove_fraction: Option<f64>,
    #[arg(long)]
    patch_count: Option<usize>,
    #[arg(long)]
    keep_ratio: Option<f64>,
    #[arg(long)]
    noise_level: Option<f64>,
    #[arg(long)]
    strip_color: Option<bool>,
    #[arg(long)]
    c1: Option<usize>,
    #[arg(long)]
    c2: Option<usize>,
    #[arg(long)]
    c_local: Option<usize>,
    #[arg(long)]
    z_dim: Option<usize>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    local_width1: Option<usize>,
    #[arg(long)]
    local_width2: Option<usize>,
    #[arg(long)]
    width1: Option<usize>,
    #[arg(long)]
    width2: Option<usize>,
    #[arg(long)]
    width3: Option<usize>,
    #[arg(long)]
    k_group: Option<usize>,
    #[arg(long)]
    k_prop: Option<usize>,
    #[arg(long)]
    k_interp: Option<usize>,
    #[arg(long)]
    image_pool: Option<usize>,
    #[arg(long)]
    splat_radius_px: Option<f64>,
    #[arg(long)]
    depth_tol: Option<f64>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    beta_min: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps_opt: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    upsample_ratio: Option<f64>,
    #[arg(long)]
    dcd_alpha: Option<f64>,
    #[arg(long)]
    f1_tau: Option<f64>,
    #[arg(long)]
    emd_points: Option<usize>,
}

impl Common {
    /// Config file values followed by flag values, as raw overrides.
    fn overrides(&self) -> Result<Map<String, Value>> {
        let mut map = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => {
                        return Err(Error::Config(format!(
                            "{}: expected a JSON object",
                            path.display()
                        )))
                    }
                    Err(e) => return Err(Error::Config(format!("{}: {e}", path.display()))),
                }
            }
            None => Map::new(),
        };
        if let Value::Object(flags) =
            serde_json::to_value(&self.keys).map_err(|e| Error::Config(e.to_string()))?
        {
            map.extend(flags.into_iter().filter(|(_, v)| !v.is_null()));
        }
        Ok(map)
    }

    fn config(&self) -> Result<RunConfig> {
        let cfg = RunConfig::default().merged(&self.overrides()?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out))
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = common.config()?;
            let manifest = cmd_gen(&cfg, &common.out_dir(&cfg))?;
            print_json(&manifest.scenes)?;
        }
        Command::Train { common, resume } => {
            let cfg = common.config()?;
            let manifest = cmd_train(&cfg, Path::new(&cfg.dataset), &common.out_dir(&cfg), resume)?;
            print_json(&manifest)?;
        }
        Command::Sample {
            common,
            checkpoint,
            input,
        } => {
            let cfg = sampling_config(&checkpoint, &common.overrides()?)?;
            let prov = cmd_sample(&cfg, &checkpoint, &input, &common.out_dir(&cfg))?;
            print_json(&prov)?;
        }
        Command::Eval {
            common,
            pred,
            gt,
            pred_name,
            gt_name,
        } => {
            let cfg = common.config()?;
            let report = cmd_eval(&cfg, &pred, &gt, &pred_name, &gt_name)?;
            let out = common.out.clone().unwrap_or_else(|| pred.clone());
            write_json(&out.join(REPORT_FILE), &report)?;
            print_json(&report.mean)?;
        }
        Command::Oracle {
            common,
            suite,
            inject_grad_bug,
        } => {
            let cfg = common.config()?;
            let report = run_oracles(&suite, cfg.seed, inject_grad_bug)?;
            if let Some(out) = &common.out {
                write_json(&out.join("oracle.json"), &report)?;
            }
            print_json(&report)?;
            if !report.passed {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Degrade { common, input } => {
            let cfg = common.config()?;
            cmd_degrade(&cfg, &input, &common.out_dir(&cfg))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
