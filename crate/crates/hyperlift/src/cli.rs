//! Command implementations behind the binary: train, sample, eval, bench,
//! and kernel inspection. Every command is a function of a [`RunConfig`] so
//! runs are reproducible and scriptable; with a fixed seed the file and
//! stdout outputs are byte-identical across reruns (wall-clock throughput is
//! reported on stderr only).

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{DenoiserConfig, DenoiserError, DenoiserModel, TrainMeta};
use crate::diffusion::{
    sample, DiffusionError, DiffusionSchedule, SamplerConfig,
};
use crate::evaluation::{
    check_joint_count, evaluate, load_predictions, load_records, predictions_from, save_predictions,
    save_records, synth_dataset, EvalError, MetricReport, PoseRecord, Prediction,
};
use crate::kernels::{graph_kernel, hyperedge_degrees, hypergraph_kernel, vertex_degrees, KernelError};
use crate::numerics::optim::{adam_step, AdamParams, AdamState};
use crate::numerics::rng::{randn, splitmix64, stream};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::{NumericsError, Tensor};
use crate::skeleton::{default_skeleton, load_skeleton, Scale, Skeleton, SkeletonError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
}

impl CliError {
    /// Stable tag for the machine-readable error record on stderr.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Skeleton(_) => "skeleton",
            CliError::Denoiser(_) => "denoiser",
            CliError::Diffusion(_) => "diffusion",
            CliError::Eval(_) => "evaluation",
            CliError::Kernel(_) => "kernel",
            CliError::Numerics(_) => "numerics",
            CliError::Io(_) => "io",
            CliError::Json(_) => "parse",
            CliError::NonFiniteLoss { .. } => "training",
        }
    }
}

/// Where training/evaluation records come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Newline-delimited record file.
    Path(String),
    /// Deterministic synthetic dataset (written next to the run outputs).
    Synth { records: usize, noise_2d: f64 },
}

/// Learning-rate trajectory over the training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// Fixed learning rate for every step.
    #[default]
    Constant,
    /// Half-cosine decay from the configured rate to zero across the run.
    Cosine,
}

impl LrSchedule {
    fn factor(&self, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let progress = step as f64 / total_steps.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Full description of one run. Files supply defaults, flags override, and
/// the resolved value is echoed into the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// "default" or a skeleton file path.
    pub skeleton: String,
    pub denoiser: DenoiserConfig,
    /// Total diffusion timesteps for training schedules.
    pub timesteps: usize,
    pub hypotheses: usize,
    pub iterations: usize,
    pub optimizer: AdamParams,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Poses are divided by this scale before entering the model.
    pub pose_scale: f64,
    pub data: Option<DataSource>,
    pub checkpoint: Option<String>,
    pub predictions: Option<String>,
    pub out: Option<String>,
    pub bench_seconds: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            skeleton: "default".to_string(),
            denoiser: DenoiserConfig::default(),
            timesteps: 1000,
            hypotheses: 1,
            iterations: 1,
            optimizer: AdamParams::default(),
            lr_schedule: LrSchedule::default(),
            epochs: 200,
            batch_size: 16,
            pose_scale: 1000.0,
            data: None,
            checkpoint: None,
            predictions: None,
            out: None,
            bench_seconds: 3.0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("seed is mandatory (--seed or config.seed)".into()))
    }
}

/// Stream indices for deriving purpose-specific RNG seeds from the run seed.
mod streams {
    pub const SAMPLER: u64 = 3;
}

fn sampler_seed(seed: u64) -> u64 {
    splitmix64(seed ^ splitmix64(streams::SAMPLER))
}

fn resolve_skeleton(config: &RunConfig) -> Result<Skeleton, CliError> {
    if config.skeleton == "default" {
        Ok(default_skeleton())
    } else {
        Ok(load_skeleton(&config.skeleton)?)
    }
}

/// Create the output directory (if configured) and echo the resolved config.
fn prepare_out(config: &RunConfig) -> Result<Option<PathBuf>, CliError> {
    let Some(out) = &config.out else { return Ok(None) };
    let dir = PathBuf::from(out);
    std::fs::create_dir_all(&dir)?;
    let echo = serde_json::to_string_pretty(config)?;
    std::fs::write(dir.join("config.json"), echo + "\n")?;
    Ok(Some(dir))
}

fn resolve_records(
    config: &RunConfig,
    skeleton: &Skeleton,
    out: Option<&Path>,
) -> Result<Vec<PoseRecord>, CliError> {
    let source = config
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("no dataset configured (--data or --synth)".into()))?;
    let records = match source {
        DataSource::Path(path) => load_records(path)?,
        DataSource::Synth { records, noise_2d } => {
            let records = synth_dataset(*records, skeleton, config.seed()?, *noise_2d);
            if let Some(out) = out {
                save_records(&records, out.join("dataset.jsonl"))?;
            }
            records
        }
    };
    if records.is_empty() {
        return Err(CliError::Config("dataset is empty".into()));
    }
    check_joint_count(&records, skeleton.joint_count())?;
    Ok(records)
}

fn scale_tensor(t: &Tensor, factor: f64) -> Tensor {
    t.scale(factor)
}

/// Serialize a summary as its JSON document; keeps stdout machine-readable
/// and byte-stable.
macro_rules! fmt_display_json {
    () => {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write!(
                f,
                "{}",
                serde_json::to_string_pretty(self).map_err(|_| fmt::Error)?
            )
        }
    };
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub checkpoint: String,
}

impl fmt::Display for TrainSummary {
    fmt_display_json!();
}

#[derive(Serialize)]
struct TrainLogLine {
    epoch: usize,
    steps: usize,
    loss: f64,
}

/// Train a model per the config. Per step: every batch sample gets a uniform
/// timestep in [1, T] and fresh Gaussian noise, the noisy pose is rebuilt
/// from the clean pose, and Adam minimizes the MSE of the denoised estimate
/// against the clean pose. Deterministic given the seed.
///
/// A batch size beyond the record count packs several independently
/// shuffled passes into each epoch, so every record appears multiple times
/// per step with fresh timestep/noise draws.
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary, CliError> {
    let seed = config.seed()?;
    let out = prepare_out(config)?;
    let out = out.ok_or_else(|| CliError::Config("train needs --out for the checkpoint".into()))?;
    if config.epochs < 1 || config.batch_size < 1 {
        return Err(CliError::Config("epochs and batch size must be positive".into()));
    }
    if config.timesteps < 1 {
        return Err(CliError::Config("timesteps must be positive".into()));
    }
    if config.pose_scale.is_nan() || config.pose_scale <= 0.0 {
        return Err(CliError::Config("pose_scale must be positive".into()));
    }
    let skeleton = resolve_skeleton(config)?;
    let records = resolve_records(config, &skeleton, Some(&out))?;
    for r in &records {
        if r.y.is_none() {
            return Err(EvalError::MissingGroundTruth { id: r.id.clone() }.into());
        }
    }

    let mut denoiser_config = config.denoiser.clone();
    denoiser_config.max_timestep = denoiser_config.max_timestep.max(config.timesteps);
    let mut model = DenoiserModel::init_model(&denoiser_config, &skeleton, seed)?;
    let schedule = DiffusionSchedule::cosine(config.timesteps);
    let mut opt_state = AdamState::new(model.params());
    let mut rng = stream(seed, 1);
    use rand::seq::SliceRandom;
    use rand::Rng;

    let inv_scale = 1.0 / config.pose_scale;
    let xs: Vec<Tensor> = records.iter().map(|r| scale_tensor(&r.x, inv_scale)).collect();
    let ys: Vec<Tensor> = records
        .iter()
        .map(|r| scale_tensor(r.y.as_ref().expect("checked above"), inv_scale))
        .collect();
    let joints = skeleton.joint_count();

    let mut log_lines = Vec::with_capacity(config.epochs);
    let mut total_steps = 0usize;
    let mut final_loss = f64::NAN;
    let passes_per_epoch = config.batch_size.div_ceil(records.len()).max(1);
    let steps_per_epoch = (passes_per_epoch * records.len()).div_ceil(config.batch_size);
    let planned_steps = steps_per_epoch * config.epochs;
    for epoch in 0..config.epochs {
        let mut order = Vec::with_capacity(passes_per_epoch * records.len());
        for _ in 0..passes_per_epoch {
            let mut pass: Vec<usize> = (0..records.len()).collect();
            pass.shuffle(&mut rng);
            order.extend(pass);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut y0_rows = Vec::with_capacity(chunk.len());
            let mut x_rows = Vec::with_capacity(chunk.len());
            let mut yt_rows = Vec::with_capacity(chunk.len());
            let mut t_values = Vec::with_capacity(chunk.len());
            for &ri in chunk {
                let t = rng.gen_range(1..=config.timesteps);
                let eps = randn(&[joints, 3], &mut rng);
                let y_t = crate::diffusion::q_sample(&ys[ri], t, &eps, &schedule)?;
                y0_rows.push(ys[ri].clone());
                x_rows.push(xs[ri].clone());
                yt_rows.push(y_t);
                t_values.push(t);
            }
            let y0 = Tensor::stack0(&y0_rows.iter().collect::<Vec<_>>())?;
            let x = Tensor::stack0(&x_rows.iter().collect::<Vec<_>>())?;
            let y_t = Tensor::stack0(&yt_rows.iter().collect::<Vec<_>>())?;

            let mut tape = Tape::new();
            let (pred, lease) = model.forward_train(&mut tape, &y_t, &x, &t_values)?;
            let target = tape.leaf(y0);
            let loss = tape.mse(pred, target)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(CliError::NonFiniteLoss {
                    epoch,
                    step: epoch_steps,
                });
            }
            let grads = tape.backward(loss)?;
            model.params_mut().zero_grads();
            model.accumulate_grads(&lease, &grads);
            let hp = AdamParams {
                lr: config.optimizer.lr * config.lr_schedule.factor(total_steps, planned_steps),
                ..config.optimizer
            };
            adam_step(model.params_mut(), &mut opt_state, &hp)?;
            epoch_loss += loss_value;
            epoch_steps += 1;
            total_steps += 1;
        }
        final_loss = epoch_loss / epoch_steps as f64;
        log_lines.push(TrainLogLine {
            epoch,
            steps: total_steps,
            loss: final_loss,
        });
    }

    let mut log_text = String::new();
    for line in &log_lines {
        log_text.push_str(&serde_json::to_string(line)?);
        log_text.push('\n');
    }
    std::fs::write(out.join("train_log.jsonl"), log_text)?;

    let meta = TrainMeta {
        pose_scale: config.pose_scale,
        timesteps: config.timesteps,
    };
    let checkpoint_path = out.join("checkpoint.json");
    model.save_checkpoint(&meta, &checkpoint_path)?;
    Ok(TrainSummary {
        epochs: config.epochs,
        steps: total_steps,
        final_loss,
        checkpoint: checkpoint_path.display().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSummary {
    pub records: usize,
    pub hypotheses: usize,
    pub iterations: usize,
    pub predictions: String,
}

impl fmt::Display for SampleSummary {
    fmt_display_json!();
}

/// Sample H hypotheses per record from a trained checkpoint and write them
/// as a prediction file (millimeters, one line per record and hypothesis).
pub fn cmd_sample(config: &RunConfig) -> Result<SampleSummary, CliError> {
    let seed = config.seed()?;
    let out = prepare_out(config)?;
    let checkpoint = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("sample needs --checkpoint".into()))?;
    let (model, meta) = DenoiserModel::load_checkpoint(checkpoint)?;
    let skeleton = resolve_skeleton(config)?;
    if skeleton.joint_count() != model.joint_count() {
        return Err(CliError::Config(format!(
            "checkpoint was trained on {} joints, active skeleton has {}",
            model.joint_count(),
            skeleton.joint_count()
        )));
    }
    let records = resolve_records(config, &skeleton, out.as_deref())?;

    let schedule = DiffusionSchedule::cosine(meta.timesteps);
    let inv_scale = 1.0 / meta.pose_scale;
    let x_rows: Vec<Tensor> = records.iter().map(|r| scale_tensor(&r.x, inv_scale)).collect();
    let x = Tensor::stack0(&x_rows.iter().collect::<Vec<_>>())?;
    let sampler = SamplerConfig {
        hypotheses: config.hypotheses,
        iterations: config.iterations,
        seed: sampler_seed(seed),
    };
    let sets = sample(&model, &x, &sampler, &schedule)?;
    let mut predictions: Vec<Prediction> = predictions_from(&records, &sets);
    for p in &mut predictions {
        p.y_hat = p.y_hat.scale(meta.pose_scale);
    }

    let path = match (&config.predictions, &out) {
        (Some(path), _) => PathBuf::from(path),
        (None, Some(dir)) => dir.join("predictions.jsonl"),
        (None, None) => {
            return Err(CliError::Config(
                "sample needs --predictions or --out for the prediction file".into(),
            ))
        }
    };
    save_predictions(&predictions, &path)?;
    Ok(SampleSummary {
        records: records.len(),
        hypotheses: config.hypotheses,
        iterations: config.iterations,
        predictions: path.display().to_string(),
    })
}

/// Score a prediction file against records with ground truth. Prints the
/// metric report and writes its JSON form when an output directory is set.
pub fn cmd_eval(config: &RunConfig) -> Result<MetricReport, CliError> {
    let out = prepare_out(config)?;
    let skeleton = resolve_skeleton(config)?;
    let records = resolve_records(config, &skeleton, out.as_deref())?;
    let predictions_path = config
        .predictions
        .as_ref()
        .ok_or_else(|| CliError::Config("eval needs --predictions".into()))?;
    let predictions = load_predictions(predictions_path)?;
    let report = evaluate(&records, &predictions)?;
    if let Some(dir) = &out {
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
    }
    Ok(report)
}

/// Cost report: analytic parameter count, multiply-accumulate counts (per
/// denoiser forward and per sampled pose at H hypotheses x K iterations),
/// plus measured throughput. The FLOPs figures count matmul MACs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub param_count: usize,
    pub hypotheses: usize,
    pub iterations: usize,
    pub flops_per_forward: u64,
    pub flops_per_sample: u64,
    /// Wall-clock measurement; excluded from serialized artifacts so bench
    /// outputs stay byte-reproducible.
    #[serde(skip)]
    pub poses_per_second: Option<f64>,
}

impl fmt::Display for BenchReport {
    fmt_display_json!();
}

pub fn cmd_bench(config: &RunConfig) -> Result<BenchReport, CliError> {
    let seed = config.seed()?;
    let out = prepare_out(config)?;
    let skeleton = resolve_skeleton(config)?;
    let model = DenoiserModel::init_model(&config.denoiser, &skeleton, seed)?;
    let joints = skeleton.joint_count();

    let y = Tensor::zeros(&[1, joints, 3]);
    let x = Tensor::zeros(&[1, joints, 2]);
    let t = vec![1usize];
    let (_, instrumented) = model.forward_eval_instrumented(&y, &x, &t)?;
    let analytic = model.analytic_forward_macs(1);
    if instrumented != analytic {
        return Err(CliError::Config(format!(
            "internal cost accounting mismatch: analytic {analytic} vs instrumented {instrumented}"
        )));
    }
    let flops_per_sample = analytic * config.hypotheses as u64 * config.iterations as u64;

    let poses_per_second = if config.bench_seconds > 0.0 {
        let start = Instant::now();
        let mut forwards = 0u64;
        while start.elapsed().as_secs_f64() < config.bench_seconds {
            model.forward_eval(&y, &x, &t)?;
            forwards += 1;
        }
        let per_pose = config.hypotheses as u64 * config.iterations as u64;
        Some(forwards as f64 / start.elapsed().as_secs_f64() / per_pose as f64)
    } else {
        None
    };

    let report = BenchReport {
        param_count: model.param_count(),
        hypotheses: config.hypotheses,
        iterations: config.iterations,
        flops_per_forward: analytic,
        flops_per_sample,
        poses_per_second,
    };
    if let Some(dir) = &out {
        std::fs::write(
            dir.join("bench.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
    }
    Ok(report)
}

fn render_matrix(out: &mut String, matrix: &Tensor) {
    let rows = matrix.shape()[0];
    let cols = matrix.shape()[1];
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| matrix.get(&[r, c]).to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

fn render_vector(out: &mut String, vector: &Tensor) {
    let row: Vec<String> = vector.data().iter().map(|v| v.to_string()).collect();
    out.push_str(&row.join(" "));
    out.push('\n');
}

/// Dump the joint kernel and (when hyperedges exist) the part- and
/// body-scale hypergraph kernels with their degree vectors, at identity
/// hyperedge weights. The format is plain text, stable, and golden-testable.
pub fn cmd_kernels(config: &RunConfig) -> Result<String, CliError> {
    let out = prepare_out(config)?;
    let skeleton = resolve_skeleton(config)?;
    let joints = skeleton.joint_count();
    let mut text = String::new();
    text.push_str(&format!("joints: {}\n", joints));
    let names: Vec<&str> = skeleton.joints().iter().map(|j| j.name.as_str()).collect();
    text.push_str(&format!("names: {}\n", names.join(" ")));

    let adjacency = skeleton.adjacency();
    let lambda = graph_kernel(&adjacency)?;
    let degrees = adjacency.add(&Tensor::eye(joints))?.sum_axes(&[1])?;
    text.push_str(&format!("joint kernel ({joints}x{joints}):\n"));
    render_matrix(&mut text, &lambda.matrix);
    text.push_str("joint degrees (with self-loops):\n");
    render_vector(&mut text, &degrees);

    for scale in [Scale::Part, Scale::Body] {
        let sets = skeleton.hyperedges(scale);
        text.push_str(&format!("{scale} hyperedges: {}\n", sets.len()));
        if sets.is_empty() {
            continue;
        }
        let incidence = skeleton.incidence(scale)?;
        let unit = Tensor::ones(&[sets.len()]);
        let kernel = hypergraph_kernel(&incidence.data, &unit)?;
        text.push_str(&format!("{scale} hyperedge degrees:\n"));
        render_vector(&mut text, &hyperedge_degrees(&incidence.data)?);
        text.push_str(&format!("{scale} vertex degrees:\n"));
        render_vector(&mut text, &vertex_degrees(&incidence.data, &unit)?);
        text.push_str(&format!("{scale} kernel ({joints}x{joints}):\n"));
        render_matrix(&mut text, &kernel.matrix);
    }

    if let Some(dir) = &out {
        std::fs::write(dir.join("kernels.txt"), &text)?;
    }
    Ok(text)
}
