//! The pose denoiser: a linear embedding of the noisy 3D pose concatenated
//! with its 2D keypoints, plus spatial and timestep embeddings, followed by
//! stacked graph-convolution blocks that mix joint-scale, part-scale, and
//! body-scale skeleton structure, and a projection head back to 3D.
//!
//! Each block runs one convolution branch per configured scale
//! (`relu(K Z W)` with the scale's kernel K), fuses the branches, and applies
//! the residual rule `relu(Z_prev + BN(fused + Linear(Z_prev)))`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{Denoise, DiffusionError};
use crate::kernels::{self, KernelError};
use crate::numerics::batchnorm::{batchnorm, BnState, BnUpdate, Mode};
use crate::numerics::optim::{GradCheckEntry, GradCheckReport};
use crate::numerics::params::ParamSet;
use crate::numerics::rng::{rand_uniform, stream};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::tensor::{NumericsError, Tensor};
use crate::skeleton::{Scale, Skeleton, SkeletonError, SkeletonFile};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("config: {0}")]
    Config(String),
    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("batch size {batch} does not match {t_len} timesteps")]
    BatchMismatch { batch: usize, t_len: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Json(#[from] serde_json::Error),
}

/// How the per-scale branch outputs are combined inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Sum of branches scaled by learnable scalars.
    Weighted,
    /// Feature-axis concatenation followed by a learned linear map back to
    /// the embedding width (no bias).
    Concat,
    /// Elementwise product of the branch outputs.
    Product,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fusion::Weighted => write!(f, "weighted"),
            Fusion::Concat => write!(f, "concat"),
            Fusion::Product => write!(f, "product"),
        }
    }
}

impl FromStr for Fusion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "weighted" => Ok(Fusion::Weighted),
            "concat" => Ok(Fusion::Concat),
            "product" => Ok(Fusion::Product),
            other => Err(format!("unknown fusion strategy {other:?}")),
        }
    }
}

/// Which skeleton granularities feed convolution branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphScale {
    Joint,
    Part,
    Body,
}

impl fmt::Display for GraphScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphScale::Joint => write!(f, "joint"),
            GraphScale::Part => write!(f, "part"),
            GraphScale::Body => write!(f, "body"),
        }
    }
}

impl FromStr for GraphScale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "joint" => Ok(GraphScale::Joint),
            "part" => Ok(GraphScale::Part),
            "body" => Ok(GraphScale::Body),
            other => Err(format!("unknown graph scale {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Embedding width d_m.
    pub embed_dim: usize,
    /// Number of stacked blocks.
    pub blocks: usize,
    pub fusion: Fusion,
    pub scales: Vec<GraphScale>,
    /// Largest timestep the time embedding accepts.
    pub max_timestep: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            embed_dim: 128,
            blocks: 3,
            fusion: Fusion::Weighted,
            scales: vec![GraphScale::Joint, GraphScale::Part, GraphScale::Body],
            max_timestep: 1000,
        }
    }
}

impl DenoiserConfig {
    /// Scales in canonical joint/part/body order with duplicates dropped.
    pub fn canonical_scales(&self) -> Vec<GraphScale> {
        let mut scales = self.scales.clone();
        scales.sort();
        scales.dedup();
        scales
    }

    pub fn has_scale(&self, scale: GraphScale) -> bool {
        self.scales.contains(&scale)
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.embed_dim < 8 {
            return Err(DenoiserError::Config(format!(
                "embed_dim must be at least 8, got {}",
                self.embed_dim
            )));
        }
        self.validate_relaxed()
    }

    fn validate_relaxed(&self) -> Result<(), DenoiserError> {
        if self.embed_dim < 1 {
            return Err(DenoiserError::Config("embed_dim must be positive".into()));
        }
        if self.blocks < 1 {
            return Err(DenoiserError::Config("at least one block required".into()));
        }
        if self.scales.is_empty() {
            return Err(DenoiserError::Config("scales must be nonempty".into()));
        }
        if self.max_timestep < 1 {
            return Err(DenoiserError::Config("max_timestep must be positive".into()));
        }
        Ok(())
    }
}

/// Training provenance a checkpoint carries so sampling can reproduce the
/// training-time units and schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    /// Poses are divided by this before entering the model (mm -> model units).
    pub pose_scale: f64,
    /// Total diffusion timesteps the model was trained against.
    pub timesteps: usize,
}

impl Default for TrainMeta {
    fn default() -> Self {
        TrainMeta {
            pose_scale: 1000.0,
            timesteps: 1000,
        }
    }
}

#[derive(Clone)]
struct BlockLayout {
    branch_w: Vec<usize>,
    alphas: Option<Vec<usize>>,
    fuse_w: Option<usize>,
    res_w: usize,
    bn_scale: usize,
    bn_shift: usize,
}

#[derive(Clone)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    spatial: usize,
    time_w1: usize,
    time_b1: usize,
    time_w2: usize,
    time_b2: usize,
    m_log_part: Option<usize>,
    m_log_body: Option<usize>,
    blocks: Vec<BlockLayout>,
    head_w: usize,
    head_b: usize,
}

/// Leased parameter handles from one forward pass, used to route gradients
/// back into the registry.
pub struct Lease {
    vars: Vec<Var>,
}

pub struct DenoiserModel {
    config: DenoiserConfig,
    joints: usize,
    skeleton: Option<Skeleton>,
    lambda: Option<Tensor>,
    part_incidence: Option<Tensor>,
    body_incidence: Option<Tensor>,
    params: ParamSet,
    layout: Layout,
    bn: Vec<BnState>,
    forward_tokens: AtomicU64,
}

impl Clone for DenoiserModel {
    /// Independent copy for fan-out evaluation; the forward counter starts
    /// from the current reading.
    fn clone(&self) -> Self {
        DenoiserModel {
            config: self.config.clone(),
            joints: self.joints,
            skeleton: self.skeleton.clone(),
            lambda: self.lambda.clone(),
            part_incidence: self.part_incidence.clone(),
            body_incidence: self.body_incidence.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            bn: self.bn.clone(),
            forward_tokens: AtomicU64::new(self.forward_tokens.load(Ordering::Relaxed)),
        }
    }
}

const CHECKPOINT_FORMAT: &str = "hyperlift.checkpoint.v1";

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    config: DenoiserConfig,
    skeleton: SkeletonFile,
    meta: TrainMeta,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl DenoiserModel {
    /// Build a model for a skeleton. Deterministic given the seed; branch
    /// fusion weights start at 1, hyperedge weights at the identity.
    pub fn init_model(
        config: &DenoiserConfig,
        skeleton: &Skeleton,
        seed: u64,
    ) -> Result<DenoiserModel, DenoiserError> {
        config.validate()?;
        let adjacency = config
            .has_scale(GraphScale::Joint)
            .then(|| skeleton.adjacency());
        let part = if config.has_scale(GraphScale::Part) {
            Some(skeleton.incidence(Scale::Part)?.data)
        } else {
            None
        };
        let body = if config.has_scale(GraphScale::Body) {
            Some(skeleton.incidence(Scale::Body)?.data)
        } else {
            None
        };
        let mut model = Self::build(
            config,
            skeleton.joint_count(),
            adjacency.as_ref(),
            part.as_ref(),
            body.as_ref(),
            seed,
        )?;
        model.skeleton = Some(skeleton.clone());
        Ok(model)
    }

    /// Raw constructor from explicit graph inputs; skips the minimum-width
    /// config check so tests can build degenerate geometries.
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn init_with_graphs(
        config: &DenoiserConfig,
        joints: usize,
        adjacency: Option<&Tensor>,
        part_incidence: Option<&Tensor>,
        body_incidence: Option<&Tensor>,
        seed: u64,
    ) -> Result<DenoiserModel, DenoiserError> {
        config.validate_relaxed()?;
        Self::build(config, joints, adjacency, part_incidence, body_incidence, seed)
    }

    fn build(
        config: &DenoiserConfig,
        joints: usize,
        adjacency: Option<&Tensor>,
        part_incidence: Option<&Tensor>,
        body_incidence: Option<&Tensor>,
        seed: u64,
    ) -> Result<DenoiserModel, DenoiserError> {
        let mut config = config.clone();
        config.scales = config.canonical_scales();
        let scales = config.scales.clone();

        let lambda = match (scales.contains(&GraphScale::Joint), adjacency) {
            (true, Some(adj)) => Some(kernels::graph_kernel(adj)?.matrix),
            (true, None) => {
                return Err(DenoiserError::Config(
                    "joint scale requested but no adjacency supplied".into(),
                ))
            }
            _ => None,
        };
        let part = match (scales.contains(&GraphScale::Part), part_incidence) {
            (true, Some(inc)) => {
                kernels::validate_incidence(inc)?;
                Some(inc.clone())
            }
            (true, None) => {
                return Err(DenoiserError::Config(
                    "part scale requested but no part incidence supplied".into(),
                ))
            }
            _ => None,
        };
        let body = match (scales.contains(&GraphScale::Body), body_incidence) {
            (true, Some(inc)) => {
                kernels::validate_incidence(inc)?;
                Some(inc.clone())
            }
            (true, None) => {
                return Err(DenoiserError::Config(
                    "body scale requested but no body incidence supplied".into(),
                ))
            }
            _ => None,
        };

        let d = config.embed_dim;
        let mut rng = stream(seed, 0);
        let mut params = ParamSet::new();
        let fan = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let embed_w = params.add("embed.weight", rand_uniform(&[5, d], -fan(5), fan(5), &mut rng))?;
        let embed_b = params.add("embed.bias", Tensor::zeros(&[d]))?;
        let spatial = params.add(
            "spatial_embedding",
            rand_uniform(&[joints, d], -0.02, 0.02, &mut rng),
        )?;
        let time_w1 = params.add("time.w1", rand_uniform(&[d, d], -fan(d), fan(d), &mut rng))?;
        let time_b1 = params.add("time.b1", Tensor::zeros(&[d]))?;
        let time_w2 = params.add("time.w2", rand_uniform(&[d, d], -fan(d), fan(d), &mut rng))?;
        let time_b2 = params.add("time.b2", Tensor::zeros(&[d]))?;

        let m_log_part = part
            .as_ref()
            .map(|inc| params.add("kernel.part.log_weights", Tensor::zeros(&[inc.shape()[1]])))
            .transpose()?;
        let m_log_body = body
            .as_ref()
            .map(|inc| params.add("kernel.body.log_weights", Tensor::zeros(&[inc.shape()[1]])))
            .transpose()?;

        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let mut branch_w = Vec::with_capacity(scales.len());
            for scale in &scales {
                branch_w.push(params.add(
                    format!("block{l}.w_{scale}"),
                    rand_uniform(&[d, d], -fan(d), fan(d), &mut rng),
                )?);
            }
            let alphas = match config.fusion {
                Fusion::Weighted => {
                    let mut ids = Vec::with_capacity(scales.len());
                    for scale in &scales {
                        ids.push(params.add(format!("block{l}.alpha_{scale}"), Tensor::scalar(1.0))?);
                    }
                    Some(ids)
                }
                _ => None,
            };
            let fuse_w = match config.fusion {
                Fusion::Concat => {
                    let wide = scales.len() * d;
                    Some(params.add(
                        format!("block{l}.w_fuse"),
                        rand_uniform(&[wide, d], -fan(wide), fan(wide), &mut rng),
                    )?)
                }
                _ => None,
            };
            let res_w = params.add(
                format!("block{l}.w_res"),
                rand_uniform(&[d, d], -fan(d), fan(d), &mut rng),
            )?;
            let bn_scale = params.add(format!("block{l}.bn_scale"), Tensor::ones(&[d]))?;
            let bn_shift = params.add(format!("block{l}.bn_shift"), Tensor::zeros(&[d]))?;
            blocks.push(BlockLayout {
                branch_w,
                alphas,
                fuse_w,
                res_w,
                bn_scale,
                bn_shift,
            });
        }
        let head_w = params.add("head.weight", rand_uniform(&[d, 3], -fan(d), fan(d), &mut rng))?;
        let head_b = params.add("head.bias", Tensor::zeros(&[3]))?;

        let bn = (0..config.blocks).map(|_| BnState::new(d)).collect();
        Ok(DenoiserModel {
            config,
            joints,
            skeleton: None,
            lambda,
            part_incidence: part,
            body_incidence: body,
            params,
            layout: Layout {
                embed_w,
                embed_b,
                spatial,
                time_w1,
                time_b1,
                time_w2,
                time_b2,
                m_log_part,
                m_log_body,
                blocks,
                head_w,
                head_b,
            },
            bn,
            forward_tokens: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn bn_state_mut(&mut self, block: usize) -> &mut BnState {
        &mut self.bn[block]
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Closed-form parameter count for a config; cross-checked against the
    /// registry in tests and used by the benchmark command.
    pub fn analytic_param_count(
        config: &DenoiserConfig,
        joints: usize,
        part_edges: usize,
        body_edges: usize,
    ) -> usize {
        let d = config.embed_dim;
        let scales = config.canonical_scales();
        let n = scales.len();
        let mut count = 5 * d + d; // embed
        count += joints * d; // spatial embedding
        count += 2 * (d * d + d); // time projection
        if scales.contains(&GraphScale::Part) {
            count += part_edges;
        }
        if scales.contains(&GraphScale::Body) {
            count += body_edges;
        }
        let per_block = n * d * d
            + match config.fusion {
                Fusion::Weighted => n,
                Fusion::Concat => n * d * d,
                Fusion::Product => 0,
            }
            + d * d
            + 2 * d;
        count += config.blocks * per_block;
        count += d * 3 + 3; // head
        count
    }

    /// Multiply-accumulate count of one eval-mode forward pass on a batch.
    /// Counts matmuls only: embedding, time projection, kernel application,
    /// branch weights, the concat back-projection, the residual linear map,
    /// and the head. Matches the tape's instrumented counter exactly.
    pub fn analytic_forward_macs(&self, batch: usize) -> u64 {
        let d = self.config.embed_dim as u64;
        let j = self.joints as u64;
        let b = batch as u64;
        let n = self.config.scales.len() as u64;
        let mut macs = b * j * 5 * d; // embed
        macs += 2 * b * d * d; // time projection
        let mut per_block = n * (b * j * j * d + b * j * d * d);
        if self.config.fusion == Fusion::Concat {
            per_block += b * j * (n * d) * d;
        }
        per_block += b * j * d * d; // residual linear
        macs += self.config.blocks as u64 * per_block;
        macs += b * j * d * 3; // head
        macs
    }

    /// Per-sample forward passes since the last reset (each forward adds its
    /// batch size). Used by cost-scaling checks.
    pub fn forward_tokens(&self) -> u64 {
        self.forward_tokens.load(Ordering::Relaxed)
    }

    pub fn reset_forward_tokens(&self) {
        self.forward_tokens.store(0, Ordering::Relaxed);
    }

    fn check_inputs(&self, y_t: &Tensor, x: &Tensor, t: &[usize]) -> Result<usize, DenoiserError> {
        let j = self.joints;
        if y_t.rank() != 3 || y_t.shape()[1] != j || y_t.shape()[2] != 3 {
            return Err(NumericsError::ShapeMismatch {
                op: "denoiser input y_t",
                left: y_t.shape().to_vec(),
                right: vec![y_t.shape()[0], j, 3],
            }
            .into());
        }
        if x.rank() != 3 || x.shape()[0] != y_t.shape()[0] || x.shape()[1] != j || x.shape()[2] != 2
        {
            return Err(NumericsError::ShapeMismatch {
                op: "denoiser input x",
                left: x.shape().to_vec(),
                right: vec![y_t.shape()[0], j, 2],
            }
            .into());
        }
        let batch = y_t.shape()[0];
        if t.len() != batch {
            return Err(DenoiserError::BatchMismatch {
                batch,
                t_len: t.len(),
            });
        }
        for &ti in t {
            if ti < 1 || ti > self.config.max_timestep {
                return Err(DenoiserError::TimestepOutOfRange {
                    t: ti,
                    max: self.config.max_timestep,
                });
            }
        }
        Ok(batch)
    }

    /// Kernel variables per configured scale, in canonical scale order.
    /// Train mode assembles hypergraph kernels on the tape so gradients reach
    /// the log-weights; eval mode feeds the assembled kernels as constants.
    fn kernel_vars(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        mode: Mode,
    ) -> Result<Vec<Var>, DenoiserError> {
        let mut out = Vec::with_capacity(self.config.scales.len());
        for scale in &self.config.scales {
            let var = match scale {
                GraphScale::Joint => {
                    let lambda = self.lambda.as_ref().expect("joint kernel built at init");
                    tape.leaf(lambda.clone())
                }
                GraphScale::Part | GraphScale::Body => {
                    let (incidence, m_log_idx) = match scale {
                        GraphScale::Part => (
                            self.part_incidence.as_ref().expect("part incidence"),
                            self.layout.m_log_part.expect("part weights"),
                        ),
                        _ => (
                            self.body_incidence.as_ref().expect("body incidence"),
                            self.layout.m_log_body.expect("body weights"),
                        ),
                    };
                    match mode {
                        Mode::Train => {
                            let weights = tape.exp(vars[m_log_idx]);
                            kernels::hypergraph_kernel_var(tape, incidence, weights)?
                        }
                        Mode::Eval => {
                            let weights = self.params.get(m_log_idx).value.exp();
                            let kernel = kernels::hypergraph_kernel(incidence, &weights)?;
                            tape.leaf(kernel.matrix)
                        }
                    }
                }
            };
            out.push(var);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_on_tape(
        &self,
        tape: &mut Tape,
        block: usize,
        z_prev: Var,
        kernel_vars: &[Var],
        vars: &[Var],
        mode: Mode,
        bn_updates: &mut Vec<(usize, BnUpdate)>,
    ) -> Result<Var, DenoiserError> {
        let layout = &self.layout.blocks[block];
        let mut branches = Vec::with_capacity(kernel_vars.len());
        for (i, &kernel) in kernel_vars.iter().enumerate() {
            let mixed = tape.matmul(kernel, z_prev)?;
            let weighted = tape.matmul(mixed, vars[layout.branch_w[i]])?;
            branches.push(tape.relu(weighted));
        }
        let alphas: Option<Vec<Var>> = layout
            .alphas
            .as_ref()
            .map(|ids| ids.iter().map(|&i| vars[i]).collect());
        let fused = fuse(
            tape,
            &branches,
            alphas.as_deref(),
            layout.fuse_w.map(|i| vars[i]),
            self.config.fusion,
        )?;
        let residual = tape.matmul(z_prev, vars[layout.res_w])?;
        let pre_norm = tape.add(fused, residual)?;
        let (normed, update) = batchnorm(
            tape,
            pre_norm,
            vars[layout.bn_scale],
            vars[layout.bn_shift],
            &self.bn[block],
            mode,
        )?;
        if let Some(u) = update {
            bn_updates.push((block, u));
        }
        let skip = tape.add(z_prev, normed)?;
        Ok(tape.relu(skip))
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        y_t: &Tensor,
        x: &Tensor,
        t: &[usize],
        mode: Mode,
        bn_updates: &mut Vec<(usize, BnUpdate)>,
    ) -> Result<(Var, Vec<Var>), DenoiserError> {
        let batch = self.check_inputs(y_t, x, t)?;
        let d = self.config.embed_dim;
        let vars = self.params.lease(tape);
        let kernel_vars = self.kernel_vars(tape, &vars, mode)?;

        let y_leaf = tape.leaf(y_t.clone());
        let x_leaf = tape.leaf(x.clone());
        let cat = tape.concat_last(&[y_leaf, x_leaf])?;
        let z = tape.matmul(cat, vars[self.layout.embed_w])?;
        let z = tape.add(z, vars[self.layout.embed_b])?;
        let z = tape.add(z, vars[self.layout.spatial])?;

        let pe = tape.leaf(sinusoidal_embedding(t, d));
        let h = tape.matmul(pe, vars[self.layout.time_w1])?;
        let h = tape.add(h, vars[self.layout.time_b1])?;
        let h = tape.relu(h);
        let h = tape.matmul(h, vars[self.layout.time_w2])?;
        let h = tape.add(h, vars[self.layout.time_b2])?;
        let time3 = tape.reshape(h, &[batch, 1, d])?;
        let mut z = tape.add(z, time3)?;

        for block in 0..self.config.blocks {
            z = self.block_on_tape(tape, block, z, &kernel_vars, &vars, mode, bn_updates)?;
        }
        let out = tape.matmul(z, vars[self.layout.head_w])?;
        let out = tape.add(out, vars[self.layout.head_b])?;
        self.forward_tokens.fetch_add(batch as u64, Ordering::Relaxed);
        Ok((out, vars))
    }

    /// Pure inference pass: batch normalization uses running statistics and
    /// nothing is mutated, so repeated calls are bitwise identical.
    pub fn forward_eval(&self, y_t: &Tensor, x: &Tensor, t: &[usize]) -> Result<Tensor, DenoiserError> {
        Ok(self.forward_eval_instrumented(y_t, x, t)?.0)
    }

    /// Eval forward that also reports the multiply-accumulate count of the
    /// recorded tape.
    pub fn forward_eval_instrumented(
        &self,
        y_t: &Tensor,
        x: &Tensor,
        t: &[usize],
    ) -> Result<(Tensor, u64), DenoiserError> {
        let mut tape = Tape::new();
        let mut updates = Vec::new();
        let (out, _) = self.forward_impl(&mut tape, y_t, x, t, Mode::Eval, &mut updates)?;
        debug_assert!(updates.is_empty());
        Ok((tape.value(out).clone(), tape.macs()))
    }

    /// Training pass on an external tape. Batch statistics are folded into
    /// the running estimates; the returned lease routes gradients back via
    /// [`DenoiserModel::accumulate_grads`].
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        y_t: &Tensor,
        x: &Tensor,
        t: &[usize],
    ) -> Result<(Var, Lease), DenoiserError> {
        let mut updates = Vec::new();
        let (out, vars) = self.forward_impl(tape, y_t, x, t, Mode::Train, &mut updates)?;
        for (block, update) in updates {
            self.bn[block].apply_update(&update);
        }
        Ok((out, Lease { vars }))
    }

    /// Add the tape gradients for one pass onto the parameter gradients.
    pub fn accumulate_grads(&mut self, lease: &Lease, grads: &Gradients) {
        for (i, &var) in lease.vars.iter().enumerate() {
            if let Some(g) = grads.get(var) {
                let p = self.params.get_mut(i);
                p.grad = p.grad.add(g).expect("gradient shape");
            }
        }
    }

    /// Train-mode MSE loss value for the batch; used by the gradient checker.
    fn train_loss_value(
        &mut self,
        y0: &Tensor,
        y_t: &Tensor,
        x: &Tensor,
        t: &[usize],
    ) -> Result<f64, DenoiserError> {
        let mut tape = Tape::new();
        let (pred, _) = self.forward_train(&mut tape, y_t, x, t)?;
        let target = tape.leaf(y0.clone());
        let loss = tape.mse(pred, target)?;
        Ok(tape.value(loss).item()?)
    }

    /// Check every parameter gradient of the train-mode MSE loss against
    /// central finite differences.
    #[allow(clippy::needless_range_loop)]
    pub fn grad_check(
        &mut self,
        y0: &Tensor,
        y_t: &Tensor,
        x: &Tensor,
        t: &[usize],
        eps: f64,
        tol: f64,
    ) -> Result<GradCheckReport, DenoiserError> {
        self.params.zero_grads();
        let analytic: Vec<Tensor> = {
            let mut tape = Tape::new();
            let (pred, lease) = self.forward_train(&mut tape, y_t, x, t)?;
            let target = tape.leaf(y0.clone());
            let loss = tape.mse(pred, target)?;
            let grads = tape.backward(loss)?;
            self.accumulate_grads(&lease, &grads);
            self.params.iter().map(|p| p.grad.clone()).collect()
        };

        let mut entries = Vec::with_capacity(self.params.len());
        for idx in 0..self.params.len() {
            let name = self.params.get(idx).name.clone();
            let mut worst = 0.0f64;
            for e in 0..self.params.get(idx).value.len() {
                let orig = self.params.get(idx).value.data()[e];
                self.params.get_mut(idx).value.data_mut()[e] = orig + eps;
                let up = self.train_loss_value(y0, y_t, x, t)?;
                self.params.get_mut(idx).value.data_mut()[e] = orig - eps;
                let down = self.train_loss_value(y0, y_t, x, t)?;
                self.params.get_mut(idx).value.data_mut()[e] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[idx].data()[e];
                let rel = (a - numeric).abs() / a.abs().max(1.0);
                worst = worst.max(rel);
            }
            entries.push(GradCheckEntry {
                name,
                max_rel_err: worst,
            });
        }
        Ok(GradCheckReport { entries, tol })
    }

    /// Run one block in eval mode on an explicit activation.
    pub fn block_forward_eval(&self, block: usize, z: &Tensor) -> Result<Tensor, DenoiserError> {
        if block >= self.config.blocks {
            return Err(DenoiserError::Config(format!(
                "block {block} out of range ({} blocks)",
                self.config.blocks
            )));
        }
        let mut tape = Tape::new();
        let vars = self.params.lease(&mut tape);
        let kernel_vars = self.kernel_vars(&mut tape, &vars, Mode::Eval)?;
        let z_var = tape.leaf(z.clone());
        let mut updates = Vec::new();
        let out = self.block_on_tape(
            &mut tape,
            block,
            z_var,
            &kernel_vars,
            &vars,
            Mode::Eval,
            &mut updates,
        )?;
        Ok(tape.value(out).clone())
    }

    pub fn save_checkpoint(
        &self,
        meta: &TrainMeta,
        path: impl AsRef<Path>,
    ) -> Result<(), DenoiserError> {
        let skeleton = self.skeleton.as_ref().ok_or_else(|| {
            DenoiserError::Checkpoint("model was not built from a skeleton".into())
        })?;
        let mut buffers = BTreeMap::new();
        for (l, state) in self.bn.iter().enumerate() {
            buffers.insert(format!("block{l}.bn_running_mean"), state.running_mean.clone());
            buffers.insert(format!("block{l}.bn_running_var"), state.running_var.clone());
        }
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            skeleton: skeleton.to_file_doc(),
            meta: *meta,
            params: self.params.to_map(),
            buffers,
        };
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load_checkpoint(
        path: impl AsRef<Path>,
    ) -> Result<(DenoiserModel, TrainMeta), DenoiserError> {
        let text = std::fs::read_to_string(&path)?;
        let doc: CheckpointDoc = serde_json::from_str(&text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(DenoiserError::Checkpoint(format!(
                "unsupported format {:?}",
                doc.format
            )));
        }
        if doc.meta.timesteps < 1 || doc.meta.pose_scale.is_nan() || doc.meta.pose_scale <= 0.0 {
            return Err(DenoiserError::Checkpoint(
                "invalid training metadata (timesteps/pose_scale)".into(),
            ));
        }
        let skeleton = Skeleton::from_file_doc(&doc.skeleton)?;
        let mut model = DenoiserModel::init_model(&doc.config, &skeleton, 0)?;
        model.params.load_map(&doc.params)?;
        for l in 0..model.bn.len() {
            let mean = doc
                .buffers
                .get(&format!("block{l}.bn_running_mean"))
                .ok_or_else(|| DenoiserError::Checkpoint(format!("missing bn mean for block {l}")))?;
            let var = doc
                .buffers
                .get(&format!("block{l}.bn_running_var"))
                .ok_or_else(|| DenoiserError::Checkpoint(format!("missing bn var for block {l}")))?;
            if mean.shape() != [model.config.embed_dim] || var.shape() != [model.config.embed_dim] {
                return Err(DenoiserError::Checkpoint(format!(
                    "bn buffer shape mismatch in block {l}"
                )));
            }
            model.bn[l].running_mean = mean.clone();
            model.bn[l].running_var = var.clone();
        }
        Ok((model, doc.meta))
    }
}

impl Denoise for DenoiserModel {
    fn denoise(&self, y_t: &Tensor, x: &Tensor, t: &[usize]) -> Result<Tensor, DiffusionError> {
        self.forward_eval(y_t, x, t)
            .map_err(|e| DiffusionError::Denoiser(e.to_string()))
    }
}

/// Combine branch activations. Weighted fusion needs one scalar per branch;
/// concat fusion needs the back-projection matrix.
pub fn fuse(
    tape: &mut Tape,
    branches: &[Var],
    alphas: Option<&[Var]>,
    projection: Option<Var>,
    strategy: Fusion,
) -> Result<Var, DenoiserError> {
    if branches.is_empty() {
        return Err(DenoiserError::Config("fuse needs at least one branch".into()));
    }
    match strategy {
        Fusion::Weighted => {
            let alphas = alphas.ok_or_else(|| {
                DenoiserError::Config("weighted fusion needs branch weights".into())
            })?;
            if alphas.len() != branches.len() {
                return Err(DenoiserError::Config(format!(
                    "{} branches but {} weights",
                    branches.len(),
                    alphas.len()
                )));
            }
            let mut acc = tape.mul(branches[0], alphas[0])?;
            for (&b, &a) in branches.iter().zip(alphas).skip(1) {
                let term = tape.mul(b, a)?;
                acc = tape.add(acc, term)?;
            }
            Ok(acc)
        }
        Fusion::Product => {
            let mut acc = branches[0];
            for &b in &branches[1..] {
                acc = tape.mul(acc, b)?;
            }
            Ok(acc)
        }
        Fusion::Concat => {
            let projection = projection.ok_or_else(|| {
                DenoiserError::Config("concat fusion needs a projection matrix".into())
            })?;
            let cat = tape.concat_last(branches)?;
            Ok(tape.matmul(cat, projection)?)
        }
    }
}

/// Classic interleaved sin/cos position encoding of integer timesteps.
fn sinusoidal_embedding(t: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let tf = ti as f64;
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = tf * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[t.len(), dim], data).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::randn;
    use crate::skeleton::default_skeleton;

    fn small_config(fusion: Fusion, scales: Vec<GraphScale>) -> DenoiserConfig {
        DenoiserConfig {
            embed_dim: 8,
            blocks: 2,
            fusion,
            scales,
            max_timestep: 50,
        }
    }

    fn all_scales() -> Vec<GraphScale> {
        vec![GraphScale::Joint, GraphScale::Part, GraphScale::Body]
    }

    fn batch(b: usize, j: usize, seed: u64) -> (Tensor, Tensor, Tensor, Vec<usize>) {
        let mut rng = stream(seed, 9);
        let y0 = randn(&[b, j, 3], &mut rng);
        let y_t = randn(&[b, j, 3], &mut rng);
        let x = randn(&[b, j, 2], &mut rng);
        let t: Vec<usize> = (0..b).map(|i| 10 + 7 * i).collect();
        (y0, y_t, x, t)
    }

    #[test]
    fn eval_model_is_shareable_across_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<DenoiserModel>();
    }

    #[test]
    fn init_is_seed_deterministic() {
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, all_scales());
        let a = DenoiserModel::init_model(&config, &skeleton, 7).unwrap();
        let b = DenoiserModel::init_model(&config, &skeleton, 7).unwrap();
        assert_eq!(a.params.to_map(), b.params.to_map());
        let c = DenoiserModel::init_model(&config, &skeleton, 8).unwrap();
        assert_ne!(a.params.to_map(), c.params.to_map());
    }

    #[test]
    fn fusion_weights_start_at_one_and_kernels_at_identity() {
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, all_scales());
        let model = DenoiserModel::init_model(&config, &skeleton, 1).unwrap();
        for scale in ["joint", "part", "body"] {
            let alpha = model.params.by_name(&format!("block0.alpha_{scale}")).unwrap();
            assert_eq!(alpha.value.item().unwrap(), 1.0);
        }
        let m = model.params.by_name("kernel.part.log_weights").unwrap();
        assert!(m.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shape_and_determinism() {
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, all_scales());
        let model = DenoiserModel::init_model(&config, &skeleton, 3).unwrap();
        let (_, y_t, x, t) = batch(4, 17, 21);
        let out1 = model.forward_eval(&y_t, &x, &t).unwrap();
        assert_eq!(out1.shape(), &[4, 17, 3]);
        let out2 = model.forward_eval(&y_t, &x, &t).unwrap();
        assert_eq!(out1, out2);
        assert!(out1.is_finite());
    }

    #[test]
    fn duplicate_samples_share_outputs_and_batch_permutes() {
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, all_scales());
        let model = DenoiserModel::init_model(&config, &skeleton, 3).unwrap();
        let (_, y1, x1, _) = batch(1, 17, 5);
        let (_, y2, x2, _) = batch(1, 17, 6);

        // Two identical samples in one batch give identical rows.
        let y_pair = Tensor::stack0(&[&y1.index_axis0(0).unwrap(), &y1.index_axis0(0).unwrap()]).unwrap();
        let x_pair = Tensor::stack0(&[&x1.index_axis0(0).unwrap(), &x1.index_axis0(0).unwrap()]).unwrap();
        let out = model.forward_eval(&y_pair, &x_pair, &[9, 9]).unwrap();
        assert_eq!(out.index_axis0(0).unwrap(), out.index_axis0(1).unwrap());

        // Permuting the batch permutes outputs.
        let y_ab = Tensor::stack0(&[&y1.index_axis0(0).unwrap(), &y2.index_axis0(0).unwrap()]).unwrap();
        let x_ab = Tensor::stack0(&[&x1.index_axis0(0).unwrap(), &x2.index_axis0(0).unwrap()]).unwrap();
        let y_ba = Tensor::stack0(&[&y2.index_axis0(0).unwrap(), &y1.index_axis0(0).unwrap()]).unwrap();
        let x_ba = Tensor::stack0(&[&x2.index_axis0(0).unwrap(), &x1.index_axis0(0).unwrap()]).unwrap();
        let out_ab = model.forward_eval(&y_ab, &x_ab, &[9, 13]).unwrap();
        let out_ba = model.forward_eval(&y_ba, &x_ba, &[13, 9]).unwrap();
        assert_eq!(out_ab.index_axis0(0).unwrap(), out_ba.index_axis0(1).unwrap());
        assert_eq!(out_ab.index_axis0(1).unwrap(), out_ba.index_axis0(0).unwrap());
    }

    #[test]
    fn timestep_and_shape_validation() {
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, all_scales());
        let model = DenoiserModel::init_model(&config, &skeleton, 3).unwrap();
        let (_, y_t, x, _) = batch(2, 17, 40);
        assert!(matches!(
            model.forward_eval(&y_t, &x, &[0, 5]),
            Err(DenoiserError::TimestepOutOfRange { t: 0, .. })
        ));
        assert!(matches!(
            model.forward_eval(&y_t, &x, &[5, 51]),
            Err(DenoiserError::TimestepOutOfRange { t: 51, .. })
        ));
        let bad_x = Tensor::zeros(&[2, 16, 2]);
        assert!(model.forward_eval(&y_t, &bad_x, &[5, 5]).is_err());
    }

    #[test]
    fn output_finite_for_large_inputs() {
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, all_scales());
        let model = DenoiserModel::init_model(&config, &skeleton, 3).unwrap();
        let y_t = Tensor::full(&[2, 17, 3], 1e3);
        let x = Tensor::full(&[2, 17, 2], -1e3);
        let out = model.forward_eval(&y_t, &x, &[1, 50]).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn registry_reflects_scale_and_fusion_choices() {
        let skeleton = default_skeleton();
        let joint_only = DenoiserModel::init_model(
            &small_config(Fusion::Weighted, vec![GraphScale::Joint]),
            &skeleton,
            1,
        )
        .unwrap();
        let names: Vec<&str> = joint_only.params.names().collect();
        assert!(names.iter().all(|n| !n.contains("part") && !n.contains("body")));
        assert!(joint_only.part_incidence.is_none() && joint_only.body_incidence.is_none());

        let concat = DenoiserModel::init_model(
            &small_config(Fusion::Concat, all_scales()),
            &skeleton,
            1,
        )
        .unwrap();
        assert!(concat.params.index_of("block0.w_fuse").is_some());
        assert!(concat.params.index_of("block0.alpha_joint").is_none());

        let product = DenoiserModel::init_model(
            &small_config(Fusion::Product, all_scales()),
            &skeleton,
            1,
        )
        .unwrap();
        assert!(product.params.index_of("block0.w_fuse").is_none());
        assert!(product.params.index_of("block0.alpha_joint").is_none());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let skeleton = default_skeleton();
        for fusion in [Fusion::Weighted, Fusion::Concat, Fusion::Product] {
            for scales in [
                vec![GraphScale::Joint],
                vec![GraphScale::Joint, GraphScale::Part],
                all_scales(),
            ] {
                let config = small_config(fusion, scales);
                let model = DenoiserModel::init_model(&config, &skeleton, 1).unwrap();
                let expected =
                    DenoiserModel::analytic_param_count(&config, 17, 10, 5);
                assert_eq!(model.param_count(), expected, "{fusion} {:?}", config.scales);
            }
        }
    }

    #[test]
    fn instrumented_macs_match_closed_form() {
        let skeleton = default_skeleton();
        for fusion in [Fusion::Weighted, Fusion::Concat, Fusion::Product] {
            let config = small_config(fusion, all_scales());
            let model = DenoiserModel::init_model(&config, &skeleton, 1).unwrap();
            for b in [1usize, 3] {
                let (_, y_t, x, t) = batch(b, 17, 50);
                let (_, macs) = model.forward_eval_instrumented(&y_t, &x, &t).unwrap();
                assert_eq!(macs, model.analytic_forward_macs(b), "{fusion} b={b}");
            }
        }
    }

    #[test]
    fn forward_token_counter_tracks_batch() {
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, vec![GraphScale::Joint]);
        let model = DenoiserModel::init_model(&config, &skeleton, 1).unwrap();
        let (_, y_t, x, t) = batch(3, 17, 51);
        model.reset_forward_tokens();
        model.forward_eval(&y_t, &x, &t).unwrap();
        model.forward_eval(&y_t, &x, &t).unwrap();
        assert_eq!(model.forward_tokens(), 6);
    }

    #[test]
    fn weighted_fusion_selects_single_branch() {
        let mut tape = Tape::new();
        let b0 = tape.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b1 = tape.leaf(Tensor::full(&[1, 2, 2], 9.0));
        let b2 = tape.leaf(Tensor::full(&[1, 2, 2], -3.0));
        let a1 = tape.leaf(Tensor::scalar(1.0));
        let a0 = tape.leaf(Tensor::scalar(0.0));
        let fused = fuse(
            &mut tape,
            &[b0, b1, b2],
            Some(&[a1, a0, a0]),
            None,
            Fusion::Weighted,
        )
        .unwrap();
        assert_eq!(tape.value(fused), tape.value(b0));

        // Two equal branches at weight one double the signal.
        let fused2 = fuse(&mut tape, &[b0, b0], Some(&[a1, a1]), None, Fusion::Weighted).unwrap();
        assert_eq!(tape.value(fused2).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn product_fusion_with_unit_branch() {
        let mut tape = Tape::new();
        let b0 = tape.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = tape.leaf(Tensor::ones(&[1, 2, 2]));
        let b2 = tape.leaf(Tensor::full(&[1, 2, 2], 0.5));
        let fused = fuse(&mut tape, &[b0, ones, b2], None, None, Fusion::Product).unwrap();
        assert_eq!(tape.value(fused).data(), &[0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn concat_fusion_projects_back_to_width() {
        let mut tape = Tape::new();
        let d = 4;
        let branches: Vec<Var> = (0..3)
            .map(|i| tape.leaf(Tensor::full(&[2, 3, d], i as f64)))
            .collect();
        // Pre-projection width is 3 * d.
        let cat = tape.concat_last(&branches).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 3, 3 * d]);
        let proj = tape.leaf(Tensor::ones(&[3 * d, d]));
        let fused = fuse(&mut tape, &branches, None, Some(proj), Fusion::Concat).unwrap();
        assert_eq!(tape.value(fused).shape(), &[2, 3, d]);
        // Row value: sum over 3d inputs of branch constants = d*(0+1+2).
        assert!(tape.value(fused).data().iter().all(|&v| v == (d as f64) * 3.0));
    }

    #[test]
    fn zero_activation_block_stays_zero() {
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, all_scales());
        let model = DenoiserModel::init_model(&config, &skeleton, 4).unwrap();
        let out = model.block_forward_eval(0, &Tensor::zeros(&[2, 17, 8])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_block_matches_hand_evaluation() {
        // One joint, one self-hyperedge, width 1, all weights 1: every branch
        // computes relu(z), weighted fusion sums three of them, the residual
        // path adds z, and batch norm is neutralized by setting the running
        // variance to 1 - eps. Expect relu(z + 3*relu(z) + z).
        let config = DenoiserConfig {
            embed_dim: 1,
            blocks: 1,
            fusion: Fusion::Weighted,
            scales: all_scales(),
            max_timestep: 10,
        };
        let adjacency = Tensor::zeros(&[1, 1]);
        let incidence = Tensor::ones(&[1, 1]);
        let mut model = DenoiserModel::init_with_graphs(
            &config,
            1,
            Some(&adjacency),
            Some(&incidence),
            Some(&incidence),
            0,
        )
        .unwrap();
        for name in ["block0.w_joint", "block0.w_part", "block0.w_body", "block0.w_res"] {
            model.params_mut().set_value(name, Tensor::ones(&[1, 1])).unwrap();
        }
        let eps = model.bn_state_mut(0).eps;
        model.bn_state_mut(0).running_var = Tensor::full(&[1], 1.0 - eps);

        for z in [-1.5f64, 0.0, 0.7, 2.0] {
            let input = Tensor::new(&[1, 1, 1], vec![z]).unwrap();
            let out = model.block_forward_eval(0, &input).unwrap();
            let relu = |v: f64| if v > 0.0 { v } else { 0.0 };
            let expected = relu(z + 3.0 * relu(z) + z);
            assert!(
                (out.data()[0] - expected).abs() < 1e-12,
                "z={z}: {} vs {expected}",
                out.data()[0]
            );
        }
    }

    #[test]
    fn oracle_head_initialization_gives_zero_loss() {
        // Force the head to emit the (all-zero) target regardless of input:
        // the training loss is exactly zero.
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, all_scales());
        let mut model = DenoiserModel::init_model(&config, &skeleton, 9).unwrap();
        model.params_mut().set_value("head.weight", Tensor::zeros(&[8, 3])).unwrap();
        model.params_mut().set_value("head.bias", Tensor::zeros(&[3])).unwrap();
        let (_, y_t, x, t) = batch(3, 17, 80);
        let y0 = Tensor::zeros(&[3, 17, 3]);
        let mut tape = Tape::new();
        let (pred, _) = model.forward_train(&mut tape, &y_t, &x, &t).unwrap();
        let target = tape.leaf(y0);
        let loss = tape.mse(pred, target).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn cloned_model_evaluates_identically() {
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, all_scales());
        let model = DenoiserModel::init_model(&config, &skeleton, 10).unwrap();
        let copy = model.clone();
        let (_, y_t, x, t) = batch(2, 17, 81);
        assert_eq!(
            model.forward_eval(&y_t, &x, &t).unwrap(),
            copy.forward_eval(&y_t, &x, &t).unwrap()
        );
    }

    #[test]
    fn gradients_match_finite_differences_weighted() {
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, all_scales());
        let mut model = DenoiserModel::init_model(&config, &skeleton, 12).unwrap();
        let (y0, y_t, x, t) = batch(2, 17, 60);
        let report = model.grad_check(&y0, &y_t, &x, &t, 1e-5, 1e-4).unwrap();
        assert!(
            report.passed(),
            "worst {:?}",
            report
                .entries
                .iter()
                .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
        );
    }

    #[test]
    fn gradients_match_finite_differences_concat_and_product() {
        let skeleton = default_skeleton();
        for fusion in [Fusion::Concat, Fusion::Product] {
            let config = DenoiserConfig {
                blocks: 1,
                ..small_config(fusion, all_scales())
            };
            let mut model = DenoiserModel::init_model(&config, &skeleton, 13).unwrap();
            let (y0, y_t, x, t) = batch(2, 17, 61);
            let report = model.grad_check(&y0, &y_t, &x, &t, 1e-5, 1e-4).unwrap();
            assert!(report.passed(), "{fusion}: worst {}", report.max_rel_err());
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let skeleton = default_skeleton();
        let config = small_config(Fusion::Weighted, all_scales());
        let mut model = DenoiserModel::init_model(&config, &skeleton, 5).unwrap();

        // Take one training step so running stats are nontrivial.
        let (y0, y_t, x, t) = batch(3, 17, 70);
        let mut tape = Tape::new();
        let (pred, lease) = model.forward_train(&mut tape, &y_t, &x, &t).unwrap();
        let target = tape.leaf(y0);
        let loss = tape.mse(pred, target).unwrap();
        let grads = tape.backward(loss).unwrap();
        model.accumulate_grads(&lease, &grads);

        let meta = TrainMeta {
            pose_scale: 500.0,
            timesteps: 64,
        };
        model.save_checkpoint(&meta, &path).unwrap();
        let (restored, meta_back) = DenoiserModel::load_checkpoint(&path).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(restored.params.to_map(), model.params.to_map());
        let out_a = model.forward_eval(&y_t, &x, &t).unwrap();
        let out_b = restored.forward_eval(&y_t, &x, &t).unwrap();
        assert_eq!(out_a, out_b);
    }
}
