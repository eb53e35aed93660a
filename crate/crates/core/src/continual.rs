//! Sequential-task benchmark: synthetic tasks, per-method stage training and
//! the evaluation matrix.
//!
//! Each task draws token sequences around its own cluster mean and labels
//! them with its own frozen teacher network, so tasks conflict in function
//! space but can be told apart from the inputs alone. After every stage the
//! merged model is evaluated on every task; forgetting is the increase of a
//! task's loss between the end of its own stage and the end of the run.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adalora, init_lora, AdaLoraAdapter, Adapter, AdapterKind};
use crate::error::{Error, Result};
use crate::model::{task_loss, Batch, ParamCount, ToyModel};
use crate::rank_alloc::{apply_budget, BudgetSchedule, ImportanceState};
use crate::regularizers::{
    combined_loss, gram_deviation, orth_loss_value, LossBreakdown, LossMode,
};
use crate::rng::{self, Rng};
use crate::tensor::{Matrix, ParamId, ParamSet, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SeqFt,
    SeqLora,
    Lwf,
    OLora,
    #[serde(rename = "o_adalora")]
    OAdaLora,
    Multi,
    Mono,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::SeqFt,
        Method::SeqLora,
        Method::Lwf,
        Method::OLora,
        Method::OAdaLora,
        Method::Multi,
        Method::Mono,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SeqFt => "seq_ft",
            Method::SeqLora => "seq_lora",
            Method::Lwf => "lwf",
            Method::OLora => "o_lora",
            Method::OAdaLora => "o_adalora",
            Method::Multi => "multi",
            Method::Mono => "mono",
        }
    }

    /// Adapter family the method trains, or `None` for full fine-tuning.
    pub fn adapter_kind(self) -> Option<AdapterKind> {
        match self {
            Method::SeqFt | Method::Lwf => None,
            Method::SeqLora | Method::OLora => Some(AdapterKind::Lora),
            Method::OAdaLora | Method::Multi | Method::Mono => Some(AdapterKind::AdaLora),
        }
    }

    pub fn loss_mode(self) -> Option<LossMode> {
        match self {
            Method::SeqFt | Method::Lwf => None,
            Method::SeqLora => Some(LossMode::Lora),
            Method::OLora => Some(LossMode::OLora),
            Method::OAdaLora => Some(LossMode::OAdaLora),
            Method::Multi | Method::Mono => Some(LossMode::AdaLora),
        }
    }

    pub fn uses_lambda1(self) -> bool {
        self.loss_mode().is_some_and(LossMode::uses_orth)
    }

    pub fn uses_lambda2(self) -> bool {
        self.loss_mode().is_some_and(LossMode::uses_adalora_reg)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown method `{s}` (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    /// Adapter learning rate on the first stage.
    pub adapter_first: f64,
    /// Adapter learning rate on every later stage.
    pub adapter_later: f64,
    /// Learning rate for full fine-tuning, all stages.
    pub full_ft: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            adapter_first: 1e-3,
            adapter_later: 1e-4,
            full_ft: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lora_rank: usize,
    pub rank_init: usize,
    pub rank_target: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_frac: f64,
    pub decay_end_frac: f64,
    /// Weight of the hidden-representation distillation term.
    pub lwf_kappa: f64,
    pub lr: LrSchedule,
}

impl Default for MethodSpec {
    fn default() -> Self {
        Self {
            method: Method::OLora,
            lambda1: 0.5,
            lambda2: 0.5,
            lora_rank: 32,
            rank_init: 12,
            rank_target: 8,
            beta1: 0.85,
            beta2: 0.85,
            warmup_frac: 0.1,
            decay_end_frac: 0.7,
            lwf_kappa: 1.0,
            lr: LrSchedule::default(),
        }
    }
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )))
            }
        };
        nonneg("lambda1", self.lambda1)?;
        nonneg("lambda2", self.lambda2)?;
        nonneg("lwf_kappa", self.lwf_kappa)?;
        for (name, v) in [
            ("lr.adapter_first", self.lr.adapter_first),
            ("lr.adapter_later", self.lr.adapter_later),
            ("lr.full_ft", self.lr.full_ft),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lora_rank == 0 || self.rank_init == 0 {
            return Err(Error::Config("ranks must be positive".into()));
        }
        if self.rank_target > self.rank_init {
            return Err(Error::Config(format!(
                "rank_target {} exceeds rank_init {}",
                self.rank_target, self.rank_init
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(0.0 <= self.warmup_frac
            && self.warmup_frac <= self.decay_end_frac
            && self.decay_end_frac <= 1.0)
        {
            return Err(Error::Config(
                "need 0 <= warmup_frac <= decay_end_frac <= 1".into(),
            ));
        }
        Ok(())
    }

    /// Logs a warning for every nonzero coefficient the method ignores.
    pub fn warn_unused(&self) {
        if !self.method.uses_lambda1() && self.lambda1 != 0.0 {
            log::warn!("lambda1 = {} is ignored by {}", self.lambda1, self.method);
        }
        if !self.method.uses_lambda2() && self.lambda2 != 0.0 {
            log::warn!("lambda2 = {} is ignored by {}", self.lambda2, self.method);
        }
    }

    /// Mono starts every task from a fresh model, so each of its stages is
    /// a first stage.
    fn lr_for_stage(&self, stage: usize) -> f64 {
        match (self.method.adapter_kind(), stage) {
            (None, _) => self.lr.full_ft,
            (Some(_), 0) => self.lr.adapter_first,
            (Some(_), _) if self.method == Method::Mono => self.lr.adapter_first,
            (Some(_), _) => self.lr.adapter_later,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps_first: usize,
    pub steps_later: usize,
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer step.
    pub grad_accum: usize,
    pub momentum: f64,
    /// Write a trace row every this many optimizer steps (the last step of a
    /// stage is always written).
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_first: 2000,
            steps_later: 500,
            batch_size: 16,
            grad_accum: 1,
            momentum: 0.95,
            trace_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_first == 0 || self.steps_later == 0 {
            return Err(Error::Config("steps per stage must be positive".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.trace_every == 0 {
            return Err(Error::Config(
                "batch_size, grad_accum and trace_every must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn steps_for_stage(&self, stage: usize) -> usize {
        if stage == 0 {
            self.steps_first
        } else {
            self.steps_later
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSuiteConfig {
    pub n_tasks: usize,
    pub seq_len: usize,
    /// Training examples for every task after the first.
    pub train_size: usize,
    /// The first task gets this many times `train_size`.
    pub first_task_factor: usize,
    pub eval_size: usize,
    /// Per-coordinate standard deviation of tokens around their cluster mean.
    pub cluster_sigma: f64,
    /// Per-coordinate standard deviation of the cluster means.
    pub mean_scale: f64,
    /// Minimum distance between cluster means, in units of `cluster_sigma`.
    pub min_separation: f64,
    pub teacher_hidden: usize,
    /// Output scale of the teacher networks.
    pub teacher_scale: f64,
    /// Standard deviation of each task's random target offset. Zero gives
    /// every task zero-mean targets.
    pub target_offset_scale: f64,
}

impl Default for TaskSuiteConfig {
    fn default() -> Self {
        Self {
            n_tasks: 3,
            seq_len: 4,
            train_size: 256,
            first_task_factor: 4,
            eval_size: 256,
            cluster_sigma: 1.0,
            mean_scale: 1.0,
            min_separation: 4.0,
            teacher_hidden: 32,
            teacher_scale: 2.0,
            target_offset_scale: 5.0,
        }
    }
}

impl TaskSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.seq_len == 0 || self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("task suite sizes must be positive".into()));
        }
        if self.first_task_factor < 4 {
            return Err(Error::Config(format!(
                "first_task_factor must be at least 4, got {}",
                self.first_task_factor
            )));
        }
        if self.teacher_hidden == 0 {
            return Err(Error::Config("teacher_hidden must be positive".into()));
        }
        for (name, v) in [
            ("cluster_sigma", self.cluster_sigma),
            ("mean_scale", self.mean_scale),
            ("teacher_scale", self.teacher_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.target_offset_scale.is_finite() && self.target_offset_scale >= 0.0) {
            return Err(Error::Config(format!(
                "target_offset_scale must be non-negative, got {}",
                self.target_offset_scale
            )));
        }
        if !(self.min_separation.is_finite() && self.min_separation >= 4.0) {
            return Err(Error::Config(format!(
                "min_separation must be at least 4 sigma, got {}",
                self.min_separation
            )));
        }
        Ok(())
    }

    pub fn train_size_for(&self, task: usize) -> usize {
        if task == 0 {
            self.train_size * self.first_task_factor
        } else {
            self.train_size
        }
    }
}

/// Frozen random network labelling a task: `scale·tanh(x̄·W₁ + b₁)·W₂ − c`
/// on the mean-pooled tokens `x̄`. `c` centres the task's targets and then
/// moves them to a task-specific random mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub offset: Matrix,
    pub scale: f64,
}

impl Teacher {
    fn raw(&self, pooled: &Matrix) -> Result<Matrix> {
        let mut h = pooled.matmul(&self.w1)?;
        for r in 0..h.rows() {
            for c in 0..h.cols() {
                h.set(r, c, (h.get(r, c) + self.b1.get(0, c)).tanh());
            }
        }
        Ok(h.matmul(&self.w2)?.scale(self.scale))
    }

    pub fn apply(&self, batch: &Batch) -> Result<Matrix> {
        let mut y = self.raw(&mean_pool(batch))?;
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                y.set(r, c, y.get(r, c) - self.offset.get(0, c));
            }
        }
        Ok(y)
    }
}

fn mean_pool(batch: &Batch) -> Matrix {
    let (n, l, d) = (batch.len(), batch.seq_len, batch.tokens.cols());
    let mut out = Matrix::zeros(n, d);
    for e in 0..n {
        for t in 0..l {
            for c in 0..d {
                let v = out.get(e, c) + batch.tokens.get(e * l + t, c) / l as f64;
                out.set(e, c, v);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Batch,
    pub targets: Matrix,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Examples at `idx`, in order.
    pub fn gather(&self, idx: &[usize]) -> Result<(Batch, Matrix)> {
        let l = self.inputs.seq_len;
        let d = self.inputs.tokens.cols();
        let o = self.targets.cols();
        let mut x = Vec::with_capacity(idx.len() * l * d);
        let mut y = Vec::with_capacity(idx.len() * o);
        for &i in idx {
            x.extend_from_slice(&self.inputs.tokens.data()[i * l * d..(i + 1) * l * d]);
            y.extend_from_slice(self.targets.row(i));
        }
        Ok((
            Batch::new(Matrix::from_vec(idx.len() * l, d, x)?, l)?,
            Matrix::from_vec(idx.len(), o, y)?,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub index: usize,
    pub mean: Vec<f64>,
    pub teacher: Teacher,
    pub train: Dataset,
    pub eval: Dataset,
}

impl SyntheticTask {
    /// Variance of the eval targets, averaged over output dimensions.
    pub fn target_variance(&self) -> f64 {
        let y = &self.eval.targets;
        let n = y.rows() as f64;
        (0..y.cols())
            .map(|c| {
                let col = y.column(c);
                let mu = col.iter().sum::<f64>() / n;
                col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n
            })
            .sum::<f64>()
            / y.cols() as f64
    }
}

fn sample_inputs(
    mean: &[f64],
    n: usize,
    seq_len: usize,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Batch> {
    let d = mean.len();
    let noise = Matrix::randn(n * seq_len, d, sigma, rng);
    let mut data = noise.into_data();
    for (i, v) in data.iter_mut().enumerate() {
        *v += mean[i % d];
    }
    Batch::new(Matrix::from_vec(n * seq_len, d, data)?, seq_len)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Builds the task sequence. Everything is a function of `seed` and the
/// configuration; cluster means are redrawn until every pair is at least
/// `min_separation·cluster_sigma` apart.
pub fn generate_suite(
    cfg: &TaskSuiteConfig,
    input_dim: usize,
    output_dim: usize,
    seed: u64,
) -> Result<Vec<SyntheticTask>> {
    cfg.validate()?;
    const MAX_ATTEMPTS: u64 = 1000;
    let min_dist = cfg.min_separation * cfg.cluster_sigma;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_tasks);
    for n in 0..cfg.n_tasks as u64 {
        let mut accepted = None;
        for attempt in 0..MAX_ATTEMPTS {
            let mut r = rng::stream(seed, &[rng::label("task-mean"), n, attempt]);
            let mu = Matrix::randn(1, input_dim, cfg.mean_scale, &mut r).into_data();
            if means.iter().all(|m| distance(m, &mu) >= min_dist) {
                accepted = Some(mu);
                break;
            }
        }
        means.push(accepted.ok_or_else(|| {
            Error::Config(format!(
                "could not place task {n} at least {min_dist} from the others; raise mean_scale"
            ))
        })?);
    }

    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for (n, mean) in means.into_iter().enumerate() {
        let n64 = n as u64;
        let mut tr = rng::stream(seed, &[rng::label("teacher"), n64]);
        let h = cfg.teacher_hidden;
        let mut teacher = Teacher {
            w1: Matrix::randn(input_dim, h, 1.0 / (input_dim as f64).sqrt(), &mut tr),
            b1: Matrix::randn(1, h, 0.5, &mut tr),
            w2: Matrix::randn(h, output_dim, 1.0 / (h as f64).sqrt(), &mut tr),
            offset: Matrix::zeros(1, output_dim),
            scale: cfg.teacher_scale,
        };
        let mut cr = rng::stream(seed, &[rng::label("teacher-centre"), n64]);
        let reference = sample_inputs(&mean, 2048, cfg.seq_len, cfg.cluster_sigma, &mut cr)?;
        let raw = teacher.raw(&mean_pool(&reference))?;
        let shift = Matrix::randn(1, output_dim, cfg.target_offset_scale, &mut cr);
        for c in 0..output_dim {
            let centre = raw.column(c).iter().sum::<f64>() / raw.rows() as f64;
            teacher.offset.set(0, c, centre - shift.get(0, c));
        }

        let mut dr = rng::stream(seed, &[rng::label("task-data"), n64]);
        let train_x = sample_inputs(
            &mean,
            cfg.train_size_for(n),
            cfg.seq_len,
            cfg.cluster_sigma,
            &mut dr,
        )?;
        let eval_x = sample_inputs(
            &mean,
            cfg.eval_size,
            cfg.seq_len,
            cfg.cluster_sigma,
            &mut dr,
        )?;
        let train = Dataset {
            targets: teacher.apply(&train_x)?,
            inputs: train_x,
        };
        let eval = Dataset {
            targets: teacher.apply(&eval_x)?,
            inputs: eval_x,
        };
        tasks.push(SyntheticTask {
            index: n,
            mean,
            teacher,
            train,
            eval,
        });
    }
    Ok(tasks)
}

/// Mean eval loss of the merged model on every task, in task order.
///
/// Only the inputs of each eval set reach the model; the task index is never
/// part of the model interface.
pub fn evaluate_all(model: &ToyModel, tasks: &[SyntheticTask]) -> Result<Vec<f64>> {
    let merged = model.merged();
    tasks.iter().map(|t| eval_loss(&merged, &t.eval)).collect()
}

fn eval_loss(model: &ToyModel, data: &Dataset) -> Result<f64> {
    let pred = model.predict(&data.inputs)?;
    Ok(pred.sub(&data.targets)?.frobenius_sq() / pred.len() as f64)
}

/// One row of the per-step metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: usize,
    pub step: usize,
    pub task_loss: f64,
    pub orth_loss: f64,
    pub adalora_reg: f64,
    pub distill_loss: f64,
    pub total: f64,
    /// Sum of active ranks over adapted weights (adapter methods only).
    pub total_rank: Option<usize>,
    /// Active rank per adapted weight, `;`-separated in weight order.
    pub active_ranks: String,
}

/// Geometry of the adapters at the end of a stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    /// `sqrt(Σ ‖A_frozenᵀ·A_active‖²_F)` over every frozen/active pair.
    pub orth_overlap: Option<f64>,
    /// `‖AᵀA − I‖_F` of each active adapter when the stage started.
    pub gram_deviation_init: Vec<f64>,
    /// The same quantity when the stage ended.
    pub gram_deviation_final: Vec<f64>,
    pub active_ranks: Vec<usize>,
    pub total_rank: Option<usize>,
    /// Digest of every frozen adapter when the stage started and ended.
    pub frozen_checksums_before: Vec<u64>,
    pub frozen_checksums_after: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: usize,
    pub method: Method,
    pub steps: usize,
    pub lr: f64,
    /// Eval loss on every task after this stage.
    pub eval_losses: Vec<f64>,
    pub params: ParamCount,
    pub final_loss: LossBreakdown,
    pub diagnostics: StageDiagnostics,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    /// `F_n` for every task trained before the final stage.
    pub per_task: Vec<f64>,
    /// Mean of `per_task`; zero when it is empty.
    pub average: f64,
    /// Mean eval loss over all tasks after the final stage.
    pub final_average_loss: f64,
    /// Eval loss of the last-trained task after the final stage.
    pub final_new_task_loss: f64,
}

/// Forgetting from a complete, ordered sequence of stage results.
pub fn forgetting_report(results: &[StageResult]) -> Result<ForgettingReport> {
    let last = results
        .last()
        .ok_or_else(|| Error::Protocol("no stage results".into()))?;
    for (i, r) in results.iter().enumerate() {
        if r.stage != i {
            return Err(Error::Protocol(format!(
                "stage {i} missing (found stage {} at position {i})",
                r.stage
            )));
        }
        if r.eval_losses.len() < results.len() || r.eval_losses.len() != last.eval_losses.len() {
            return Err(Error::Protocol(format!(
                "stage {i} evaluated {} tasks, expected {}",
                r.eval_losses.len(),
                last.eval_losses.len()
            )));
        }
    }
    let final_stage = results.len() - 1;
    let per_task: Vec<f64> = (0..final_stage)
        .map(|n| last.eval_losses[n] - results[n].eval_losses[n])
        .collect();
    let average = if per_task.is_empty() {
        0.0
    } else {
        per_task.iter().sum::<f64>() / per_task.len() as f64
    };
    let final_average_loss = last.eval_losses.iter().sum::<f64>() / last.eval_losses.len() as f64;
    Ok(ForgettingReport {
        per_task,
        average,
        final_average_loss,
        final_new_task_loss: last.eval_losses[final_stage],
    })
}

/// Plain SGD with optional heavy-ball momentum. Frozen parameters are never
/// touched.
struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: HashMap<ParamId, Matrix>,
}

impl Sgd {
    fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P) {
        let (lr, mu) = (self.lr, self.momentum);
        let velocity = &mut self.velocity;
        params.visit_params_mut(&mut |p| {
            if !p.is_trainable() {
                return;
            }
            let update = if mu > 0.0 {
                let v = velocity
                    .entry(p.id())
                    .or_insert_with(|| Matrix::zeros(p.shape().0, p.shape().1));
                *v = v.scale(mu);
                v.add_assign(p.grad())
                    .expect("velocity matches parameter shape");
                v.clone()
            } else {
                p.grad().clone()
            };
            let new = p
                .value()
                .sub(&update.scale(lr))
                .expect("gradient matches parameter shape");
            *p.value_mut() = new;
        });
    }
}

fn active_adalora(model: &ToyModel) -> Vec<&AdaLoraAdapter> {
    model
        .stacks()
        .into_iter()
        .filter_map(|s| s.active().and_then(Adapter::as_adalora))
        .collect()
}

fn active_adalora_mut(model: &mut ToyModel) -> Vec<&mut AdaLoraAdapter> {
    model
        .adapted_layers_mut()
        .into_iter()
        .filter_map(|(_, l)| l.stack.active_mut().and_then(Adapter::as_adalora_mut))
        .collect()
}

fn active_ranks(model: &ToyModel) -> Vec<usize> {
    model
        .stacks()
        .iter()
        .map(|s| s.active().map_or(0, Adapter::active_rank))
        .collect()
}

fn orth_overlap(model: &ToyModel) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut any = false;
    for s in model.stacks() {
        let Some(active) = s.active() else { continue };
        for f in s.frozen() {
            total += orth_loss_value(f.a().value(), active.a().value())?;
            any = true;
        }
    }
    Ok(any.then(|| total.sqrt()))
}

fn active_gram_deviations(model: &ToyModel) -> Vec<f64> {
    active_adalora(model)
        .iter()
        .map(|a| gram_deviation(a.a.value()))
        .collect()
}

/// Where a stage's training batches come from.
enum Source<'a> {
    One(&'a Dataset),
    /// Every example picks a task uniformly, then an example within it, so
    /// per-example weight is inversely proportional to task size.
    Mixed(Vec<&'a Dataset>),
}

impl Source<'_> {
    fn sample(&self, n: usize, rng: &mut Rng) -> Result<(Batch, Matrix)> {
        match self {
            Source::One(d) => {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..d.len())).collect();
                d.gather(&idx)
            }
            Source::Mixed(ds) => {
                let mut xs = Vec::with_capacity(n);
                let mut ys = Vec::with_capacity(n);
                for _ in 0..n {
                    let d = ds[rng.random_range(0..ds.len())];
                    let (x, y) = d.gather(&[rng.random_range(0..d.len())])?;
                    xs.push(x);
                    ys.push(y);
                }
                let xr: Vec<&Batch> = xs.iter().collect();
                let yr: Vec<&Matrix> = ys.iter().collect();
                Ok((Batch::concat(&xr)?, Matrix::concat_rows(&yr)?))
            }
        }
    }
}

struct StagePlan<'a> {
    stage: usize,
    steps: usize,
    lr: f64,
    mode: Option<LossMode>,
    source: Source<'a>,
    /// Frozen copy of the pre-stage model for distillation.
    teacher: Option<ToyModel>,
    data_seed: u64,
}

/// Runs one stage of optimizer steps on `model`.
fn train(
    model: &mut ToyModel,
    spec: &MethodSpec,
    cfg: &TrainConfig,
    plan: StagePlan<'_>,
) -> Result<(LossBreakdown, Vec<TraceRow>)> {
    let mut rng = rng::stream(plan.data_seed, &[rng::label("batches"), plan.stage as u64]);
    let mut opt = Sgd::new(plan.lr, cfg.momentum);
    let adaptive = plan.mode.is_some_and(LossMode::uses_adalora_reg);
    let schedule = if adaptive {
        Some(BudgetSchedule::from_fractions(
            spec.rank_init,
            spec.rank_target,
            plan.steps,
            spec.warmup_frac,
            spec.decay_end_frac,
            active_adalora(model).len(),
        )?)
    } else {
        None
    };
    let mut importance = ImportanceState::new(spec.beta1, spec.beta2)?;
    let mut trace = Vec::new();
    let mut last = LossBreakdown::default();
    let inv_accum = 1.0 / cfg.grad_accum as f64;

    for step in 0..plan.steps {
        model.zero_grads();
        let mut sum = LossBreakdown::default();
        let mut distill_sum = 0.0;
        for _ in 0..cfg.grad_accum {
            let (x, y) = plan.source.sample(cfg.batch_size, &mut rng)?;
            let mut tape = Tape::new();
            let (loss, mut br, distill) = match plan.mode {
                Some(mode) => {
                    let pred = model.forward(&mut tape, &x)?;
                    let task = task_loss(&mut tape, pred, &y)?;
                    let (l, br) = combined_loss(
                        &mut tape,
                        task,
                        model.stacks(),
                        spec.lambda1,
                        spec.lambda2,
                        mode,
                    )?;
                    (l, br, 0.0)
                }
                None => {
                    let hidden = model.forward_hidden(&mut tape, &x)?;
                    let pred = model.head.adapted_forward(&mut tape, hidden)?;
                    let task = task_loss(&mut tape, pred, &y)?;
                    let task_value = tape.scalar(task);
                    let (l, distill) = match &plan.teacher {
                        Some(t) => {
                            let target = tape.constant(t.hidden(&x)?);
                            let d = tape.mse(hidden, target)?;
                            let dv = tape.scalar(d);
                            let wd = tape.scale(d, spec.lwf_kappa);
                            (tape.add(task, wd)?, dv)
                        }
                        None => (task, 0.0),
                    };
                    let br = LossBreakdown {
                        task_loss: task_value,
                        total: tape.scalar(l),
                        ..LossBreakdown::default()
                    };
                    (l, br, distill)
                }
            };
            if !br.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at stage {} step {step} (lr {})",
                    plan.stage, plan.lr
                )));
            }
            let grads = tape.backward(loss)?;
            grads.accumulate(model)?;
            br.lambda1 = spec.lambda1;
            br.lambda2 = spec.lambda2;
            sum.task_loss += br.task_loss * inv_accum;
            sum.orth_loss += br.orth_loss * inv_accum;
            sum.adalora_reg += br.adalora_reg * inv_accum;
            sum.total += br.total * inv_accum;
            sum.lambda1 = br.lambda1;
            sum.lambda2 = br.lambda2;
            distill_sum += distill * inv_accum;
        }
        if cfg.grad_accum > 1 {
            model.visit_params_mut(&mut |p| {
                if p.is_trainable() {
                    *p.grad_mut() = p.grad().scale(inv_accum);
                }
            });
        }
        if adaptive {
            importance.update(&active_adalora(model))?;
        }
        opt.step(model);
        if let Some(s) = &schedule {
            let budget = s.budget_at(step + 1)?;
            apply_budget(&mut active_adalora_mut(model), &importance, budget)?;
        }
        last = sum;
        if step % cfg.trace_every == 0 || step + 1 == plan.steps {
            let ranks = active_ranks(model);
            let has_adapters = plan.mode.is_some();
            trace.push(TraceRow {
                stage: plan.stage,
                step,
                task_loss: sum.task_loss,
                orth_loss: sum.orth_loss,
                adalora_reg: sum.adalora_reg,
                distill_loss: distill_sum,
                total: sum.total,
                total_rank: has_adapters.then(|| ranks.iter().sum()),
                active_ranks: if has_adapters {
                    ranks
                        .iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join(";")
                } else {
                    String::new()
                },
            });
        }
    }
    Ok((last, trace))
}

/// Adapter seed for `(stage, weight)`, derived from the run's adapter seed.
fn adapter_seed(seed: u64, stage: usize, weight: usize) -> u64 {
    rng::stream(seed, &[rng::label("adapter"), stage as u64, weight as u64]).next_u64()
}

fn attach_adapters(
    model: &mut ToyModel,
    spec: &MethodSpec,
    kind: AdapterKind,
    stage: usize,
    seed: u64,
) -> Result<()> {
    for (j, id) in model.weight_ids().into_iter().enumerate() {
        let layer = model.layer_mut(id);
        let (d1, d2) = (layer.d_in(), layer.d_out());
        let s = adapter_seed(seed, stage, j);
        let adapter = match kind {
            AdapterKind::Lora => init_lora(d1, d2, spec.lora_rank, s)?,
            AdapterKind::AdaLora => init_adalora(d1, d2, spec.rank_init, s)?,
        };
        layer.stack.freeze_and_extend(adapter)?;
    }
    Ok(())
}

/// State of one method run across its stages.
#[derive(Clone, Debug)]
pub struct ContinualRun {
    spec: MethodSpec,
    train_cfg: TrainConfig,
    base: ToyModel,
    model: ToyModel,
    /// Mono keeps one model per trained task.
    mono_models: Vec<ToyModel>,
    data_seed: u64,
    adapter_seed: u64,
    results: Vec<StageResult>,
}

impl ContinualRun {
    /// `seed` determines batch order and adapter initialization.
    pub fn new(
        base: ToyModel,
        spec: MethodSpec,
        train_cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        spec.warn_unused();
        train_cfg.validate()?;
        if base.has_adapters() {
            return Err(Error::Config(
                "base model must start without adapters".into(),
            ));
        }
        let mut model = base.clone();
        model.set_base_trainable(false);
        Ok(Self {
            spec,
            train_cfg,
            base: model.clone(),
            model,
            mono_models: Vec::new(),
            data_seed: rng::stream(seed, &[rng::label("data-seed")]).next_u64(),
            adapter_seed: rng::stream(seed, &[rng::label("adapter-seed")]).next_u64(),
            results: Vec::new(),
        })
    }

    /// Overrides the seed used to initialize adapters of later stages.
    pub fn set_adapter_seed(&mut self, seed: u64) {
        self.adapter_seed = seed;
    }

    pub fn spec(&self) -> &MethodSpec {
        &self.spec
    }

    /// The continual model (for Mono, the most recently trained copy).
    pub fn model(&self) -> &ToyModel {
        self.mono_models.last().unwrap_or(&self.model)
    }

    pub fn mono_models(&self) -> &[ToyModel] {
        &self.mono_models
    }

    pub fn results(&self) -> &[StageResult] {
        &self.results
    }

    pub fn next_stage(&self) -> usize {
        self.results.len()
    }

    /// Trains stage `stage` on `tasks[stage]` (all tasks for Multi) and
    /// evaluates on every task.
    pub fn run_stage(&mut self, stage: usize, tasks: &[SyntheticTask]) -> Result<StageResult> {
        if stage != self.next_stage() {
            return Err(Error::Protocol(format!(
                "stage {stage} requested but the next stage is {}",
                self.next_stage()
            )));
        }
        if stage >= tasks.len() {
            return Err(Error::Protocol(format!(
                "stage {stage} has no task (suite has {})",
                tasks.len()
            )));
        }
        let method = self.spec.method;
        if method == Method::Multi && stage > 0 {
            return Err(Error::Protocol(
                "multi trains a single stage over all tasks".into(),
            ));
        }
        let started = Instant::now();
        let mut steps = self.train_cfg.steps_for_stage(stage);
        let lr = self.spec.lr_for_stage(stage);
        let mut source = Source::One(&tasks[stage].train);
        let mut teacher = None;

        let model = match method {
            Method::Mono => {
                self.mono_models.push(self.base.clone());
                self.mono_models.last_mut().expect("just pushed")
            }
            _ => &mut self.model,
        };
        match method {
            Method::SeqFt => model.set_base_trainable(true),
            Method::Lwf => {
                if stage > 0 {
                    let mut t = model.clone();
                    t.set_base_trainable(false);
                    teacher = Some(t);
                }
                model.set_base_trainable(true);
            }
            Method::SeqLora => {
                model.commit_merge();
                attach_adapters(
                    model,
                    &self.spec,
                    AdapterKind::Lora,
                    stage,
                    self.adapter_seed,
                )?;
            }
            Method::OLora => attach_adapters(
                model,
                &self.spec,
                AdapterKind::Lora,
                stage,
                self.adapter_seed,
            )?,
            Method::OAdaLora | Method::Mono => attach_adapters(
                model,
                &self.spec,
                AdapterKind::AdaLora,
                stage,
                self.adapter_seed,
            )?,
            Method::Multi => {
                steps = self.train_cfg.steps_first + self.train_cfg.steps_later * (tasks.len() - 1);
                source = Source::Mixed(tasks.iter().map(|t| &t.train).collect());
                attach_adapters(
                    model,
                    &self.spec,
                    AdapterKind::AdaLora,
                    stage,
                    self.adapter_seed,
                )?
            }
        }

        let params = model.param_count();
        let checksums_before = model.frozen_adapter_checksums();
        let gram_init = active_gram_deviations(model);
        let plan = StagePlan {
            stage,
            steps,
            lr,
            mode: method.loss_mode(),
            source,
            teacher,
            data_seed: self.data_seed,
        };
        let (final_loss, trace) = train(model, &self.spec, &self.train_cfg, plan)?;

        let ranks = active_ranks(model);
        let diagnostics = StageDiagnostics {
            orth_overlap: orth_overlap(model)?,
            gram_deviation_init: gram_init,
            gram_deviation_final: active_gram_deviations(model),
            total_rank: method.adapter_kind().map(|_| ranks.iter().sum()),
            active_ranks: ranks,
            frozen_checksums_before: checksums_before,
            frozen_checksums_after: model.frozen_adapter_checksums(),
        };
        if method.adapter_kind().is_none() {
            model.set_base_trainable(false);
        }

        let eval_losses = self.evaluate(tasks)?;
        let result = StageResult {
            stage,
            method,
            steps,
            lr,
            eval_losses,
            params,
            final_loss,
            diagnostics,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            trace,
        };
        self.results.push(result.clone());
        Ok(result)
    }

    /// Current eval losses. Mono evaluates each trained task with its own
    /// model and untrained tasks with the base model.
    pub fn evaluate(&self, tasks: &[SyntheticTask]) -> Result<Vec<f64>> {
        if self.spec.method != Method::Mono {
            return evaluate_all(&self.model, tasks);
        }
        tasks
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let m = self.mono_models.get(j).unwrap_or(&self.base);
                evaluate_all(m, std::slice::from_ref(t)).map(|v| v[0])
            })
            .collect()
    }

    /// For Mono: row `k` is task-`k`'s model evaluated on every task.
    pub fn mono_cross_losses(&self, tasks: &[SyntheticTask]) -> Result<Vec<Vec<f64>>> {
        self.mono_models
            .iter()
            .map(|m| evaluate_all(m, tasks))
            .collect()
    }

    /// Number of stages the method runs on a suite of `n_tasks`.
    pub fn stage_count(method: Method, n_tasks: usize) -> usize {
        if method == Method::Multi {
            1
        } else {
            n_tasks
        }
    }

    /// Runs every remaining stage in order.
    pub fn run_all(&mut self, tasks: &[SyntheticTask]) -> Result<()> {
        for stage in self.next_stage()..Self::stage_count(self.spec.method, tasks.len()) {
            self.run_stage(stage, tasks)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(stage: usize, losses: &[f64]) -> StageResult {
        StageResult {
            stage,
            method: Method::SeqFt,
            steps: 0,
            lr: 0.0,
            eval_losses: losses.to_vec(),
            params: ParamCount {
                trainable: 0,
                total: 1,
                fraction: 0.0,
            },
            final_loss: LossBreakdown::default(),
            diagnostics: StageDiagnostics::default(),
            wall_clock_secs: 0.0,
            trace: Vec::new(),
        }
    }

    #[test]
    fn forgetting_hand_example() {
        let r = forgetting_report(&[result(0, &[1.0, 5.0]), result(1, &[3.0, 0.5])]).unwrap();
        assert_eq!(r.per_task, vec![2.0]);
        assert_eq!(r.average, 2.0);
        assert_eq!(r.final_new_task_loss, 0.5);
    }

    #[test]
    fn forgetting_edge_cases() {
        let single = forgetting_report(&[result(0, &[1.0])]).unwrap();
        assert!(single.per_task.is_empty());
        let flat = forgetting_report(&[result(0, &[1.0, 2.0]), result(1, &[1.0, 0.2])]).unwrap();
        assert_eq!(flat.per_task, vec![0.0]);
        assert!(matches!(forgetting_report(&[]), Err(Error::Protocol(_))));
        assert!(matches!(
            forgetting_report(&[result(0, &[1.0, 1.0]), result(2, &[1.0, 1.0])]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
        assert!("o-lora".parse::<Method>().is_err());
    }

    #[test]
    fn suite_respects_separation_and_sizes() {
        let cfg = TaskSuiteConfig::default();
        let tasks = generate_suite(&cfg, 32, 4, 7).unwrap();
        assert_eq!(tasks.len(), 3);
        assert_eq!(tasks[0].train.len(), 4 * tasks[1].train.len());
        for i in 0..3 {
            for j in 0..i {
                assert!(distance(&tasks[i].mean, &tasks[j].mean) >= 4.0 * cfg.cluster_sigma);
            }
        }
        let again = generate_suite(&cfg, 32, 4, 7).unwrap();
        assert_eq!(tasks[2].eval, again[2].eval);
    }

    #[test]
    fn sgd_leaves_frozen_parameters_alone() {
        use crate::tensor::Parameter;
        let mut ps = vec![
            Parameter::trainable(Matrix::filled(1, 2, 1.0)),
            Parameter::frozen(Matrix::filled(1, 2, 1.0)),
        ];
        for p in &mut ps {
            p.grad_mut().fill(2.0);
        }
        let mut opt = Sgd::new(0.5, 0.0);
        opt.step(&mut ps);
        assert_eq!(ps[0].value().data(), &[0.0, 0.0]);
        assert_eq!(ps[1].value().data(), &[1.0, 1.0]);
    }
}
