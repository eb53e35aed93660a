//! Experiment plumbing: run configuration, orchestration of method × seed
//! runs, on-disk artifacts, summary comparison and the gradient-check suite.
//!
//! Output layout of one experiment:
//!
//! ```text
//! <out>/config.json              fully resolved RunConfig
//! <out>/status.json              running | complete | failed, per-run progress
//! <out>/summary.json             every run plus per-method medians
//! <out>/runs/<method>-seed<s>/   metrics.csv, summary.json, checkpoint*.json
//! ```
//!
//! Summaries never contain wall-clock data (that lives in `status.json`), so
//! replaying a configuration reproduces them byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adalora, init_lora, Adapter, AdapterKind};
use crate::continual::{
    forgetting_report, generate_suite, ContinualRun, ForgettingReport, LrSchedule, Method,
    MethodSpec, StageDiagnostics, TaskSuiteConfig, TrainConfig,
};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{task_loss, Batch, BlockConfig, ParamCount, ToyModel};
use crate::regularizers::{adalora_reg, combined_loss, total_orth_loss, LossBreakdown, LossMode};
use crate::rng;
use crate::tensor::{finite_diff_check, GradCheckOptions, Matrix, OpKind, Parameter, Tape, Var};

/// Everything needed to reproduce an experiment. Omitted fields take their
/// defaults; unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub model: BlockConfig,
    pub suite: TaskSuiteConfig,
    pub train: TrainConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lora_rank: usize,
    pub rank_init: usize,
    pub rank_target: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_frac: f64,
    pub decay_end_frac: f64,
    pub lwf_kappa: f64,
    pub lr: LrSchedule,
    pub out_dir: PathBuf,
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = MethodSpec::default();
        Self {
            methods: vec![Method::OLora],
            seeds: vec![0, 1, 2, 3, 4],
            model: BlockConfig::default(),
            suite: TaskSuiteConfig::default(),
            train: TrainConfig::default(),
            lambda1: spec.lambda1,
            lambda2: spec.lambda2,
            lora_rank: spec.lora_rank,
            rank_init: spec.rank_init,
            rank_target: spec.rank_target,
            beta1: spec.beta1,
            beta2: spec.beta2,
            warmup_frac: spec.warmup_frac,
            decay_end_frac: spec.decay_end_frac,
            lwf_kappa: spec.lwf_kappa,
            lr: spec.lr,
            out_dir: PathBuf::from("olora-out"),
            execution: Execution::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn method_spec(&self, method: Method) -> MethodSpec {
        MethodSpec {
            method,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lora_rank: self.lora_rank,
            rank_init: self.rank_init,
            rank_target: self.rank_target,
            beta1: self.beta1,
            beta2: self.beta2,
            warmup_frac: self.warmup_frac,
            decay_end_frac: self.decay_end_frac,
            lwf_kappa: self.lwf_kappa,
            lr: self.lr.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config(
                "methods: at least one method is required".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return Err(Error::Config("methods: duplicate entries".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds: duplicate entries".into()));
        }
        let field =
            |name: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("{name}: {e}")));
        field("model", self.model.validate())?;
        field("suite", self.suite.validate())?;
        field("train", self.train.validate())?;
        for m in &self.methods {
            self.method_spec(*m).validate()?;
        }
        Ok(())
    }

    pub fn suite_key(&self) -> SuiteKey {
        SuiteKey {
            model: self.model.clone(),
            suite: self.suite.clone(),
            seeds: self.seeds.clone(),
        }
    }
}

/// What two summaries must share to be comparable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteKey {
    pub model: BlockConfig,
    pub suite: TaskSuiteConfig,
    pub seeds: Vec<u64>,
}

/// One stage of a run, as persisted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub steps: usize,
    pub lr: f64,
    pub eval_losses: Vec<f64>,
    pub params: ParamCount,
    pub final_loss: LossBreakdown,
    pub diagnostics: StageDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub spec: MethodSpec,
    pub train: TrainConfig,
    /// Row `n`: eval loss on every task after stage `n`.
    pub eval_matrix: Vec<Vec<f64>>,
    pub forgetting: ForgettingReport,
    /// Parameter counts during the final stage.
    pub params: ParamCount,
    pub final_total_rank: Option<usize>,
    /// Mono only: row `k` is task `k`'s model evaluated on every task.
    pub mono_cross: Option<Vec<Vec<f64>>>,
    pub stages: Vec<StageSummary>,
}

impl RunSummary {
    pub fn name(&self) -> String {
        run_name(self.method, self.seed)
    }
}

/// Seed-median headline numbers for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMedians {
    pub method: Method,
    pub runs: usize,
    pub forgetting_average: f64,
    pub final_average_loss: f64,
    pub final_new_task_loss: f64,
    pub trainable_fraction: f64,
    /// Frozen/active adapter overlap after stage 1, when defined.
    pub stage1_orth_overlap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: RunConfig,
    pub runs: Vec<RunSummary>,
    pub medians: Vec<MethodMedians>,
}

impl ExperimentSummary {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn medians_for(&self, method: Method) -> Option<&MethodMedians> {
        self.medians.iter().find(|m| m.method == method)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub run: String,
    pub error: String,
}

/// Progress file, rewritten as runs finish. A `running` state left behind
/// marks an interrupted experiment whose outputs are partial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub state: RunState,
    pub planned: Vec<String>,
    pub completed: Vec<String>,
    pub failed: Vec<FailedRun>,
    /// `(run, seconds)` in completion order.
    pub wall_clock_secs: Vec<(String, f64)>,
}

pub fn run_name(method: Method, seed: u64) -> String {
    format!("{method}-seed{seed}")
}

/// Everything one run produced, before it is written out.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub metrics: Vec<crate::continual::TraceRow>,
    /// The continual model, or one model per task for Mono.
    pub checkpoints: Vec<crate::model::ModelCheckpoint>,
    pub wall_clock_secs: f64,
}

/// Runs one method on one seed. The base model and the task suite depend on
/// the seed only, so every method of a seed sees the same starting point.
pub fn execute_run(config: &RunConfig, method: Method, seed: u64) -> Result<RunOutput> {
    let started = Instant::now();
    let spec = config.method_spec(method);
    let base = ToyModel::new(config.model.clone(), seed)?;
    let tasks = generate_suite(
        &config.suite,
        config.model.model_dim,
        config.model.output_dim,
        seed,
    )?;
    let mut run = ContinualRun::new(base, spec.clone(), config.train.clone(), seed)?;
    run.run_all(&tasks)?;

    let results = run.results();
    let forgetting = forgetting_report(results)?;
    let last = results.last().expect("run_all ran at least one stage");
    let mono_cross = (method == Method::Mono)
        .then(|| run.mono_cross_losses(&tasks))
        .transpose()?;
    let checkpoints = if method == Method::Mono {
        run.mono_models()
            .iter()
            .map(ToyModel::to_checkpoint)
            .collect()
    } else {
        vec![run.model().to_checkpoint()]
    };
    let summary = RunSummary {
        method,
        seed,
        spec,
        train: config.train.clone(),
        eval_matrix: results.iter().map(|r| r.eval_losses.clone()).collect(),
        forgetting,
        params: last.params,
        final_total_rank: last.diagnostics.total_rank,
        mono_cross,
        stages: results
            .iter()
            .map(|r| StageSummary {
                stage: r.stage,
                steps: r.steps,
                lr: r.lr,
                eval_losses: r.eval_losses.clone(),
                params: r.params,
                final_loss: r.final_loss,
                diagnostics: r.diagnostics.clone(),
            })
            .collect(),
    };
    Ok(RunOutput {
        summary,
        metrics: results
            .iter()
            .flat_map(|r| r.trace.iter().cloned())
            .collect(),
        checkpoints,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    for row in &out.metrics {
        w.serialize(row)?;
    }
    w.flush()?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&out.summary)?,
    )?;
    if let [single] = out.checkpoints.as_slice() {
        fs::write(dir.join("checkpoint.json"), serde_json::to_string(single)?)?;
    } else {
        for (k, c) in out.checkpoints.iter().enumerate() {
            fs::write(
                dir.join(format!("checkpoint-task{k}.json")),
                serde_json::to_string(c)?,
            )?;
        }
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn method_medians(runs: &[RunSummary], method: Method) -> Option<MethodMedians> {
    let rs: Vec<&RunSummary> = runs.iter().filter(|r| r.method == method).collect();
    if rs.is_empty() {
        return None;
    }
    let col = |f: &dyn Fn(&RunSummary) -> f64| median(rs.iter().map(|r| f(r)).collect());
    let overlaps: Vec<f64> = rs
        .iter()
        .filter_map(|r| r.stages.get(1).and_then(|s| s.diagnostics.orth_overlap))
        .collect();
    Some(MethodMedians {
        method,
        runs: rs.len(),
        forgetting_average: col(&|r| r.forgetting.average),
        final_average_loss: col(&|r| r.forgetting.final_average_loss),
        final_new_task_loss: col(&|r| r.forgetting.final_new_task_loss),
        trainable_fraction: col(&|r| r.params.fraction),
        stage1_orth_overlap: (overlaps.len() == rs.len()).then(|| median(overlaps)),
    })
}

fn write_status(path: &Path, status: &Status) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(status)?)?;
    Ok(())
}

/// Runs every (method, seed) pair, writing artifacts under `config.out_dir`.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out.join("runs"))?;
    fs::write(out.join("config.json"), config.to_json()?)?;

    let jobs: Vec<(Method, u64)> = config
        .methods
        .iter()
        .flat_map(|m| config.seeds.iter().map(move |s| (*m, *s)))
        .collect();
    let status_path = out.join("status.json");
    let status = Mutex::new(Status {
        state: RunState::Running,
        planned: jobs.iter().map(|(m, s)| run_name(*m, *s)).collect(),
        completed: Vec::new(),
        failed: Vec::new(),
        wall_clock_secs: Vec::new(),
    });
    write_status(&status_path, &status.lock().expect("status lock"))?;

    let results = exec::map(
        config.execution,
        jobs,
        |(method, seed)| -> Result<RunSummary> {
            let name = run_name(method, seed);
            let outcome = execute_run(config, method, seed).and_then(|o| {
                write_run(&out.join("runs").join(&name), &o)?;
                Ok(o)
            });
            let mut st = status.lock().expect("status lock");
            match &outcome {
                Ok(o) => {
                    log::info!("{name} finished in {:.1}s", o.wall_clock_secs);
                    st.completed.push(name.clone());
                    st.wall_clock_secs.push((name, o.wall_clock_secs));
                }
                Err(e) => {
                    log::error!("{name} failed: {e}");
                    st.failed.push(FailedRun {
                        run: name,
                        error: e.to_string(),
                    });
                }
            }
            write_status(&status_path, &st)?;
            outcome.map(|o| o.summary)
        },
    );

    let mut runs = Vec::with_capacity(results.len());
    let mut first_error = None;
    for r in results {
        match r {
            Ok(s) => runs.push(s),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let mut st = status.into_inner().expect("status lock");
    if let Some(e) = first_error {
        st.state = RunState::Failed;
        write_status(&status_path, &st)?;
        return Err(e);
    }
    let medians = config
        .methods
        .iter()
        .filter_map(|m| method_medians(&runs, *m))
        .collect();
    let summary = ExperimentSummary {
        config: config.clone(),
        runs,
        medians,
    };
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    st.state = RunState::Complete;
    write_status(&status_path, &st)?;
    Ok(summary)
}

/// One method's headline numbers from one summary, with differences to the
/// same method in the first summary given.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub source: String,
    pub method: Method,
    pub forgetting_average: f64,
    pub final_average_loss: f64,
    pub final_new_task_loss: f64,
    pub trainable_fraction: f64,
    pub delta_forgetting: Option<f64>,
    pub delta_final_loss: Option<f64>,
    pub delta_fraction: Option<f64>,
}

/// A qualitative ordering between methods. `holds` is `None` when a
/// required method is absent.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub name: String,
    pub holds: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub checks: Vec<OrderingCheck>,
}

impl Comparison {
    /// False when any check that could be evaluated failed.
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds != Some(false))
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<24} {:<10} {:>12} {:>12} {:>12} {:>10} {:>12} {:>12} {:>12}\n",
            "source",
            "method",
            "F_avg",
            "final_loss",
            "new_task",
            "fraction",
            "dF",
            "dloss",
            "dfrac"
        );
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4e}"));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<24} {:<10} {:>12.5} {:>12.5} {:>12.5} {:>10.5} {:>12} {:>12} {:>12}\n",
                r.source,
                r.method.name(),
                r.forgetting_average,
                r.final_average_loss,
                r.final_new_task_loss,
                r.trainable_fraction,
                opt(r.delta_forgetting),
                opt(r.delta_final_loss),
                opt(r.delta_fraction),
            ));
        }
        for c in &self.checks {
            let verdict = match c.holds {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "n/a",
            };
            s.push_str(&format!("{verdict:<5} {}\n", c.name));
        }
        s
    }
}

/// Tabulates seed medians across summaries and evaluates the method
/// orderings. Each method's first appearance is used for the orderings.
pub fn compare(summaries: &[(String, ExperimentSummary)]) -> Result<Comparison> {
    if summaries.len() < 2 {
        return Err(Error::Comparison("need at least two summaries".into()));
    }
    let key = summaries[0].1.config.suite_key();
    for (name, s) in &summaries[1..] {
        if s.config.suite_key() != key {
            return Err(Error::Comparison(format!(
                "{name} uses a different task suite, model or seed set than {}",
                summaries[0].0
            )));
        }
    }
    let reference = &summaries[0].1;
    let mut rows = Vec::new();
    for (source, s) in summaries {
        for m in &s.medians {
            let base = reference.medians_for(m.method);
            rows.push(ComparisonRow {
                source: source.clone(),
                method: m.method,
                forgetting_average: m.forgetting_average,
                final_average_loss: m.final_average_loss,
                final_new_task_loss: m.final_new_task_loss,
                trainable_fraction: m.trainable_fraction,
                delta_forgetting: base.map(|b| m.forgetting_average - b.forgetting_average),
                delta_final_loss: base.map(|b| m.final_average_loss - b.final_average_loss),
                delta_fraction: base.map(|b| m.trainable_fraction - b.trainable_fraction),
            });
        }
    }
    let first = |method: Method| rows.iter().find(|r| r.method == method);
    let f = |m| first(m).map(|r| r.forgetting_average);
    let frac = |m| first(m).map(|r| r.trainable_fraction);
    let both = |a: Option<f64>, b: Option<f64>, pred: fn(f64, f64) -> bool| {
        a.zip(b).map(|(a, b)| pred(a, b))
    };
    let lt: fn(f64, f64) -> bool = |a, b| a < b;
    let checks = vec![
        OrderingCheck {
            name: "F_avg(o_lora) < F_avg(lwf)".into(),
            holds: both(f(Method::OLora), f(Method::Lwf), lt),
        },
        OrderingCheck {
            name: "F_avg(lwf) < F_avg(seq_lora)".into(),
            holds: both(f(Method::Lwf), f(Method::SeqLora), lt),
        },
        OrderingCheck {
            name: "F_avg(o_lora) < F_avg(seq_ft)".into(),
            holds: both(f(Method::OLora), f(Method::SeqFt), lt),
        },
        OrderingCheck {
            name: "new_task(o_lora) <= 1.5 * new_task(mono)".into(),
            holds: both(
                first(Method::OLora).map(|r| r.final_new_task_loss),
                first(Method::Mono).map(|r| r.final_new_task_loss),
                |a, b| a <= 1.5 * b,
            ),
        },
        OrderingCheck {
            name: "fraction(o_adalora) < fraction(o_lora)".into(),
            holds: both(frac(Method::OAdaLora), frac(Method::OLora), lt),
        },
        OrderingCheck {
            name: "fraction(o_lora) < fraction(seq_ft) = 1".into(),
            holds: both(frac(Method::OLora), frac(Method::SeqFt), |a, b| {
                a < b && b == 1.0
            }),
        },
    ];
    Ok(Comparison { rows, checks })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Passed,
    Failed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub status: CheckStatus,
    pub max_rel_error: Option<f64>,
    pub coordinates: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSuiteReport {
    pub tolerance: f64,
    pub checks: Vec<CheckOutcome>,
    pub wall_clock_secs: f64,
}

impl GradCheckSuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Failed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let err = c
                .max_rel_error
                .map_or_else(|| "-".to_string(), |e| format!("{e:.3e}"));
            let status = match c.status {
                CheckStatus::Passed => "PASS",
                CheckStatus::Failed => "FAIL",
                CheckStatus::Skipped => "SKIP",
            };
            s.push_str(&format!(
                "{status:<5} {:<20} max_rel_err={err:<10} coords={}\n",
                c.name, c.coordinates
            ));
        }
        s.push_str(&format!(
            "{} in {:.2}s (tolerance {:e})\n",
            if self.passed() {
                "all checks passed"
            } else {
                "gradient check FAILED"
            },
            self.wall_clock_secs,
            self.tolerance
        ));
        s
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Restrict loss-level checks to one mode; checks of terms the mode does
    /// not use are reported as skipped.
    pub mode: Option<LossMode>,
    /// Negative control: corrupt this op's backward rule.
    pub fault: Option<OpKind>,
    pub tolerance: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            mode: None,
            fault: None,
            tolerance: 1e-4,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// Model used by the loss-level checks: width 8, one block, batch 2.
pub fn gradcheck_model_config() -> BlockConfig {
    BlockConfig {
        model_dim: 8,
        ff_dim: 16,
        blocks: 1,
        output_dim: 2,
        ..BlockConfig::default()
    }
}

const GC_SEQ_LEN: usize = 3;
const GC_BATCH: usize = 2;
const GC_RANK: usize = 2;
/// Spread of the randomized adapter factors. Fresh adapters have `B = 0` or
/// `Λ = 0`, which makes many gradients structurally zero and uninformative.
const GC_FACTOR_STD: f64 = 0.5;

fn random_adapter(kind: AdapterKind, d1: usize, d2: usize, seed: u64) -> Result<Adapter> {
    let mut rng = rng::stream(seed, &[rng::label("gradcheck-adapter")]);
    let mut adapter = match kind {
        AdapterKind::Lora => init_lora(d1, d2, GC_RANK, seed)?,
        AdapterKind::AdaLora => init_adalora(d1, d2, GC_RANK, seed)?,
    };
    match &mut adapter {
        Adapter::Lora(l) => {
            *l.a.value_mut() = Matrix::randn(d1, GC_RANK, GC_FACTOR_STD, &mut rng);
            *l.b.value_mut() = Matrix::randn(GC_RANK, d2, GC_FACTOR_STD, &mut rng);
        }
        Adapter::AdaLora(l) => {
            *l.a.value_mut() = Matrix::randn(d1, GC_RANK, GC_FACTOR_STD, &mut rng);
            *l.lambda.value_mut() = Matrix::randn(1, GC_RANK, 1.0, &mut rng);
            *l.b.value_mut() = Matrix::randn(GC_RANK, d2, GC_FACTOR_STD, &mut rng);
            l.mask[GC_RANK - 1] = false;
        }
    }
    Ok(adapter)
}

/// The check model: frozen base, `frozen` past adapters and one trainable
/// adapter per adapted weight, all with randomized factors.
fn gradcheck_model(kind: AdapterKind, frozen: usize, seed: u64) -> Result<ToyModel> {
    let mut m = ToyModel::new(gradcheck_model_config(), seed)?;
    for (j, id) in m.weight_ids().into_iter().enumerate() {
        let layer = m.layer_mut(id);
        let (d1, d2) = (layer.d_in(), layer.d_out());
        for k in 0..=frozen {
            let s =
                rng::stream(seed, &[rng::label("gradcheck-slot"), j as u64, k as u64]).next_u64();
            layer
                .stack
                .freeze_and_extend(random_adapter(kind, d1, d2, s)?)?;
        }
    }
    Ok(m)
}

fn gradcheck_data(seed: u64) -> Result<(Batch, Matrix)> {
    let cfg = gradcheck_model_config();
    let mut rng = rng::stream(seed, &[rng::label("gradcheck-data")]);
    let tokens = Matrix::randn(GC_BATCH * GC_SEQ_LEN, cfg.model_dim, 1.0, &mut rng);
    let targets = Matrix::randn(GC_BATCH, cfg.output_dim, 1.0, &mut rng);
    Ok((Batch::new(tokens, GC_SEQ_LEN)?, targets))
}

/// `Σ Y ⊙ K` for a fixed random `K` shaped like `Y`: a scalar whose gradient
/// with respect to `Y` is dense and nonzero.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.value(y).shape();
    let k = Matrix::randn(
        r,
        c,
        1.0,
        &mut rng::stream(seed, &[rng::label("gradcheck-weights")]),
    );
    let k = tape.constant(k);
    let prod = tape.mul(y, k)?;
    Ok(tape.sum(prod))
}

fn op_params(seed: u64) -> Vec<Parameter> {
    let mut rng = rng::stream(seed, &[rng::label("gradcheck-op")]);
    vec![
        Parameter::trainable(Matrix::randn(3, 4, 1.0, &mut rng)),
        Parameter::trainable(Matrix::randn(4, 3, 1.0, &mut rng)),
        Parameter::trainable(Matrix::randn(3, 4, 1.0, &mut rng)),
        Parameter::trainable(Matrix::randn(1, 4, 1.0, &mut rng)),
    ]
}

fn op_graph(kind: OpKind, p: &[Parameter], tape: &mut Tape, seed: u64) -> Result<Var> {
    let x = tape.param(&p[0]);
    let w = tape.param(&p[1]);
    let z = tape.param(&p[2]);
    let r = tape.param(&p[3]);
    let y = match kind {
        OpKind::MatMul => tape.matmul(x, w)?,
        OpKind::Transpose => tape.transpose(x),
        OpKind::Add => tape.add(x, z)?,
        OpKind::Sub => tape.sub(x, z)?,
        OpKind::Mul => tape.mul(x, z)?,
        OpKind::Scale => tape.scale(x, -1.7),
        OpKind::Relu => tape.relu(x),
        OpKind::Tanh => tape.tanh(x),
        OpKind::RowSoftmax => tape.row_softmax(x),
        OpKind::LayerNorm => tape.layer_norm(x),
        OpKind::FrobeniusSq => tape.frobenius_sq(x),
        OpKind::Sum => tape.sum(x),
        OpKind::AddRow => tape.add_row(x, r)?,
        OpKind::MulRow => tape.mul_row(x, r)?,
        OpKind::SliceRows => tape.slice_rows(x, 1, 2)?,
        OpKind::ConcatRows => tape.concat_rows(&[x, z])?,
    };
    weighted_sum(tape, y, seed)
}

fn outcome(
    name: String,
    report: Result<crate::tensor::GradCheckReport>,
    tol: f64,
) -> Result<CheckOutcome> {
    let report = report?;
    Ok(CheckOutcome {
        name,
        status: if report.max_rel_error < tol {
            CheckStatus::Passed
        } else {
            CheckStatus::Failed
        },
        max_rel_error: Some(report.max_rel_error),
        coordinates: report.coordinates,
    })
}

fn skipped(name: String) -> CheckOutcome {
    CheckOutcome {
        name,
        status: CheckStatus::Skipped,
        max_rel_error: None,
        coordinates: 0,
    }
}

/// Finite-difference checks of every primitive op, every loss term and the
/// combined objective of every loss mode.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckSuiteReport> {
    let started = Instant::now();
    let opts = GradCheckOptions {
        fault: cfg.fault,
        execution: cfg.execution,
        ..GradCheckOptions::default()
    };
    let tol = cfg.tolerance;
    let seed = cfg.seed;
    let mut checks = Vec::new();

    let params = op_params(seed);
    for kind in OpKind::ALL {
        let report = finite_diff_check(
            &params,
            |p: &Vec<Parameter>, t: &mut Tape| op_graph(kind, p, t, seed),
            &opts,
        );
        checks.push(outcome(format!("op:{}", kind.name()), report, tol)?);
    }

    let (batch, targets) = gradcheck_data(seed)?;
    let wants = |pred: fn(LossMode) -> bool| cfg.mode.is_none_or(pred);

    let lora = gradcheck_model(AdapterKind::Lora, 1, seed)?;
    let report = finite_diff_check(
        &lora,
        |m: &ToyModel, t: &mut Tape| {
            let pred = m.forward(t, &batch)?;
            task_loss(t, pred, &targets)
        },
        &opts,
    );
    checks.push(outcome("term:task".into(), report, tol)?);

    if wants(LossMode::uses_orth) {
        let report = finite_diff_check(
            &lora,
            |m: &ToyModel, t: &mut Tape| total_orth_loss(t, m.stacks()),
            &opts,
        );
        checks.push(outcome("term:orth".into(), report, tol)?);
    } else {
        checks.push(skipped("term:orth".into()));
    }

    if wants(LossMode::uses_adalora_reg) {
        let ada = gradcheck_model(AdapterKind::AdaLora, 0, seed)?;
        let report = finite_diff_check(
            &ada,
            |m: &ToyModel, t: &mut Tape| {
                let mut total: Option<Var> = None;
                for s in m.stacks() {
                    let active = s
                        .active()
                        .ok_or_else(|| Error::State("missing active adapter".into()))?;
                    let (a, b) = (t.param(active.a()), t.param(active.b()));
                    let term = adalora_reg(t, a, b)?;
                    total = Some(match total {
                        Some(acc) => t.add(acc, term)?,
                        None => term,
                    });
                }
                total.ok_or_else(|| Error::State("no adapted weights".into()))
            },
            &opts,
        );
        checks.push(outcome("term:adalora_reg".into(), report, tol)?);
    } else {
        checks.push(skipped("term:adalora_reg".into()));
    }

    if cfg.mode.is_none() {
        let mut student = ToyModel::new(gradcheck_model_config(), seed)?;
        student.set_base_trainable(true);
        // Softmax is invariant to the key bias (it shifts a whole score row),
        // so its exact gradient is zero and the ratio would compare roundoff.
        for b in &mut student.blocks {
            b.wk.b.set_trainable(false);
        }
        let teacher = ToyModel::new(gradcheck_model_config(), seed.wrapping_add(1))?;
        let teacher_hidden = teacher.hidden(&batch)?;
        let report = finite_diff_check(
            &student,
            |m: &ToyModel, t: &mut Tape| {
                let hidden = m.forward_hidden(t, &batch)?;
                let pred = m.head.adapted_forward(t, hidden)?;
                let task = task_loss(t, pred, &targets)?;
                let target = t.constant(teacher_hidden.clone());
                let d = t.mse(hidden, target)?;
                t.add(task, d)
            },
            &opts,
        );
        checks.push(outcome("term:distill".into(), report, tol)?);
    } else {
        checks.push(skipped("term:distill".into()));
    }

    for mode in LossMode::ALL {
        let name = format!("loss:{}", mode.name());
        if cfg.mode.is_some_and(|m| m != mode) {
            checks.push(skipped(name));
            continue;
        }
        let frozen = usize::from(mode.uses_orth());
        let model = gradcheck_model(mode.adapter_kind(), frozen, seed)?;
        let report = finite_diff_check(
            &model,
            |m: &ToyModel, t: &mut Tape| {
                let pred = m.forward(t, &batch)?;
                let task = task_loss(t, pred, &targets)?;
                combined_loss(t, task, m.stacks(), 0.5, 0.5, mode).map(|(l, _)| l)
            },
            &opts,
        );
        checks.push(outcome(name, report, tol)?);
    }

    Ok(GradCheckSuiteReport {
        tolerance: tol,
        checks,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_echo_roundtrips() {
        let cfg = RunConfig {
            methods: vec![Method::OAdaLora, Method::Mono],
            lambda1: 0.25,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_config_field_is_named() {
        let err = RunConfig::from_json(r#"{"lamda1": 0.5}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("lamda1"), "{err}");
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let cfg = RunConfig {
            seeds: vec![],
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn median_of_even_and_odd_lengths() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn op_checks_pass_and_fault_is_caught() {
        let params = op_params(0);
        let clean = GradCheckOptions::default();
        let faulty = GradCheckOptions {
            fault: Some(OpKind::Tanh),
            ..GradCheckOptions::default()
        };
        let f = |p: &Vec<Parameter>, t: &mut Tape| op_graph(OpKind::Tanh, p, t, 0);
        assert!(finite_diff_check(&params, f, &clean).unwrap().max_rel_error < 1e-4);
        assert!(
            finite_diff_check(&params, f, &faulty)
                .unwrap()
                .max_rel_error
                >= 1e-4
        );
    }
}
