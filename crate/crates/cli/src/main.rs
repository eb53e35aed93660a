use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use olora::continual::Method;
use olora::exec::Execution;
use olora::harness::{self, ExperimentSummary, GradCheckConfig, RunConfig};
use olora::regularizers::LossMode;
use olora::tensor::OpKind;
use olora::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_CHECK: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "olora",
    version,
    about = "Orthogonal low-rank continual adaptation benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

// Parsed once per process; boxing the larger variant buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) pair and write metrics, checkpoints and summaries.
    Run(RunArgs),
    /// Tabulate experiment summaries and check the method orderings.
    Compare(CompareArgs),
    /// Finite-difference check of every op, loss term and loss mode.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Methods to run (comma-separated or repeated).
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    /// Seeds to run (comma-separated).
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Vec<u64>,
    /// A single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of tasks in the suite.
    #[arg(long)]
    tasks: Option<usize>,
    /// Steps per stage: `N` for every stage or `FIRST,LATER`.
    #[arg(long, value_delimiter = ',', num_args = 1..=2)]
    steps: Vec<usize>,
    /// LoRA rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Initial AdaLoRA rank per weight.
    #[arg(long)]
    rank_init: Option<usize>,
    /// Final AdaLoRA rank per weight.
    #[arg(long)]
    rank_target: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// `LR` for everything, `FIRST,LATER` for adapters, or
    /// `FIRST,LATER,FULL_FT`.
    #[arg(long, value_delimiter = ',', num_args = 1..=3)]
    lr: Vec<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run (method, seed) pairs one after another.
    #[arg(long)]
    sequential: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment summary files (`summary.json`).
    #[arg(required = true, num_args = 2..)]
    summaries: Vec<PathBuf>,
    /// Also write the comparison as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only check the terms used by this loss mode.
    #[arg(long)]
    mode: Option<LossMode>,
    /// Negative control: corrupt the backward rule of this op.
    #[arg(long, value_parser = parse_op, hide = true)]
    corrupt_op: Option<OpKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown op `{s}`"))
}

fn resolve(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if !args.method.is_empty() {
        cfg.methods = args.method.clone();
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    } else if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if let Some(n) = args.tasks {
        cfg.suite.n_tasks = n;
    }
    match args.steps.as_slice() {
        [] => {}
        [n] => (cfg.train.steps_first, cfg.train.steps_later) = (*n, *n),
        [first, later] => (cfg.train.steps_first, cfg.train.steps_later) = (*first, *later),
        _ => unreachable!("clap limits --steps to two values"),
    }
    if let Some(r) = args.rank {
        cfg.lora_rank = r;
    }
    if let Some(r) = args.rank_init {
        cfg.rank_init = r;
    }
    if let Some(r) = args.rank_target {
        cfg.rank_target = r;
    }
    if let Some(l) = args.lambda1 {
        cfg.lambda1 = l;
    }
    if let Some(l) = args.lambda2 {
        cfg.lambda2 = l;
    }
    match args.lr.as_slice() {
        [] => {}
        [lr] => (cfg.lr.adapter_first, cfg.lr.adapter_later, cfg.lr.full_ft) = (*lr, *lr, *lr),
        [first, later] => (cfg.lr.adapter_first, cfg.lr.adapter_later) = (*first, *later),
        [first, later, full] => {
            (cfg.lr.adapter_first, cfg.lr.adapter_later, cfg.lr.full_ft) = (*first, *later, *full)
        }
        _ => unreachable!("clap limits --lr to three values"),
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if args.sequential {
        cfg.execution = Execution::Sequential;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Comparison(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(error_code(&e))
}

fn run(args: RunArgs) -> ExitCode {
    let cfg = match resolve(&args) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if args.print_config {
        return match cfg.to_json() {
            Ok(json) => {
                println!("{json}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        };
    }
    match harness::run_experiment(&cfg) {
        Ok(summary) => {
            for m in &summary.medians {
                println!(
                    "{:<10} runs={} F_avg={:.5} final_loss={:.5} new_task={:.5} fraction={:.5}",
                    m.method.name(),
                    m.runs,
                    m.forgetting_average,
                    m.final_average_loss,
                    m.final_new_task_loss,
                    m.trainable_fraction
                );
            }
            println!("wrote {}", cfg.out_dir.join("summary.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn compare(args: CompareArgs) -> ExitCode {
    let mut summaries = Vec::new();
    for path in &args.summaries {
        match ExperimentSummary::load(path) {
            Ok(s) => summaries.push((path.display().to_string(), s)),
            Err(e) => return fail(Error::Config(format!("{}: {e}", path.display()))),
        }
    }
    let table = match harness::compare(&summaries) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    print!("{}", table.render());
    if let Some(out) = &args.out {
        let written = serde_json::to_string_pretty(&table)
            .map_err(Error::from)
            .and_then(|json| std::fs::write(out, json).map_err(Error::from));
        if let Err(e) = written {
            return fail(e);
        }
    }
    if table.all_hold() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    }
}

fn gradcheck(args: GradcheckArgs) -> ExitCode {
    let cfg = GradCheckConfig {
        mode: args.mode,
        fault: args.corrupt_op,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let report = match harness::run_gradcheck(&cfg) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if args.json {
        match serde_json::to_string_pretty(&report) {
            Ok(json) => println!("{json}"),
            Err(e) => return fail(e.into()),
        }
    } else {
        print!("{}", report.render());
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    match cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
        Command::Gradcheck(args) => gradcheck(args),
    }
}
