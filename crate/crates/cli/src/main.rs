//! `covqc`: run-directory stages for missing basal/apical slice detection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coverage_qc::cascade::CascadeMode;
use coverage_qc::dataprep::Task;
use coverage_qc::harness::EvalMode;
use coverage_qc::pipeline::{self, FoldSelection, RunDir};
use coverage_qc::{Error, RunConfig};
use serde_json::Value;

#[derive(Parser)]
#[command(
    name = "covqc",
    version,
    about = "Detect short-axis cine stacks missing their basal or apical slice"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms or ingest volumes, extract triplets and assign folds.
    Prepare(PrepareArgs),
    /// Train the 3D CNN classifier on the training folds.
    TrainBaseline(StageArgs),
    /// Explain the training folds' true positives and store their masks.
    Explain(StageArgs),
    /// Fit the attention U-Net to the explainer masks.
    TrainUnet(StageArgs),
    /// Re-predict held-out negatives on their salient region.
    Cascade(CascadeArgs),
    /// Score held-out folds and write report.json, tables.csv and ROC plots.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Directory holding `runs/<run-id>/`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value = "run")]
    run_id: String,
    /// Restrict to one task; both by default.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
}

#[derive(Args)]
struct FoldArgs {
    /// Held-out fold to work on.
    #[arg(long, default_value_t = 0, conflicts_with = "cv")]
    test_fold: usize,
    /// Work on every fold.
    #[arg(long)]
    cv: bool,
}

impl FoldArgs {
    fn selection(&self) -> FoldSelection {
        if self.cv {
            FoldSelection::All
        } else {
            FoldSelection::One(self.test_fold)
        }
    }
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of phantom volumes to generate (ignored with --in).
    #[arg(long)]
    phantom: Option<usize>,
    /// A volume file or a directory of .nii, .nii.gz or .raw volumes.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Base settings before flags and --config are applied.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// JSON run configuration; its keys override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    folds: FoldArgs,
}

#[derive(Args)]
struct CascadeArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    folds: FoldArgs,
    /// Which negatives get a second look; the run configuration decides by default.
    #[arg(long)]
    mode: Option<CascadeMode>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    folds: FoldArgs,
    /// baseline, cascade or cascade-label-conditioned.
    #[arg(long, default_value = "baseline")]
    mode: EvalMode,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Apex,
    Basal,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Apex => Task::Apex,
            TaskArg::Basal => Task::Basal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 64-pixel phantoms resampled to 32, narrow networks; minutes on a CPU.
    Desk,
    /// 128-pixel inputs and the full-width networks.
    Full,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn prepare_config(args: &PrepareArgs) -> CliResult<RunConfig> {
    let mut cfg = match args.preset {
        Preset::Desk => RunConfig::desk_scale(),
        Preset::Full => RunConfig::default(),
    };
    cfg.run_id = args.run.run_id.clone();
    cfg.task = args.run.task.map(Task::from);
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.folds {
        cfg.data.folds = k;
    }
    if let Some(n) = args.phantom {
        cfg.data.phantom_count = n;
    }
    if let Some(p) = &args.input {
        cfg.data.input_dir = Some(p.clone());
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut merged = serde_json::to_value(&cfg).expect("config serializes");
        merge(&mut merged, file);
        cfg = serde_json::from_value(merged)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    Ok(cfg)
}

/// Tasks for a later stage: the `--task` flag within the prepared run's tasks.
fn stage_tasks(run: &RunDir, args: &RunArgs) -> CliResult<Vec<Task>> {
    let prepared = run.load_config()?.tasks();
    match args.task.map(Task::from) {
        None => Ok(prepared),
        Some(t) if prepared.contains(&t) => Ok(vec![t]),
        Some(t) => Err(CliError::Usage(format!(
            "run `{}` was prepared without the {t} task",
            args.run_id
        ))),
    }
}

fn run_dir(args: &RunArgs) -> RunDir {
    RunDir::new(&args.out, &args.run_id)
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Prepare(args) => {
            let cfg = prepare_config(&args)?;
            let summary = pipeline::prepare(&cfg, &args.run.out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
        }
        Command::TrainBaseline(args) => {
            let run = run_dir(&args.run);
            let tasks = stage_tasks(&run, &args.run)?;
            for p in pipeline::train_baseline(&run, &tasks, args.folds.selection())? {
                println!("{}", show(&p));
            }
        }
        Command::Explain(args) => {
            let run = run_dir(&args.run);
            let tasks = stage_tasks(&run, &args.run)?;
            for (task, fold, pairs) in pipeline::explain(&run, &tasks, args.folds.selection())? {
                println!("{task} fold {fold}: {pairs} explained true positives");
            }
        }
        Command::TrainUnet(args) => {
            let run = run_dir(&args.run);
            let tasks = stage_tasks(&run, &args.run)?;
            for (task, fold, r) in pipeline::train_unet(&run, &tasks, args.folds.selection())? {
                println!(
                    "{task} fold {fold}: validation Dice {:.4}, Jaccard {:.4} on {} held-out pairs",
                    r.val.dice,
                    r.val.jaccard,
                    r.val_ids.len()
                );
            }
        }
        Command::Cascade(args) => {
            let run = run_dir(&args.run);
            let tasks = stage_tasks(&run, &args.run)?;
            let mode = match args.mode {
                Some(m) => m,
                None => run.load_config()?.cascade_mode,
            };
            for p in pipeline::cascade(&run, &tasks, args.folds.selection(), mode)? {
                println!("{}", show(&p));
            }
        }
        Command::Evaluate(args) => {
            let run = run_dir(&args.run);
            let tasks = stage_tasks(&run, &args.run)?;
            for r in pipeline::evaluate(&run, &tasks, args.folds.selection(), args.mode)? {
                for (name, m) in &r.summary {
                    println!(
                        "{} {} {name}: {:.4} ± {:.4}",
                        r.task, r.mode, m.mean, m.sd_population
                    );
                }
            }
            println!("{}", show(&run.report_dir().join("report.json")));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Core(e)) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
