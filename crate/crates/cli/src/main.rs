//! `ldcc` command-line tool: generate synthetic tasks, train a model, infer
//! task embeddings and compare tasks.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use ldcc::report::{self, LambdaTable};
use ldcc::similarity::{correlation_diagram, distance_matrix, select_tasks};
use ldcc::{
    generate_synthetic, init_model, load_tasks, random_model, run_estep, save_tasks, train_from,
    Error, ThemeModel, TrainConfig,
};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "ldcc",
    version,
    about = "Latent Dirichlet co-clustering of classification tasks"
)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample synthetic tasks from a model
    Gen(GenArgs),
    /// Fit a model to a task collection with online variational EM
    Train(TrainArgs),
    /// Infer λ for every task in a collection
    Infer(InferArgs),
    /// Mean KL distance from each test task to the training tasks
    Distance(DistanceArgs),
    /// Pick the training tasks closest to a set of test tasks
    Select(SelectArgs),
    /// Bin test tasks by distance and average their accuracies
    Diagram(DiagramArgs),
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(group(clap::ArgGroup::new("source").required(true).args(["model", "random_model"])))]
struct GenArgs {
    /// Checkpoint to sample from
    #[arg(long)]
    model: Option<PathBuf>,

    /// Sample from a random model with L task-themes, K image-themes, dimension D
    #[arg(long, num_args = 3, value_names = ["L", "K", "D"])]
    random_model: Option<Vec<usize>>,

    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    tasks: u64,

    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    classes: u64,

    /// Samples per class
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    shots: u64,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainArgs {
    /// Task manifest
    #[arg(long)]
    data: PathBuf,

    /// L
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    task_themes: u64,

    /// K
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    image_themes: u64,

    /// Symmetric Dirichlet prior on task-theme proportions
    #[arg(long, default_value_t = 0.5)]
    delta: f64,

    #[arg(long, default_value_t = TrainConfig::default().tau0)]
    tau0: f64,

    #[arg(long, default_value_t = TrainConfig::default().tau1)]
    tau1: f64,

    /// Tasks per mini-batch
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,

    #[arg(long, default_value_t = TrainConfig::default().e_tol)]
    e_tol: f64,

    #[arg(long, default_value_t = TrainConfig::default().max_e_iters)]
    max_e_iters: usize,

    #[arg(long, default_value_t = TrainConfig::default().jitter)]
    jitter: f64,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Number of mini-batch updates
    #[arg(long, default_value_t = TrainConfig::default().max_batches)]
    max_batches: usize,

    #[arg(long)]
    out: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            tau0: self.tau0,
            tau1: self.tau1,
            batch_size: self.batch,
            e_tol: self.e_tol,
            max_e_iters: self.max_e_iters,
            jitter: self.jitter,
            seed: self.seed,
            max_batches: self.max_batches,
        }
    }
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,

    /// Task manifest
    #[arg(long)]
    data: PathBuf,

    #[arg(long, default_value_t = TrainConfig::default().e_tol)]
    e_tol: f64,

    #[arg(long, default_value_t = TrainConfig::default().max_e_iters)]
    max_e_iters: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Output λ CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct DistanceArgs {
    /// λ CSV of the training tasks
    #[arg(long)]
    train: PathBuf,

    /// λ CSV of the test tasks
    #[arg(long)]
    test: PathBuf,

    /// Output `test_id,mean_kl` CSV
    #[arg(long)]
    out: PathBuf,

    /// Also write the full test×train KL matrix here
    #[arg(long)]
    matrix: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Serialize)]
#[serde(untagged)]
enum Count {
    All,
    N(usize),
}

impl FromStr for Count {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            Ok(Count::All)
        } else {
            s.parse()
                .map(Count::N)
                .map_err(|_| format!("expected a count or \"all\", got {s:?}"))
        }
    }
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct SelectArgs {
    #[arg(long)]
    train: PathBuf,

    #[arg(long)]
    test: PathBuf,

    /// Number of training tasks to keep, or `all`
    #[arg(long)]
    m: Count,

    /// Output file, one task id per line
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct DiagramArgs {
    /// `test_id,mean_kl` CSV from `distance`
    #[arg(long)]
    distances: PathBuf,

    /// `task_id,accuracy` CSV
    #[arg(long)]
    accuracy: PathBuf,

    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    bins: u64,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    command: &'a str,
    #[serde(flatten)]
    args: &'a T,
}

/// Errors that carry their own exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Argument(_) => 2,
            Error::Domain { .. } | Error::Numeric(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Distance(a) => cmd_distance(a),
        Command::Select(a) => cmd_select(a),
        Command::Diagram(a) => cmd_diagram(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn echo<T: Serialize>(command: &str, args: &T, path: &Path) -> CmdResult {
    let text = serde_json::to_string_pretty(&Echo { command, args })
        .map_err(|e| data_error(format!("cannot serialize configuration: {e}")))?;
    report::write_text(path, &(text + "\n"))?;
    Ok(())
}

/// `out.csv` → `out.csv.config.json`
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.json");
    PathBuf::from(name)
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| data_error(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_gen(a: &GenArgs) -> CmdResult {
    let model = match (&a.model, &a.random_model) {
        (Some(path), None) => ThemeModel::load(path)?,
        (None, Some(v)) => random_model(v[0], v[1], v[2], a.seed)?,
        _ => {
            return Err(usage(
                "exactly one of --model and --random-model is required",
            ))
        }
    };
    let (coll, latent) = generate_synthetic(
        &model,
        a.tasks as usize,
        a.classes as usize,
        a.shots as usize,
        a.seed,
    )?;
    create_dir(&a.out)?;
    let manifest = save_tasks(&coll, &a.out)?;
    latent.save(a.out.join("latent.json"))?;
    model.save(a.out.join("model.json"))?;
    echo("gen", a, &a.out.join("config.json"))?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let config = a.config();
    config.validate()?;
    let tasks = load_tasks(&a.data)?;
    let model = init_model(
        &tasks,
        a.task_themes as usize,
        a.image_themes as usize,
        a.delta,
        config.jitter,
        config.seed,
    )?;
    let (model, logs) = train_from(model, &tasks, &config)?;
    create_dir(&a.out)?;
    model.save(a.out.join("checkpoint.json"))?;
    report::write_text(
        &a.out.join("train_log.csv"),
        &report::training_log_csv(&logs),
    )?;
    echo("train", a, &a.out.join("config.json"))?;
    let nonconverged: usize = logs.iter().map(|l| l.estep_nonconverged).sum();
    if nonconverged > 0 {
        log::warn!("{nonconverged} task E-steps hit the iteration cap");
    }
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> CmdResult {
    let model = ThemeModel::load(&a.model)?;
    let tasks = load_tasks(&a.data)?;
    if tasks.dim() != model.dim() {
        return Err(data_error(format!(
            "data dimension {} does not match model dimension {}",
            tasks.dim(),
            model.dim()
        )));
    }
    let config = TrainConfig {
        e_tol: a.e_tol,
        max_e_iters: a.max_e_iters,
        seed: a.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let outputs = tasks
        .tasks()
        .par_iter()
        .map(|t| run_estep(t, &model, &config))
        .collect::<Result<Vec<_>, _>>()?;
    let nonconverged = outputs.iter().filter(|o| !o.converged).count();
    if nonconverged > 0 {
        log::warn!("{nonconverged} task E-steps hit the iteration cap");
    }
    let table = LambdaTable {
        ids: tasks.tasks().iter().map(|t| t.id().to_string()).collect(),
        rows: outputs.into_iter().map(|o| o.state.lambda).collect(),
    };
    table.write(&a.out)?;
    echo("infer", a, &sidecar(&a.out))
}

fn read_lambda_pair(train: &Path, test: &Path) -> Result<(LambdaTable, LambdaTable), Failure> {
    let train = LambdaTable::read(train)?;
    let test = LambdaTable::read(test)?;
    if train.rows[0].len() != test.rows[0].len() {
        return Err(data_error(format!(
            "training λ has {} entries, test λ has {}",
            train.rows[0].len(),
            test.rows[0].len()
        )));
    }
    Ok((train, test))
}

fn cmd_distance(a: &DistanceArgs) -> CmdResult {
    let (train, test) = read_lambda_pair(&a.train, &a.test)?;
    let rep = distance_matrix(&test.rows, &train.rows, a.matrix.is_some())?;
    report::write_text(&a.out, &report::distances_csv(&test.ids, &rep.mean_kl))?;
    if let (Some(path), Some(m)) = (&a.matrix, &rep.matrix) {
        report::write_text(path, &report::distance_matrix_csv(&test.ids, &train.ids, m))?;
    }
    echo("distance", a, &sidecar(&a.out))
}

fn cmd_select(a: &SelectArgs) -> CmdResult {
    let (train, test) = read_lambda_pair(&a.train, &a.test)?;
    let m = match a.m {
        Count::All => train.ids.len(),
        Count::N(m) if m > train.ids.len() => {
            return Err(usage(format!(
                "--m {m} exceeds the {} training tasks",
                train.ids.len()
            )))
        }
        Count::N(m) => m,
    };
    let picked = select_tasks(&train.rows, &test.rows, m)?;
    let ids: Vec<&str> = picked.iter().map(|&i| train.ids[i].as_str()).collect();
    report::write_text(&a.out, &report::selection_text(&ids))?;
    echo("select", a, &sidecar(&a.out))
}

fn cmd_diagram(a: &DiagramArgs) -> CmdResult {
    let distances = report::read_distances(&a.distances)?;
    let accuracy = report::read_accuracy(&a.accuracy)?;
    let known: HashSet<&str> = distances.iter().map(|(id, _)| id.as_str()).collect();
    let unknown: Vec<&str> = accuracy
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !unknown.is_empty() {
        return Err(data_error(format!(
            "accuracy file has unknown task ids: {}",
            unknown.join(", ")
        )));
    }
    let by_id: HashMap<&str, f64> = accuracy.iter().map(|(id, v)| (id.as_str(), *v)).collect();
    if by_id.len() != accuracy.len() {
        return Err(data_error("accuracy file lists a task id more than once"));
    }
    let missing: Vec<&str> = distances
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(data_error(format!(
            "accuracy file is missing task ids: {}",
            missing.join(", ")
        )));
    }
    let d: Vec<f64> = distances.iter().map(|(_, v)| *v).collect();
    let acc: Vec<f64> = distances.iter().map(|(id, _)| by_id[id.as_str()]).collect();
    let bins = correlation_diagram(&d, &acc, a.bins as usize)?;
    report::write_text(&a.out, &report::diagram_csv(&bins))?;
    echo("diagram", a, &sidecar(&a.out))
}
