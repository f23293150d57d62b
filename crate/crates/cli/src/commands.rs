//! Subcommand parsing and dispatch.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 stage failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ibft_core::evaluation::{self, EvalGrid};
use ibft_core::memorization::{self, ScoreMode};
use ibft_core::stackcalc::{self, Example, Problem, TaskConfig};
use ibft_core::trainer::{self, ContaminationManifest, Method, TrainConfig};
use ibft_core::{checkpoint, geometry, Error, TransformerConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::experiment;
use crate::manifest::{hash_inputs, hash_outputs, RunManifest};

/// Environment variable naming the directory under which run directories are created.
pub const RUN_ROOT_VAR: &str = "IBFT_RUN_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage} failed: {message}")]
    Stage { stage: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Stage { .. } => 4,
        }
    }
}

/// Errors met while resolving flags and config files.
fn config_err(e: Error) -> CliError {
    match e {
        Error::Config { field, reason } => CliError::Config(format!("{field}: {reason}")),
        other => CliError::Config(other.to_string()),
    }
}

fn stage_err(stage: &str) -> impl Fn(Error) -> CliError + '_ {
    move |e| CliError::Stage { stage: stage.to_string(), message: e.to_string() }
}

#[derive(Debug, Parser)]
#[command(name = "ibft", version, about = "Information-bottleneck fine-tuning laboratory")]
pub struct Cli {
    /// Output directory; defaults to a fresh directory under $IBFT_RUN_ROOT (or ./runs).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic datasets.
    GenData(GenDataArgs),
    /// Train a base model on background data plus a planted part of the fine-tuning set.
    Pretrain(PretrainArgs),
    /// Fine-tune a base checkpoint with FT or IB-FT.
    Finetune(FinetuneArgs),
    /// Min-K% Prob scores for every example of a dataset.
    ScoreMemorization(ScoreArgs),
    /// Drop the most memorized examples.
    Prune(PruneArgs),
    /// Pass@k and Pass@k^(m) across temperatures.
    Evaluate(EvaluateArgs),
    /// Distances and angles between most and least memorized examples.
    AnalyzeRepr(AnalyzeArgs),
    /// The whole pipeline over several seeds.
    RunExperiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Several disjoint splits instead of one, e.g. `background=8000,code=1000`.
    #[arg(long, value_delimiter = ',')]
    pub splits: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub min_ops: usize,
    #[arg(long, default_value_t = stackcalc::MAX_OPS)]
    pub max_ops: usize,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// TOML file with model fields; flags override it.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub tap_layer: Option<usize>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<TransformerConfig, CliError> {
        let mut c: TransformerConfig = match &self.model_config {
            Some(p) => toml::from_str(&read_text(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => TransformerConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len, tap_layer);
        c.validate().map_err(config_err)?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with training fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub contamination_ratio: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub d_z: Option<usize>,
}

impl TrainArgs {
    fn resolve(&self, base: TrainConfig) -> Result<TrainConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => toml::from_str(&read_text(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => base,
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(method, epochs, batch_size, base_lr, warmup_ratio, alpha, beta, seed, contamination_ratio, weight_decay);
        if self.d_z.is_some() {
            c.d_z = self.d_z;
        }
        c.validate().map_err(config_err)?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub background: PathBuf,
    /// The fine-tuning set, part of which is planted.
    #[arg(long)]
    pub code: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = memorization::DEFAULT_K)]
    pub k: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Response)]
    pub mode: ModeArg,
    /// Contamination manifest written by `pretrain`, to flag planted examples.
    #[arg(long)]
    pub contamination: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub model_tag: String,
    #[arg(long, default_value = "data")]
    pub split_tag: String,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Response,
    FullSequence,
}

impl From<ModeArg> for ScoreMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Response => ScoreMode::Response,
            ModeArg::FullSequence => ScoreMode::FullSequence,
        }
    }
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Score CSV written by `score-memorization`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub ratio: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5, 10])]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 5, 10])]
    pub m: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.6, 1.0])]
    pub temperatures: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// `tag=checkpoint`, repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Score CSV used to form the most/least memorized groups.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value_t = geometry::DEFAULT_FRACTION)]
    pub fraction: f64,
    #[arg(long, default_value_t = geometry::DEFAULT_PAIRS)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// TOML experiment file; unspecified fields come from the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings: full, desk or smoke.
    #[arg(long, default_value = "full")]
    pub profile: String,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Reuse completed stages found in `--out`.
    #[arg(long)]
    pub resume: bool,
}

fn read_text(p: &Path) -> Result<String, CliError> {
    fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
}

fn read_data(p: &Path) -> Result<Vec<Example>, CliError> {
    stackcalc::read_dataset(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::ScoreMemorization(_) => "score-memorization",
        Command::Prune(_) => "prune",
        Command::Evaluate(_) => "evaluate",
        Command::AnalyzeRepr(_) => "analyze-repr",
        Command::RunExperiment(_) => "run-experiment",
    }
}

/// `--out` if given, else the first unused `<root>/<command>-NNN`.
fn run_dir(out: Option<&Path>, command: &str, allow_existing: bool) -> Result<PathBuf, CliError> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(RUN_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            (1..).map(|i| root.join(format!("{command}-{i:03}"))).find(|p| !p.exists()).expect("unbounded search")
        }
    };
    let non_empty = dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !allow_existing {
        return Err(CliError::Usage(format!("output directory {} is not empty", dir.display())));
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

struct Record {
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>, stage: &str) -> Result<(), CliError> {
    fs::write(dir.join(name), bytes).map_err(|e| CliError::Stage { stage: stage.into(), message: e.to_string() })
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("serializable")
}

fn gen_data(a: &GenDataArgs, dir: &Path) -> Result<Record, CliError> {
    let task = TaskConfig { min_ops: a.min_ops, max_ops: a.max_ops };
    task.validate().map_err(config_err)?;
    let named: Vec<(String, usize)> = if a.splits.is_empty() {
        vec![("dataset".into(), a.count)]
    } else {
        a.splits
            .iter()
            .map(|s| {
                let (name, n) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("split {s:?} is not name=count")))?;
                let n = n.parse().map_err(|_| CliError::Usage(format!("split {s:?} has a bad count")))?;
                Ok((name.to_string(), n))
            })
            .collect::<Result<_, CliError>>()?
    };
    if named.iter().any(|(_, n)| *n == 0) {
        return Err(CliError::Config("count: must be at least 1".into()));
    }
    let sizes: Vec<usize> = named.iter().map(|(_, n)| *n).collect();
    let data = stackcalc::generate_with(&sizes, &task, a.seed);
    for ((name, _), split) in named.iter().zip(&data) {
        stackcalc::write_dataset(&dir.join(format!("{name}.jsonl")), split).map_err(stage_err("gen-data"))?;
    }
    Ok(Record {
        config: json!({ "splits": named, "seed": a.seed, "min_ops": a.min_ops, "max_ops": a.max_ops }),
        seeds: vec![a.seed],
        inputs: vec![],
    })
}

fn pretrain(a: &PretrainArgs, dir: &Path) -> Result<Record, CliError> {
    let model = a.model.resolve()?;
    let train = a.train.resolve(ExperimentConfig::full().pretrain)?;
    if train.method != Method::Ft {
        return Err(CliError::Config("method: pretraining uses the plain objective".into()));
    }
    let (background, code) = (read_data(&a.background)?, read_data(&a.code)?);
    let out = trainer::pretrain(&model, &train, &background, &code).map_err(stage_err("pretrain"))?;
    checkpoint::save_model(&dir.join("base.ckpt"), &out.model).map_err(stage_err("pretrain"))?;
    write(dir, "contamination.json", to_json(&out.manifest), "pretrain")?;
    write(dir, "train_log.csv", trainer::log_csv(&out.log), "pretrain")?;
    Ok(Record {
        config: json!({ "model": model, "train": train }),
        seeds: vec![train.seed],
        inputs: vec![a.background.clone(), a.code.clone()],
    })
}

fn finetune(a: &FinetuneArgs, dir: &Path) -> Result<Record, CliError> {
    let train = a.train.resolve(ExperimentConfig::full().finetune)?;
    let base = checkpoint::load_model(&a.base).map_err(|e| CliError::Config(format!("{}: {e}", a.base.display())))?;
    let data = read_data(&a.data)?;
    let out = trainer::finetune(&train, &base, &data).map_err(stage_err("finetune"))?;
    checkpoint::save_model(&dir.join("model.ckpt"), &out.model).map_err(stage_err("finetune"))?;
    if let Some(e) = &out.encoder {
        checkpoint::save_encoder(&dir.join("encoder.ckpt"), e).map_err(stage_err("finetune"))?;
    }
    write(dir, "train_log.csv", trainer::log_csv(&out.log), "finetune")?;
    write(dir, "summary.json", to_json(&experiment::summarize_log(&out.log)), "finetune")?;
    Ok(Record { config: json!({ "train": train }), seeds: vec![train.seed], inputs: vec![a.base.clone(), a.data.clone()] })
}

fn score(a: &ScoreArgs, dir: &Path) -> Result<Record, CliError> {
    if !(a.k > 0.0 && a.k <= 100.0) {
        return Err(CliError::Config(format!("k: must lie in (0, 100], got {}", a.k)));
    }
    let model = checkpoint::load_model(&a.model).map_err(|e| CliError::Config(format!("{}: {e}", a.model.display())))?;
    let data = read_data(&a.data)?;
    let mut inputs = vec![a.model.clone(), a.data.clone()];
    let planted = match &a.contamination {
        Some(p) => {
            inputs.push(p.clone());
            let m: ContaminationManifest =
                serde_json::from_str(&read_text(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            m.planted
        }
        None => Default::default(),
    };
    let r = memorization::score_split(&model, &data, a.k, a.mode.into(), &planted, &a.model_tag, &a.split_tag)
        .map_err(stage_err("score-memorization"))?;
    write(dir, "scores.csv", r.to_csv().map_err(stage_err("score-memorization"))?, "score-memorization")?;
    write(dir, "summary.json", to_json(&r.summary), "score-memorization")?;
    Ok(Record {
        config: json!({ "k": a.k, "mode": ScoreMode::from(a.mode), "model_tag": a.model_tag, "split_tag": a.split_tag }),
        seeds: vec![],
        inputs,
    })
}

fn prune(a: &PruneArgs, dir: &Path) -> Result<Record, CliError> {
    if !(0.0..1.0).contains(&a.ratio) {
        return Err(CliError::Config(format!("ratio: must lie in [0, 1), got {}", a.ratio)));
    }
    let data = read_data(&a.data)?;
    let scores = memorization::read_scores_csv(&read_text(&a.scores)?).map_err(config_err)?;
    let kept = memorization::prune_by_scores(&data, &scores, a.ratio).map_err(stage_err("prune"))?;
    stackcalc::write_dataset(&dir.join("pruned.jsonl"), &kept).map_err(stage_err("prune"))?;
    Ok(Record {
        config: json!({ "ratio": a.ratio, "survivors": kept.len() }),
        seeds: vec![],
        inputs: vec![a.data.clone(), a.scores.clone()],
    })
}

fn evaluate(a: &EvaluateArgs, dir: &Path) -> Result<Record, CliError> {
    let grid = EvalGrid::from_lists(&a.k, &a.m).map_err(config_err)?;
    grid.validate(a.n).map_err(config_err)?;
    if a.n == 0 {
        return Err(CliError::Config("n: must be at least 1".into()));
    }
    if a.temperatures.is_empty() || a.temperatures.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(CliError::Config("temperatures: need finite values >= 0".into()));
    }
    let model = checkpoint::load_model(&a.model).map_err(|e| CliError::Config(format!("{}: {e}", a.model.display())))?;
    let problems: Vec<Problem> = read_data(&a.data)?.into_iter().map(|e| e.problem).collect();
    let e = evaluation::evaluate(&model, &problems, &grid, &a.temperatures, a.n, a.seed).map_err(stage_err("evaluate"))?;
    write(dir, "evaluation.csv", evaluation::reports_csv(&e.reports), "evaluate")?;
    let per_problem: Vec<_> = e.reports.iter().map(|r| json!({ "temperature": r.temperature, "problems": r.per_problem })).collect();
    write(dir, "per_problem.json", to_json(&per_problem), "evaluate")?;
    Ok(Record {
        config: json!({ "n": a.n, "grid": grid, "temperatures": a.temperatures, "seed": a.seed }),
        seeds: vec![a.seed],
        inputs: vec![a.model.clone(), a.data.clone()],
    })
}

fn analyze(a: &AnalyzeArgs, dir: &Path) -> Result<Record, CliError> {
    let data = read_data(&a.data)?;
    let scores = memorization::read_scores_csv(&read_text(&a.scores)?).map_err(config_err)?;
    let groups = memorization::extremes_by_scores(&scores, a.fraction).map_err(config_err)?;
    let mut inputs = vec![a.data.clone(), a.scores.clone()];
    let mut models = BTreeMap::new();
    for spec in &a.models {
        let (tag, path) = spec.split_once('=').ok_or_else(|| CliError::Usage(format!("--model {spec:?} is not tag=path")))?;
        let path = PathBuf::from(path);
        let m = checkpoint::load_model(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        inputs.push(path);
        models.insert(tag.to_string(), m);
    }
    let mut summary = String::from("model_tag,mean_distance,median_distance,mean_angle,median_angle\n");
    let mut hist = Vec::new();
    for (tag, m) in &models {
        let e = geometry::paired_stats(m, &data, &groups.most, &groups.least, a.pairs, a.seed, tag).map_err(stage_err("analyze-repr"))?;
        summary.push_str(&format!("{tag},{:?},{:?},{:?},{:?}\n", e.mean_distance, e.median_distance, e.mean_angle, e.median_angle));
        write(dir, &format!("pairs_{tag}.csv"), e.pairs_csv(), "analyze-repr")?;
        hist.push(json!({ "model_tag": tag, "distance": e.distance_histogram, "angle": e.angle_histogram }));
    }
    write(dir, "geometry.csv", summary, "analyze-repr")?;
    write(dir, "histograms.json", to_json(&hist), "analyze-repr")?;
    write(dir, "groups.json", to_json(&groups), "analyze-repr")?;
    Ok(Record { config: json!({ "fraction": a.fraction, "pairs": a.pairs, "seed": a.seed }), seeds: vec![a.seed], inputs })
}

fn run_experiment(a: &ExperimentArgs, dir: &Path) -> Result<Record, CliError> {
    let mut cfg = match &a.config {
        Some(p) => {
            let base = toml::Value::try_from(ExperimentConfig::profile(&a.profile).map_err(config_err)?).expect("config is toml");
            let over: toml::Value = toml::from_str(&read_text(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let merged = merge(base, over);
            let text = toml::to_string(&merged).expect("merged config is toml");
            ExperimentConfig::from_toml(&text).map_err(config_err)?
        }
        None => ExperimentConfig::profile(&a.profile).map_err(config_err)?,
    };
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds.clone();
    }
    cfg.validate().map_err(config_err)?;
    let outcome =
        experiment::run_experiment(&cfg, dir, a.resume).map_err(|e| CliError::Stage { stage: e.stage, message: e.source.to_string() })?;
    eprintln!("stages run: {}, reused: {}", outcome.executed.len(), outcome.reused.len());
    let mut inputs = Vec::new();
    if let Some(p) = &a.config {
        inputs.push(p.clone());
    }
    Ok(Record { config: serde_json::to_value(&cfg).expect("json"), seeds: cfg.seeds.clone(), inputs })
}

/// Overlays `over` onto `base`, table by table.
fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}

/// Parses `argv` (program name first), runs the command and returns its run directory.
pub fn dispatch<I, S>(argv: I) -> Result<PathBuf, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli =
        Cli::try_parse_from(&argv).map_err(|e| CliError::Usage(e.to_string().trim_start_matches("error: ").trim_end().to_string()))?;
    let name = command_name(&cli.command);
    let resume = matches!(&cli.command, Command::RunExperiment(a) if a.resume);
    let dir = run_dir(cli.out.as_deref(), name, resume)?;
    let start = Instant::now();
    let rec = match &cli.command {
        Command::GenData(a) => gen_data(a, &dir),
        Command::Pretrain(a) => pretrain(a, &dir),
        Command::Finetune(a) => finetune(a, &dir),
        Command::ScoreMemorization(a) => score(a, &dir),
        Command::Prune(a) => prune(a, &dir),
        Command::Evaluate(a) => evaluate(a, &dir),
        Command::AnalyzeRepr(a) => analyze(a, &dir),
        Command::RunExperiment(a) => run_experiment(a, &dir),
    }?;
    let input_refs: Vec<&Path> = rec.inputs.iter().map(PathBuf::as_path).collect();
    let manifest = RunManifest {
        command: name.to_string(),
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        config: rec.config,
        seeds: rec.seeds,
        inputs: hash_inputs(&input_refs).map_err(stage_err("manifest"))?,
        outputs: hash_outputs(&dir).map_err(stage_err("manifest"))?,
        duration_secs: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    manifest.write(&dir).map_err(stage_err("manifest"))?;
    Ok(dir)
}

/// Entry point for the binary: runs and maps the outcome to an exit code.
pub fn main_with_args(argv: Vec<std::ffi::OsString>) -> i32 {
    match Cli::try_parse_from(&argv) {
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        _ => {}
    }
    match dispatch(argv) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
