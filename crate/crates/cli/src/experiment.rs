//! The end-to-end pipeline behind `run-experiment`.
//!
//! Per seed: generate the four splits, pretrain a contaminated base model,
//! fine-tune it with FT and IB-FT, score memorization, sweep pruning ratios,
//! evaluate, and measure representation geometry. Expensive stages write a
//! record with a fingerprint of their inputs and the hash of each output; a
//! resumed run reloads any stage whose record still matches.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ibft_core::checkpoint;
use ibft_core::evaluation::{self, EvalReport, Evaluation};
use ibft_core::geometry::{self, GeometryEntry};
use ibft_core::memorization::{self, MemorizationReport};
use ibft_core::stackcalc::{self, Example, Problem, TaskConfig};
use ibft_core::trainer::{self, ContaminationManifest, LogRow, Method, TrainConfig};
use ibft_core::{rng, Error, Result, TransformerModel};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::manifest::sha256_hex;

pub const METRICS_DIR: &str = "metrics";

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: String,
    #[source]
    pub source: Error,
}

fn at<T>(stage: &str, r: Result<T>) -> Result<T, StageError> {
    r.map_err(|source| StageError { stage: stage.to_string(), source })
}

fn write(stage: &str, path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), StageError> {
    at(stage, fs::write(path, bytes).map_err(Error::from))
}

fn fingerprint(parts: &serde_json::Value) -> String {
    sha256_hex(&serde_json::to_vec(&json!({ "version": env!("CARGO_PKG_VERSION"), "parts": parts })).expect("json"))
}

#[derive(Debug, Serialize, Deserialize)]
struct StageRecord {
    fingerprint: String,
    files: BTreeMap<String, String>,
}

type Files = Vec<(String, Vec<u8>)>;

/// Runs or reloads fingerprinted stages.
struct Stages {
    resume: bool,
    reused: Vec<String>,
    executed: Vec<String>,
}

impl Stages {
    fn try_reuse(dir: &Path, name: &str, fp: &str) -> Option<BTreeMap<String, Vec<u8>>> {
        let rec: StageRecord = serde_json::from_slice(&fs::read(dir.join(format!("{name}.stage.json"))).ok()?).ok()?;
        if rec.fingerprint != fp {
            return None;
        }
        let mut files = BTreeMap::new();
        for (f, hash) in rec.files {
            let bytes = fs::read(dir.join(&f)).ok()?;
            if sha256_hex(&bytes) != hash {
                return None;
            }
            files.insert(f, bytes);
        }
        Some(files)
    }

    fn run<T>(
        &mut self,
        dir: &Path,
        name: &str,
        fp: &str,
        compute: impl FnOnce() -> Result<(T, Files)>,
        load: impl FnOnce(&BTreeMap<String, Vec<u8>>) -> Result<T>,
    ) -> Result<T, StageError> {
        let label = format!("{}/{name}", dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        if self.resume {
            if let Some(files) = Self::try_reuse(dir, name, fp) {
                let value = at(&label, load(&files))?;
                self.reused.push(label);
                return Ok(value);
            }
        }
        let (value, files) = at(&label, compute())?;
        let mut rec = StageRecord { fingerprint: fp.to_string(), files: BTreeMap::new() };
        for (f, bytes) in files {
            write(&label, &dir.join(&f), &bytes)?;
            rec.files.insert(f, sha256_hex(&bytes));
        }
        let rec_bytes = serde_json::to_vec_pretty(&rec).expect("json");
        write(&label, &dir.join(format!("{name}.stage.json")), rec_bytes)?;
        self.executed.push(label);
        Ok(value)
    }
}

fn file<'a>(files: &'a BTreeMap<String, Vec<u8>>, name: &str) -> Result<&'a [u8]> {
    files.get(name).map(Vec::as_slice).ok_or_else(|| Error::invalid(format!("stage output {name} missing")))
}

/// Mean losses over one epoch of a training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMeans {
    pub ft: f64,
    pub compress: f64,
    pub predict: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_epoch: EpochMeans,
    pub last_epoch: EpochMeans,
}

pub fn summarize_log(log: &[LogRow]) -> TrainSummary {
    let means = |epoch: usize| {
        let rows: Vec<&LogRow> = log.iter().filter(|r| r.epoch == epoch).collect();
        let n = rows.len() as f64;
        let avg = |f: fn(&LogRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        EpochMeans {
            ft: avg(|r| r.loss.ft),
            compress: avg(|r| r.loss.compress),
            predict: avg(|r| r.loss.predict),
            total: avg(|r| r.loss.total),
        }
    };
    let last = log.last().map_or(0, |r| r.epoch);
    TrainSummary { steps: log.len(), first_epoch: means(0), last_epoch: means(last) }
}

#[derive(Debug, Clone)]
struct Trained {
    model: TransformerModel,
    summary: TrainSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Medians {
    /// Base model on the fine-tuning set.
    pub p0: f64,
    pub p0_contaminated: f64,
    pub p0_clean: f64,
    /// FT model on the fine-tuning set.
    pub p1: f64,
    /// Base model on the fresh reference set.
    pub p2: f64,
    /// IB-FT model on the fine-tuning set.
    pub p1_ib: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub ratio: f64,
    pub survivors: usize,
    pub pass_at_1: f64,
    pub pass_at_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRow {
    pub model_tag: String,
    pub mean_distance: f64,
    pub median_distance: f64,
    pub mean_angle: f64,
    pub median_angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub medians: Medians,
    /// Share of the most-memorized group that was planted during pretraining.
    pub most_memorized_contaminated: f64,
    pub ft: Vec<EvalReport>,
    pub ib_ft: Vec<EvalReport>,
    pub pruning: Vec<PruneRow>,
    pub geometry: Vec<GeometryRow>,
    pub ft_training: TrainSummary,
    pub ib_training: TrainSummary,
}

impl SeedResult {
    pub fn report(&self, method: Method, temperature: f64) -> Option<&EvalReport> {
        let list = match method {
            Method::Ft => &self.ft,
            Method::IbFt => &self.ib_ft,
        };
        list.iter().find(|r| r.temperature == temperature)
    }

    pub fn geometry_for(&self, tag: &str) -> Option<&GeometryRow> {
        self.geometry.iter().find(|g| g.model_tag == tag)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results: Vec<SeedResult>,
    pub reused: Vec<String>,
    pub executed: Vec<String>,
}

struct Splits {
    background: Vec<Example>,
    code: Vec<Example>,
    fresh: Vec<Example>,
    test: Vec<Example>,
}

fn write_split(dir: &Path, name: &str, data: &[Example]) -> Result<()> {
    stackcalc::write_dataset(&dir.join(format!("{name}.jsonl")), data)
}

fn model_files(name: &str, t: &Trained, log: &[LogRow]) -> Result<Files> {
    Ok(vec![
        (format!("{name}.ckpt"), checkpoint::model_bytes(&t.model)?),
        (format!("{name}_log.csv"), trainer::log_csv(log).into_bytes()),
        (format!("{name}_summary.json"), serde_json::to_vec_pretty(&t.summary)?),
    ])
}

fn load_trained(files: &BTreeMap<String, Vec<u8>>, name: &str) -> Result<Trained> {
    Ok(Trained {
        model: checkpoint::model_from_bytes(file(files, &format!("{name}.ckpt"))?)?,
        summary: serde_json::from_slice(file(files, &format!("{name}_summary.json"))?)?,
    })
}

/// Fine-tunes and caches. The training log is written alongside the checkpoint.
fn finetune_stage(
    stages: &mut Stages,
    dir: &Path,
    name: &str,
    fp: &str,
    config: &TrainConfig,
    base: &TransformerModel,
    data: &[Example],
) -> Result<Trained, StageError> {
    stages.run(
        dir,
        name,
        fp,
        || {
            let o = trainer::finetune(config, base, data)?;
            let t = Trained { model: o.model, summary: summarize_log(&o.log) };
            let mut files = model_files(name, &t, &o.log)?;
            if let Some(e) = &o.encoder {
                files.push((format!("{name}_encoder.ckpt"), checkpoint::encoder_bytes(e)?));
            }
            Ok((t, files))
        },
        |files| load_trained(files, name),
    )
}

#[allow(clippy::too_many_arguments)]
fn eval_stage(
    stages: &mut Stages,
    dir: &Path,
    name: &str,
    fp: &str,
    model: &TransformerModel,
    problems: &[Problem],
    cfg: &ExperimentConfig,
    temperatures: &[f64],
    seed: u64,
) -> Result<Evaluation, StageError> {
    let grid = at(name, cfg.evaluation.grid())?;
    stages.run(
        dir,
        name,
        fp,
        || {
            let e = evaluation::evaluate(model, problems, &grid, temperatures, cfg.evaluation.n, seed)?;
            let bytes = serde_json::to_vec(&e)?;
            Ok((e, vec![(format!("{name}.json"), bytes)]))
        },
        |files| Ok(serde_json::from_slice(file(files, &format!("{name}.json"))?)?),
    )
}

fn geometry_row(e: &GeometryEntry) -> GeometryRow {
    GeometryRow {
        model_tag: e.model_tag.clone(),
        mean_distance: e.mean_distance,
        median_distance: e.median_distance,
        mean_angle: e.mean_angle,
        median_angle: e.median_angle,
    }
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, root: &Path, stages: &mut Stages) -> Result<SeedResult, StageError> {
    let dir = root.join(format!("seed-{seed}"));
    at("setup", fs::create_dir_all(&dir).map_err(Error::from))?;

    let d = &cfg.data;
    let task = TaskConfig { min_ops: d.min_ops, max_ops: d.max_ops };
    let mut splits = stackcalc::generate_with(&[d.background, d.code, d.fresh, d.test], &task, seed).into_iter();
    let s = Splits {
        background: splits.next().unwrap(),
        code: splits.next().unwrap(),
        fresh: splits.next().unwrap(),
        test: splits.next().unwrap(),
    };
    for (name, data) in [("background", &s.background), ("code", &s.code), ("fresh", &s.fresh), ("test", &s.test)] {
        at("data", write_split(&dir, name, data))?;
    }
    let problems: Vec<Problem> = s.test.iter().map(|e| e.problem.clone()).collect();

    let pre_cfg = TrainConfig { seed, ..cfg.pretrain.clone() };
    let ft_cfg = TrainConfig { seed, method: Method::Ft, ..cfg.finetune.clone() };
    let ib_cfg = TrainConfig { method: Method::IbFt, ..ft_cfg.clone() };

    let pre_fp = fingerprint(&json!({ "stage": "pretrain", "model": cfg.model, "data": cfg.data, "train": pre_cfg, "seed": seed }));
    let (base, contamination): (TransformerModel, ContaminationManifest) = stages.run(
        &dir,
        "pretrain",
        &pre_fp,
        || {
            let o = trainer::pretrain(&cfg.model, &pre_cfg, &s.background, &s.code)?;
            let files = vec![
                ("base.ckpt".into(), checkpoint::model_bytes(&o.model)?),
                ("contamination.json".into(), serde_json::to_vec_pretty(&o.manifest)?),
                ("pretrain_log.csv".into(), trainer::log_csv(&o.log).into_bytes()),
            ];
            Ok(((o.model, o.manifest), files))
        },
        |files| Ok((checkpoint::model_from_bytes(file(files, "base.ckpt")?)?, serde_json::from_slice(file(files, "contamination.json")?)?)),
    )?;

    let ft_fp = fingerprint(&json!({ "stage": "ft", "base": pre_fp, "train": ft_cfg }));
    let ib_fp = fingerprint(&json!({ "stage": "ib-ft", "base": pre_fp, "train": ib_cfg }));
    let ft = finetune_stage(stages, &dir, "ft", &ft_fp, &ft_cfg, &base, &s.code)?;
    let ib = finetune_stage(stages, &dir, "ib_ft", &ib_fp, &ib_cfg, &base, &s.code)?;

    // Memorization distributions.
    let mc = &cfg.memorization;
    let none = BTreeSet::new();
    let planted = &contamination.planted;
    let score = |model: &TransformerModel, data: &[Example], flags: &BTreeSet<u64>, mtag: &str, stag: &str| {
        at("score-memorization", memorization::score_split(model, data, mc.k, mc.mode, flags, mtag, stag))
    };
    let p0 = score(&base, &s.code, planted, "base", "code")?;
    let p1 = score(&ft.model, &s.code, planted, "ft", "code")?;
    let p1_ib = score(&ib.model, &s.code, planted, "ib-ft", "code")?;
    let p2 = score(&base, &s.fresh, &none, "base", "fresh")?;
    for (name, r) in [("p0", &p0), ("p1", &p1), ("p1_ib", &p1_ib), ("p2", &p2)] {
        write("score-memorization", &dir.join(format!("scores_{name}.csv")), at("score-memorization", r.to_csv())?)?;
        write(
            "score-memorization",
            &dir.join(format!("scores_{name}_summary.json")),
            serde_json::to_vec_pretty(&r.summary).expect("json"),
        )?;
    }
    let subset_median = |r: &MemorizationReport, want: bool| {
        memorization::median(&r.entries.iter().filter(|e| e.contaminated == want).map(|e| e.score).collect::<Vec<_>>())
    };
    let medians = Medians {
        p0: p0.median(),
        p0_contaminated: if planted.is_empty() { f64::NAN } else { subset_median(&p0, true) },
        p0_clean: if planted.len() == s.code.len() { f64::NAN } else { subset_median(&p0, false) },
        p1: p1.median(),
        p2: p2.median(),
        p1_ib: p1_ib.median(),
    };

    // Evaluation of both methods across temperatures.
    let eval_seed = rng::derive_seed(seed, &[rng::tag::SAMPLE]);
    let temps = &cfg.evaluation.temperatures;
    let eval_fp = |model_fp: &str, temps: &[f64]| {
        let ev = &cfg.evaluation;
        let grid = json!({ "n": ev.n, "ks": ev.ks, "ms": ev.ms, "extra": ev.extra });
        fingerprint(&json!({ "stage": "eval", "model": model_fp, "grid": grid, "temperatures": temps, "test": d, "seed": seed }))
    };
    let ft_eval = eval_stage(stages, &dir, "eval_ft", &eval_fp(&ft_fp, temps), &ft.model, &problems, cfg, temps, eval_seed)?;
    let ib_eval = eval_stage(stages, &dir, "eval_ib_ft", &eval_fp(&ib_fp, temps), &ib.model, &problems, cfg, temps, eval_seed)?;

    // Pruning sweep, ranked by the base model's scores.
    let top_k = *cfg.evaluation.ks.iter().max().expect("validated");
    let scores = p0.score_map();
    let mut pruning = Vec::new();
    for &ratio in &cfg.pruning.ratios {
        let tag = format!("prune_{ratio}");
        let kept = at("prune", memorization::prune_by_scores(&s.code, &scores, ratio))?;
        let (model, model_fp) = if ratio == 0.0 {
            (ft.model.clone(), ft_fp.clone())
        } else {
            at("prune", write_split(&dir, &format!("code_{tag}"), &kept))?;
            let fp = fingerprint(&json!({ "stage": "pruned-ft", "base": pre_fp, "train": ft_cfg, "ratio": ratio, "memorization": mc }));
            (finetune_stage(stages, &dir, &tag, &fp, &ft_cfg, &base, &kept)?.model, fp)
        };
        let t = [cfg.pruning.temperature];
        let e = eval_stage(stages, &dir, &format!("eval_{tag}"), &eval_fp(&model_fp, &t), &model, &problems, cfg, &t, eval_seed)?;
        let r = &e.reports[0];
        pruning.push(PruneRow {
            ratio,
            survivors: kept.len(),
            pass_at_1: r.value(1, 1).unwrap_or(f64::NAN),
            pass_at_n: r.value(top_k, 1).unwrap_or(f64::NAN),
        });
    }

    // Representation geometry between the most and least memorized quarters.
    let gc = &cfg.geometry;
    let groups = at("analyze-repr", memorization::partition_extremes(&p0, gc.fraction))?;
    let most_memorized_contaminated = groups.most.iter().filter(|id| planted.contains(id)).count() as f64 / groups.most.len() as f64;
    let pair_seed = rng::derive_seed(seed, &[rng::tag::PAIRS]);
    let mut geometry = Vec::new();
    let mut entries = Vec::new();
    for (tag, model) in [("base", &base), ("ft", &ft.model), ("ib-ft", &ib.model)] {
        let e = at("analyze-repr", geometry::paired_stats(model, &s.code, &groups.most, &groups.least, gc.pairs, pair_seed, tag))?;
        write("analyze-repr", &dir.join(format!("geometry_pairs_{tag}.csv")), e.pairs_csv())?;
        geometry.push(geometry_row(&e));
        entries.push(e);
    }
    let hist: Vec<_> =
        entries.iter().map(|e| json!({ "model_tag": e.model_tag, "distance": e.distance_histogram, "angle": e.angle_histogram })).collect();
    write("analyze-repr", &dir.join("geometry_histograms.json"), serde_json::to_vec_pretty(&hist).expect("json"))?;

    Ok(SeedResult {
        seed,
        medians,
        most_memorized_contaminated,
        ft: ft_eval.reports,
        ib_ft: ib_eval.reports,
        pruning,
        geometry,
        ft_training: ft.summary,
        ib_training: ib.summary,
    })
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// The metric tables, as `(file name, contents)`.
pub fn metric_tables(results: &[SeedResult]) -> Vec<(String, String)> {
    let mut eval = String::from("seed,model,temperature,metric,k,m,value\n");
    let mut mem = String::from("seed,distribution,median,contaminated_median,clean_median\n");
    let mut prune = String::from("seed,ratio,survivors,pass_at_1,pass_at_n\n");
    let mut geo = String::from("seed,model_tag,mean_distance,median_distance,mean_angle,median_angle\n");
    let mut train = String::from("seed,model,first_ft,last_ft,first_compress,last_compress,first_predict,last_predict\n");
    for r in results {
        for (tag, reports) in [("ft", &r.ft), ("ib-ft", &r.ib_ft)] {
            for rep in reports {
                for c in &rep.cells {
                    eval.push_str(&format!("{},{tag},{},{},{},{},{}\n", r.seed, rep.temperature, c.metric(), c.k, c.m, num(c.value)));
                }
            }
        }
        let m = &r.medians;
        mem.push_str(&format!("{},p0,{},{},{}\n", r.seed, num(m.p0), num(m.p0_contaminated), num(m.p0_clean)));
        mem.push_str(&format!("{},p1,{},,\n", r.seed, num(m.p1)));
        mem.push_str(&format!("{},p1_ib,{},,\n", r.seed, num(m.p1_ib)));
        mem.push_str(&format!("{},p2,{},,\n", r.seed, num(m.p2)));
        for p in &r.pruning {
            prune.push_str(&format!("{},{},{},{},{}\n", r.seed, p.ratio, p.survivors, num(p.pass_at_1), num(p.pass_at_n)));
        }
        for g in &r.geometry {
            geo.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.seed,
                g.model_tag,
                num(g.mean_distance),
                num(g.median_distance),
                num(g.mean_angle),
                num(g.median_angle)
            ));
        }
        for (tag, t) in [("ft", &r.ft_training), ("ib-ft", &r.ib_training)] {
            let (a, b) = (&t.first_epoch, &t.last_epoch);
            train.push_str(&format!(
                "{},{tag},{},{},{},{},{},{}\n",
                r.seed,
                num(a.ft),
                num(b.ft),
                num(a.compress),
                num(b.compress),
                num(a.predict),
                num(b.predict)
            ));
        }
    }
    vec![
        ("evaluation.csv".into(), eval),
        ("memorization.csv".into(), mem),
        ("pruning.csv".into(), prune),
        ("geometry.csv".into(), geo),
        ("training.csv".into(), train),
    ]
}

/// Runs every seed into `out`. With `resume`, stages whose recorded
/// fingerprint and output hashes still match are reloaded instead of rerun.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<ExperimentOutcome, StageError> {
    at("config", cfg.validate())?;
    at("setup", fs::create_dir_all(out.join(METRICS_DIR)).map_err(Error::from))?;
    write("setup", &out.join("config.toml"), cfg.to_toml())?;
    let mut stages = Stages { resume, reused: Vec::new(), executed: Vec::new() };
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        results.push(run_seed(cfg, seed, out, &mut stages)?);
    }
    for (name, body) in metric_tables(&results) {
        write("report", &out.join(METRICS_DIR).join(name), body)?;
    }
    write("report", &out.join("summary.json"), serde_json::to_vec_pretty(&results).expect("json"))?;
    Ok(ExperimentOutcome { results, reused: stages.reused, executed: stages.executed })
}
