//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line each.
//!
//! Criteria 8 to 11 are directional measurements on a small model; their
//! failures are reported but do not change the exit status unless
//! `IBFT_ACCEPTANCE_STRICT=1`. Any other failure exits non-zero.
//!
//! The directional criteria share one three-seed run of the `desk` profile.
//! Set `IBFT_ACCEPTANCE_DIR` to keep that run and resume it on the next
//! invocation; by default it goes to a temporary directory.

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ibft_cli::experiment::{run_experiment, SeedResult};
use ibft_cli::ExperimentConfig;
use ibft_core::bottleneck::{kl_closed_form, kl_monte_carlo_check, BottleneckEncoder, Noise};
use ibft_core::evaluation::{pass_at_k, pass_at_k_m};
use ibft_core::gradcheck::grad_check;
use ibft_core::memorization::{self, min_k_from_nlls, min_k_prob_score};
use ibft_core::objectives::{self, Objective};
use ibft_core::stackcalc::{self, Example};
use ibft_core::trainer::{self, Method, TrainConfig};
use ibft_core::{checkpoint, geometry, rng, Result, Sequence, Tape, Tensor, TransformerConfig, TransformerModel, Var};
use rand::seq::SliceRandom;
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn fmt_secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- exact suites

fn estimator_exactness() -> Verdict {
    let mut checked = 0usize;
    for n in 1..=12usize {
        for c in 0..=n {
            // counts[k][j]: k-subsets with exactly j correct samples
            let mut counts = vec![vec![0u64; n + 1]; n + 1];
            let correct: u32 = (1u32 << c) - 1;
            for mask in 0u32..(1 << n) {
                counts[mask.count_ones() as usize][(mask & correct).count_ones() as usize] += 1;
            }
            for (k, row) in counts.iter().enumerate().skip(1) {
                let total: u64 = row.iter().sum();
                let at_least = |m: usize| row[m..].iter().sum::<u64>() as f64 / total as f64;
                if pass_at_k(n, c, k).unwrap() != at_least(1) {
                    return verdict(false, format!("pass@k differs at n={n} c={c} k={k}"));
                }
                for m in 1..=k {
                    if pass_at_k_m(n, c, k, m).unwrap() != at_least(m) {
                        return verdict(false, format!("pass@k^(m) differs at n={n} c={c} k={k} m={m}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    verdict(true, format!("{checked} (n, c, k, m) cells equal enumeration"))
}

fn metric_collapse() -> Verdict {
    let mut checked = 0usize;
    for n in 1..=64usize {
        for c in 0..=n {
            for k in 1..=n {
                let (a, b) = (pass_at_k_m(n, c, k, 1).unwrap(), pass_at_k(n, c, k).unwrap());
                if a.to_bits() != b.to_bits() {
                    return verdict(false, format!("n={n} c={c} k={k}: {a} vs {b}"));
                }
                checked += 1;
            }
        }
    }
    verdict(true, format!("m = 1 bitwise equal on {checked} cells, n <= 64"))
}

fn gradient_integrity() -> Verdict {
    let cfg = TransformerConfig { vocab_size: 36, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_seq_len: 40, tap_layer: 1 };
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let model = TransformerModel::init(cfg.clone(), seed).unwrap();
        let encoder = BottleneckEncoder::init(8, 8, seed).unwrap();
        let batch: Vec<Sequence> = stackcalc::generate_dataset(4, seed).iter().map(|e| e.sequence().unwrap()).collect();
        let split = model.params().len();
        let point: Vec<Tensor> = model.params().tensors().iter().chain(encoder.params().tensors()).cloned().collect();
        let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let mv = model.attach(&v[..split])?;
            let ev = encoder.attach(&v[split..])?;
            let objective = Objective::IbFt { alpha: 0.1, beta: 0.02, noise_seed: seed };
            Ok(objectives::record(tape, &mv, Some(&ev), &batch, objective)?.total)
        };
        worst = worst.max(grad_check(f, &point).unwrap());
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.2e} over 10 seeds"))
}

fn ib_degeneracy() -> Verdict {
    let cfg = ExperimentConfig::smoke();
    let splits = stackcalc::generate_with(&[60, 40], &Default::default(), 3);
    let pre = TrainConfig { epochs: 1, ..cfg.pretrain.clone() };
    let base = trainer::pretrain(&cfg.model, &pre, &splits[0], &splits[1]).unwrap().model;
    let ft_cfg = TrainConfig { epochs: 2, seed: 5, ..cfg.finetune.clone() };
    let ib_cfg = TrainConfig { method: Method::IbFt, alpha: 0.0, ..ft_cfg.clone() };
    let ft = trainer::finetune(&ft_cfg, &base, &splits[1]).unwrap();
    let ib = trainer::finetune(&ib_cfg, &base, &splits[1]).unwrap();
    let (a, b) = (checkpoint::model_bytes(&ft.model).unwrap(), checkpoint::model_bytes(&ib.model).unwrap());
    verdict(a == b, format!("{} steps, checkpoints of {} bytes {}", ft.log.len(), a.len(), if a == b { "identical" } else { "differ" }))
}

fn kl_correctness() -> Verdict {
    let mut r = rng::stream(77, &[]);
    let encoder = BottleneckEncoder::init(32, 8, 1).unwrap();
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let scale = r.random_range(0.2..3.0);
        let h = Tensor::matrix(1, 32, (0..32).map(|_| r.random_range(-scale..scale)).collect()).unwrap();
        let out = encoder.encode(&h, Noise::Off).unwrap();
        let exact = kl_closed_form(out.mean.data(), out.log_var.data());
        let mc = kl_monte_carlo_check(out.mean.data(), out.log_var.data(), 100_000, trial).unwrap();
        worst = worst.max((mc.estimate - exact).abs() / mc.std_error);
    }
    verdict(worst <= 3.0, format!("largest deviation {worst:.2} standard errors over 20 outputs"))
}

fn min_k_correctness() -> Verdict {
    let cfg = TransformerConfig { vocab_size: 40, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 40, tap_layer: 1 };
    let model = TransformerModel::init(cfg.clone(), 4).unwrap();
    let data: Vec<Example> = stackcalc::generate_dataset(30, 12);
    let mut r = rng::stream(5, &[]);
    for ex in &data {
        // independent NLLs from raw logits
        let context = ex.problem.context();
        let tokens: Vec<usize> = context.iter().chain(&ex.response).copied().collect();
        let logits = model.forward(&tokens[..tokens.len() - 1]).unwrap().logits;
        let v = cfg.vocab_size;
        let nlls: Vec<f64> = (context.len() - 1..tokens.len() - 1)
            .map(|row| {
                let l = &logits.data()[row * v..(row + 1) * v];
                let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln() - l[tokens[row + 1]]
            })
            .collect();
        let mut desc = nlls.clone();
        desc.sort_by(|a, b| b.total_cmp(a));
        let mean = desc.iter().sum::<f64>() / desc.len() as f64;
        if min_k_prob_score(&model, ex, 100.0).unwrap() != mean {
            return verdict(false, format!("K = 100 differs from the mean response NLL on problem {}", ex.id()));
        }
        let mut shuffled = nlls.clone();
        shuffled.shuffle(&mut r);
        for k in [5.0, 20.0, 50.0, 100.0] {
            if min_k_from_nlls(&nlls, k).unwrap().to_bits() != min_k_from_nlls(&shuffled, k).unwrap().to_bits() {
                return verdict(false, format!("permutation changed the K = {k} score"));
            }
        }
    }
    let mut uniform = model.clone();
    for name in ["head.w", "head.b"] {
        uniform.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let ln_v = (cfg.vocab_size as f64).ln();
    let worst = data.iter().map(|ex| (memorization::min_k_prob_score(&uniform, ex, 20.0).unwrap() - ln_v).abs()).fold(0.0, f64::max);
    verdict(worst < 1e-12, format!("K = 100 exact on 30 examples; permutation exact; uniform model off ln V by {worst:.1e}"))
}

// ------------------------------------------------------------ desk experiment

struct Desk {
    cfg: ExperimentConfig,
    dir: PathBuf,
    _keep: Option<tempfile::TempDir>,
    results: Vec<SeedResult>,
    elapsed: Duration,
    reused: usize,
}

fn desk_run() -> Desk {
    let (dir, keep): (PathBuf, Option<tempfile::TempDir>) = match std::env::var_os("IBFT_ACCEPTANCE_DIR") {
        Some(d) => (PathBuf::from(d), None),
        None => {
            let t = tempfile::tempdir().unwrap();
            (t.path().to_path_buf(), Some(t))
        }
    };
    let cfg = ExperimentConfig::desk();
    let start = Instant::now();
    let out = run_experiment(&cfg, &dir, true).unwrap_or_else(|e| panic!("{e}"));
    Desk { cfg, dir, _keep: keep, results: out.results, elapsed: start.elapsed(), reused: out.reused.len() }
}

fn count(results: &[SeedResult], f: impl Fn(&SeedResult) -> bool) -> usize {
    results.iter().filter(|r| f(r)).count()
}

const HEADLINE_T: f64 = 0.2;

/// Criteria whose failure is an empirical finding rather than a defect.
const DIRECTIONAL: [usize; 4] = [8, 9, 10, 11];

fn barrier(desk: &Desk) -> Verdict {
    let ok = count(&desk.results, |r| r.medians.p1 < r.medians.p0 && r.medians.p0 < r.medians.p2);
    let detail: Vec<String> = desk
        .results
        .iter()
        .map(|r| format!("seed {}: p1 {:.3} p0 {:.3} p2 {:.3}", r.seed, r.medians.p1, r.medians.p0, r.medians.p2))
        .collect();
    verdict(ok == 3, format!("{ok}/3 seeds ordered ({})", detail.join("; ")))
}

fn pruning_effect(desk: &Desk) -> Verdict {
    let row = |r: &SeedResult, ratio: f64| r.pruning.iter().find(|p| p.ratio == ratio).cloned().expect("swept ratio");
    let ok = count(&desk.results, |r| row(r, 0.1).pass_at_1 >= row(r, 0.0).pass_at_1);
    let drops: Vec<f64> = desk.results.iter().map(|r| row(r, 0.0).pass_at_n - row(r, 0.1).pass_at_n).collect();
    let mean_drop = drops.iter().sum::<f64>() / drops.len() as f64;
    let detail: Vec<String> = desk
        .results
        .iter()
        .zip(&drops)
        .map(|(r, d)| {
            format!("seed {}: Pass@1 {:.3} -> {:.3}, Pass@10 drop {:+.3}", r.seed, row(r, 0.0).pass_at_1, row(r, 0.1).pass_at_1, d)
        })
        .collect();
    verdict(ok >= 2 && mean_drop < 0.03, format!("Pass@1 kept in {ok}/3, mean Pass@10 drop {mean_drop:+.3} ({})", detail.join("; ")))
}

fn headline(desk: &Desk) -> Verdict {
    let cell =
        |r: &SeedResult, m: Method, k: usize, mm: usize| r.report(m, HEADLINE_T).and_then(|e| e.value(k, mm)).expect("headline cell");
    let p1 = count(&desk.results, |r| cell(r, Method::IbFt, 1, 1) > cell(r, Method::Ft, 1, 1));
    let all = count(&desk.results, |r| cell(r, Method::IbFt, 10, 10) > cell(r, Method::Ft, 10, 10));
    let detail: Vec<String> = desk
        .results
        .iter()
        .map(|r| {
            format!(
                "seed {}: Pass@1 {:.3} vs {:.3}, Pass@10^(10) {:.3} vs {:.3}",
                r.seed,
                cell(r, Method::IbFt, 1, 1),
                cell(r, Method::Ft, 1, 1),
                cell(r, Method::IbFt, 10, 10),
                cell(r, Method::Ft, 10, 10)
            )
        })
        .collect();
    verdict(p1 >= 2 && all >= 2, format!("IB-FT ahead on Pass@1 in {p1}/3, on Pass@10^(10) in {all}/3 ({})", detail.join("; ")))
}

fn temperature_robustness(desk: &Desk) -> Verdict {
    let drop = |r: &SeedResult, m: Method| {
        let v = |t: f64| r.report(m, t).and_then(|e| e.value(5, 5)).expect("pass@5^(5) cell");
        v(0.2) - v(1.0)
    };
    let ok = count(&desk.results, |r| drop(r, Method::IbFt) < drop(r, Method::Ft));
    let detail: Vec<String> = desk
        .results
        .iter()
        .map(|r| format!("seed {}: IB-FT {:.3} vs FT {:.3}", r.seed, drop(r, Method::IbFt), drop(r, Method::Ft)))
        .collect();
    verdict(ok >= 2, format!("smaller Pass@5^(5) drop for IB-FT in {ok}/3 ({})", detail.join("; ")))
}

/// Recomputes the paired statistics from the saved checkpoints, so the timing
/// covers exactly the geometry work, then checks the orderings.
fn geometry_direction(desk: &Desk) -> Verdict {
    let gc = &desk.cfg.geometry;
    let mut ok = 0;
    let mut detail = Vec::new();
    for r in &desk.results {
        let dir = desk.dir.join(format!("seed-{}", r.seed));
        let code = stackcalc::read_dataset(&dir.join("code.jsonl")).unwrap();
        let scores = memorization::read_scores_csv(&std::fs::read_to_string(dir.join("scores_p0.csv")).unwrap()).unwrap();
        let groups = memorization::extremes_by_scores(&scores, gc.fraction).unwrap();
        let pair_seed = rng::derive_seed(r.seed, &[rng::tag::PAIRS]);
        let mut stats = Vec::new();
        for (tag, file) in [("base", "base.ckpt"), ("ft", "ft.ckpt"), ("ib-ft", "ib_ft.ckpt")] {
            let model = checkpoint::load_model(&dir.join(file)).unwrap();
            let e = geometry::paired_stats(&model, &code, &groups.most, &groups.least, gc.pairs, pair_seed, tag).unwrap();
            let stored = r.geometry_for(tag).expect("geometry row");
            if e.mean_distance != stored.mean_distance || e.mean_angle != stored.mean_angle {
                return verdict(false, format!("seed {} {tag}: recomputed geometry differs from the stored run", r.seed));
            }
            stats.push((e.mean_distance, e.mean_angle));
        }
        let [(bd, ba), (fd, fa), (id, ia)] = [stats[0], stats[1], stats[2]];
        if fd > bd && id < fd && fa > ba && ia < fa {
            ok += 1;
        }
        detail.push(format!("seed {}: dist {bd:.3}/{fd:.3}/{id:.3}, angle {ba:.2}/{fa:.2}/{ia:.2}", r.seed));
    }
    verdict(ok >= 2, format!("all four orderings in {ok}/3; base/FT/IB-FT ({})", detail.join("; ")))
}

fn determinism() -> Verdict {
    let cfg = ExperimentConfig::smoke();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&cfg, a.path(), false).unwrap_or_else(|e| panic!("{e}"));
    run_experiment(&cfg, b.path(), false).unwrap_or_else(|e| panic!("{e}"));
    let mut names: Vec<String> =
        std::fs::read_dir(a.path().join("metrics")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    for name in &names {
        let x = std::fs::read(a.path().join("metrics").join(name)).unwrap();
        let y = std::fs::read(b.path().join("metrics").join(name)).unwrap();
        if x != y {
            return verdict(false, format!("{name} differs between invocations"));
        }
    }
    verdict(names.len() == 5, format!("{} metric CSVs byte-identical across two runs", names.len()))
}

// ---------------------------------------------------------------- runner

/// `shared` is time already spent on work this criterion depends on.
fn run(id: usize, name: &str, budget: Duration, shared: Duration, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed() + shared;
    let v = outcome.unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let pass = v.pass && elapsed <= budget;
    let over = if elapsed > budget { format!(" [over budget {}]", fmt_secs(budget)) } else { String::new() };
    println!("criterion {id:>2} {:<24} {} ({}){over}: {}", name, if pass { "PASS" } else { "FAIL" }, fmt_secs(elapsed), v.detail);
    pass
}

fn main() {
    let mut passed = Vec::new();
    let min = |m: u64| Duration::from_secs(60 * m);
    passed.push(run(1, "estimator exactness", Duration::from_secs(10), Duration::ZERO, estimator_exactness));
    passed.push(run(2, "metric collapse", Duration::from_secs(1), Duration::ZERO, metric_collapse));
    passed.push(run(3, "gradient integrity", min(2), Duration::ZERO, gradient_integrity));
    passed.push(run(4, "ib degeneracy", min(5), Duration::ZERO, ib_degeneracy));
    passed.push(run(5, "kl correctness", min(1), Duration::ZERO, kl_correctness));
    passed.push(run(6, "min-k correctness", min(1), Duration::ZERO, min_k_correctness));

    let start = Instant::now();
    let desk = panic::catch_unwind(desk_run);
    match &desk {
        Ok(d) => println!("desk experiment: {} seeds in {} ({} stages reused)", d.results.len(), fmt_secs(d.elapsed), d.reused),
        Err(_) => println!("desk experiment failed after {}", fmt_secs(start.elapsed())),
    }
    type Directional = (usize, &'static str, Duration, fn(&Desk) -> Verdict);
    let directional: [Directional; 5] = [
        (7, "barrier reproduction", min(30), barrier),
        (8, "pruning effect", min(45), pruning_effect),
        (9, "ib-ft headline direction", min(60), headline),
        (10, "temperature robustness", min(60), temperature_robustness),
        (11, "geometry direction", min(10), geometry_direction),
    ];
    for (id, name, budget, f) in directional {
        // criterion 11 recomputes its own work from the checkpoints
        let shared = |d: &Desk| if id == 11 { Duration::ZERO } else { d.elapsed };
        passed.push(match &desk {
            Ok(d) => run(id, name, budget, shared(d), || f(d)),
            Err(_) => run(id, name, budget, start.elapsed(), || verdict(false, "desk experiment failed")),
        });
    }
    passed.push(run(12, "determinism", min(10), Duration::ZERO, determinism));

    let n = passed.iter().filter(|&&p| p).count();
    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    println!("acceptance: {n}/{} criteria passed; failed: {failed:?}", passed.len());
    let strict = std::env::var("IBFT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let fatal: Vec<usize> = failed.into_iter().filter(|id| strict || !DIRECTIONAL.contains(id)).collect();
    if !fatal.is_empty() {
        println!("acceptance: fatal failures {fatal:?}");
        std::process::exit(1);
    }
}
