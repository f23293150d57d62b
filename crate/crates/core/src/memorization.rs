//! Min-K% Prob memorization scores, split reports, and score-ranked pruning.
//!
//! A score is the mean negative log-likelihood of the least probable K% of
//! tokens. Lower scores mean the model finds the example unsurprising
//! everywhere, i.e. stronger memorization.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stackcalc::Example;
use crate::tensor::log_sum_exp;
use crate::transformer::{Sequence, TransformerModel};

pub const DEFAULT_K: f64 = 20.0;
pub const QUANTILES: [f64; 5] = [5.0, 25.0, 50.0, 75.0, 95.0];
pub const HISTOGRAM_BINS: usize = 50;

/// Which tokens are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Response tokens, conditioned on the prompt.
    #[default]
    Response,
    /// Every token after the first.
    FullSequence,
}

/// Per-token negative log-likelihoods for the scored tokens of `seq`.
pub fn token_nlls(model: &TransformerModel, seq: &Sequence, mode: ScoreMode) -> Result<Vec<f64>> {
    let out = model.forward(seq.inputs())?;
    let v = model.config().vocab_size;
    let inputs = seq.inputs().len();
    let (rows, targets) = match mode {
        ScoreMode::Response => (seq.scored_rows(), seq.targets().to_vec()),
        ScoreMode::FullSequence => (0..inputs, seq.tokens()[1..].to_vec()),
    };
    let logits = out.logits.data();
    Ok(rows
        .zip(targets)
        .map(|(r, t)| {
            let row = &logits[r * v..(r + 1) * v];
            log_sum_exp(row) - row[t]
        })
        .collect())
}

fn check_k(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::config("k", format!("must lie in (0, 100], got {k}")));
    }
    Ok(())
}

/// Number of selected tokens, `⌈K/100 · len⌉`. The guard keeps exact
/// products such as `20/100 · 10` from rounding up to 3.
pub fn selected_count(k: f64, len: usize) -> usize {
    let raw = k / 100.0 * len as f64;
    ((raw - 1e-9).ceil() as usize).clamp(1, len)
}

/// Min-K% score of a list of token NLLs. Selection takes the largest NLLs,
/// ties to the earlier position, and sums them in sorted order so that the
/// result depends only on the multiset of values.
pub fn min_k_from_nlls(nlls: &[f64], k: f64) -> Result<f64> {
    check_k(k)?;
    if nlls.is_empty() {
        return Err(Error::invalid("empty response"));
    }
    let mut order: Vec<usize> = (0..nlls.len()).collect();
    order.sort_by(|&a, &b| nlls[b].total_cmp(&nlls[a]).then(a.cmp(&b)));
    let take = selected_count(k, nlls.len());
    let sum: f64 = order[..take].iter().map(|&i| nlls[i]).sum();
    Ok(sum / take as f64)
}

pub fn min_k_prob_score(model: &TransformerModel, example: &Example, k: f64) -> Result<f64> {
    min_k_prob_score_with(model, example, k, ScoreMode::Response)
}

pub fn min_k_prob_score_with(model: &TransformerModel, example: &Example, k: f64, mode: ScoreMode) -> Result<f64> {
    check_k(k)?;
    let nlls = token_nlls(model, &example.sequence()?, mode)?;
    min_k_from_nlls(&nlls, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub problem_id: u64,
    pub score: f64,
    pub contaminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// `(percent, value)` pairs.
    pub quantiles: Vec<(f64, f64)>,
    pub mean: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub k: f64,
    pub mode: ScoreMode,
    pub model_tag: String,
    pub split_tag: String,
    pub entries: Vec<ScoreEntry>,
    pub summary: Summary,
}

/// Linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], percent: f64) -> f64 {
    let pos = percent / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 50.0)
}

pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
        counts[b] += 1;
    }
    Histogram { lo, hi, counts }
}

fn summarize(scores: &[f64]) -> Summary {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Summary {
        quantiles: QUANTILES.iter().map(|&p| (p, quantile(&sorted, p))).collect(),
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
        histogram: histogram(scores, HISTOGRAM_BINS),
    }
}

/// Scores every example of a split.
pub fn score_split(
    model: &TransformerModel,
    dataset: &[Example],
    k: f64,
    mode: ScoreMode,
    contaminated: &BTreeSet<u64>,
    model_tag: &str,
    split_tag: &str,
) -> Result<MemorizationReport> {
    check_k(k)?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let entries = dataset
        .iter()
        .map(|ex| {
            Ok(ScoreEntry {
                problem_id: ex.id(),
                score: min_k_prob_score_with(model, ex, k, mode)?,
                contaminated: contaminated.contains(&ex.id()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = entries.iter().map(|e| e.score).collect();
    Ok(MemorizationReport {
        k,
        mode,
        model_tag: model_tag.to_string(),
        split_tag: split_tag.to_string(),
        entries,
        summary: summarize(&scores),
    })
}

impl MemorizationReport {
    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn median(&self) -> f64 {
        median(&self.scores())
    }

    pub fn score_map(&self) -> BTreeMap<u64, f64> {
        self.entries.iter().map(|e| (e.problem_id, e.score)).collect()
    }

    /// Ids ordered from most to least memorized, ties by id.
    pub fn ranked_ids(&self) -> Vec<u64> {
        rank(&self.score_map())
    }

    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            problem_id: u64,
            score: f64,
            contaminated: bool,
            model_tag: &'a str,
            split_tag: &'a str,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(Row {
                problem_id: e.problem_id,
                score: e.score,
                contaminated: e.contaminated,
                model_tag: &self.model_tag,
                split_tag: &self.split_tag,
            })
            .map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Reads the `problem_id` and `score` columns of a score CSV.
pub fn read_scores_csv(text: &str) -> Result<BTreeMap<u64, f64>> {
    #[derive(Deserialize)]
    struct Row {
        problem_id: u64,
        score: f64,
    }
    let mut out = BTreeMap::new();
    for row in csv::Reader::from_reader(text.as_bytes()).deserialize::<Row>() {
        let row = row.map_err(|e| Error::invalid(format!("score csv: {e}")))?;
        if out.insert(row.problem_id, row.score).is_some() {
            return Err(Error::invalid(format!("score csv: duplicate problem {}", row.problem_id)));
        }
    }
    Ok(out)
}

/// Drops the `⌊ratio·N⌋` most memorized examples, keeping survivor order.
pub fn prune_most_memorized(dataset: &[Example], report: &MemorizationReport, ratio: f64) -> Result<Vec<Example>> {
    prune_by_scores(dataset, &report.score_map(), ratio)
}

/// Ids ordered from most to least memorized, ties by id.
fn rank(scores: &BTreeMap<u64, f64>) -> Vec<u64> {
    let mut keyed: Vec<(f64, u64)> = scores.iter().map(|(&id, &s)| (s, id)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, id)| id).collect()
}

pub fn prune_by_scores(dataset: &[Example], scores: &BTreeMap<u64, f64>, ratio: f64) -> Result<Vec<Example>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config("ratio", format!("must lie in [0, 1), got {ratio}")));
    }
    let mut present = BTreeMap::new();
    for ex in dataset {
        let s = scores.get(&ex.id()).ok_or_else(|| Error::invalid(format!("problem {} missing from scores", ex.id())))?;
        present.insert(ex.id(), *s);
    }
    let drop = crate::trainer::ratio_count(ratio, dataset.len());
    let dropped: BTreeSet<u64> = rank(&present).into_iter().take(drop).collect();
    Ok(dataset.iter().filter(|e| !dropped.contains(&e.id())).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extremes {
    pub most: Vec<u64>,
    pub least: Vec<u64>,
}

/// The `⌊fraction·N⌋` lowest-scoring ids and the same number of highest-scoring ones.
pub fn partition_extremes(report: &MemorizationReport, fraction: f64) -> Result<Extremes> {
    extremes_by_scores(&report.score_map(), fraction)
}

pub fn extremes_by_scores(scores: &BTreeMap<u64, f64>, fraction: f64) -> Result<Extremes> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::config("fraction", format!("must lie in (0, 0.5], got {fraction}")));
    }
    let n = scores.len();
    if (n as f64) < 2.0 / fraction - 1e-9 {
        return Err(Error::invalid(format!("{n} examples is fewer than 2/fraction")));
    }
    let ranked = rank(scores);
    let g = crate::trainer::ratio_count(fraction, n);
    Ok(Extremes { most: ranked[..g].to_vec(), least: ranked[n - g..].to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_worked_selection() {
        let mut nlls = vec![-(0.5f64).ln(); 8];
        nlls.push(-(0.1f64).ln());
        nlls.push(-(0.1f64).ln());
        let s = min_k_from_nlls(&nlls, 20.0).unwrap();
        assert!((s - std::f64::consts::LN_10).abs() < 1e-12);
        let all = min_k_from_nlls(&nlls, 100.0).unwrap();
        assert_eq!(all, nlls.iter().sum::<f64>() / 10.0);
    }

    #[test]
    fn selected_count_rounds_up() {
        assert_eq!(selected_count(20.0, 10), 2);
        assert_eq!(selected_count(20.0, 11), 3);
        assert_eq!(selected_count(1.0, 3), 1);
        assert_eq!(selected_count(100.0, 7), 7);
    }

    #[test]
    fn bad_k_and_empty_input() {
        assert!(min_k_from_nlls(&[1.0], 0.0).is_err());
        assert!(min_k_from_nlls(&[1.0], 100.5).is_err());
        assert!(min_k_from_nlls(&[], 20.0).is_err());
    }

    #[test]
    fn shift_raises_score_by_the_shift() {
        let nlls = [0.3, 1.7, 0.2, 2.5, 0.9];
        let shifted: Vec<f64> = nlls.iter().map(|v| v + 0.5).collect();
        let a = min_k_from_nlls(&nlls, 40.0).unwrap();
        let b = min_k_from_nlls(&shifted, 40.0).unwrap();
        assert!((b - a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quantiles_and_histogram() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(quantile(&v, 25.0), 25.0);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
        let h = histogram(&v, 50);
        assert_eq!(h.counts.iter().sum::<usize>(), 101);
        assert_eq!(h.counts[49], 3);
        assert_eq!(histogram(&[1.0, 1.0], 5).counts[0], 2);
    }
}
