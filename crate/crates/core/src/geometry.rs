//! Distances and angles between example representations.
//!
//! An example is represented by its tap-layer hidden state averaged over the
//! positions that predict response tokens.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memorization::{histogram, median, Histogram};
use crate::rng::{self, tag};
use crate::stackcalc::Example;
use crate::transformer::TransformerModel;

pub const DEFAULT_PAIRS: usize = 10_000;
pub const DEFAULT_FRACTION: f64 = 0.25;
pub const BINS: usize = 50;

pub fn example_representation(model: &TransformerModel, example: &Example) -> Result<Vec<f64>> {
    let seq = example.sequence()?;
    let out = model.forward(seq.inputs())?;
    let h = &out.hidden_states[model.config().tap_layer - 1];
    let d = model.config().d_model;
    let rows = seq.scored_rows();
    let count = rows.len() as f64;
    let mut acc = vec![0.0; d];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(h.row(r)) {
            *a += v;
        }
    }
    debug_assert_eq!(h.shape()[1], d);
    Ok(acc.into_iter().map(|v| v / count).collect())
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Angle in degrees, as `2·atan2(|â − b̂|, |â + b̂|)` on the unit vectors.
/// This equals the arccosine of the cosine but does not lose precision near
/// 0° and 180°, where `acos` turns one ulp of rounding into ~1e-6 degrees.
/// Zero vectors are treated as aligned with everything.
pub fn angle_degrees(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees().clamp(0.0, 180.0)
}

/// Arccosine of the clamped cosine, for cross-checking [`angle_degrees`].
pub fn angle_degrees_acos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub a: u64,
    pub b: u64,
    pub distance: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryEntry {
    pub model_tag: String,
    pub pairs: Vec<PairSample>,
    pub mean_distance: f64,
    pub median_distance: f64,
    pub mean_angle: f64,
    pub median_angle: f64,
    pub distance_histogram: Histogram,
    pub angle_histogram: Histogram,
}

/// Statistics over `pair_count` uniformly drawn (a, b) pairs of precomputed vectors.
pub fn paired_stats_from_vectors(
    vectors: &BTreeMap<u64, Vec<f64>>,
    group_a: &[u64],
    group_b: &[u64],
    pair_count: usize,
    seed: u64,
    model_tag: &str,
) -> Result<GeometryEntry> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::invalid("empty group"));
    }
    if pair_count == 0 {
        return Err(Error::config("pair_count", "must be at least 1"));
    }
    let get = |id: &u64| vectors.get(id).ok_or_else(|| Error::invalid(format!("no representation for problem {id}")));
    let mut rng = rng::stream(seed, &[tag::PAIRS]);
    let mut pairs = Vec::with_capacity(pair_count);
    for _ in 0..pair_count {
        let a = group_a[rng.random_range(0..group_a.len())];
        let b = group_b[rng.random_range(0..group_b.len())];
        let (va, vb) = (get(&a)?, get(&b)?);
        pairs.push(PairSample { a, b, distance: l2_distance(va, vb), angle: angle_degrees(va, vb) });
    }
    let d: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
    let t: Vec<f64> = pairs.iter().map(|p| p.angle).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(GeometryEntry {
        model_tag: model_tag.to_string(),
        mean_distance: mean(&d),
        median_distance: median(&d),
        mean_angle: mean(&t),
        median_angle: median(&t),
        distance_histogram: histogram(&d, BINS),
        angle_histogram: histogram(&t, BINS),
        pairs,
    })
}

pub fn paired_stats(
    model: &TransformerModel,
    examples: &[Example],
    group_a: &[u64],
    group_b: &[u64],
    pair_count: usize,
    seed: u64,
    model_tag: &str,
) -> Result<GeometryEntry> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::invalid("empty group"));
    }
    let wanted: std::collections::BTreeSet<u64> = group_a.iter().chain(group_b).copied().collect();
    let mut vectors = BTreeMap::new();
    for ex in examples.iter().filter(|e| wanted.contains(&e.id())) {
        vectors.insert(ex.id(), example_representation(model, ex)?);
    }
    paired_stats_from_vectors(&vectors, group_a, group_b, pair_count, seed, model_tag)
}

impl GeometryEntry {
    pub fn pairs_csv(&self) -> String {
        let mut s = String::from("model_tag,a,b,distance,angle\n");
        for p in &self.pairs {
            s.push_str(&format!("{},{},{},{:?},{:?}\n", self.model_tag, p.a, p.b, p.distance, p.angle));
        }
        s
    }
}
