use std::collections::{BTreeMap, BTreeSet};

use ibft_core::geometry::{angle_degrees, angle_degrees_acos, l2_distance};
use ibft_core::memorization::{self, min_k_from_nlls, min_k_prob_score, ScoreMode};
use ibft_core::stackcalc::{self, Example};
use ibft_core::{TransformerConfig, TransformerModel};
use proptest::prelude::*;

fn small() -> TransformerConfig {
    TransformerConfig { vocab_size: 40, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 40, tap_layer: 1 }
}

/// Response NLLs computed from raw logits, independently of the scoring module.
fn response_nlls(model: &TransformerModel, ex: &Example) -> Vec<f64> {
    let context = ex.problem.context();
    let tokens: Vec<usize> = context.iter().chain(&ex.response).copied().collect();
    let out = model.forward(&tokens[..tokens.len() - 1]).unwrap();
    let v = model.config().vocab_size;
    (context.len() - 1..tokens.len() - 1)
        .map(|r| {
            let row = &out.logits.data()[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[tokens[r + 1]]
        })
        .collect()
}

#[test]
fn full_k_is_the_mean_response_nll() {
    let model = TransformerModel::init(small(), 9).unwrap();
    for ex in stackcalc::generate_dataset(20, 4) {
        let nlls = response_nlls(&model, &ex);
        let mut sorted = nlls.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        assert_eq!(min_k_prob_score(&model, &ex, 100.0).unwrap(), mean);
        let direct = nlls.iter().sum::<f64>() / nlls.len() as f64;
        assert!((direct - mean).abs() < 1e-13);
    }
}

#[test]
fn uniform_model_scores_ln_vocab() {
    let mut model = TransformerModel::init(small(), 1).unwrap();
    for name in ["head.w", "head.b"] {
        model.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let ln_v = (small().vocab_size as f64).ln();
    for ex in stackcalc::generate_dataset(10, 2) {
        for k in [1.0, 20.0, 50.0, 100.0] {
            for mode in [ScoreMode::Response, ScoreMode::FullSequence] {
                let s = memorization::min_k_prob_score_with(&model, &ex, k, mode).unwrap();
                assert!((s - ln_v).abs() < 1e-12, "{s} vs {ln_v}");
            }
        }
    }
}

fn nll_list() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..12.0, 1..40)
}

proptest! {
    #[test]
    fn selection_ignores_token_order(nlls in nll_list(), k in 1.0f64..=100.0, seed in any::<u64>()) {
        let mut shuffled = nlls.clone();
        let n = shuffled.len();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(min_k_from_nlls(&nlls, k).unwrap().to_bits(), min_k_from_nlls(&shuffled, k).unwrap().to_bits());
    }

    #[test]
    fn score_is_a_mean_of_the_largest_values(nlls in nll_list(), k in 1.0f64..=100.0) {
        let s = min_k_from_nlls(&nlls, k).unwrap();
        let max = nlls.iter().cloned().fold(f64::MIN, f64::max);
        let mean = nlls.iter().sum::<f64>() / nlls.len() as f64;
        prop_assert!(s <= max + 1e-12 && s >= mean - 1e-12);
    }

    #[test]
    fn smaller_k_never_lowers_the_score(nlls in nll_list(), k in 1.0f64..=99.0) {
        prop_assert!(min_k_from_nlls(&nlls, k).unwrap() >= min_k_from_nlls(&nlls, k + 1.0).unwrap() - 1e-12);
    }

    #[test]
    fn pruning_twice_equals_pruning_the_combined_count(
        scores in prop::collection::vec(0.0f64..5.0, 10..60),
        r1 in 0.0f64..0.5,
        r2 in 0.0f64..0.5,
    ) {
        let data = stackcalc::generate_dataset(scores.len(), 3);
        let map: BTreeMap<u64, f64> = data.iter().zip(&scores).map(|(e, &s)| (e.id(), s)).collect();
        let once = memorization::prune_by_scores(&data, &map, r1).unwrap();
        let twice = memorization::prune_by_scores(&once, &map, r2).unwrap();
        let n = data.len();
        let c1 = (r1 * n as f64 + 1e-9).floor() as usize;
        let c2 = (r2 * (n - c1) as f64 + 1e-9).floor() as usize;
        let mut ranked: Vec<(f64, u64)> = map.iter().map(|(&id, &s)| (s, id)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let dropped: BTreeSet<u64> = ranked.iter().take(c1 + c2).map(|p| p.1).collect();
        let expected: Vec<u64> = data.iter().map(Example::id).filter(|id| !dropped.contains(id)).collect();
        let got: Vec<u64> = twice.iter().map(Example::id).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn distances_and_angles_obey_the_triangle_inequality(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
        c in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        prop_assert!(l2_distance(&a, &c) <= l2_distance(&a, &b) + l2_distance(&b, &c) + 1e-12);
        prop_assert_eq!(l2_distance(&a, &b), l2_distance(&b, &a));
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3 && norm(&c) > 1e-3);
        prop_assert!(angle_degrees(&a, &c) <= angle_degrees(&a, &b) + angle_degrees(&b, &c) + 1e-9);
        prop_assert!((0.0..=180.0).contains(&angle_degrees(&a, &b)));
        prop_assert!((angle_degrees(&a, &b) - angle_degrees_acos(&a, &b)).abs() < 1e-5);
        let scaled: Vec<f64> = a.iter().map(|x| 2.5 * x).collect();
        prop_assert!(angle_degrees(&a, &scaled) < 1e-9);
    }
}
