use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::saelab::ConceptScore;
use crate::synthworld::{gen_image, Color, Concept};

fn random_sae(layer: usize, d: usize, s: usize, seed: u64) -> SaeWeights {
    let mut sae = SaeWeights::zeros(layer, d, s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in sae.weights.flat_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    sae
}

/// Per-row loops over the raw weights in f64.
fn naive(sae: &SaeWeights, rows: &[f32]) -> (f64, f64) {
    let (d, s) = (sae.d_model(), sae.d_sae());
    let g = |id| sae.weights.get(id).iter().map(|v| *v as f64).collect::<Vec<f64>>();
    let (we, be, wd, bd) = (g(sae.arch.w_enc), g(sae.arch.b_enc), g(sae.arch.w_dec), g(sae.arch.b_dec));
    let n = rows.len() / d;
    let (mut err, mut l0) = (0.0, 0usize);
    for r in 0..n {
        let x: Vec<f64> = rows[r * d..(r + 1) * d].iter().map(|v| *v as f64).collect();
        let mut f = vec![0.0; s];
        for (k, fk) in f.iter_mut().enumerate() {
            let mut a = be[k];
            for j in 0..d {
                a += (x[j] - bd[j]) * we[j * s + k];
            }
            *fk = a.max(0.0);
        }
        l0 += f.iter().filter(|v| **v > 0.0).count();
        for j in 0..d {
            let mut xh = bd[j];
            for k in 0..s {
                xh += f[k] * wd[k * d + j];
            }
            err += (x[j] - xh).powi(2);
        }
    }
    (err / n as f64, l0 as f64 / (n * s) as f64)
}

fn rows_of(layer: usize, d: usize, rows: Vec<f32>) -> GroupRows {
    GroupRows { group: TokenGroup::VlmVisual, layer, d_model: d, rows }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn metrics_match_naive_loops(seed in any::<u64>(), n in 1usize..=10, d in 1usize..6, s in 1usize..9) {
        let sae = random_sae(2, d, s, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let rows: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = rows_of(2, d, rows.clone());
        let (e, sp) = naive(&sae, &rows);
        prop_assert!((recon_error(&g, &sae).unwrap() - e).abs() < 1e-6);
        prop_assert!((sparsity(&g, &sae).unwrap() - sp).abs() < 1e-6);
    }

    #[test]
    fn top_k_matches_sort_oracle(scores in prop::collection::vec(0u8..6, 1..20), keep_bits in any::<u32>(), k in 0usize..5) {
        let scores: Vec<f32> = scores.into_iter().map(|v| v as f32).collect();
        let mask = FeatureFilterMask {
            layer: 1,
            keep: (0..scores.len()).map(|i| keep_bits >> (i % 32) & 1 == 1).collect(),
            image_freq_max: 0.05,
            corpus_freq_max: 0.005,
        };
        let got = top_k_features(&scores, &mask, k, 0.0);
        // Oracle: repeatedly take the first index holding the largest remaining score.
        let mut left: Vec<usize> = (0..scores.len()).filter(|&i| mask.keep[i] && scores[i] > 0.0).collect();
        let mut want = vec![];
        while want.len() < k && !left.is_empty() {
            let best = left.iter().copied().fold(left[0], |b, i| if scores[i] > scores[b] { i } else { b });
            want.push(best);
            left.retain(|&i| i != best);
        }
        prop_assert_eq!(got, want);
    }
}

#[test]
fn perfect_reconstruction_gives_zero_error() {
    // Two features per axis, +e_j and -e_j, reconstruct any input exactly.
    let d = 3;
    let mut sae = SaeWeights::zeros(1, d, 2 * d);
    let (we, wd) = (sae.arch.w_enc, sae.arch.w_dec);
    for j in 0..d {
        sae.weights.get_mut(we)[j * 2 * d + j] = 1.0;
        sae.weights.get_mut(we)[j * 2 * d + d + j] = -1.0;
        sae.weights.get_mut(wd)[j * d + j] = 1.0;
        sae.weights.get_mut(wd)[(d + j) * d + j] = -1.0;
    }
    let g = rows_of(1, d, vec![0.5, -1.0, 2.0, -0.25, 0.0, 1.5]);
    assert_eq!(recon_error(&g, &sae).unwrap(), 0.0);
}

#[test]
fn two_hand_computed_rows() {
    // Zero SAE: reconstruction is zero, so E = mean squared norm.
    let sae = SaeWeights::zeros(1, 2, 4);
    let g = rows_of(1, 2, vec![3.0, 4.0, 1.0, 0.0]);
    assert_eq!(recon_error(&g, &sae).unwrap(), (25.0 + 1.0) / 2.0);
    assert_eq!(sparsity(&g, &sae).unwrap(), 0.0);
}

#[test]
fn dense_codes_give_unit_sparsity() {
    let mut sae = SaeWeights::zeros(1, 2, 4);
    let be = sae.arch.b_enc;
    sae.weights.get_mut(be).fill(1.0);
    let g = rows_of(1, 2, vec![0.0; 6]);
    assert_eq!(sparsity(&g, &sae).unwrap(), 1.0);
}

#[test]
fn empty_group_and_layer_mismatch() {
    let sae = SaeWeights::zeros(1, 2, 4);
    assert!(matches!(recon_error(&rows_of(1, 2, vec![]), &sae), Err(Error::EmptyGroup(_))));
    assert!(matches!(sparsity(&rows_of(3, 2, vec![1.0, 2.0]), &sae), Err(Error::LayerMismatch { sae: 1, acts: 3 })));
}

#[test]
fn accumulator_is_order_free_of_batching() {
    let sae = random_sae(1, 4, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<f32> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut whole = GroupAccumulator::new(4, 6);
    let c = sae.encode_batch(&rows);
    whole.add(&rows, &c, &sae.decode_batch(&c));
    let mut parts = GroupAccumulator::new(4, 6);
    for r in rows.chunks(4) {
        let c = sae.encode(r);
        parts.add(r, &c, &sae.decode(&c));
    }
    assert!((whole.recon_error().unwrap() - parts.recon_error().unwrap()).abs() < 1e-5);
    assert_eq!(whole.sparsity().unwrap(), parts.sparsity().unwrap());
    assert!(whole.fvu().unwrap() > 0.0);
}

fn example(answer: &str, instruction: &str) -> MmExample {
    MmExample { image: gen_image(1, 0.4), caption: String::new(), instruction: instruction.into(), answer: answer.into() }
}

#[test]
fn baseline_prompt_text_and_length() {
    let tok = Tokenizer::new();
    let e = example("a red circle", "What shape is at top?");
    let b = build_baseline(&tok, &e).unwrap();
    assert_eq!(b[0], BOS);
    assert_eq!(tok.detokenize(&b[1..]), "Consider the following information: a red circle What shape is at top?");
    let want = tok.tokenize(BASELINE_PREFIX).len() + tok.tokenize(&e.answer).len() + tok.tokenize(&e.instruction).len() + 1;
    assert_eq!(b.len(), want);
    assert!(build_baseline(&tok, &example(" ", "What shape is at top?")).is_err());
}

#[test]
fn filter_boundaries_are_strict() {
    // 100 images: 5 active is exactly 5% and kept, 6 is masked.
    let d_sae = 4;
    let mk = |active: usize| -> Vec<Vec<f32>> {
        (0..100).map(|i| vec![if i < active { 1.0 } else { 0.0 }; d_sae]).collect()
    };
    let f5 = image_frequencies(&mk(5), d_sae, 0.0);
    let f6 = image_frequencies(&mk(6), d_sae, 0.0);
    let corpus = [0.0, 0.005, 0.005 + 1e-9, 1.0];
    let m5 = filter_features(1, &f5, &corpus, 0.05, 0.005).unwrap();
    assert_eq!(m5.keep, vec![true, true, false, false]);
    let m6 = filter_features(1, &f6, &corpus, 0.05, 0.005).unwrap();
    assert_eq!(m6.keep, vec![false; 4]);
    let all = image_frequencies(&vec![vec![2.0; d_sae]; 10], d_sae, 0.0);
    assert!(filter_features(1, &all, &[0.0; 4], 0.05, 0.005).unwrap().keep.iter().all(|k| !k));
    let none = image_frequencies(&vec![vec![0.0; d_sae]; 10], d_sae, 0.0);
    assert!(filter_features(1, &none, &[0.0; 4], 0.05, 0.005).unwrap().keep.iter().all(|k| *k));
}

#[test]
fn top_k_planted() {
    let mask = FeatureFilterMask { layer: 1, keep: vec![true, true, false, true, true], image_freq_max: 0.05, corpus_freq_max: 0.005 };
    // Two visual rows; feature 2 is the strongest but masked.
    let codes = [0.1, 0.0, 9.0, 0.5, 0.0, 0.7, 0.2, 0.0, 0.5, 0.0];
    let s = feature_scores(&codes, 5, Ranking::Max);
    assert_eq!(top_k_features(&s, &mask, 3, 0.0), vec![0, 3, 1]);
    let one = feature_scores(&[0.0, 0.0, 0.0, 2.0, 0.0], 5, Ranking::Max);
    assert_eq!(top_k_features(&one, &mask, 3, 0.0), vec![3]);
    let sum = feature_scores(&codes, 5, Ranking::Sum);
    assert!((sum[3] - 1.0).abs() < 1e-6);
}

fn desc(feature: usize, concepts: &[&str]) -> FeatureDescription {
    FeatureDescription {
        feature,
        frequency: 0.001,
        described: !concepts.is_empty(),
        n_contexts: 50,
        concepts: concepts.iter().map(|c| ConceptScore { concept: c.to_string(), precision: 1.0, support: 50 }).collect(),
    }
}

#[test]
fn alignment_planted() {
    let red = Concept::Color(Color::Red).label();
    let descs = vec![desc(0, &[&red]), desc(1, &[])];
    let mut all_red = ConceptSet::new();
    all_red.insert(Concept::Color(Color::Red));
    let tops = vec![vec![0], vec![1, 0]];
    assert_eq!(alignment_rate(&tops, &descs, &[all_red, all_red]).unwrap(), 1.0);
    let undescribed = vec![desc(0, &[]), desc(1, &[])];
    assert_eq!(alignment_rate(&tops, &undescribed, &[all_red, all_red]).unwrap(), 0.0);
    assert_eq!(alignment_rate(&[vec![1]], &descs, &[all_red]).unwrap(), 0.0);
}

#[test]
fn convergence_planted() {
    let layers = [1, 2, 3, 4, 5, 6, 7, 8];
    let rate = [0.0, 0.05, 0.1, 0.3, 0.6, 0.85, 0.9, 0.88];
    let ratio = [5.0, 4.0, 3.0, 2.0, 1.6, 1.4, 1.2, 1.1];
    assert_eq!(convergence_layer(&layers, &rate, &ratio, 0.9, 1.5), Some(6));
    // A relapse at the last layer pushes convergence out entirely.
    let mut late = ratio;
    late[7] = 1.6;
    assert_eq!(convergence_layer(&layers, &rate, &late, 0.9, 1.5), None);
    assert_eq!(convergence_layer(&layers, &[0.0; 8], &ratio, 0.9, 1.5), None);
}

#[test]
fn spearman_against_hand_values() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.3, 0.9]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    // Ranks of y with a tie: [1, 2.5, 2.5, 4]; rho = 4.5 / sqrt(5 * 4.5).
    let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 1.0, 2.0]);
    assert!((r - 4.5 / (5.0f64 * 4.5).sqrt()).abs() < 1e-12);
    assert!(spearman(&[1.0, 2.0], &[0.0, 0.0]).is_nan());
}
