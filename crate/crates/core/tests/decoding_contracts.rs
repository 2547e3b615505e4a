//! Contracts of the contrastive decoding algebra and the decode loops.

use fastmem_core::decoding::{
    cd_decode, cd_distribution, dola_decode, dola_distribution, greedy_decode, ContrastConfig,
};
use fastmem_core::model::{forward_full, ModelConfig, ModelParams, ModelView};
use fastmem_core::numeric::{stable_softmax, Distribution};
use fastmem_core::tokenizer::EOT;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_blocks: 3,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 300,
        context_window: 32,
        norm_eps: 1e-5,
    }
}

fn random_dist(rng: &mut ChaCha8Rng, len: usize) -> Distribution<f64> {
    // Probabilities well above the log floor so the algebra is exact.
    let logits: Vec<f64> = (0..len).map(|_| rng.random_range(-4.0..4.0)).collect();
    stable_softmax(&logits).unwrap()
}

#[test]
fn contrast_with_zero_alpha_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let e = random_dist(&mut rng, 12);
        let a = random_dist(&mut rng, 12);
        let out = cd_distribution(&e, &a, 0.0).unwrap();
        for (x, y) in out.probs().iter().zip(e.probs()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn contrast_of_identical_distributions_is_identity_for_any_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for alpha in [0.5, 1.0, 1.5, 2.0] {
        let e = random_dist(&mut rng, 9);
        let out = cd_distribution(&e, &e, alpha).unwrap();
        for (x, y) in out.probs().iter().zip(e.probs()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    // Log-odds identity: for any token pair,
    // log(out_i/out_j) = (1+a) log(e_i/e_j) - a log(am_i/am_j).
    #[test]
    fn contrast_log_odds_identity(seed in 0u64..10_000, alpha in 0.0f64..2.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_dist(&mut rng, 8);
        let a = random_dist(&mut rng, 8);
        let out = cd_distribution(&e, &a, alpha).unwrap();
        let total: f64 = out.probs().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        for i in 0..8 {
            for j in (i + 1)..8 {
                let lhs = (out.probs()[i] / out.probs()[j]).ln();
                let rhs = (1.0 + alpha) * (e.probs()[i] / e.probs()[j]).ln()
                    - alpha * (a.probs()[i] / a.probs()[j]).ln();
                prop_assert!((lhs - rhs).abs() <= 1e-7, "{} vs {}", lhs, rhs);
            }
        }
    }

    // Layer contrast keeps exactly the head tokens and renormalizes the
    // ratio over them.
    #[test]
    fn layer_contrast_head_and_ratio(seed in 0u64..10_000, beta in 0.05f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_dist(&mut rng, 10);
        let e = random_dist(&mut rng, 10);
        let (out, k_star) = dola_distribution(&f, &[(1, e.clone())], beta).unwrap();
        prop_assert_eq!(k_star, 1);
        let max = f.probs()[f.argmax()];
        for v in 0..10 {
            if f.probs()[v] < beta * max {
                prop_assert_eq!(out.probs()[v], 0.0, "tail token {} kept", v);
            } else {
                prop_assert!(out.probs()[v] > 0.0);
            }
        }
        // Ratio identity over surviving pairs.
        for i in 0..10 {
            for j in (i + 1)..10 {
                if out.probs()[i] > 0.0 && out.probs()[j] > 0.0 {
                    let lhs = (out.probs()[i] / out.probs()[j]).ln();
                    let rhs = (f.probs()[i] / e.probs()[i]).ln()
                        - (f.probs()[j] / e.probs()[j]).ln();
                    prop_assert!((lhs - rhs).abs() <= 1e-7);
                }
            }
        }
    }
}

#[test]
fn layer_contrast_picks_most_divergent_layer_and_breaks_ties_low() {
    let f = stable_softmax(&[3.0f64, 0.0, 0.0, 0.0]).unwrap();
    let near = stable_softmax(&[2.9f64, 0.0, 0.0, 0.0]).unwrap();
    let far = stable_softmax(&[-3.0f64, 2.0, 2.0, 2.0]).unwrap();
    let (_, k_star) =
        dola_distribution(&f, &[(1, near.clone()), (2, far.clone())], 0.1).unwrap();
    assert_eq!(k_star, 2);

    // Identical candidates tie; the smallest layer index must win.
    let (_, k_tie) =
        dola_distribution(&f, &[(3, far.clone()), (1, far.clone()), (2, far)], 0.1).unwrap();
    assert_eq!(k_tie, 1);
}

#[test]
fn greedy_decode_matches_full_forward_argmax() {
    let params = ModelParams::<f32>::init(tiny_config(), 51);
    let view = ModelView::base(&params);
    let prompt = vec![1u32, 9, 33, 60, 7];
    let out = greedy_decode(&view, &prompt, 8).unwrap();

    // Oracle: re-derive each step with a fresh full forward pass.
    let mut seq = prompt.clone();
    for &tok in &out.tokens {
        let (logits, _) = forward_full(&view, &seq, false).unwrap();
        let dist = stable_softmax(logits.row(seq.len() - 1)).unwrap();
        assert_eq!(dist.argmax() as u32, tok);
        seq.push(tok);
    }
    assert!(out.tokens.len() <= 8);
    assert!(out.steps.len() >= out.tokens.len());
    for s in &out.steps {
        assert_eq!(s.top.len(), 5.min(300));
        // Top list is sorted by probability.
        for w in s.top.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }
}

#[test]
fn contrast_decode_with_zero_alpha_equals_greedy() {
    let params = ModelParams::<f32>::init(tiny_config(), 53);
    let view = ModelView::base(&params);
    let prompt = vec![4u32, 200, 31, 77];
    let greedy = greedy_decode(&view, &prompt, 6).unwrap();
    let contrast = cd_decode(&view, &view, &prompt, 6, 0.0).unwrap();
    assert_eq!(greedy.tokens, contrast.tokens);
}

#[test]
fn decode_stops_at_end_of_text() {
    let params = ModelParams::<f32>::init(tiny_config(), 57);
    let view = ModelView::base(&params);
    // Whatever gets generated, a decoded stream never contains EOT.
    for seed_tok in [1u32, 50, 120, 250] {
        let out = greedy_decode(&view, &[seed_tok], 20).unwrap();
        assert!(out.tokens.iter().all(|&t| t != EOT));
    }
}

#[test]
fn dola_decode_runs_and_reports_layers() {
    let params = ModelParams::<f32>::init(tiny_config(), 59);
    let view = ModelView::base(&params);
    let config = ContrastConfig::default();
    let out = dola_decode(&view, &[5u32, 9, 13], 6, &config).unwrap();
    for s in &out.steps {
        let k = s.k_star.expect("layer contrast must record k*");
        assert!((1..3).contains(&k));
    }

    // Restricting the candidate set restricts the reported layers.
    let config = ContrastConfig { candidate_layers: vec![2], ..ContrastConfig::default() };
    let out = dola_decode(&view, &[5u32, 9, 13], 6, &config).unwrap();
    for s in &out.steps {
        assert_eq!(s.k_star, Some(2));
    }
}

#[test]
fn invalid_contrast_configs_are_rejected() {
    let cfg = tiny_config();
    let bad_beta = ContrastConfig { beta: 0.0, ..ContrastConfig::default() };
    assert!(bad_beta.validate(cfg.num_blocks).is_err());
    let bad_alpha = ContrastConfig { alpha: f64::NAN, ..ContrastConfig::default() };
    assert!(bad_alpha.validate(cfg.num_blocks).is_err());
    let bad_layer = ContrastConfig { candidate_layers: vec![3], ..ContrastConfig::default() };
    assert!(bad_layer.validate(cfg.num_blocks).is_err(), "top layer is not a candidate");
}
