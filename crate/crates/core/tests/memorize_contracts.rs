//! Contracts of the memorization engine: the cached-hidden-state fast path
//! agrees with full backprop and with finite differences of the combined
//! loss, sessions never touch the base model, the KL anchor orders
//! solutions by lambda, and the loss mask is honored.

use fastmem_core::memorizer::{
    fast_path_gradients, fast_path_losses, full_path_gradients, loss_logit_grads, perplexity,
    AdaptationSession, MemorizationConfig, PromptState,
};
use fastmem_core::model::{
    forward_full, forward_training, FfnOverrides, ModelConfig, ModelParams, ModelView,
};
use fastmem_core::numeric::{kl_divergence, stable_softmax, FfnWeights};
use fastmem_core::template::{render_memorization, MemorizationStyle, Role, TokenizedPrompt};
use fastmem_core::tokenizer::{train_bpe, EOT};
use fastmem_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 300,
        context_window: 48,
        norm_eps: 1e-5,
    }
}

fn random_prompt(seed: u64, len: usize, vocab: usize) -> TokenizedPrompt {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
    let mut loss_mask = vec![true; len];
    loss_mask[0] = false;
    loss_mask[2] = false; // one interior masked position
    TokenizedPrompt { tokens, loss_mask, role: Role::Memorization }
}

fn max_rel_diff(a: &FfnWeights<f64>, b: &FfnWeights<f64>) -> f64 {
    let fa = a.flatten();
    let fb = b.flatten();
    fa.iter()
        .zip(&fb)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-10))
        .fold(0.0, f64::max)
}

#[test]
fn fast_path_matches_full_backward() {
    let params = ModelParams::<f64>::init(tiny_config(), 101);
    let prompt = random_prompt(1, 14, 300);
    let overrides = FfnOverrides::copy_top_n(&params, 1);
    let view = ModelView::adapted(&params, &overrides);
    let state = PromptState::prepare(&view, &prompt).unwrap();

    for lambda in [0.0, 0.1, 1.0] {
        let fast = fast_path_gradients(&view, &state, lambda).unwrap();
        let full = full_path_gradients(&view, &state, lambda, 1).unwrap();
        assert!((fast.ntp - full.ntp).abs() <= 1e-9);
        assert!((fast.kl - full.kl).abs() <= 1e-9);
        let diff = max_rel_diff(&fast.ffn_grads[0], &full.ffn_grads[0]);
        assert!(diff <= 1e-6, "lambda {lambda}: max rel grad diff {diff}");
    }
}

#[test]
fn fast_path_matches_finite_differences() {
    let params = ModelParams::<f64>::init(tiny_config(), 103);
    let prompt = random_prompt(2, 12, 300);
    let lambda = 0.1;
    let base_overrides = FfnOverrides::copy_top_n(&params, 1);
    let view = ModelView::adapted(&params, &base_overrides);
    let state = PromptState::prepare(&view, &prompt).unwrap();
    let analytic = fast_path_gradients(&view, &state, lambda).unwrap();
    let g = analytic.ffn_grads[0].flatten();

    let combined = |ov: &FfnOverrides<f64>| -> f64 {
        let v = ModelView::adapted(&params, ov);
        let (ntp, kl) = fast_path_losses(&v, &state, lambda).unwrap();
        ntp + lambda * kl
    };

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = base_overrides.ffns[0].param_count();
    for _ in 0..60 {
        let i = rng.random_range(0..n);
        let mut up = base_overrides.clone();
        let mut down = base_overrides.clone();
        let mut j = 0usize;
        up.ffns[0].for_each_param_mut(|p| {
            if j == i {
                *p += h;
            }
            j += 1;
        });
        j = 0;
        down.ffns[0].for_each_param_mut(|p| {
            if j == i {
                *p -= h;
            }
            j += 1;
        });
        let fd = (combined(&up) - combined(&down)) / (2.0 * h);
        let denom = fd.abs().max(g[i].abs()).max(1e-6);
        assert!(
            ((fd - g[i]) / denom).abs() <= 1e-3,
            "param {i}: fd {fd} vs analytic {}",
            g[i]
        );
    }
}

#[test]
fn masked_positions_have_zero_logit_gradient() {
    // A real memorization prompt: headers masked, content and the trailing
    // end-of-text scored.
    let corpus = "the quick brown fox jumps over the lazy dog. pack my box.".repeat(4);
    let vocab = train_bpe(&corpus, 280).unwrap();
    let params = ModelParams::<f64>::init(tiny_config(), 107);
    let view = ModelView::base(&params);
    let prompt =
        render_memorization(&vocab, "pack my box with jugs", MemorizationStyle::ReferenceOnly, 48)
            .unwrap();
    let state = PromptState::prepare(&view, &prompt).unwrap();
    let trace = forward_training(&view, &prompt.tokens).unwrap();
    let (d_logits, _, _) = loss_logit_grads(&view, &trace.logits, &state.frozen, 0.1).unwrap();

    let eot_pos = prompt.tokens.iter().position(|&t| t == EOT).unwrap();
    for t in 1..prompt.tokens.len() {
        let row_norm: f64 = d_logits.row(t - 1).iter().map(|v| v.abs()).sum();
        if prompt.loss_mask[t] {
            assert!(row_norm > 0.0, "scored position {t} has zero gradient");
        } else {
            assert_eq!(row_norm, 0.0, "masked position {t} has nonzero gradient");
        }
    }
    // The end-of-text target itself must carry gradient.
    assert!(prompt.loss_mask[eot_pos]);
    let eot_norm: f64 = d_logits.row(eot_pos - 1).iter().map(|v| v.abs()).sum();
    assert!(eot_norm > 0.0);
}

#[test]
fn session_restores_bit_identically_and_goes_stale() {
    let params = ModelParams::<f32>::init(tiny_config(), 109);
    let before = params.clone();
    let prompt = random_prompt(3, 16, 300);
    let probe: Vec<u32> = prompt.tokens.clone();
    let (base_logits, _) = forward_full(&ModelView::base(&params), &probe, false).unwrap();

    let mut session = AdaptationSession::new(&params, 1).unwrap();
    let config = MemorizationConfig { lr: 1e-3, epochs: 8, lambda: 0.1, adapted_blocks: 1 };
    session.memorize(std::slice::from_ref(&prompt), &config).unwrap();

    // Adaptation visibly changes the adapted view but not the base.
    let (adapted_logits, _) = forward_full(&session.view().unwrap(), &probe, false).unwrap();
    assert_ne!(adapted_logits.data(), base_logits.data());
    let (base_again, _) = forward_full(&session.base_view(), &probe, false).unwrap();
    assert_eq!(base_again.data(), base_logits.data());

    session.restore().unwrap();
    assert!(matches!(session.view(), Err(Error::StaleSession)));
    assert!(matches!(
        session.memorize(std::slice::from_ref(&prompt), &config),
        Err(Error::StaleSession)
    ));
    assert!(matches!(session.restore(), Err(Error::StaleSession)));
    drop(session);
    assert_eq!(params, before);
}

#[test]
fn memorization_lowers_perplexity_and_loss_is_monotone_in_trace() {
    let params = ModelParams::<f32>::init(tiny_config(), 113);
    let prompt = random_prompt(4, 20, 300);
    let ppl_before = perplexity(&ModelView::base(&params), &prompt).unwrap();

    let mut session = AdaptationSession::new(&params, 1).unwrap();
    let config = MemorizationConfig { lr: 3e-3, epochs: 15, lambda: 0.1, adapted_blocks: 1 };
    let trace = session.memorize(std::slice::from_ref(&prompt), &config).unwrap();
    assert_eq!(trace.epochs.len(), 16);
    assert_eq!(trace.epochs[0].epoch, 0);
    let first = trace.epochs.first().unwrap().combined;
    let last = trace.epochs.last().unwrap().combined;
    assert!(last < first, "combined loss did not drop: {first} -> {last}");

    let ppl_after = perplexity(&session.view().unwrap(), &prompt).unwrap();
    assert!(
        ppl_after < ppl_before,
        "perplexity did not drop: {ppl_before} -> {ppl_after}"
    );
}

#[test]
fn stronger_kl_anchor_keeps_predictions_closer() {
    let params = ModelParams::<f32>::init(tiny_config(), 127);
    let prompt = random_prompt(5, 18, 300);
    let (base_logits, _) =
        forward_full(&ModelView::base(&params), &prompt.tokens, false).unwrap();
    let last = base_logits.rows() - 1;
    let p0 = stable_softmax(base_logits.row(last)).unwrap();

    let mut kls = Vec::new();
    for lambda in [0.01, 0.3, 3.0] {
        let mut session = AdaptationSession::new(&params, 1).unwrap();
        let config = MemorizationConfig { lr: 3e-3, epochs: 12, lambda, adapted_blocks: 1 };
        session.memorize(std::slice::from_ref(&prompt), &config).unwrap();
        let (logits, _) =
            forward_full(&session.view().unwrap(), &prompt.tokens, false).unwrap();
        let p = stable_softmax(logits.row(last)).unwrap();
        kls.push(kl_divergence(&p0, &p).unwrap());
    }
    assert!(
        kls[0] > kls[1] && kls[1] > kls[2],
        "kl to the base should shrink as lambda grows: {kls:?}"
    );
}

#[test]
fn divergence_guard_rolls_back() {
    let params = ModelParams::<f32>::init(tiny_config(), 131);
    let prompt = random_prompt(6, 16, 300);
    let (before, _) = forward_full(&ModelView::base(&params), &prompt.tokens, false).unwrap();

    let mut session = AdaptationSession::new(&params, 1).unwrap();
    // A learning rate this size overflows the f32 activations after one
    // step, so the loss goes non-finite and the guard must roll back.
    let config = MemorizationConfig { lr: 1e30, epochs: 5, lambda: 0.1, adapted_blocks: 1 };
    match session.memorize(std::slice::from_ref(&prompt), &config) {
        Err(Error::NumericalDivergence(_)) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
    // The rollback leaves the session usable and bit-identical to the base.
    let (after, _) = forward_full(&session.view().unwrap(), &prompt.tokens, false).unwrap();
    assert_eq!(before.data(), after.data());
}

#[test]
fn duplicated_batch_equals_single_prompt() {
    let params = ModelParams::<f32>::init(tiny_config(), 137);
    let prompt = random_prompt(7, 14, 300);
    let config = MemorizationConfig { lr: 1e-3, epochs: 6, lambda: 0.1, adapted_blocks: 1 };

    let mut single = AdaptationSession::new(&params, 1).unwrap();
    let trace_single = single.memorize(std::slice::from_ref(&prompt), &config).unwrap();
    let (logits_single, _) =
        forward_full(&single.view().unwrap(), &prompt.tokens, false).unwrap();

    let pair = vec![prompt.clone(), prompt.clone()];
    let mut doubled = AdaptationSession::new(&params, 1).unwrap();
    let trace_double = doubled.memorize(&pair, &config).unwrap();
    let (logits_double, _) =
        forward_full(&doubled.view().unwrap(), &prompt.tokens, false).unwrap();

    for (a, b) in trace_single.epochs.iter().zip(&trace_double.epochs) {
        assert_eq!(a.combined, b.combined);
    }
    assert_eq!(logits_single.data(), logits_double.data());
}

#[test]
fn multi_block_adaptation_also_learns() {
    let params = ModelParams::<f32>::init(tiny_config(), 139);
    let prompt = random_prompt(8, 16, 300);
    let ppl_before = perplexity(&ModelView::base(&params), &prompt).unwrap();
    let mut session = AdaptationSession::new(&params, 2).unwrap();
    let config = MemorizationConfig { lr: 3e-3, epochs: 10, lambda: 0.1, adapted_blocks: 2 };
    session.memorize(std::slice::from_ref(&prompt), &config).unwrap();
    let ppl_after = perplexity(&session.view().unwrap(), &prompt).unwrap();
    assert!(ppl_after < ppl_before);
}
