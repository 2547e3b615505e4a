//! Crude component timing of the memorization inner loop at desk scale.

use fastmem_core::memorizer::{
    fast_path_gradients, fast_path_losses, AdaptationSession, MemorizationConfig, PromptState,
};
use fastmem_core::model::{ModelConfig, ModelParams, ModelView};
use fastmem_core::template::{Role, TokenizedPrompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let config = ModelConfig::desk_default();
    let params = ModelParams::<f32>::init(config.clone(), 42);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens: Vec<u32> =
        (0..200).map(|_| rng.random_range(0..config.vocab_size as u32)).collect();
    let mut mask = vec![true; tokens.len()];
    mask[0] = false;
    let prompt = TokenizedPrompt { tokens, loss_mask: mask, role: Role::Memorization };

    let view = ModelView::base(&params);
    let t = Instant::now();
    let state = PromptState::prepare(&view, &prompt).unwrap();
    println!("prepare: {:.3}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    for _ in 0..10 {
        fast_path_gradients(&view, &state, 0.1).unwrap();
    }
    println!("10x full-span fast_path_gradients (lambda 0.1): {:.3}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    for _ in 0..10 {
        fast_path_gradients(&view, &state, 0.0).unwrap();
    }
    println!("10x full-span fast_path_gradients (lambda 0.0): {:.3}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    for _ in 0..10 {
        fast_path_losses(&view, &state, 0.1).unwrap();
    }
    println!("10x full-span fast_path_losses: {:.3}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut session = AdaptationSession::new(&params, 1).unwrap();
    let mc = MemorizationConfig::default();
    session.memorize(std::slice::from_ref(&prompt), &mc).unwrap();
    println!("memorize default (10 epochs): {:.3}s", t.elapsed().as_secs_f64());
}
