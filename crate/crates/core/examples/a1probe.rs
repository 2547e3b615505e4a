//! Probe for the default-config memorization criterion: perplexity ratio
//! and wall time on random 200-token snippets at the desk-default size.

use fastmem_core::memorizer::{perplexity, AdaptationSession, MemorizationConfig};
use fastmem_core::model::{ModelConfig, ModelParams};
use fastmem_core::template::{Role, TokenizedPrompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let n: usize = std::env::args().nth(1).map_or(5, |s| s.parse().unwrap());
    let config = ModelConfig::desk_default();
    let params = ModelParams::<f32>::init(config.clone(), 42);
    let mc = MemorizationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..n {
        let tokens: Vec<u32> =
            (0..200).map(|_| rng.random_range(0..config.vocab_size as u32)).collect();
        let mut mask = vec![true; tokens.len()];
        mask[0] = false;
        let prompt = TokenizedPrompt { tokens, loss_mask: mask, role: Role::Memorization };
        let mut session = AdaptationSession::new(&params, 1).unwrap();
        let before = perplexity(&session.base_view(), &prompt).unwrap();
        let t0 = Instant::now();
        session.memorize(std::slice::from_ref(&prompt), &mc).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let after = perplexity(&session.view().unwrap(), &prompt).unwrap();
        println!(
            "snippet {i}: ppl {before:.1} -> {after:.1} (ratio {:.3}), {secs:.2}s",
            after / before
        );
    }
}
