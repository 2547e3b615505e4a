//! Allocation high-water probe for the memorization phases at desk scale.

use fastmem_core::memorizer::{AdaptationSession, MemorizationConfig, PromptState};
use fastmem_core::memtrack::{self, CountingAllocator};
use fastmem_core::model::{forward_residual, ModelConfig, ModelParams, ModelView};
use fastmem_core::template::{Role, TokenizedPrompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOCATOR: CountingAllocator = CountingAllocator;

fn mib(b: usize) -> f64 {
    b as f64 / (1024.0 * 1024.0)
}

fn main() {
    memtrack::mark_installed();
    let config = ModelConfig::desk_default();
    let params = ModelParams::<f32>::init(config.clone(), 42);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens: Vec<u32> =
        (0..500).map(|_| rng.random_range(0..config.vocab_size as u32)).collect();
    let mut mask = vec![true; tokens.len()];
    mask[0] = false;
    let prompt = TokenizedPrompt { tokens, loss_mask: mask, role: Role::Memorization };

    println!("baseline live {:.2} MiB", mib(memtrack::current_bytes()));

    memtrack::reset_peak();
    let view = ModelView::base(&params);
    let (y, cache) = forward_residual(&view, &prompt.tokens).unwrap();
    println!(
        "forward_residual peak {:.2} MiB, live after {:.2} MiB",
        mib(memtrack::peak_bytes()),
        mib(memtrack::current_bytes())
    );
    drop((y, cache));

    memtrack::reset_peak();
    let state = PromptState::prepare(&view, &prompt).unwrap();
    println!(
        "prepare peak {:.2} MiB, live after {:.2} MiB",
        mib(memtrack::peak_bytes()),
        mib(memtrack::current_bytes())
    );
    drop(state);

    memtrack::reset_peak();
    let mut session = AdaptationSession::new(&params, 1).unwrap();
    let mc = MemorizationConfig { epochs: 1, ..MemorizationConfig::default() };
    session.memorize(std::slice::from_ref(&prompt), &mc).unwrap();
    println!(
        "memorize(1 epoch) peak {:.2} MiB, live after {:.2} MiB",
        mib(memtrack::peak_bytes()),
        mib(memtrack::current_bytes())
    );
}
