//! Rough throughput probe: matmul rate, one memorization call at the desk
//! default size, and one training step at a small pipeline size.

use fastmem_core::memorizer::{AdaptationSession, MemorizationConfig};
use fastmem_core::model::{backward_full, forward_training, ModelConfig, ModelParams, ModelView};
use fastmem_core::numeric::{matmul_nt, Matrix};
use fastmem_core::template::{Role, TokenizedPrompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // Raw matmul rate: (200 x 256) * (4096 x 256)^T, the readout shape.
    let a = Matrix::from_vec(200, 256, (0..200 * 256).map(|_| rng.random::<f32>()).collect());
    let b = Matrix::from_vec(4096, 256, (0..4096 * 256).map(|_| rng.random::<f32>()).collect());
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let _ = matmul_nt(&a, &b).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let flops = 2.0 * 200.0 * 256.0 * 4096.0;
    println!("matmul_nt 200x256 * 4096x256^T: {:.1} ms, {:.2} GFLOP/s", dt * 1e3, flops / dt / 1e9);

    // Desk-default memorization: 200-token prompt, 10 epochs.
    let config = ModelConfig::desk_default();
    let params = ModelParams::<f32>::init(config, 7);
    let tokens: Vec<u32> = (0..200).map(|_| rng.random_range(0..4096)).collect();
    let mut mask = vec![true; 200];
    mask[0] = false;
    let prompt = TokenizedPrompt { tokens, loss_mask: mask, role: Role::Memorization };
    let mut session = AdaptationSession::new(&params, 1).unwrap();
    let mc = MemorizationConfig::default();
    let t0 = Instant::now();
    session.memorize(std::slice::from_ref(&prompt), &mc).unwrap();
    println!("desk-default memorize (200 tok, 10 epochs): {:.2} s", t0.elapsed().as_secs_f64());

    // Small pipeline step: forward + backward at a candidate training size.
    for (k, d, d_ff, v, t_len) in [(4usize, 128usize, 512usize, 800usize, 64usize),
                                   (4, 96, 384, 800, 64),
                                   (3, 96, 384, 800, 64)] {
        let cfg = ModelConfig {
            num_blocks: k,
            d_model: d,
            n_heads: 4,
            d_ff,
            vocab_size: v,
            context_window: 256,
            norm_eps: 1e-5,
        };
        let p = ModelParams::<f32>::init(cfg, 3);
        let view = ModelView::base(&p);
        let toks: Vec<u32> = (0..t_len).map(|_| rng.random_range(0..v as u32)).collect();
        let t0 = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let trace = forward_training(&view, &toks).unwrap();
            let d_logits = Matrix::zeros(t_len, v);
            let _ = backward_full(&view, &trace, &toks, &d_logits).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        println!("train step K={k} d={d} dff={d_ff} V={v} T={t_len}: {:.1} ms/seq", dt * 1e3);
    }
}
