//! Calibration probe for the toy training pipeline: trains the two-stage
//! checkpoint at a candidate configuration and prints the directional
//! quantities the acceptance gate depends on (span-perplexity ratio,
//! baseline vs memorized accuracy, format failure rates, epoch sweep).

use fastmem_core::decoding::greedy_decode;
use fastmem_core::evalgen::{
    generate_corpus, span_perplexity, CorpusConfig, EvalExample, ExampleResult, TaskKind,
};
use fastmem_core::memorizer::{perplexity, AdaptationSession, MemorizationConfig};
use fastmem_core::model::{ModelConfig, ModelParams, ModelView};
use fastmem_core::pipeline::{instruction_tune, pretrain, TrainConfig};
use fastmem_core::template::{
    render_inference, render_memorization, InferenceTask, MemorizationStyle,
};
use fastmem_core::tokenizer::{train_bpe, Vocabulary, BOS};
use std::time::Instant;

fn toy_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        num_blocks: 4,
        d_model: 128,
        n_heads: 4,
        d_ff: 512,
        vocab_size,
        context_window: 256,
        norm_eps: 1e-5,
    }
}

fn answer_with(
    view: &ModelView<f32>,
    vocab: &Vocabulary,
    reference: &str,
    question: &str,
    max_new: usize,
) -> String {
    let prompt = render_inference(vocab, reference, question, &InferenceTask::Qa, 256).unwrap();
    let out = greedy_decode(view, &prompt.tokens, max_new).unwrap();
    vocab.decode(&out.tokens)
}

/// Fraction of facts whose statement completion greedily produces the
/// right person, i.e. whether pretraining stored the mapping.
fn completion_accuracy(view: &ModelView<f32>, vocab: &Vocabulary, bundle_facts: &[fastmem_core::evalgen::Fact]) -> f64 {
    let mut hits = 0usize;
    for f in bundle_facts {
        let stem = format!("The {} of {} in {} was", f.role, f.place, f.year);
        let mut tokens = vec![BOS];
        tokens.extend(vocab.encode(&stem));
        let out = greedy_decode(view, &tokens, 8).unwrap();
        let text = vocab.decode(&out.tokens);
        if text.trim_start().starts_with(&f.person) {
            hits += 1;
        }
    }
    hits as f64 / bundle_facts.len() as f64
}

struct Scores {
    accuracy: f64,
    format_failure_rate: f64,
}

fn eval_set(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    examples: &[EvalExample],
    swapped: bool,
    memorize: Option<(&MemorizationConfig, MemorizationStyle)>,
    show: usize,
) -> Scores {
    let mut results = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        let (reference, gold) = if swapped {
            (e.swapped_reference.as_str(), e.swapped_answer.as_str())
        } else {
            (e.reference.as_str(), e.original_answer.as_str())
        };
        let text = match memorize {
            None => answer_with(&ModelView::base(params), vocab, reference, &e.question, 16),
            Some((config, style)) => {
                let prompt = render_memorization(vocab, reference, style, 256).unwrap();
                let mut session = AdaptationSession::new(params, config.adapted_blocks).unwrap();
                session.memorize(std::slice::from_ref(&prompt), config).unwrap();
                answer_with(&session.view().unwrap(), vocab, reference, &e.question, 16)
            }
        };
        if i < show {
            println!("    [{}] gold {:?} -> {:?}", e.id, gold, text);
        }
        results.push(ExampleResult::score(e.id, &text, gold));
    }
    let report = fastmem_core::evalgen::EvalReport::from_results(&results);
    Scores { accuracy: report.accuracy, format_failure_rate: report.format_failure_rate }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pretrain_steps: usize = args.get(1).map_or(400, |s| s.parse().unwrap());
    let instruct_steps: usize = args.get(2).map_or(200, |s| s.parse().unwrap());
    let n_eval: usize = args.get(3).map_or(100, |s| s.parse().unwrap());
    let mem_lr: f64 = args.get(4).map_or(3e-5, |s| s.parse().unwrap());
    let mem_epochs: usize = args.get(5).map_or(50, |s| s.parse().unwrap());

    let t0 = Instant::now();
    let corpus_config = CorpusConfig {
        num_facts: 120,
        num_eval: 500,
        fact_repetitions: 3,
        distractor_fraction: 0.5,
        choice_fraction: 0.0,
    };
    let bundle = generate_corpus(&corpus_config, 17).unwrap();
    let mut text = bundle.pretrain_docs.join(" ");
    for e in &bundle.instruction_examples {
        text.push(' ');
        text.push_str(&e.question);
    }
    text.push_str(
        " Please extract from the reference the span that best answers the question and \
         provide the answer in the following format: \"The answer is: ...\". \
         Reference: Question: The answer is:",
    );
    let vocab = train_bpe(&text, 1024).unwrap();
    println!(
        "[{:6.1}s] corpus: {} docs, vocab {}",
        t0.elapsed().as_secs_f64(),
        bundle.pretrain_docs.len(),
        vocab.size()
    );

    let dir = std::env::temp_dir().join("fastmem-calibrate");
    std::fs::create_dir_all(&dir).unwrap();
    let tuned_path = dir.join("tuned.fmem");
    let undertuned_steps = [8usize, 16, 24];
    let undertuned_path = |s: usize| dir.join(format!("undertuned{s}.fmem"));
    let params: ModelParams<f32> = if tuned_path.exists() {
        println!("[{:6.1}s] loading cached checkpoint {}", t0.elapsed().as_secs_f64(), tuned_path.display());
        fastmem_core::model::load_checkpoint(&tuned_path).unwrap()
    } else {
        let mut params = ModelParams::<f32>::init(toy_model(vocab.size()), 17);
        let pt = TrainConfig { lr: 1e-3, steps: pretrain_steps, batch: 8, seq_len: 64, seed: 17, cosine: true, holdout_fraction: 0.02, packings: 4 };
        let report = pretrain(&mut params, &vocab, &bundle.pretrain_docs, &pt).unwrap();
        println!(
            "[{:6.1}s] pretrain {} steps: {:.3} -> {:.3} (holdout {:.3} -> {:.3})",
            t0.elapsed().as_secs_f64(), report.steps, report.first_loss, report.final_loss,
            report.holdout_before.unwrap(), report.holdout_after.unwrap()
        );
        println!(
            "[{:6.1}s] fact completion accuracy after pretrain: {:.3}",
            t0.elapsed().as_secs_f64(),
            completion_accuracy(&ModelView::base(&params), &vocab, &bundle.facts)
        );

        let it = TrainConfig { lr: 5e-4, steps: instruct_steps, batch: 8, seq_len: 160, seed: 18, cosine: true, holdout_fraction: 0.0, packings: 1 };
        // Snapshot several under-tuned depths (training is deterministic,
        // so a prefix re-run lands on the same weights).
        for s in undertuned_steps {
            let mut early = params.clone();
            let short = TrainConfig { steps: s + 1, ..it.clone() };
            instruction_tune(
                &mut early, &vocab, &bundle.instruction_examples, &short,
                Some((s, undertuned_path(s).as_path())),
            ).unwrap();
        }
        let report = instruction_tune(
            &mut params, &vocab, &bundle.instruction_examples, &it, None,
        ).unwrap();
        println!(
            "[{:6.1}s] instruct {} steps: {:.3} -> {:.3}",
            t0.elapsed().as_secs_f64(), report.steps, report.first_loss, report.final_loss
        );
        fastmem_core::model::save_checkpoint(&params, &tuned_path).unwrap();
        params
    };
    println!(
        "[{:6.1}s] fact completion accuracy (tuned): {:.3}",
        t0.elapsed().as_secs_f64(),
        completion_accuracy(&ModelView::base(&params), &vocab, &bundle.facts)
    );

    // A4-i: span perplexity ratio on the tuned model.
    let view = ModelView::base(&params);
    let (mut orig, mut swap) = (Vec::new(), Vec::new());
    for e in bundle.eval_examples.iter().take(n_eval) {
        if let TaskKind::Qa = e.task {
            orig.push(span_perplexity(&view, &vocab, &e.reference, &e.original_answer).unwrap());
            swap.push(span_perplexity(&view, &vocab, &e.swapped_reference, &e.swapped_answer).unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "[{:6.1}s] span ppl original {:.2}, swapped {:.2}, ratio {:.2}",
        t0.elapsed().as_secs_f64(), mean(&orig), mean(&swap), mean(&swap) / mean(&orig)
    );

    // A4-ii: baseline vs fastmem accuracy.
    let subset: Vec<EvalExample> = bundle.eval_examples.iter().take(n_eval).cloned().collect();
    let mc = MemorizationConfig { lr: mem_lr, epochs: mem_epochs, ..MemorizationConfig::default() };
    let b_orig = eval_set(&params, &vocab, &subset, false, None, 3);
    let b_swap = eval_set(&params, &vocab, &subset, true, None, 3);
    println!(
        "[{:6.1}s] baseline: original acc {:.3} (ff {:.3}), swapped acc {:.3} (ff {:.3})",
        t0.elapsed().as_secs_f64(), b_orig.accuracy, b_orig.format_failure_rate,
        b_swap.accuracy, b_swap.format_failure_rate
    );
    let f_orig = eval_set(&params, &vocab, &subset, false, Some((&mc, MemorizationStyle::ReferenceOnly)), 0);
    let f_swap = eval_set(&params, &vocab, &subset, true, Some((&mc, MemorizationStyle::ReferenceOnly)), 3);
    println!(
        "[{:6.1}s] fastmem (lr {mem_lr}, {mem_epochs} ep): original acc {:.3}, swapped acc {:.3} (delta swapped {:+.3}, delta original {:+.3})",
        t0.elapsed().as_secs_f64(), f_orig.accuracy, f_swap.accuracy,
        f_swap.accuracy - b_swap.accuracy, f_orig.accuracy - b_orig.accuracy
    );

    // A7 direction: n=1 vs n=K/2 adapted blocks.
    let mc2 = MemorizationConfig { adapted_blocks: 2, ..mc.clone() };
    let f_swap2 = eval_set(&params, &vocab, &subset, true, Some((&mc2, MemorizationStyle::ReferenceOnly)), 0);
    println!(
        "[{:6.1}s] blocks: n=1 swapped acc {:.3}, n=2 swapped acc {:.3}",
        t0.elapsed().as_secs_f64(), f_swap.accuracy, f_swap2.accuracy
    );

    // A6: epoch sweep, lambda = 0.
    let sweep_subset = &subset[..subset.len().min(40)];
    for sweep_lr in [1e-4f64, 3e-4] {
    print!("epoch sweep (lambda=0, lr {sweep_lr}):");
    for epochs in [0usize, 5, 10, 20, 50] {
        let c = MemorizationConfig { epochs, lambda: 0.0, lr: sweep_lr, ..MemorizationConfig::default() };
        let mut ppls = Vec::new();
        let mut results = Vec::new();
        for e in sweep_subset {
            let prompt = render_memorization(&vocab, &e.swapped_reference, MemorizationStyle::ReferenceOnly, 256).unwrap();
            let mut session = AdaptationSession::new(&params, 1).unwrap();
            session.memorize(std::slice::from_ref(&prompt), &c).unwrap();
            let v = session.view().unwrap();
            ppls.push(perplexity(&v, &prompt).unwrap());
            let text = answer_with(&v, &vocab, &e.swapped_reference, &e.question, 16);
            results.push(ExampleResult::score(e.id, &text, &e.swapped_answer));
        }
        let acc = results.iter().filter(|r| r.exact_match).count() as f64 / results.len() as f64;
        print!("  [{epochs}: ppl {:.4}, acc {:.3}]", mean(&ppls), acc);
    }
    println!();
    }

    // A9: under-tuned checkpoint format failure with/without embedded instruction,
    // over a grid of memorization strengths.
    for s in [16usize, 24] {
        let undertuned: ModelParams<f32> =
            fastmem_core::model::load_checkpoint(&undertuned_path(s)).unwrap();
        let u_base = eval_set(&undertuned, &vocab, &subset, true, None, 1);
        println!(
            "[{:6.1}s] undertuned@{s}: baseline ff {:.3}",
            t0.elapsed().as_secs_f64(), u_base.format_failure_rate
        );
        for (lr, epochs, lambda) in
            [(1e-5f64, 5usize, 0.1f64), (3e-5, 3, 0.5), (3e-5, 10, 1.0), (1e-4, 5, 0.5)]
        {
            let c = MemorizationConfig { lr, epochs, lambda, ..MemorizationConfig::default() };
            let u_mem = eval_set(&undertuned, &vocab, &subset, true, Some((&c, MemorizationStyle::InstructionAndReference)), 1);
            println!(
                "[{:6.1}s]   mem lr {lr} ep {epochs} lambda {lambda}: ff {:.3}",
                t0.elapsed().as_secs_f64(), u_mem.format_failure_rate
            );
        }
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
