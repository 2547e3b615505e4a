//! Full-set probe of the structured-output criterion on the cached
//! under-tuned checkpoint: format failure rate with and without
//! instruction-embedded memorization over all 500 evaluation examples.

use fastmem_core::decoding::greedy_decode;
use fastmem_core::evalgen::{generate_corpus, CorpusConfig, ExampleResult};
use fastmem_core::memorizer::{AdaptationSession, MemorizationConfig};
use fastmem_core::model::{load_checkpoint, ModelParams, ModelView};
use fastmem_core::template::{
    render_inference, render_memorization, InferenceTask, MemorizationStyle,
};
use fastmem_core::tokenizer::train_bpe;
use std::time::Instant;

fn main() {
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
    let path = std::env::temp_dir().join("fastmem-calibrate/undertuned24.fmem");
    let undertuned: ModelParams<f32> = load_checkpoint(&path).unwrap();

    let mc = MemorizationConfig { lr: 1e-5, epochs: 5, lambda: 0.1, adapted_blocks: 1 };
    let mut base_results = Vec::new();
    let mut mem_results = Vec::new();
    for e in &bundle.eval_examples {
        let prompt =
            render_inference(&vocab, &e.swapped_reference, &e.question, &InferenceTask::Qa, 256)
                .unwrap();
        let base_view = ModelView::base(&undertuned);
        let out = greedy_decode(&base_view, &prompt.tokens, 16).unwrap();
        base_results.push(ExampleResult::score(e.id, &vocab.decode(&out.tokens), &e.swapped_answer));

        let mem = render_memorization(
            &vocab,
            &e.swapped_reference,
            MemorizationStyle::InstructionAndReference,
            256,
        )
        .unwrap();
        let mut session = AdaptationSession::new(&undertuned, 1).unwrap();
        session.memorize(std::slice::from_ref(&mem), &mc).unwrap();
        let out = greedy_decode(&session.view().unwrap(), &prompt.tokens, 16).unwrap();
        mem_results.push(ExampleResult::score(e.id, &vocab.decode(&out.tokens), &e.swapped_answer));
    }
    let ff = |rs: &[ExampleResult]| {
        rs.iter().filter(|r| !r.format_ok).count() as f64 / rs.len() as f64
    };
    println!(
        "[{:6.1}s] 500 examples: baseline ff {:.4}, instruction-memorized ff {:.4}",
        t0.elapsed().as_secs_f64(),
        ff(&base_results),
        ff(&mem_results)
    );
}
