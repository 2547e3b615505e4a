//! Implementations of the subcommands. Each writes its artifacts plus one
//! manifest into the output directory and prints a short summary line.

use crate::artifacts::{
    self, load_dataset, load_model, load_vocab, write_output, ManifestBuilder, DATASET_FILE,
    INSTRUCTED_FILE, PRETRAINED_FILE, UNDERTUNED_FILE, VOCAB_FILE,
};
use crate::config::AppConfig;
use anyhow::Result;
use fastmem_core::decoding::{
    cad_decode, cd_decode, dola_decode, greedy_decode, steps_to_jsonl, DecodeOutput,
};
use fastmem_core::evalgen::{
    generate_corpus, results_to_jsonl, CorpusBundle, EvalReport, ExampleResult, TaskKind,
};
use fastmem_core::memorizer::{perplexity, AdaptationSession, EPOCH_GRID, LAMBDA_GRID};
use fastmem_core::model::{save_checkpoint, ModelParams, ModelView};
use fastmem_core::pipeline::{instruction_tune, pretrain, TrainConfig};
use fastmem_core::profile::{profile_prefill, profile_run};
use fastmem_core::template::{
    render_inference, render_memorization, InferenceTask, Role, TokenizedPrompt,
};
use fastmem_core::tokenizer::{train_bpe, Vocabulary, EOT};
use fastmem_core::Error;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::Path;

/// How answers are produced at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Strategy {
    /// Greedy decoding from the unmodified checkpoint.
    Baseline,
    /// Memorize the reference, then greedy decoding.
    Fastmem,
    /// Memorize, then contrast the adapted model against the base model.
    #[value(name = "fastmem+cd")]
    FastmemCd,
    /// Memorize, then contrast the final layer against an early exit.
    #[value(name = "fastmem+dola")]
    FastmemDola,
    /// Contrast with-context against without-context, no memorization.
    Cad,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Fastmem => "fastmem",
            Strategy::FastmemCd => "fastmem+cd",
            Strategy::FastmemDola => "fastmem+dola",
            Strategy::Cad => "cad",
        }
    }

    fn needs_memorization(self) -> bool {
        matches!(self, Strategy::Fastmem | Strategy::FastmemCd | Strategy::FastmemDola)
    }
}

/// Which reference/gold pairing the evaluation runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSet {
    /// Unmodified references; gold is the original entity.
    Original,
    /// Entity-swapped references; gold is the substituted entity.
    Swapped,
    /// Completion-choice examples with a trap reference.
    Choice,
}

impl EvalSet {
    pub fn name(self) -> &'static str {
        match self {
            EvalSet::Original => "original",
            EvalSet::Swapped => "swapped",
            EvalSet::Choice => "choice",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    Epochs,
    Blocks,
    Batch,
    Lambda,
    Alpha,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epochs => "epochs",
            SweepAxis::Blocks => "blocks",
            SweepAxis::Batch => "batch",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Alpha => "alpha",
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::invalid(msg.into()).into()
}

// ---------------------------------------------------------------------------
// make-dataset

pub fn make_dataset(config: &AppConfig, snapshot: Value, seed: u64, out: &Path) -> Result<()> {
    let mut manifest = ManifestBuilder::new("make-dataset", seed, snapshot, out)?;
    let bundle = generate_corpus(&config.eval.corpus, seed)?;

    // Train the tokenizer on everything the pipeline will ever render, so
    // the template boilerplate compresses well.
    let mut text = bundle.pretrain_docs.join(" ");
    for e in &bundle.instruction_examples {
        text.push(' ');
        text.push_str(&e.question);
    }
    text.push_str(
        " Please extract from the reference the span that best answers the question and \
         provide the answer in the following format: \"The answer is: ...\". Please choose \
         the candidate that best fits the instructions. Reference: Question: Candidates: \
         The answer is: or",
    );
    let vocab = train_bpe(&text, config.eval.vocab_target)?;

    let dataset_json = serde_json::to_string(&bundle)?;
    write_output(out, DATASET_FILE, &dataset_json, &mut manifest)?;
    let vocab_path = out.join(VOCAB_FILE);
    vocab.save(&vocab_path)?;
    manifest.record_output(&vocab_path)?;
    manifest.finish()?;

    println!(
        "dataset: {} facts, {} pretraining docs, {} instruction examples, {} eval examples, vocab {}",
        bundle.facts.len(),
        bundle.pretrain_docs.len(),
        bundle.instruction_examples.len(),
        bundle.eval_examples.len(),
        vocab.size(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain / instruct-tune

fn model_for_vocab(config: &AppConfig, vocab: &Vocabulary) -> Result<fastmem_core::model::ModelConfig> {
    let mut mc = config.model.0.clone();
    mc.vocab_size = vocab.size();
    mc.validate()?;
    Ok(mc)
}

pub fn cmd_pretrain(config: &AppConfig, snapshot: Value, seed: u64, out: &Path) -> Result<()> {
    let mut manifest = ManifestBuilder::new("pretrain", seed, snapshot, out)?;
    let bundle = load_dataset(out, &mut manifest)?;
    let vocab = load_vocab(out, &mut manifest)?;
    let mc = model_for_vocab(config, &vocab)?;
    let mut params = ModelParams::<f32>::init(mc, seed);

    let tc = TrainConfig { seed, ..config.eval.pretrain.clone() };
    let report = pretrain(&mut params, &vocab, &bundle.pretrain_docs, &tc)?;

    let ckpt = out.join(PRETRAINED_FILE);
    save_checkpoint(&params, &ckpt)?;
    manifest.record_output(&ckpt)?;
    write_output(out, "pretrain_report.json", &serde_json::to_string_pretty(&report)?, &mut manifest)?;
    manifest.finish()?;

    println!(
        "pretrained {} steps: loss {:.4} -> {:.4}, holdout {:?} -> {:?}",
        report.steps, report.first_loss, report.final_loss, report.holdout_before, report.holdout_after,
    );
    Ok(())
}

pub fn cmd_instruct_tune(config: &AppConfig, snapshot: Value, seed: u64, out: &Path) -> Result<()> {
    let mut manifest = ManifestBuilder::new("instruct-tune", seed, snapshot, out)?;
    let bundle = load_dataset(out, &mut manifest)?;
    let vocab = load_vocab(out, &mut manifest)?;
    let mut params = load_model(out, PRETRAINED_FILE, &mut manifest)?;

    let tc = TrainConfig { seed: seed.wrapping_add(1), ..config.eval.instruct.clone() };
    let undertuned = out.join(UNDERTUNED_FILE);
    let snapshot_at = (config.eval.undertuned_step > 0)
        .then_some((config.eval.undertuned_step, undertuned.as_path()));
    let report = instruction_tune(&mut params, &vocab, &bundle.instruction_examples, &tc, snapshot_at)?;

    let ckpt = out.join(INSTRUCTED_FILE);
    save_checkpoint(&params, &ckpt)?;
    manifest.record_output(&ckpt)?;
    if undertuned.is_file() {
        manifest.record_output(&undertuned)?;
    }
    write_output(out, "instruct_report.json", &serde_json::to_string_pretty(&report)?, &mut manifest)?;
    manifest.finish()?;

    println!(
        "instruction-tuned {} steps: loss {:.4} -> {:.4}",
        report.steps, report.first_loss, report.final_loss,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// memorize

#[derive(Serialize)]
struct MemorizeReport {
    prompt_tokens: usize,
    perplexity_before: f64,
    perplexity_after: f64,
    ratio: f64,
}

pub fn cmd_memorize(
    config: &AppConfig,
    snapshot: Value,
    seed: u64,
    out: &Path,
    text: &str,
) -> Result<()> {
    if text.trim().is_empty() {
        return Err(usage("memorization text is empty"));
    }
    let mut manifest = ManifestBuilder::new("memorize", seed, snapshot, out)?;
    let vocab = load_vocab(out, &mut manifest)?;
    let params = load_model(out, INSTRUCTED_FILE, &mut manifest)?;

    let prompt = render_memorization(
        &vocab,
        text,
        config.memorize.style.to_core(),
        params.config.context_window,
    )?;
    let mut session = AdaptationSession::new(&params, config.memorize.opt.adapted_blocks)?;
    let before = perplexity(&session.base_view(), &prompt)?;
    let trace = session.memorize(std::slice::from_ref(&prompt), &config.memorize.opt)?;
    let after = perplexity(&session.view()?, &prompt)?;

    write_output(out, "memorize_trace.csv", &trace.to_csv(), &mut manifest)?;
    let report = MemorizeReport {
        prompt_tokens: prompt.tokens.len(),
        perplexity_before: before,
        perplexity_after: after,
        ratio: after / before,
    };
    write_output(out, "memorize_report.json", &serde_json::to_string_pretty(&report)?, &mut manifest)?;
    manifest.finish()?;

    println!(
        "memorized {} tokens in {} epochs: perplexity {:.3} -> {:.3} ({:.2}x)",
        report.prompt_tokens,
        config.memorize.opt.epochs,
        before,
        after,
        report.ratio,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared decoding plumbing

fn hash_tokens(tokens: &[u32]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Reference text used on the context-free side of the context contrast.
const NO_CONTEXT: &str = "(no reference provided)";

fn decode_answer(
    config: &AppConfig,
    vocab: &Vocabulary,
    params: &ModelParams<f32>,
    session: Option<&AdaptationSession<'_, f32>>,
    strategy: Strategy,
    reference: &str,
    question: &str,
    task: &InferenceTask,
) -> Result<(String, DecodeOutput, String)> {
    let window = params.config.context_window;
    let max_new = config.decode.max_new;
    let prompt = render_inference(vocab, reference, question, task, window)?;
    let hash = hash_tokens(&prompt.tokens);
    let base = ModelView::base(params);

    let out = match strategy {
        Strategy::Baseline => greedy_decode(&base, &prompt.tokens, max_new)?,
        Strategy::Fastmem => {
            let view = session.expect("memorizing strategy without session").view()?;
            greedy_decode(&view, &prompt.tokens, max_new)?
        }
        Strategy::FastmemCd => {
            let view = session.expect("memorizing strategy without session").view()?;
            cd_decode(&view, &base, &prompt.tokens, max_new, config.decode.contrast.alpha)?
        }
        Strategy::FastmemDola => {
            let view = session.expect("memorizing strategy without session").view()?;
            dola_decode(&view, &prompt.tokens, max_new, &config.decode.contrast)?
        }
        Strategy::Cad => {
            let no_ctx = render_inference(vocab, NO_CONTEXT, question, task, window)?;
            cad_decode(
                &base,
                &prompt.tokens,
                &no_ctx.tokens,
                max_new,
                config.decode.contrast.alpha,
            )?
        }
    };
    let text = vocab.decode(&out.tokens);
    Ok((text, out, hash))
}

// ---------------------------------------------------------------------------
// generate

pub fn cmd_generate(
    config: &AppConfig,
    snapshot: Value,
    seed: u64,
    out: &Path,
    strategy: Strategy,
    reference: &str,
    question: &str,
) -> Result<()> {
    let mut manifest = ManifestBuilder::new("generate", seed, snapshot, out)?;
    let vocab = load_vocab(out, &mut manifest)?;
    let params = load_model(out, INSTRUCTED_FILE, &mut manifest)?;

    let session = if strategy.needs_memorization() {
        let prompt = render_memorization(
            &vocab,
            reference,
            config.memorize.style.to_core(),
            params.config.context_window,
        )?;
        let mut s = AdaptationSession::new(&params, config.memorize.opt.adapted_blocks)?;
        s.memorize(std::slice::from_ref(&prompt), &config.memorize.opt)?;
        Some(s)
    } else {
        None
    };

    let (text, output, hash) = decode_answer(
        config,
        &vocab,
        &params,
        session.as_ref(),
        strategy,
        reference,
        question,
        &InferenceTask::Qa,
    )?;
    write_output(out, "steps.jsonl", &steps_to_jsonl(&output.steps)?, &mut manifest)?;
    manifest.finish()?;

    println!("prompt sha256: {hash}");
    println!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

struct EvalTarget {
    id: usize,
    reference: String,
    question: String,
    gold: String,
    task: InferenceTask,
}

fn select_targets(bundle: &CorpusBundle, set: EvalSet, cap: usize) -> Vec<EvalTarget> {
    let mut targets = Vec::new();
    for e in &bundle.eval_examples {
        let t = match (&e.task, set) {
            (TaskKind::Qa, EvalSet::Original) => EvalTarget {
                id: e.id,
                reference: e.reference.clone(),
                question: e.question.clone(),
                gold: e.original_answer.clone(),
                task: InferenceTask::Qa,
            },
            (TaskKind::Qa, EvalSet::Swapped) => EvalTarget {
                id: e.id,
                reference: e.swapped_reference.clone(),
                question: e.question.clone(),
                gold: e.swapped_answer.clone(),
                task: InferenceTask::Qa,
            },
            (TaskKind::Choice { candidates }, EvalSet::Choice) => EvalTarget {
                id: e.id,
                reference: e.swapped_reference.clone(),
                question: e.question.clone(),
                gold: e.swapped_answer.clone(),
                task: InferenceTask::Choice {
                    candidates: candidates
                        .iter()
                        .map(|c| format!("\"{c}\""))
                        .collect::<Vec<_>>()
                        .join(" or "),
                },
            },
            _ => continue,
        };
        targets.push(t);
    }
    if cap > 0 {
        targets.truncate(cap);
    }
    targets
}

#[derive(Serialize)]
struct PromptLog {
    id: usize,
    strategy: &'static str,
    prompt_sha256: String,
}

struct ChunkOutcome {
    results: Vec<ExampleResult>,
    logs: Vec<PromptLog>,
    /// Post-adaptation perplexity of each memorization prompt (empty for
    /// non-memorizing strategies).
    memorized_ppls: Vec<f64>,
}

fn eval_chunk(
    config: &AppConfig,
    vocab: &Vocabulary,
    params: &ModelParams<f32>,
    strategy: Strategy,
    chunk: &[EvalTarget],
) -> Result<ChunkOutcome> {
    let window = params.config.context_window;
    let mut memorized_ppls = Vec::new();
    let session = if strategy.needs_memorization() {
        let prompts: Vec<TokenizedPrompt> = chunk
            .iter()
            .map(|t| {
                render_memorization(vocab, &t.reference, config.memorize.style.to_core(), window)
            })
            .collect::<fastmem_core::Result<_>>()?;
        let mut s = AdaptationSession::new(params, config.memorize.opt.adapted_blocks)?;
        s.memorize(&prompts, &config.memorize.opt)?;
        for p in &prompts {
            memorized_ppls.push(perplexity(&s.view()?, p)?);
        }
        Some(s)
    } else {
        None
    };

    let mut results = Vec::with_capacity(chunk.len());
    let mut logs = Vec::with_capacity(chunk.len());
    for t in chunk {
        let (text, _, hash) = decode_answer(
            config,
            vocab,
            params,
            session.as_ref(),
            strategy,
            &t.reference,
            &t.question,
            &t.task,
        )?;
        results.push(ExampleResult::score(t.id, &text, &t.gold));
        logs.push(PromptLog { id: t.id, strategy: strategy.name(), prompt_sha256: hash });
    }
    Ok(ChunkOutcome { results, logs, memorized_ppls })
}

struct EvalRun {
    results: Vec<ExampleResult>,
    logs: Vec<PromptLog>,
    report: EvalReport,
    /// Mean post-adaptation perplexity of the memorized prompts, when the
    /// strategy memorizes.
    mean_memorized_ppl: Option<f64>,
}

fn run_eval(
    config: &AppConfig,
    vocab: &Vocabulary,
    params: &ModelParams<f32>,
    bundle: &CorpusBundle,
    strategy: Strategy,
    set: EvalSet,
) -> Result<EvalRun> {
    let targets = select_targets(bundle, set, config.eval.num_examples);
    if targets.is_empty() {
        return Err(usage(format!("no evaluation examples in the '{}' set", set.name())));
    }
    let batch = config.memorize.batch.max(1);
    let outcomes: Vec<ChunkOutcome> = targets
        .par_chunks(batch)
        .map(|chunk| eval_chunk(config, vocab, params, strategy, chunk))
        .collect::<Result<_>>()?;

    let mut results = Vec::new();
    let mut logs = Vec::new();
    let mut ppls = Vec::new();
    for o in outcomes {
        results.extend(o.results);
        logs.extend(o.logs);
        ppls.extend(o.memorized_ppls);
    }
    // Canonical ordering regardless of scheduling.
    results.sort_by_key(|r| r.id);
    logs.sort_by_key(|l| l.id);

    let report = EvalReport::from_results(&results);
    let mean_memorized_ppl =
        (!ppls.is_empty()).then(|| ppls.iter().sum::<f64>() / ppls.len() as f64);
    Ok(EvalRun { results, logs, report, mean_memorized_ppl })
}

fn eval_csv(strategy: Strategy, set: EvalSet, report: &EvalReport) -> String {
    let mut csv = String::from(
        "strategy,set,total,exact_match,accuracy,format_failures,format_failure_rate\n",
    );
    csv.push_str(&format!(
        "{},{},{},{},{:.4},{},{:.4}\n",
        strategy.name(),
        set.name(),
        report.total,
        report.exact_match,
        report.accuracy,
        report.format_failures,
        report.format_failure_rate,
    ));
    csv
}

pub fn cmd_eval(
    config: &AppConfig,
    snapshot: Value,
    seed: u64,
    out: &Path,
    strategy: Strategy,
    set: EvalSet,
) -> Result<()> {
    let mut manifest = ManifestBuilder::new("eval", seed, snapshot, out)?;
    let bundle = load_dataset(out, &mut manifest)?;
    let vocab = load_vocab(out, &mut manifest)?;
    let params = load_model(out, INSTRUCTED_FILE, &mut manifest)?;

    let run = run_eval(config, &vocab, &params, &bundle, strategy, set)?;

    write_output(out, "results.jsonl", &results_to_jsonl(&run.results)?, &mut manifest)?;
    let mut hashes = String::new();
    for log in &run.logs {
        hashes.push_str(&serde_json::to_string(log)?);
        hashes.push('\n');
    }
    write_output(out, "prompt_hashes.jsonl", &hashes, &mut manifest)?;
    write_output(out, "report.csv", &eval_csv(strategy, set, &run.report), &mut manifest)?;
    manifest.finish()?;

    println!(
        "{} on {}: accuracy {:.1}% ({}/{}), format failures {:.1}%",
        strategy.name(),
        set.name(),
        100.0 * run.report.accuracy,
        run.report.exact_match,
        run.report.total,
        100.0 * run.report.format_failure_rate,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

fn default_axis_values(axis: SweepAxis) -> Vec<f64> {
    match axis {
        SweepAxis::Epochs => EPOCH_GRID.iter().map(|&e| e as f64).collect(),
        SweepAxis::Blocks => vec![1.0, 2.0],
        SweepAxis::Batch => vec![1.0, 2.0, 4.0, 8.0],
        SweepAxis::Lambda => LAMBDA_GRID.to_vec(),
        SweepAxis::Alpha => fastmem_core::decoding::ALPHA_GRID.to_vec(),
    }
}

fn parse_axis_values(axis: SweepAxis, csv: &str) -> Result<Vec<f64>> {
    csv.split(',')
        .map(|s| {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad value '{s}' for axis {}", axis.name())))?;
            if matches!(axis, SweepAxis::Epochs | SweepAxis::Blocks | SweepAxis::Batch)
                && (v < 0.0 || v.fract() != 0.0)
            {
                return Err(usage(format!("axis {} needs whole numbers", axis.name())));
            }
            Ok(v)
        })
        .collect()
}

fn apply_axis(config: &mut AppConfig, axis: SweepAxis, value: f64) {
    match axis {
        SweepAxis::Epochs => config.memorize.opt.epochs = value as usize,
        SweepAxis::Blocks => config.memorize.opt.adapted_blocks = value as usize,
        SweepAxis::Batch => config.memorize.batch = value as usize,
        SweepAxis::Lambda => config.memorize.opt.lambda = value,
        SweepAxis::Alpha => config.decode.contrast.alpha = value,
    }
}

fn format_axis_value(axis: SweepAxis, value: f64) -> String {
    match axis {
        SweepAxis::Epochs | SweepAxis::Blocks | SweepAxis::Batch => {
            format!("{}", value as usize)
        }
        SweepAxis::Lambda | SweepAxis::Alpha => format!("{value}"),
    }
}

pub fn cmd_sweep(
    config: &AppConfig,
    snapshot: Value,
    seed: u64,
    out: &Path,
    axis: SweepAxis,
    values: Option<&str>,
) -> Result<()> {
    let mut manifest = ManifestBuilder::new("sweep", seed, snapshot, out)?;
    let bundle = load_dataset(out, &mut manifest)?;
    let vocab = load_vocab(out, &mut manifest)?;
    let params = load_model(out, INSTRUCTED_FILE, &mut manifest)?;

    let values = match values {
        Some(csv) => parse_axis_values(axis, csv)?,
        None => default_axis_values(axis),
    };
    if values.is_empty() {
        return Err(usage("empty sweep value list"));
    }
    // The alpha axis only matters under a contrastive strategy; everything
    // else sweeps plain memorization.
    let strategy = if axis == SweepAxis::Alpha { Strategy::FastmemCd } else { Strategy::Fastmem };

    let mut csv = format!("{},accuracy,mean_ppl\n", axis.name());
    for &value in &values {
        let mut point = config.clone();
        apply_axis(&mut point, axis, value);
        let run = run_eval(&point, &vocab, &params, &bundle, strategy, EvalSet::Swapped)?;
        let ppl = run.mean_memorized_ppl.unwrap_or(f64::NAN);
        let row = format!(
            "{},{:.4},{:.6}\n",
            format_axis_value(axis, value),
            run.report.accuracy,
            ppl
        );
        print!("{row}");
        csv.push_str(&row);
    }
    write_output(out, "sweep.csv", &csv, &mut manifest)?;
    manifest.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// profile

fn synthetic_prompt(vocab_size: usize, tokens: usize, seed: u64) -> TokenizedPrompt {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> =
        (0..tokens.saturating_sub(1)).map(|_| rng.random_range(0..vocab_size as u32)).collect();
    ids.push(EOT);
    let mut mask = vec![true; ids.len()];
    mask[0] = false;
    TokenizedPrompt { tokens: ids, loss_mask: mask, role: Role::Memorization }
}

pub fn cmd_profile(config: &AppConfig, snapshot: Value, seed: u64, out: &Path) -> Result<()> {
    let mut manifest = ManifestBuilder::new("profile", seed, snapshot, out)?;

    // Profile the trained checkpoint when one exists; otherwise fall back
    // to a randomly initialized model at the configured shape.
    let ckpt = out.join(INSTRUCTED_FILE);
    let vocab_path = out.join(VOCAB_FILE);
    let (params, vocab) = if ckpt.is_file() && vocab_path.is_file() {
        let p = load_model(out, INSTRUCTED_FILE, &mut manifest)?;
        let v = load_vocab(out, &mut manifest)?;
        (p, Some(v))
    } else {
        (ModelParams::<f32>::init(config.model.0.clone(), seed), None)
    };

    let window = params.config.context_window;
    let target = config.eval.profile_prompt_tokens.min(window.saturating_sub(4));
    let style = config.memorize.style.to_core();
    let mem_prompt = match &vocab {
        Some(v) => {
            // Repeat factual sentences until the token budget is reached or
            // the window would overflow.
            let unit = "The archivist of Veridale in 1978 was Mira Senn. ";
            let mut text = unit.to_string();
            let mut prompt = render_memorization(v, text.trim_end(), style, window)?;
            while prompt.tokens.len() < target {
                let grown = format!("{text}{unit}");
                match render_memorization(v, grown.trim_end(), style, window) {
                    Ok(p) => {
                        text = grown;
                        prompt = p;
                    }
                    Err(_) => break,
                }
            }
            prompt
        }
        None => synthetic_prompt(params.config.vocab_size, target, seed),
    };
    // The inference prefill spans the same context the memorization saw, as
    // a non-adaptive run of the same prompt would.
    let inference_tokens: Vec<u32> = mem_prompt.tokens.clone();

    let report = profile_run(
        &params,
        &mem_prompt,
        &inference_tokens,
        &config.memorize.opt,
        config.eval.profile_max_new,
    )?;
    let baseline_prefill = profile_prefill(&params, &mem_prompt.tokens)?;

    write_output(out, "profile.json", &serde_json::to_string_pretty(&report)?, &mut manifest)?;
    manifest.finish()?;

    let mib = |b: usize| b as f64 / (1024.0 * 1024.0);
    println!("prompt tokens: {}, decoded tokens: {}", report.prompt_tokens, report.decoded_tokens);
    if !report.memory_tracked {
        println!("note: allocator accounting inactive; peak bytes read as zero");
    }
    println!("{:<10} {:>12} {:>14}", "phase", "seconds", "peak_mib");
    println!("{:<10} {:>12.4} {:>14.2}", "Memo.", report.memorize.seconds, mib(report.memorize.peak_bytes));
    println!(
        "{:<10} {:>12.4} {:>14.2}",
        "Prefill",
        baseline_prefill.seconds,
        mib(baseline_prefill.peak_bytes)
    );
    println!("{:<10} {:>12.4} {:>14.2}", "Decode", report.decode.seconds, mib(report.decode.peak_bytes));
    Ok(())
}

// ---------------------------------------------------------------------------

/// Maps an error chain to the documented process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<artifacts::MissingArtifact>().is_some() {
        return 3;
    }
    if let Some(e) = err.downcast_ref::<Error>() {
        return match e {
            Error::NumericalDivergence(_) => 4,
            Error::InvalidInput(_) => 2,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
            _ => 1,
        };
    }
    1
}
