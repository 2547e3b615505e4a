//! Two-stage training on the synthetic corpus: next-token pretraining over a
//! packed token stream, then instruction tuning with the loss restricted to
//! the response span.

use crate::error::{Error, Result};
use crate::evalgen::{InstructionExample, TaskKind};
use crate::model::{
    backward_full, forward_training, ModelParams, ModelView, ParamGrads, save_checkpoint,
};
use crate::numeric::{Matrix, EPS_P};
use crate::scalar::Scalar;
use crate::template::{render_supervised, InferenceTask, TokenizedPrompt};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOT};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Sequences per optimizer step.
    pub batch: usize,
    /// Packed sequence length for pretraining.
    pub seq_len: usize,
    pub seed: u64,
    /// Cosine-decay the learning rate to 10% of its peak; otherwise keep it
    /// constant.
    pub cosine: bool,
    /// Fraction of the packed stream held out for perplexity reporting.
    pub holdout_fraction: f64,
    /// Number of independently shuffled packings of the document stream.
    /// Values above one expose each document in several surrounding
    /// contexts, which favors context-independent storage of its content.
    pub packings: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            steps: 400,
            batch: 8,
            seq_len: 64,
            seed: 0,
            cosine: true,
            holdout_fraction: 0.05,
            packings: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if self.steps == 0 || self.batch == 0 || self.seq_len < 2 || self.packings == 0 {
            return Err(Error::invalid("steps, batch, seq_len, and packings must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("holdout_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine || self.steps <= 1 {
            return self.lr;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        let floor = 0.1 * self.lr;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Mean next-token loss on held-out sequences, before and after.
    pub holdout_before: Option<f64>,
    pub holdout_after: Option<f64>,
}

/// Adam over every parameter of the model, in one flat state vector.
struct FullAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn param_count<T: Scalar>(p: &ModelParams<T>) -> usize {
    let mut n = p.embed.data().len() + p.final_norm.len() + p.unembed.data().len();
    for b in &p.blocks {
        n += b.attn_norm.len()
            + b.wq.data().len()
            + b.wk.data().len()
            + b.wv.data().len()
            + b.wo.data().len()
            + b.ffn_norm.len()
            + b.ffn.param_count();
    }
    n
}

/// Visits every (parameter, gradient) pair in a fixed canonical order.
fn for_each_param_grad<T: Scalar>(
    p: &mut ModelParams<T>,
    g: &ParamGrads<T>,
    mut f: impl FnMut(&mut T, f64),
) {
    let vecs = |pv: &mut [T], gv: &[T], f: &mut dyn FnMut(&mut T, f64)| {
        for (a, b) in pv.iter_mut().zip(gv) {
            f(a, b.to_f64s());
        }
    };
    vecs(p.embed.data_mut(), g.embed.data(), &mut f);
    for (bp, bg) in p.blocks.iter_mut().zip(&g.blocks) {
        vecs(&mut bp.attn_norm, &bg.attn_norm, &mut f);
        vecs(bp.wq.data_mut(), bg.wq.data(), &mut f);
        vecs(bp.wk.data_mut(), bg.wk.data(), &mut f);
        vecs(bp.wv.data_mut(), bg.wv.data(), &mut f);
        vecs(bp.wo.data_mut(), bg.wo.data(), &mut f);
        vecs(&mut bp.ffn_norm, &bg.ffn_norm, &mut f);
        vecs(bp.ffn.w_gate.data_mut(), bg.ffn.w_gate.data(), &mut f);
        vecs(&mut bp.ffn.b_gate, &bg.ffn.b_gate, &mut f);
        vecs(bp.ffn.w_up.data_mut(), bg.ffn.w_up.data(), &mut f);
        vecs(&mut bp.ffn.b_up, &bg.ffn.b_up, &mut f);
        vecs(bp.ffn.w_down.data_mut(), bg.ffn.w_down.data(), &mut f);
        vecs(&mut bp.ffn.b_down, &bg.ffn.b_down, &mut f);
    }
    vecs(&mut p.final_norm, &g.final_norm, &mut f);
    vecs(p.unembed.data_mut(), g.unembed.data(), &mut f);
}

impl FullAdam {
    fn new(n: usize) -> Self {
        FullAdam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step<T: Scalar>(&mut self, lr: f64, params: &mut ModelParams<T>, grads: &ParamGrads<T>) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let mut i = 0usize;
        for_each_param_grad(params, grads, |p, gi| {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * gi;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * gi * gi;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            *p = T::from_f64(p.to_f64s() - lr * mhat / (vhat.sqrt() + ADAM_EPS));
            i += 1;
        });
    }
}

/// Cross-entropy over the masked targets of one sequence: returns the
/// per-position logit gradient and the summed loss.
fn ce_logit_grads<T: Scalar>(
    logits: &Matrix<T>,
    tokens: &[TokenId],
    loss_mask: &[bool],
) -> (Matrix<T>, f64, usize) {
    let vocab = logits.cols();
    let mut d = Matrix::zeros(logits.rows(), vocab);
    let mut q = vec![0.0f64; vocab];
    let mut loss = 0.0f64;
    let mut count = 0usize;
    for t in 1..tokens.len() {
        if !loss_mask[t] {
            continue;
        }
        let row = t - 1;
        let lr_ = logits.row(row);
        let mut max = f64::NEG_INFINITY;
        for (v, o) in q.iter_mut().enumerate() {
            *o = lr_[v].to_f64s();
            max = max.max(*o);
        }
        let mut sum = 0.0f64;
        for o in q.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        let target = tokens[t] as usize;
        loss -= (q[target] / sum).max(EPS_P).ln();
        count += 1;
        let out = d.row_mut(row);
        for v in 0..vocab {
            out[v] = T::from_f64(q[v] / sum);
        }
        out[target] += T::from_f64(-1.0);
    }
    (d, loss, count)
}

fn mean_loss<T: Scalar>(view: &ModelView<T>, seqs: &[Vec<TokenId>]) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for seq in seqs {
        let trace = forward_training(view, seq)?;
        let mask = vec![true; seq.len()];
        let (_, loss, n) = ce_logit_grads(&trace.logits, seq, &mask);
        total += loss;
        count += n;
    }
    if count == 0 {
        return Err(Error::invalid("no holdout positions"));
    }
    Ok(total / count as f64)
}

/// Packs documents into fixed-length training sequences. Each document is
/// terminated with end-of-text; every sequence starts with begin-of-text.
pub fn pack_documents(vocab: &Vocabulary, docs: &[String], seq_len: usize) -> Vec<Vec<TokenId>> {
    let mut stream = Vec::new();
    for doc in docs {
        stream.extend(vocab.encode(doc));
        stream.push(EOT);
    }
    let body = seq_len - 1;
    stream
        .chunks(body)
        .filter(|c| c.len() >= 2)
        .map(|c| {
            let mut seq = Vec::with_capacity(c.len() + 1);
            seq.push(BOS);
            seq.extend_from_slice(c);
            seq
        })
        .collect()
}

fn train_on_prompts<T: Scalar>(
    params: &mut ModelParams<T>,
    prompts: &[(Vec<TokenId>, Vec<bool>)],
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, &ModelParams<T>) -> Result<()>,
) -> Result<(f64, f64)> {
    if prompts.is_empty() {
        return Err(Error::invalid("no training sequences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut adam = FullAdam::new(param_count(params));
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;

    for step in 0..config.steps {
        let mut grads: Option<ParamGrads<T>> = None;
        let mut loss = 0.0f64;
        let mut count = 0usize;
        for _ in 0..config.batch {
            if cursor == prompts.len() {
                cursor = 0;
                order.shuffle(&mut rng);
            }
            let (tokens, mask) = &prompts[order[cursor]];
            cursor += 1;
            let view = ModelView::base(params);
            let trace = forward_training(&view, tokens)?;
            let (d_logits, l, n) = ce_logit_grads(&trace.logits, tokens, mask);
            let g = backward_full(&view, &trace, tokens, &d_logits)?;
            loss += l;
            count += n;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => add_grads(acc, &g),
            }
        }
        let mean = loss / count.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::NumericalDivergence(format!(
                "training loss became non-finite at step {step}"
            )));
        }
        if step == 0 {
            first_loss = mean;
        }
        last_loss = mean;
        let mut g = grads.unwrap();
        scale_grads(&mut g, 1.0 / config.batch as f64);
        adam.step(config.lr_at(step), params, &g);
        on_step(step, params)?;
    }
    Ok((first_loss, last_loss))
}

fn add_grads<T: Scalar>(acc: &mut ParamGrads<T>, g: &ParamGrads<T>) {
    acc.embed.add_assign(&g.embed);
    for (a, b) in acc.blocks.iter_mut().zip(&g.blocks) {
        for (x, y) in a.attn_norm.iter_mut().zip(&b.attn_norm) {
            *x += *y;
        }
        a.wq.add_assign(&b.wq);
        a.wk.add_assign(&b.wk);
        a.wv.add_assign(&b.wv);
        a.wo.add_assign(&b.wo);
        for (x, y) in a.ffn_norm.iter_mut().zip(&b.ffn_norm) {
            *x += *y;
        }
        a.ffn.w_gate.add_assign(&b.ffn.w_gate);
        a.ffn.w_up.add_assign(&b.ffn.w_up);
        a.ffn.w_down.add_assign(&b.ffn.w_down);
        for (x, y) in a.ffn.b_gate.iter_mut().zip(&b.ffn.b_gate) {
            *x += *y;
        }
        for (x, y) in a.ffn.b_up.iter_mut().zip(&b.ffn.b_up) {
            *x += *y;
        }
        for (x, y) in a.ffn.b_down.iter_mut().zip(&b.ffn.b_down) {
            *x += *y;
        }
    }
    for (x, y) in acc.final_norm.iter_mut().zip(&g.final_norm) {
        *x += *y;
    }
    acc.unembed.add_assign(&g.unembed);
}

fn scale_grads<T: Scalar>(g: &mut ParamGrads<T>, s: f64) {
    let s = T::from_f64(s);
    g.embed.scale(s);
    for b in g.blocks.iter_mut() {
        for x in b.attn_norm.iter_mut() {
            *x = *x * s;
        }
        b.wq.scale(s);
        b.wk.scale(s);
        b.wv.scale(s);
        b.wo.scale(s);
        for x in b.ffn_norm.iter_mut() {
            *x = *x * s;
        }
        b.ffn.for_each_param_mut(|x| *x = *x * s);
    }
    for x in g.final_norm.iter_mut() {
        *x = *x * s;
    }
    g.unembed.scale(s);
}

/// Stage one: next-token pretraining over the packed document stream.
pub fn pretrain<T: Scalar>(
    params: &mut ModelParams<T>,
    vocab: &Vocabulary,
    docs: &[String],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if config.seq_len > params.config.context_window {
        return Err(Error::invalid("seq_len exceeds the context window"));
    }
    let mut seqs = pack_documents(vocab, docs, config.seq_len);
    if seqs.len() < 2 {
        return Err(Error::invalid("corpus packs into too few sequences"));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_9ac5);
    let mut shuffled = docs.to_vec();
    for _ in 1..config.packings {
        shuffled.shuffle(&mut shuffle_rng);
        seqs.extend(pack_documents(vocab, &shuffled, config.seq_len));
    }
    let n_holdout = ((seqs.len() as f64) * config.holdout_fraction).round() as usize;
    let holdout: Vec<Vec<TokenId>> = seqs.split_off(seqs.len() - n_holdout);

    let holdout_before = if holdout.is_empty() {
        None
    } else {
        Some(mean_loss(&ModelView::base(params), &holdout)?)
    };
    let prompts: Vec<(Vec<TokenId>, Vec<bool>)> =
        seqs.into_iter().map(|s| {
            let mask = vec![true; s.len()];
            (s, mask)
        }).collect();
    let (first_loss, final_loss) = train_on_prompts(params, &prompts, config, |_, _| Ok(()))?;
    let holdout_after = if holdout.is_empty() {
        None
    } else {
        Some(mean_loss(&ModelView::base(params), &holdout)?)
    };
    Ok(TrainReport { steps: config.steps, first_loss, final_loss, holdout_before, holdout_after })
}

fn example_task(t: &TaskKind) -> InferenceTask {
    match t {
        TaskKind::Qa => InferenceTask::Qa,
        TaskKind::Choice { candidates } => {
            InferenceTask::Choice { candidates: candidates.join(", ") }
        }
    }
}

/// Renders one instruction example as a supervised prompt.
pub fn supervised_prompt(
    vocab: &Vocabulary,
    example: &InstructionExample,
    context_window: usize,
) -> Result<TokenizedPrompt> {
    render_supervised(
        vocab,
        &example.reference,
        &example.question,
        &example_task(&example.task),
        &example.answer,
        context_window,
    )
}

/// Stage two: instruction tuning with the loss restricted to the response
/// span. When `undertuned` is given, the parameters after that many steps
/// are checkpointed to the path, capturing a deliberately under-trained
/// snapshot.
pub fn instruction_tune<T: Scalar>(
    params: &mut ModelParams<T>,
    vocab: &Vocabulary,
    examples: &[InstructionExample],
    config: &TrainConfig,
    undertuned: Option<(usize, &Path)>,
) -> Result<TrainReport> {
    config.validate()?;
    if let Some((at_step, _)) = undertuned {
        if at_step == 0 || at_step > config.steps {
            return Err(Error::invalid("undertuned snapshot step out of range"));
        }
    }
    let window = params.config.context_window;
    let prompts = examples
        .iter()
        .map(|e| supervised_prompt(vocab, e, window).map(|p| (p.tokens, p.loss_mask)))
        .collect::<Result<Vec<_>>>()?;
    let (first_loss, final_loss) = train_on_prompts(params, &prompts, config, |step, p| {
        if let Some((at_step, path)) = undertuned {
            if step + 1 == at_step {
                save_checkpoint(p, path)?;
            }
        }
        Ok(())
    })?;
    Ok(TrainReport {
        steps: config.steps,
        first_loss,
        final_loss,
        holdout_before: None,
        holdout_after: None,
    })
}
