//! Synthetic knowledge-conflict evaluation: a closed world of facts whose
//! answer entity sits at the end of the sentence, entity-swapped variants of
//! those facts, and scoring of extracted answers.

use crate::error::{Error, Result};
use crate::memorizer::ntp_stats;
use crate::model::ModelView;
use crate::numeric::EPS_P;
use crate::scalar::Scalar;
use crate::template::{
    render_memorization, MemorizationStyle, TokenizedPrompt, ANSWER_PREFIX,
};
use crate::tokenizer::Vocabulary;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ROLES: [&str; 6] = ["mayor", "governor", "warden", "curator", "marshal", "provost"];
pub const PLACES: [&str; 10] = [
    "Arlen", "Bexley", "Corvin", "Dalton", "Elmsworth", "Farrow", "Gerton", "Hollis", "Ivry",
    "Juno",
];
pub const PERSONS: [&str; 16] = [
    "Mira Senn",
    "Odell Vance",
    "Petra Quill",
    "Ruben Hale",
    "Silas Moreau",
    "Tessa Brink",
    "Ulric Fenn",
    "Vera Lockwood",
    "Wade Oakes",
    "Yara Coste",
    "Zeno Pratt",
    "Alma Reyes",
    "Boyd Kessler",
    "Cleo Marsh",
    "Dario Lund",
    "Edda Voss",
];

/// Canonical saying plus a trap ending, for the choice task.
pub const SAYINGS: [(&str, &str, &str); 8] = [
    ("A stitch in time saves", "nine", "money"),
    ("Actions speak louder than", "words", "noise"),
    ("Better safe than", "sorry", "fast"),
    ("Practice makes", "perfect", "progress"),
    ("Still waters run", "deep", "cold"),
    ("The early bird catches the", "worm", "bus"),
    ("Every cloud has a silver", "lining", "coin"),
    ("Look before you", "leap", "speak"),
];

/// One ground-truth fact of the closed world. The key (role, place, year)
/// maps to exactly one person, and the person always ends the sentence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fact {
    pub role: String,
    pub place: String,
    pub year: u32,
    pub person: String,
}

impl Fact {
    pub fn sentence(&self) -> String {
        format!("The {} of {} in {} was {}.", self.role, self.place, self.year, self.person)
    }

    pub fn sentence_variant(&self, variant: usize) -> String {
        match variant % 3 {
            0 => self.sentence(),
            1 => format!(
                "In {}, the {} of {} was {}.",
                self.year, self.role, self.place, self.person
            ),
            _ => format!(
                "Records show the {} of {} in {} was {}.",
                self.role, self.place, self.year, self.person
            ),
        }
    }

    pub fn question(&self) -> String {
        format!("Who was the {} of {} in {}?", self.role, self.place, self.year)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "task")]
pub enum TaskKind {
    Qa,
    Choice { candidates: Vec<String> },
}

/// One evaluation example: the original reference, the entity-swapped
/// reference, and the gold answer under each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalExample {
    pub id: usize,
    pub reference: String,
    pub swapped_reference: String,
    pub question: String,
    pub original_answer: String,
    pub swapped_answer: String,
    #[serde(flatten)]
    pub task: TaskKind,
}

/// One supervised instruction-tuning example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionExample {
    pub reference: String,
    pub question: String,
    pub answer: String,
    /// True when the reference deliberately does not contain the answer,
    /// pushing the tuned model toward its parametric memory.
    pub distractor: bool,
    #[serde(flatten)]
    pub task: TaskKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusBundle {
    pub facts: Vec<Fact>,
    pub pretrain_docs: Vec<String>,
    pub instruction_examples: Vec<InstructionExample>,
    pub eval_examples: Vec<EvalExample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Number of distinct (role, place, year) -> person facts.
    pub num_facts: usize,
    /// Evaluation examples drawn from the facts.
    pub num_eval: usize,
    /// Repetitions of each fact in the pretraining stream.
    pub fact_repetitions: usize,
    /// Fraction of instruction examples whose reference is swapped for an
    /// unrelated one while the gold answer stays parametric.
    pub distractor_fraction: f64,
    /// Fraction of evaluation examples that are choice tasks.
    pub choice_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_facts: 600,
            num_eval: 500,
            fact_repetitions: 8,
            distractor_fraction: 0.3,
            choice_fraction: 0.1,
        }
    }
}

/// Replaces every mention of `from` in `text` with `to`.
pub fn swap_entities(text: &str, from: &str, to: &str) -> Result<String> {
    if from.is_empty() || !text.contains(from) {
        return Err(Error::SwapUnavailable(format!("entity {from:?} not present in reference")));
    }
    Ok(text.replace(from, to))
}

/// Deterministically generates the full corpus bundle: facts, a pretraining
/// stream that embeds each fact many times, supervised instruction examples
/// (with distractors), and conflict evaluation examples.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<CorpusBundle> {
    if config.num_facts == 0 || config.num_eval == 0 {
        return Err(Error::invalid("corpus sizes must be positive"));
    }
    if !(0.0..=1.0).contains(&config.distractor_fraction)
        || !(0.0..=1.0).contains(&config.choice_fraction)
    {
        return Err(Error::invalid("fractions must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Distinct (role, place, year) keys; person assigned at random.
    let mut keys = Vec::new();
    'outer: for year in 1950..2000u32 {
        for place in PLACES {
            for role in ROLES {
                keys.push((role, place, year));
                if keys.len() >= config.num_facts {
                    break 'outer;
                }
            }
        }
    }
    if keys.len() < config.num_facts {
        return Err(Error::invalid(format!(
            "at most {} distinct facts are expressible",
            keys.len()
        )));
    }
    keys.shuffle(&mut rng);
    let facts: Vec<Fact> = keys
        .into_iter()
        .map(|(role, place, year)| Fact {
            role: role.to_string(),
            place: place.to_string(),
            year,
            person: PERSONS.choose(&mut rng).unwrap().to_string(),
        })
        .collect();

    // Pretraining stream: every fact in several phrasings, plus the
    // canonical sayings, shuffled into documents.
    let mut docs = Vec::new();
    for fact in &facts {
        for rep in 0..config.fact_repetitions {
            docs.push(fact.sentence_variant(rep));
        }
    }
    for (stem, end, _) in SAYINGS {
        for _ in 0..config.fact_repetitions * 4 {
            docs.push(format!("{stem} {end}."));
        }
    }
    docs.shuffle(&mut rng);

    // Instruction examples: supervised QA over the true facts; a fraction
    // get an unrelated reference with the parametric gold answer kept.
    let mut instruction_examples = Vec::new();
    for (i, fact) in facts.iter().enumerate() {
        let distractor = rng.random_bool(config.distractor_fraction);
        let reference = if distractor {
            // An unrelated fact about a different person, so the gold answer
            // is only reachable through parametric memory.
            loop {
                let other = &facts[(i + 1 + rng.random_range(0..facts.len() - 1)) % facts.len()];
                if other.person != fact.person {
                    break other.sentence();
                }
            }
        } else {
            fact.sentence()
        };
        instruction_examples.push(InstructionExample {
            reference,
            question: fact.question(),
            answer: fact.person.clone(),
            distractor,
            task: TaskKind::Qa,
        });
    }
    for (stem, end, trap) in SAYINGS {
        instruction_examples.push(InstructionExample {
            reference: format!("{stem} {end}."),
            question: format!("Which word completes the saying \"{stem} ...\"?"),
            answer: end.to_string(),
            distractor: false,
            task: TaskKind::Choice { candidates: vec![end.to_string(), trap.to_string()] },
        });
    }
    instruction_examples.shuffle(&mut rng);

    // Evaluation examples: swap the answer entity for another of the same
    // type everywhere it appears in the reference. Facts are reused
    // cyclically when more examples than facts are requested; the swap
    // entity is drawn independently per example.
    let n_choice = ((config.num_eval as f64) * config.choice_fraction).round() as usize;
    let n_qa = config.num_eval - n_choice;
    let mut eval_examples = Vec::new();
    for id in 0..n_qa {
        let fact = &facts[id % facts.len()];
        let substitute = loop {
            let cand = PERSONS.choose(&mut rng).unwrap();
            if *cand != fact.person {
                break cand.to_string();
            }
        };
        let reference = fact.sentence();
        let swapped_reference = swap_entities(&reference, &fact.person, &substitute)?;
        eval_examples.push(EvalExample {
            id,
            reference,
            swapped_reference,
            question: fact.question(),
            original_answer: fact.person.clone(),
            swapped_answer: substitute,
            task: TaskKind::Qa,
        });
    }
    for i in 0..n_choice {
        let (stem, end, trap) = SAYINGS[i % SAYINGS.len()];
        let id = n_qa + i;
        eval_examples.push(EvalExample {
            id,
            reference: format!("{stem} {end}."),
            swapped_reference: format!("{stem} {trap}."),
            question: format!("Which word completes the saying \"{stem} ...\"?"),
            original_answer: end.to_string(),
            swapped_answer: trap.to_string(),
            task: TaskKind::Choice { candidates: vec![end.to_string(), trap.to_string()] },
        });
    }

    Ok(CorpusBundle { facts, pretrain_docs: docs, instruction_examples, eval_examples })
}

/// Perplexity of the answer span inside a memorization prompt for
/// `reference`: the minimal token window covering the span's bytes, scored
/// with the full preceding prompt as context.
pub fn span_perplexity<T: Scalar>(
    view: &ModelView<T>,
    vocab: &Vocabulary,
    reference: &str,
    span: &str,
) -> Result<f64> {
    if span.is_empty() {
        return Err(Error::SpanNotFound("empty span".into()));
    }
    let prompt = render_memorization(
        vocab,
        reference,
        MemorizationStyle::ReferenceOnly,
        view.config().context_window,
    )?;
    let (content, offsets) = vocab.content_offsets(&prompt.tokens);
    let hay = String::from_utf8_lossy(&content);
    let start = hay
        .find(span)
        .ok_or_else(|| Error::SpanNotFound(format!("span {span:?} not in reference")))?;
    let end = start + span.len();

    let mut mask = vec![false; prompt.tokens.len()];
    for (i, off) in offsets.iter().enumerate() {
        if let Some((s, e)) = off {
            if *s < end && *e > start && i > 0 {
                mask[i] = true;
            }
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::SpanNotFound(format!("span {span:?} maps to no tokens")));
    }
    let span_prompt = TokenizedPrompt {
        tokens: prompt.tokens.clone(),
        loss_mask: mask,
        role: prompt.role,
    };
    let (sum, count) = ntp_stats(view, &span_prompt)?;
    Ok((sum / count as f64).exp().max(EPS_P))
}

/// Pulls the answer out of generated text by the literal answer prefix.
pub fn extract_answer(text: &str) -> Option<String> {
    let idx = text.find(ANSWER_PREFIX)?;
    let rest = &text[idx + ANSWER_PREFIX.len()..];
    let line = rest.lines().next().unwrap_or(rest);
    let trimmed = line.trim().trim_end_matches('.').trim();
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_string())
    }
}

/// Lowercases, strips punctuation, drops articles, collapses whitespace.
pub fn normalize_answer(answer: &str) -> String {
    let lowered = answer.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Result of scoring one generated answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleResult {
    pub id: usize,
    pub predicted: Option<String>,
    pub gold: String,
    pub exact_match: bool,
    /// False when no answer could be extracted in the expected format.
    pub format_ok: bool,
}

impl ExampleResult {
    pub fn score(id: usize, generated: &str, gold: &str) -> Self {
        let predicted = extract_answer(generated);
        let exact_match = predicted
            .as_deref()
            .map(|p| normalize_answer(p) == normalize_answer(gold))
            .unwrap_or(false);
        ExampleResult { id, format_ok: predicted.is_some(), predicted, gold: gold.to_string(), exact_match }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub exact_match: usize,
    pub format_failures: usize,
    pub accuracy: f64,
    pub format_failure_rate: f64,
}

impl EvalReport {
    pub fn from_results(results: &[ExampleResult]) -> Self {
        let total = results.len();
        let exact_match = results.iter().filter(|r| r.exact_match).count();
        let format_failures = results.iter().filter(|r| !r.format_ok).count();
        let denom = total.max(1) as f64;
        EvalReport {
            total,
            exact_match,
            format_failures,
            accuracy: exact_match as f64 / denom,
            format_failure_rate: format_failures as f64 / denom,
        }
    }
}

/// One JSON object per line.
pub fn results_to_jsonl(results: &[ExampleResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn results_to_csv(results: &[ExampleResult]) -> String {
    let mut out = String::from("id,predicted,gold,exact_match,format_ok\n");
    for r in results {
        out.push_str(&format!(
            "{},{:?},{:?},{},{}\n",
            r.id,
            r.predicted.as_deref().unwrap_or(""),
            r.gold,
            r.exact_match,
            r.format_ok
        ));
    }
    out
}
