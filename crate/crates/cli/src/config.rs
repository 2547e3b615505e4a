//! Run configuration: one JSON document with `model`, `memorize`, `decode`
//! and `eval` sections, plus dotted-path overrides (`--set eval.corpus.num_facts=200`).

use anyhow::{bail, Context, Result};
use fastmem_core::decoding::ContrastConfig;
use fastmem_core::evalgen::CorpusConfig;
use fastmem_core::memorizer::MemorizationConfig;
use fastmem_core::model::ModelConfig;
use fastmem_core::pipeline::TrainConfig;
use fastmem_core::template::MemorizationStyle;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[clap(rename_all = "kebab-case")]
pub enum Style {
    ReferenceOnly,
    InstructionAndReference,
}

impl Style {
    pub fn to_core(self) -> MemorizationStyle {
        match self {
            Style::ReferenceOnly => MemorizationStyle::ReferenceOnly,
            Style::InstructionAndReference => MemorizationStyle::InstructionAndReference,
        }
    }
}

/// `memorize` section: the optimizer settings plus how the prompt is
/// rendered and how many prompts share one adaptation call.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MemorizeSection {
    #[serde(flatten)]
    pub opt: MemorizationConfig,
    pub style: Style,
    /// Number of evaluation prompts memorized jointly per session.
    pub batch: usize,
}

impl Default for MemorizeSection {
    fn default() -> Self {
        MemorizeSection { opt: MemorizationConfig::default(), style: Style::ReferenceOnly, batch: 1 }
    }
}

/// `decode` section: contrast settings plus the generation budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSection {
    #[serde(flatten)]
    pub contrast: ContrastConfig,
    pub max_new: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { contrast: ContrastConfig::default(), max_new: 24 }
    }
}

/// `eval` section: corpus shape, tokenizer size, the two training stages,
/// and evaluation/profiling budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub corpus: CorpusConfig,
    /// Target vocabulary size for byte-pair training.
    pub vocab_target: usize,
    pub pretrain: TrainConfig,
    pub instruct: TrainConfig,
    /// Optimizer step at which an under-tuned snapshot is saved during
    /// instruction tuning. Zero disables the snapshot.
    pub undertuned_step: usize,
    /// Cap on evaluation examples; zero means all of them.
    pub num_examples: usize,
    /// Approximate memorization-prompt length for `profile`, in tokens.
    pub profile_prompt_tokens: usize,
    pub profile_max_new: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            corpus: CorpusConfig::default(),
            vocab_target: 1024,
            pretrain: TrainConfig::default(),
            instruct: TrainConfig { steps: 300, ..TrainConfig::default() },
            undertuned_step: 40,
            num_examples: 0,
            profile_prompt_tokens: 200,
            profile_max_new: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AppConfig {
    pub model: ModelSection,
    pub memorize: MemorizeSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
}

/// Thin wrapper so the model section has a serde default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelSection(pub ModelConfig);

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection(ModelConfig::desk_default())
    }
}

/// Applies one `path=value` override to the JSON tree. Every path segment
/// must already exist, so typos fail loudly instead of being ignored.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override '{spec}' is not of the form path=value"))?;
    let mut cur = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("'{}' is not a config section", segments[..i].join(".")))?;
        if i + 1 == segments.len() {
            if !obj.contains_key(*seg) {
                bail!("unknown config key '{path}'");
            }
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            obj.insert((*seg).to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*seg)
            .with_context(|| format!("unknown config section '{}'", segments[..=i].join(".")))?;
    }
    unreachable!("split never yields zero segments")
}

/// Loads the config file (or the defaults), applies `--set` overrides, and
/// returns both the typed config and its resolved JSON snapshot.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<(AppConfig, Value)> {
    let base = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            serde_json::from_str::<AppConfig>(&text)
                .with_context(|| format!("cannot parse config {}", path.display()))?
        }
        None => AppConfig::default(),
    };
    let mut tree = serde_json::to_value(&base)?;
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let config: AppConfig = serde_json::from_value(tree.clone())
        .context("config overrides produced an invalid configuration")?;
    Ok((config, tree))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_overrides_apply() {
        let (config, _) = resolve(None, &[]).unwrap();
        assert_eq!(config.model.0.d_model, 256);

        let sets = vec![
            "memorize.lambda=0.3".to_string(),
            "model.num_blocks=4".to_string(),
            "eval.corpus.num_facts=123".to_string(),
        ];
        let (config, tree) = resolve(None, &sets).unwrap();
        assert_eq!(config.memorize.opt.lambda, 0.3);
        assert_eq!(config.model.0.num_blocks, 4);
        assert_eq!(config.eval.corpus.num_facts, 123);
        assert_eq!(tree["memorize"]["lambda"], serde_json::json!(0.3));
    }

    #[test]
    fn unknown_keys_and_malformed_specs_are_rejected() {
        assert!(resolve(None, &["memorize.lamda=0.3".into()]).is_err());
        assert!(resolve(None, &["nosection.x=1".into()]).is_err());
        assert!(resolve(None, &["memorize.lambda".into()]).is_err());
    }
}
