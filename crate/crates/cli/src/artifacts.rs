//! Output-directory layout, content hashing, and the run manifest.
//!
//! Every command writes exactly one `manifest.json` into its output
//! directory: the command name, the resolved config snapshot, the seed,
//! content hashes of every artifact read or written, and wall time.

use anyhow::{Context, Result};
use fastmem_core::evalgen::CorpusBundle;
use fastmem_core::model::{load_checkpoint, ModelParams};
use fastmem_core::tokenizer::Vocabulary;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const DATASET_FILE: &str = "dataset.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const PRETRAINED_FILE: &str = "pretrained.fmem";
pub const INSTRUCTED_FILE: &str = "instructed.fmem";
pub const UNDERTUNED_FILE: &str = "undertuned.fmem";

/// A file required by the command but absent on disk. Mapped to its own
/// exit code so scripts can tell "run the earlier stage first" apart from
/// genuine failures.
#[derive(Debug, thiserror::Error)]
#[error("missing artifact: {0}")]
pub struct MissingArtifact(pub PathBuf);

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot hash {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: Value,
    /// Artifact name -> sha256 of the file content, for inputs read and
    /// outputs produced.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_seconds: f64,
}

/// Collects the pieces of a manifest while the command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
    out_dir: PathBuf,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, config: Value, out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("cannot create {}", out_dir.display()))?;
        Ok(ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                seed,
                config,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_seconds: 0.0,
            },
            started: Instant::now(),
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        self.manifest.inputs.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        self.manifest.outputs.insert(name, sha256_file(path)?);
        Ok(())
    }

    /// Writes `manifest.json` and returns its path.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.wall_seconds = self.started.elapsed().as_secs_f64();
        let path = self.out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(MissingArtifact(path).into())
    }
}

pub fn load_dataset(dir: &Path, manifest: &mut ManifestBuilder) -> Result<CorpusBundle> {
    let path = require(dir.join(DATASET_FILE))?;
    manifest.record_input(&path)?;
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).with_context(|| format!("corrupt dataset {}", path.display()))
}

pub fn load_vocab(dir: &Path, manifest: &mut ManifestBuilder) -> Result<Vocabulary> {
    let path = require(dir.join(VOCAB_FILE))?;
    manifest.record_input(&path)?;
    Ok(Vocabulary::load(&path)?)
}

pub fn load_model(
    dir: &Path,
    name: &str,
    manifest: &mut ManifestBuilder,
) -> Result<ModelParams<f32>> {
    let path = require(dir.join(name))?;
    manifest.record_input(&path)?;
    Ok(load_checkpoint::<f32>(&path)?)
}

/// Writes text atomically enough for our purposes and records the hash.
pub fn write_output(
    dir: &Path,
    name: &str,
    text: &str,
    manifest: &mut ManifestBuilder,
) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    manifest.record_output(&path)?;
    Ok(path)
}
