//! Declarative run configuration shared by every CLI subcommand.
//!
//! A run-config is one JSON object; unknown keys are rejected at every
//! level. Overrides of the form `train.seed=3` are applied to the JSON tree
//! before it is deserialized, so they obey the same schema. The SHA-256 of
//! the canonical serialization identifies the run in every output.

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{average_tr_ratio, read_recordings, LabeledExample, Recording, RecordingFormat};
use crate::models::ModelSpec;
use crate::preprocess::FilterConfig;
use crate::psr::PsrConfig;
use crate::screen::ScreenConfig;
use crate::synth::{generate_dataset, SynthDatasetSpec};
use crate::train::TrainConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Recording files of the primary dataset. Empty means "generate
    /// `synth.count` synthetic examples instead".
    pub primary: Vec<PathBuf>,
    /// Recording files appended to every training set.
    pub bolster: Vec<PathBuf>,
    pub format: RecordingFormat,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            primary: Vec::new(),
            bolster: Vec::new(),
            format: RecordingFormat::NativeJson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model name such as `ComplexCNN5` or `MLP3`.
    pub model: String,
    pub folds: usize,
    pub filter: FilterConfig,
    pub psr: PsrConfig,
    pub train: TrainConfig,
    pub screen: ScreenConfig,
    pub data: DataConfig,
    pub synth: SynthDatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "ComplexCNN5".into(),
            folds: 10,
            filter: FilterConfig::default(),
            psr: PsrConfig::default(),
            train: TrainConfig::default(),
            screen: ScreenConfig::default(),
            data: DataConfig::default(),
            synth: SynthDatasetSpec::default(),
        }
    }
}

/// Provenance block written into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.model_spec()?;
        spec.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        self.psr.validate()?;
        self.train.validate()?;
        self.screen.validate()?;
        for p in self.data.primary.iter().chain(&self.data.bolster) {
            if !p.exists() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec: ModelSpec = self.model.parse()?;
        spec.grid_n = self.psr.grid_n;
        Ok(spec)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn metadata(&self) -> Metadata {
        Metadata {
            tool: "psrtr".into(),
            version: VERSION.into(),
            config_hash: self.hash(),
            seed: self.train.seed,
            config: self.clone(),
        }
    }

    /// The primary dataset: the configured files, or a synthetic set.
    pub fn primary_examples(&self) -> Result<Vec<LabeledExample>> {
        if self.data.primary.is_empty() {
            info!("no primary data files; generating {} synthetic examples", self.synth.count);
            return generate_dataset(&self.synth);
        }
        load_examples(&self.data.primary, self.data.format)
    }

    pub fn bolster_examples(&self) -> Result<Vec<LabeledExample>> {
        load_examples(&self.data.bolster, self.data.format)
    }
}

/// Sets the dotted `key` of a JSON tree to `value`, parsed as JSON when it
/// parses and as a string otherwise.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Every annotated 10-second window of every file as a labeled example.
///
/// Windows without annotations or with a degenerate label are skipped and
/// logged.
pub fn load_examples(paths: &[PathBuf], format: RecordingFormat) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for p in paths {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("rec");
        for (k, rec) in read_recordings(p, format)?.iter().enumerate() {
            out.extend(examples_from_recording(rec, &format!("{stem}-{k}"))?);
        }
    }
    Ok(out)
}

pub fn examples_from_recording(rec: &Recording, prefix: &str) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (w, (segment, annotations)) in rec.windows()?.into_iter().enumerate() {
        if annotations.count() == 0 {
            continue;
        }
        match average_tr_ratio(&segment, &annotations) {
            Ok(tr_ratio) => out.push(LabeledExample {
                id: format!("{prefix}-w{w}"),
                segment,
                annotations,
                tr_ratio,
            }),
            Err(e) => warn!("{prefix} window {w} excluded: {e}"),
        }
    }
    Ok(out)
}
