//! Declarative experiment files: one JSON document describing the model,
//! data, run and cost blocks, validated as a whole before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::costmodel::CostConfig;
use crate::data::{generate_split, Corpus, Generator, SyntheticCorpusSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::orchestrator::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    /// Tokens per training sequence (and learned positions).
    pub seq_len: usize,
    /// Defaults to `4 · hidden_dim`.
    #[serde(default)]
    pub ffn_dim: Option<usize>,
}

impl ModelSection {
    pub fn to_config(&self) -> ModelConfig {
        let mut c = ModelConfig::new(
            self.num_layers,
            self.hidden_dim,
            self.num_heads,
            self.vocab_size,
            self.seq_len,
        );
        if let Some(f) = self.ffn_dim {
            c.ffn_dim = f;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_generator")]
    pub generator: Generator,
    pub num_sequences: usize,
    #[serde(default = "default_eval_sequences")]
    pub eval_sequences: usize,
    #[serde(default = "default_branching")]
    pub markov_branching: usize,
}

fn default_generator() -> Generator {
    Generator::Order2Markov
}
fn default_eval_sequences() -> usize {
    64
}
fn default_branching() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    /// Seeds initialization, data generation and data order; overrides
    /// `run.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for the simulated nodes (default: every core).
    #[serde(default)]
    pub threads: Option<usize>,
    /// Checkpoint to continue from instead of starting fresh.
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
    pub model: ModelSection,
    pub data: DataSection,
    pub run: RunConfig,
    #[serde(default)]
    pub cost: Option<CostConfig>,
}

/// Sets `dotted.key` in a JSON tree to `raw`, parsed as JSON when possible
/// and as a string otherwise. Intermediate objects are created as needed.
pub fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "override keys are dot-separated field names"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            return Err(Error::config(key, format!("{p} is not an object")));
        }
        cur = cur
            .as_object_mut()
            .expect("checked")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::config(key, "parent is not an object")),
    }
}

impl ExperimentConfig {
    /// Parses, applies `key=value` overrides, resolves and validates.
    pub fn from_value(mut v: Value, overrides: &[(String, String)]) -> Result<Self> {
        for (k, raw) in overrides {
            set_path(&mut v, k, raw)?;
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(v)
            .map_err(|e| Error::config("config", e.to_string()))?;
        cfg.run.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str, overrides: &[(String, String)]) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::config("config", e.to_string()))?;
        Self::from_value(v, overrides)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text, overrides)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_config()
    }

    pub fn corpus_spec(&self, num_sequences: usize) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            vocab_size: self.model.vocab_size,
            seq_len: self.model.seq_len,
            generator: self.data.generator,
            seed: self.seed,
            num_sequences,
            markov_branching: self.data.markov_branching,
        }
    }

    /// Training corpus (split 0) and held-out evaluation corpus (split 1).
    pub fn corpora(&self) -> Result<(Corpus, Corpus)> {
        let train = generate_split(&self.corpus_spec(self.data.num_sequences), 0)?;
        let eval = generate_split(&self.corpus_spec(self.data.eval_sequences), 1)?;
        Ok((train, eval))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let model = self.model_config();
        model.validate()?;
        self.corpus_spec(self.data.num_sequences).validate()?;
        if self.data.eval_sequences == 0 {
            return Err(Error::config("data.eval_sequences", "must be at least 1"));
        }
        self.run.validate(&model)?;
        let per_node = self.data.num_sequences / self.run.num_nodes;
        if per_node < self.run.per_node_batch {
            return Err(Error::config(
                "data.num_sequences",
                format!(
                    "each of the {} shards needs at least per_node_batch = {} sequences (has {per_node})",
                    self.run.num_nodes, self.run.per_node_batch
                ),
            ));
        }
        if let Some(c) = &self.cost {
            crate::costmodel::cost_report(c)?;
        }
        Ok(())
    }

    /// Pretty JSON of the resolved config (stable key order).
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
