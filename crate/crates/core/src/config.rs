//! Run configuration: one TOML file with a section per component, plus
//! `section.key=value` overrides that win over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusSpec;
use crate::decoder::DecoderConfig;
use crate::engine::RampConfig;
use crate::error::{RampError, Result};
use crate::eval::ScalingSpec;
use crate::exec::Exec;
use crate::graph::EgoParams;
use crate::training::{Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub seed: u64,
    /// Neighborhood of classification samples.
    pub ego: EgoParams,
    pub max_new: usize,
    pub shuffle_seeds: Vec<u64>,
    pub scaling: ScalingSpec,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            seed: 0,
            ego: EgoParams { hops: 2, max_size: 10 },
            max_new: 8,
            shuffle_seeds: vec![1, 2, 3],
            scaling: ScalingSpec::default(),
        }
    }
}

/// Every artifact is written under `out_dir`; inputs default to the files
/// earlier subcommands leave there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub graph: Option<PathBuf>,
    pub split: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: "runs".into(),
            graph: None,
            split: None,
        }
    }
}

impl Paths {
    pub fn graph(&self) -> PathBuf {
        self.graph.clone().unwrap_or_else(|| self.out_dir.join("graph.jsonl"))
    }

    pub fn split(&self) -> PathBuf {
        self.split.clone().unwrap_or_else(|| self.out_dir.join("split.json"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Runtime {
    pub exec: Exec,
    /// Worker threads for parallel execution; `None` uses every core.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub decoder: DecoderConfig,
    pub ramp: RampConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub corpus: CorpusSpec,
    pub eval: EvalSettings,
    pub paths: Paths,
    pub runtime: Runtime,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            decoder: DecoderConfig::default(),
            ramp: RampConfig::default(),
            pretrain: TrainConfig {
                steps: 600,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                stage: Stage::Finetune,
                steps: 400,
                learning_rate: 5e-4,
                early_stop_patience: 5,
                ..TrainConfig::default()
            },
            corpus: CorpusSpec::default(),
            eval: EvalSettings::default(),
            paths: Paths::default(),
            runtime: Runtime::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.ramp.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.corpus.validate().map_err(|e| RampError::Config(e.to_string()))?;
        if self.pretrain.stage != Stage::Pretrain || self.finetune.stage != Stage::Finetune {
            return Err(RampError::Config("[pretrain] and [finetune] must keep their stage".into()));
        }
        Ok(())
    }

    /// Parses TOML, applies `section.key=value` overrides, then validates.
    /// Keys left out keep their [`RunConfig::default`] values, so a partial
    /// `[finetune]` section is still a fine-tuning configuration.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| RampError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut merged, value);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| RampError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| RampError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over everything that can change a result. Paths and worker
    /// counts are excluded; execution mode does not change results either.
    pub fn fingerprint(&self) -> String {
        let semantic = serde_json::json!({
            "decoder": self.decoder,
            "ramp": self.ramp,
            "pretrain": self.pretrain,
            "finetune": self.finetune,
            "corpus": self.corpus,
            "eval": self.eval,
        });
        hex_digest(semantic.to_string().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| RampError::Config(format!("override `{spec}` is not of the form section.key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        return Err(RampError::Config(format!("override key `{key}` needs a section, e.g. ramp.rho")));
    }
    let raw = raw.trim();
    // Bare words are taken as strings so `runtime.exec=sequential` works.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut table = root;
    for part in &path[..path.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| RampError::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}
