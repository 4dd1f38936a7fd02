//! Run configuration: one JSON document naming the sources, the embedding
//! provider, selection hyperparameters, output directory and eval inputs.
//! Relative paths resolve against the config file's directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::DEFAULT_DIM;
use crate::error::{Error, Result};
use crate::ingest::{validate_descriptors, FilterPolicy, SourceDescriptor};
use crate::select::SelectionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    #[serde(flatten)]
    pub descriptor: SourceDescriptor,
    pub path: PathBuf,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    Hashed {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hashed {
            dim: DEFAULT_DIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub items: PathBuf,
    pub dumps: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    pub selection: SelectionConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for s in &mut self.sources {
            fix(&mut s.path);
        }
        if let EmbeddingConfig::File { path } = &mut self.embedding {
            fix(path);
        }
        fix(&mut self.output_dir);
        if let Some(eval) = &mut self.eval {
            fix(&mut eval.items);
            fix(&mut eval.dumps);
        }
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, fraction: Option<f64>, out: Option<PathBuf>) {
        if let Some(seed) = seed {
            self.selection.seed = seed;
        }
        if let Some(fraction) = fraction {
            self.selection.fraction = fraction;
        }
        if let Some(out) = out {
            self.output_dir = out;
        }
    }

    pub fn descriptors(&self) -> Vec<SourceDescriptor> {
        self.sources.iter().map(|s| s.descriptor.clone()).collect()
    }

    pub fn policies(&self) -> HashMap<String, FilterPolicy> {
        self.sources
            .iter()
            .map(|s| (s.descriptor.source_id.clone(), s.descriptor.filter_policy))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("no sources configured".into()));
        }
        validate_descriptors(&self.descriptors()).map_err(Error::InvalidSources)?;
        self.selection.validate()?;
        if let EmbeddingConfig::Hashed { dim, .. } = self.embedding {
            if dim < 2 {
                return Err(Error::Config(format!("hashed embedding dim must be at least 2, got {dim}")));
            }
        }
        let mut paths: Vec<&Path> = self.sources.iter().map(|s| s.path.as_path()).collect();
        if let EmbeddingConfig::File { path } = &self.embedding {
            paths.push(path);
        }
        if let Some(eval) = &self.eval {
            paths.push(&eval.items);
            paths.push(&eval.dumps);
        }
        paths.push(&self.output_dir);
        for (i, a) in paths.iter().enumerate() {
            if paths[i + 1..].contains(a) {
                return Err(Error::Config(format!("path {} is used more than once", a.display())));
            }
        }
        Ok(())
    }
}
