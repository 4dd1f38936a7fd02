//! Prompt embeddings: loaded from an external file, or computed with a seeded
//! signed feature-hashing bag of terms when no external model is available.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, Result};
use crate::ingest::normalize_prompt;
use crate::jsonl::{for_each_object, required_str, write_jsonl};

/// Output width of the sentence encoder the external files usually come from.
pub const DEFAULT_DIM: usize = 384;

/// Loaded vectors whose norm is within this distance of 1 are renormalized.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub prompt_key: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub type EmbeddingMap = BTreeMap<String, EmbeddingVector>;

/// Lowercase hex SHA-256 of the normalized prompt.
pub fn prompt_key(prompt: &str) -> String {
    hex::encode(Sha256::digest(normalize_prompt(prompt).as_bytes()))
}

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Signed hashed term counts, L2-normalized. A prompt with no terms maps to
/// the first basis vector.
///
/// # Panics
/// If `dim < 2`.
pub fn hash_embed(prompt: &str, dim: usize, seed: u64) -> EmbeddingVector {
    assert!(dim >= 2, "embedding dimension must be at least 2");
    let normalized = normalize_prompt(prompt);
    let mut values = vec![0.0f64; dim];
    for term in tokenize(&normalized) {
        let h = xxh3_64_with_seed(term.as_bytes(), seed);
        let index = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        values[index] += sign;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        values[0] = 1.0;
    } else {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    EmbeddingVector {
        prompt_key: prompt_key(&normalized),
        values,
    }
}

/// Reads an embedding file and returns vectors for exactly the `expected` keys.
pub fn load_embeddings<R: BufRead>(reader: R, expected: &BTreeSet<String>) -> Result<EmbeddingMap> {
    let map = read_vectors(reader, |key| expected.contains(key))?;
    let missing: Vec<String> = expected.iter().filter(|k| !map.contains_key(*k)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingEmbeddings(missing));
    }
    Ok(map)
}

/// Validates every line; keeps the vectors whose key passes `keep`.
fn read_vectors<R, F>(reader: R, keep: F) -> Result<EmbeddingMap>
where
    R: BufRead,
    F: Fn(&str) -> bool,
{
    let mut map = EmbeddingMap::new();
    let mut seen = BTreeSet::new();
    let mut dim: Option<usize> = None;
    for_each_object(reader, |line, object| {
        let key = required_str(&object, "prompt_key", line)?;
        let raw = match object.get("values") {
            Some(Value::Array(values)) if !values.is_empty() => values,
            Some(Value::Array(_)) => return Err(Error::parse(line, Some("values"), "is empty")),
            _ => return Err(Error::parse(line, Some("values"), "must be an array of numbers")),
        };
        let mut values = raw
            .iter()
            .map(|v| v.as_f64().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::parse(line, Some("values"), "entries must be finite numbers"))?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: values.len(),
                    key: Some(key),
                })
            }
            Some(_) => {}
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotUnitNorm { key, norm });
        }
        values.iter_mut().for_each(|v| *v /= norm);
        if !seen.insert(key.clone()) {
            return Err(Error::parse(line, Some("prompt_key"), format!("duplicate key '{key}'")));
        }
        if keep(&key) {
            map.insert(
                key.clone(),
                EmbeddingVector {
                    prompt_key: key,
                    values,
                },
            );
        }
        Ok(())
    })?;
    Ok(map)
}

pub fn write_embeddings<W: Write>(writer: W, map: &EmbeddingMap) -> std::io::Result<()> {
    write_jsonl(writer, map.values())
}

/// Source of one embedding per prompt.
pub trait EmbeddingProvider {
    fn embed(&self, prompts: &[&str]) -> Result<EmbeddingMap>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        HashedEmbedder {
            dim: DEFAULT_DIM,
            seed: 0,
        }
    }
}

impl EmbeddingProvider for HashedEmbedder {
    fn embed(&self, prompts: &[&str]) -> Result<EmbeddingMap> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "hashed embedding dim must be at least 2, got {}",
                self.dim
            )));
        }
        Ok(prompts
            .iter()
            .map(|p| {
                let v = hash_embed(p, self.dim, self.seed);
                (v.prompt_key.clone(), v)
            })
            .collect())
    }
}

/// Vectors read from an embedding file.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbeddings {
    vectors: EmbeddingMap,
}

impl PrecomputedEmbeddings {
    pub fn new(vectors: EmbeddingMap) -> Self {
        PrecomputedEmbeddings { vectors }
    }

    /// Loads every vector in the file.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        Ok(PrecomputedEmbeddings {
            vectors: read_vectors(reader, |_| true)?,
        })
    }
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn embed(&self, prompts: &[&str]) -> Result<EmbeddingMap> {
        let mut out = EmbeddingMap::new();
        let mut missing = BTreeSet::new();
        for p in prompts {
            let key = prompt_key(p);
            match self.vectors.get(&key) {
                Some(v) => {
                    out.insert(key, v.clone());
                }
                None => {
                    missing.insert(key);
                }
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::MissingEmbeddings(missing.into_iter().collect()))
        }
    }
}
