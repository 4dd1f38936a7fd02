//! Source descriptors and parsers for the two supervision shapes.
//!
//! Binary sources carry one `{"prompt", "chosen", "rejected"}` object per line.
//! Scored sources carry one `{"prompt", "response", "scores"}` object per line,
//! where `scores` maps label names to finite reals. Scored records sharing a
//! prompt are left ungrouped here; grouping happens in [`crate::unify`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::jsonl::{for_each_object, required_str};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Binary,
    Scored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelDirection {
    #[default]
    LowerIsBetter,
    HigherIsBetter,
}

/// How the selection stage reduces a source's pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterPolicy {
    /// Keep the highest-quality fraction of each stratum.
    Quality,
    /// Keep a seeded random fraction of each stratum.
    Random,
    /// Keep everything.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub source_id: String,
    pub supervision: Supervision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_label: Option<String>,
    #[serde(default)]
    pub label_direction: LabelDirection,
    pub filter_policy: FilterPolicy,
}

/// Real-valued label vector attached to a scored response.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(BTreeMap<String, f64>);

impl ScoreVector {
    /// Builds a score vector, rejecting empty label names and non-finite values.
    pub fn new(scores: BTreeMap<String, f64>) -> std::result::Result<Self, String> {
        if scores.is_empty() {
            return Err("score vector is empty".into());
        }
        for (label, value) in &scores {
            if label.is_empty() {
                return Err("label names must be nonempty".into());
            }
            if !value.is_finite() {
                return Err(format!("score '{label}' is not finite"));
            }
        }
        Ok(ScoreVector(scores))
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.0.get(label).copied()
    }

    /// Number of labels, `k`.
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryPreferenceRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    #[serde(skip)]
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponseRecord {
    pub prompt: String,
    pub response: String,
    pub scores: ScoreVector,
    #[serde(skip)]
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceRecords {
    Binary(Vec<BinaryPreferenceRecord>),
    Scored(Vec<ScoredResponseRecord>),
}

impl SourceRecords {
    pub fn len(&self) -> usize {
        match self {
            SourceRecords::Binary(r) => r.len(),
            SourceRecords::Scored(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSource {
    pub descriptor: SourceDescriptor,
    pub records: SourceRecords,
}

/// Canonical prompt form used for grouping and embedding keys: NFC, trimmed.
pub fn normalize_prompt(prompt: &str) -> String {
    prompt.nfc().collect::<String>().trim().to_owned()
}

pub fn parse_binary_dataset<R: BufRead>(
    reader: R,
    desc: &SourceDescriptor,
) -> Result<Vec<BinaryPreferenceRecord>> {
    if desc.supervision != Supervision::Binary {
        return Err(Error::Config(format!(
            "source '{}' is not a binary source",
            desc.source_id
        )));
    }
    let mut records = Vec::new();
    for_each_object(reader, |line, object| {
        let prompt = required_str(&object, "prompt", line)?;
        let chosen = required_str(&object, "chosen", line)?;
        let rejected = required_str(&object, "rejected", line)?;
        if normalize_prompt(&chosen) == normalize_prompt(&rejected) {
            return Err(Error::parse(
                line,
                Some("rejected"),
                "chosen and rejected responses are identical",
            ));
        }
        records.push(BinaryPreferenceRecord {
            prompt,
            chosen,
            rejected,
            source_id: desc.source_id.clone(),
        });
        Ok(())
    })?;
    Ok(records)
}

pub fn parse_scored_dataset<R: BufRead>(
    reader: R,
    desc: &SourceDescriptor,
) -> Result<Vec<ScoredResponseRecord>> {
    if desc.supervision != Supervision::Scored {
        return Err(Error::Config(format!(
            "source '{}' is not a scored source",
            desc.source_id
        )));
    }
    let mut records = Vec::new();
    for_each_object(reader, |line, object| {
        let prompt = required_str(&object, "prompt", line)?;
        let response = required_str(&object, "response", line)?;
        let raw = match object.get("scores") {
            None | Some(Value::Null) => return Err(Error::parse(line, Some("scores"), "missing")),
            Some(Value::Object(map)) => map,
            Some(_) => return Err(Error::parse(line, Some("scores"), "must be an object")),
        };
        let mut scores = BTreeMap::new();
        for (label, value) in raw {
            let value = value.as_f64().ok_or_else(|| {
                Error::parse(line, Some("scores"), format!("score '{label}' is not a number"))
            })?;
            scores.insert(label.clone(), value);
        }
        let scores = ScoreVector::new(scores).map_err(|m| Error::parse(line, Some("scores"), m))?;
        records.push(ScoredResponseRecord {
            prompt,
            response,
            scores,
            source_id: desc.source_id.clone(),
        });
        Ok(())
    })?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceViolation {
    EmptySourceId { index: usize },
    DuplicateSourceId(String),
    /// Scored sources need a label to order their responses.
    MissingQualityLabel(String),
    /// Binary sources carry no numerical labels.
    UnexpectedQualityLabel(String),
    /// Binary pairs have no quality to rank by.
    QualityPolicyOnBinary(String),
    SupervisionMismatch(String),
    LabelAbsent {
        source_id: String,
        label: String,
        record_index: usize,
    },
}

impl fmt::Display for SourceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptySourceId { index } => write!(f, "source #{index} has an empty source_id"),
            Self::DuplicateSourceId(id) => write!(f, "duplicate source_id '{id}'"),
            Self::MissingQualityLabel(id) => {
                write!(f, "scored source '{id}' needs a quality_label")
            }
            Self::UnexpectedQualityLabel(id) => {
                write!(f, "binary source '{id}' cannot have a quality_label")
            }
            Self::QualityPolicyOnBinary(id) => {
                write!(f, "binary source '{id}' cannot use the quality filter policy")
            }
            Self::SupervisionMismatch(id) => {
                write!(f, "records of source '{id}' do not match its supervision type")
            }
            Self::LabelAbsent {
                source_id,
                label,
                record_index,
            } => write!(
                f,
                "record {record_index} of source '{source_id}' lacks label '{label}'"
            ),
        }
    }
}

/// Descriptor-level checks. Returns every violation found.
pub fn validate_descriptors(descs: &[SourceDescriptor]) -> std::result::Result<(), Vec<SourceViolation>> {
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    for (index, desc) in descs.iter().enumerate() {
        if desc.source_id.trim().is_empty() {
            violations.push(SourceViolation::EmptySourceId { index });
        } else if !seen.insert(desc.source_id.as_str()) {
            violations.push(SourceViolation::DuplicateSourceId(desc.source_id.clone()));
        }
        match desc.supervision {
            Supervision::Scored => {
                if desc.quality_label.as_deref().is_none_or(str::is_empty) {
                    violations.push(SourceViolation::MissingQualityLabel(desc.source_id.clone()));
                }
            }
            Supervision::Binary => {
                if desc.quality_label.is_some() {
                    violations.push(SourceViolation::UnexpectedQualityLabel(desc.source_id.clone()));
                }
                if desc.filter_policy == FilterPolicy::Quality {
                    violations.push(SourceViolation::QualityPolicyOnBinary(desc.source_id.clone()));
                }
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Descriptor checks plus a scan of every scored record for its source's label.
pub fn validate_sources(sources: &[LoadedSource]) -> std::result::Result<(), Vec<SourceViolation>> {
    let descs: Vec<_> = sources.iter().map(|s| s.descriptor.clone()).collect();
    let mut violations = validate_descriptors(&descs).err().unwrap_or_default();
    for source in sources {
        let desc = &source.descriptor;
        match (&source.records, desc.supervision) {
            (SourceRecords::Binary(_), Supervision::Binary) => {}
            (SourceRecords::Scored(records), Supervision::Scored) => {
                let Some(label) = desc.quality_label.as_deref() else {
                    continue;
                };
                violations.extend(
                    records
                        .iter()
                        .enumerate()
                        .filter(|(_, r)| r.scores.get(label).is_none())
                        .map(|(record_index, _)| SourceViolation::LabelAbsent {
                            source_id: desc.source_id.clone(),
                            label: label.to_owned(),
                            record_index,
                        }),
                );
            }
            _ => violations.push(SourceViolation::SupervisionMismatch(desc.source_id.clone())),
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}
