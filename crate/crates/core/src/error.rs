use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::ingest::SourceViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("read failure: {0}")]
    Read(#[from] io::Error),

    #[error("line {line}: {}{message}", field.as_deref().map(|f| format!("field '{f}': ")).unwrap_or_default())]
    Parse {
        line: usize,
        field: Option<String>,
        message: String,
    },

    #[error("invalid sources: {}", join(.0))]
    InvalidSources(Vec<SourceViolation>),

    #[error("response {index} is missing label '{label}'")]
    MissingLabel { index: usize, label: String },

    #[error("need at least two responses, found {found}")]
    TooFewResponses { found: usize },

    #[error("pair '{pair_id}' has no quality score")]
    MissingQuality { pair_id: String },

    #[error("duplicate pair id '{0}'")]
    DuplicatePairId(String),

    #[error("no embedding for {} prompt key(s): {}", .0.len(), .0.join(", "))]
    MissingEmbeddings(Vec<String>),

    #[error("dimension mismatch{}: expected {expected}, found {found}", key.as_deref().map(|k| format!(" for '{k}'")).unwrap_or_default())]
    DimensionMismatch {
        expected: usize,
        found: usize,
        key: Option<String>,
    },

    #[error("embedding '{key}' has L2 norm {norm}, not unit length")]
    NotUnitNorm { key: String, norm: f64 },

    #[error("invalid clustering request: {0}")]
    InvalidClustering(String),

    #[error("pair '{pair_id}' has no cluster assignment for its prompt")]
    UnassignedPrompt { pair_id: String },

    #[error("no filter policy configured for source '{0}'")]
    UnknownPolicy(String),

    #[error("selection fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),

    #[error("item set is empty")]
    EmptyItems,

    #[error("item '{item_id}': {reason}")]
    InvalidItem { item_id: String, reason: String },

    #[error("no probe dump for item(s): {}", .0.join(", "))]
    MissingDumps(Vec<String>),

    #[error("item '{item_id}' ({side}): {reason}")]
    InvalidProbe {
        item_id: String,
        side: &'static str,
        reason: String,
    },

    #[error("unknown training stage '{0}' (expected sft, reward or rlhf)")]
    UnknownStage(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, field: Option<&str>, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            field: field.map(str::to_owned),
            message: message.into(),
        }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::Io { .. } => self,
            other => Error::InFile {
                path: path.into(),
                source: Box::new(other),
            },
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures of the environment (I/O) rather than of the inputs.
    pub fn is_runtime(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Read(_) => true,
            Error::Stage { source, .. } | Error::InFile { source, .. } => source.is_runtime(),
            _ => false,
        }
    }
}

fn join(violations: &[SourceViolation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
