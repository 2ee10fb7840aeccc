use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("no sentences")]
    NoSentences,

    #[error("line count mismatch {0} vs {1}")]
    LineCountMismatch(usize, usize),

    #[error("duplicate score keys: {}", format_keys(.0))]
    DuplicateKeys(Vec<(usize, usize)>),

    #[error("score table `{feature}`: missing ({}, {})", .key.0, .key.1)]
    MissingScore {
        feature: String,
        key: (usize, usize),
    },

    #[error("score table `{feature}`: unexpected ({}, {})", .key.0, .key.1)]
    ExtraScore {
        feature: String,
        key: (usize, usize),
    },

    #[error("sentence {sid} rank {rank}: no score named `{name}`")]
    MissingTeacherScore {
        sid: usize,
        rank: usize,
        name: String,
    },

    #[error("duplicate feature name `{0}`")]
    DuplicateFeature(String),

    #[error("unknown native feature `{0}`")]
    UnknownNative(String),

    #[error("zero features")]
    ZeroFeatures,

    #[error("non-finite value for feature `{name}` at sentence {sid} rank {rank}")]
    NonFinite {
        sid: usize,
        rank: usize,
        name: String,
    },

    #[error("misaligned data: {0}")]
    Misaligned(String),

    #[error("feature names do not match: {0}")]
    NameMismatch(String),

    #[error("invalid label for sentence {sid}: {msg}")]
    InvalidLabel { sid: usize, msg: String },

    #[error("missing label for sentence {0}")]
    MissingLabel(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {msg}")]
    Hook { stage: String, msg: String },
}

fn format_keys(keys: &[(usize, usize)]) -> String {
    keys.iter()
        .map(|(s, r)| format!("({s}, {r})"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
