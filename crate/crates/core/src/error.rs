use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("rollout diverged: {0}")]
    Diverged(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no improvement direction: all advantages or action deviations are zero")]
    NoImprovementDirection,

    #[error("experience already annotated")]
    AlreadyAnnotated,

    #[error("episode is not fully annotated")]
    NotAnnotated,

    #[error("leave-one-out needs at least 2 episodes, memory holds {0}")]
    InsufficientEpisodes(usize),

    #[error("episode index {index} out of range ({len} episodes)")]
    EpisodeIndex { index: usize, len: usize },

    #[error("empty context set")]
    EmptyContext,

    #[error("replay memory is empty")]
    EmptyMemory,

    #[error("ragged iteration grid for seed {seed}: {detail}")]
    RaggedGrid { seed: u64, detail: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what,
            expected,
            got,
        })
    }
}

pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
