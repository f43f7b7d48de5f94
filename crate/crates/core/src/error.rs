use thiserror::Error;

use crate::engine::Network;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not compose, or a network disagrees with its own header.
    #[error("composition error: {0}")]
    Composition(String),

    #[error("non-finite values produced by layer {index} ({kind})")]
    NonFinite { index: usize, kind: &'static str },

    /// Training loss became NaN/Inf. Carries the last network that trained cleanly.
    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        last_good: Box<Network>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("morph precondition violated: {0}")]
    MorphPrecondition(String),

    #[error("forbidden morph site: {0}")]
    ForbiddenSite(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("pruning would remove every filter of layer {layer}")]
    LayerCollapse { layer: usize },

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error("dataset parse error: {0}")]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by numerics rather than inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated inside {0}")]
    Truncated(&'static str),
    #[error("header describes {expected} bytes of {section}, file holds {found}")]
    LengthMismatch {
        section: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { found: u32, expected: u32 },
    #[error("file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
}
