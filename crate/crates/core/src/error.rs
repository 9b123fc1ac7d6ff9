use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {0:?}: rank must be >= 1, every extent >= 1, and the product must match the data length")]
    Shape(Vec<usize>),

    #[error("unsupported kernel size {0}: only odd square kernels are supported")]
    UnsupportedKernel(usize),

    #[error("numeric domain error in {0}")]
    NumericDomain(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("layout error: grid {rows}x{cols} does not cover {tokens} tokens")]
    Layout {
        rows: usize,
        cols: usize,
        tokens: usize,
    },

    #[error("determinism error: two baseline evaluations disagree ({0} vs {1})")]
    Determinism(f64, f64),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("strict load failed: missing {}, unexpected {}, mismatched {}", names(missing), names(unexpected), names(mismatched))]
    StrictLoad {
        missing: Vec<String>,
        unexpected: Vec<String>,
        mismatched: Vec<String>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

fn names(v: &[String]) -> String {
    const SHOW: usize = 3;
    if v.len() <= SHOW {
        return format!("{v:?}");
    }
    format!("{:?} and {} more", &v[..SHOW], v.len() - SHOW)
}
