use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("matrix is singular to working precision")]
    Singular,

    #[error("singular Jacobian in block {block}")]
    SingularJacobian { block: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("{what} did not converge (residual {residual:e})")]
    NoConvergence { what: &'static str, residual: f64 },

    #[error("inverse of block {block} did not converge for row {row} (residual {residual:e})")]
    NonConvergent {
        block: usize,
        row: usize,
        residual: f64,
    },

    #[error("backward requires a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("edge ({0}, {1}) references a node outside the graph")]
    InvalidEdge(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("series inverse inapplicable: long-time radius {long_radius:.4}, short-time radius {short_radius:.4} (both >= 1)")]
    InapplicableRegime { long_radius: f64, short_radius: f64 },

    #[error("non-finite particle state at t = {time}")]
    NonFiniteState { time: f64 },

    #[error("{file}: line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
