// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ad;
pub mod condgen;
pub mod datasets;
pub mod error;
pub mod flow;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod ou;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
