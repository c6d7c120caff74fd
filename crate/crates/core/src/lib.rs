#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod fit;
pub mod graph;
pub mod heat;
pub mod linalg;
pub mod linearize;
pub mod phase;
pub mod property;
pub mod solutions;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
