//! Differential gene-network inference from two-condition expression data.

pub mod datamodel;
pub mod diffexpr;
pub mod enrich;
pub mod error;
pub mod fixture;
pub mod forest;
pub mod ggm;
pub mod pipeline;
pub mod ppi;
pub(crate) mod tsv;

pub use error::{Error, Result};
