//! End-to-end experiment pipelines behind the `softlabel` binary.

mod config;
mod run;

pub use config::{DatasetKind, RunConfig};
pub use run::*;
