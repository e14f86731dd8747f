//! Deterministic, file-driven numerics for multi-task learning.
//!
//! The crate is organised by analysis:
//!
//! - [`io`]: the `MTKT` binary tensor format, loss-trace CSVs and label maps.
//! - [`affinity`]: representation dissimilarity matrices and the task-affinity tensor.
//! - [`branch`]: exhaustive branched-architecture search under a resource budget.
//! - [`balancing`]: task weighting strategies, the min-norm solver and the
//!   multi-task performance metric.
//! - [`pixel`]: local pixel-affinity agreement between label maps.
//! - [`contrastive`]: contrastive and nearest-neighbour losses, embedding
//!   queues and crop sampling.
//! - [`distill`]: forward passes of the multi-modal distillation operators.
//! - [`cli`]: the `mtl-lab` command line driver.

pub mod affinity;
pub mod balancing;
pub mod branch;
pub mod cli;
pub mod contrastive;
pub mod distill;
mod error;
pub mod io;
pub mod pixel;

pub use error::{Error, Result};
