//! Product quantization baselines that differ in how they react to drift.
//!
//! All of them keep codes in memory and full vectors on disk, one record per
//! point, so their I/O is directly comparable with [`crate::Codeq`].

pub mod kmeans;
mod pq;
mod variants;

pub use pq::{train, PqConfig, PqIndex};
pub use variants::{DeDriftPq, DedriftConfig, FrozenPq, OnlinePq, RebuildPq, Schedule};
