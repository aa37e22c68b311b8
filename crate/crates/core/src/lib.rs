//! Dynamically consistent quantizers for streaming nearest neighbor search.

pub mod baselines;
pub mod codeq;
pub mod error;
pub mod heap;
pub mod kd;
pub mod quadsketch;
pub mod quantizer;
pub mod rng;
pub mod store;
pub mod stream;

pub use error::{Error, Result};
pub use store::{DiskAddress, DiskStore, IoLedger, IoReport, WriteBatch};
pub use codeq::{Codeq, CodeqConfig};
pub use quantizer::{Neighbor, PointId, Quantizer};
