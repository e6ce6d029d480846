//! Sequence-to-sequence transformer whose encoder mixes attention mechanisms
//! per head: full scaled dot-product, sliding-window local attention, and
//! attention over convolution-compressed keys and values.
//!
//! The crate also carries the head-contribution analysis used to study such
//! models, a small training harness with a synthetic task, and reference
//! implementations used to verify every mechanism.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod init;
pub mod mhma;
pub mod model;
pub mod par;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{CheckpointError, Error, Result};
