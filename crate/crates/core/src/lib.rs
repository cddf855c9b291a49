//! Desk-scale engine for streaming checkpoint merging.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]     dense f64 matrices and a deterministic full SVD
//! * [`checkpoint`] named tensor collections and their on-disk container
//! * [`toybench`]   synthetic datasets, a small MLP, SGD training, evaluation
//! * [`probe`]      calibration batches, activation collection, rotations
//! * [`merge`]      single-round merge operators (arithmetic and rotation-aware)
//! * [`stream`]     iterated merging schedules with cosine termination
//! * [`oracle`]     closed-form limits and independent numeric cross-checks

pub mod checkpoint;
pub mod error;
pub mod merge;
pub mod oracle;
pub mod probe;
pub mod stream;
pub mod tensor;
pub mod toybench;

pub use error::{Error, Result};
