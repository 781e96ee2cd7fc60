//! A self-contained laboratory for studying how much input text can be
//! reconstructed from the internal states (per-token hidden activations) that
//! a decoder-only language model produces while it runs.
//!
//! The crate trains a small byte-level transformer, captures its internal
//! states at any layer, mounts white-box and black-box inversion attacks
//! against those states, applies perturbation/quantization defenses, and
//! scores the reconstructed text. Everything is seeded and deterministic so
//! experiments replay bit-identically.

pub mod attacks;
pub mod blackbox;
pub mod corpus;
pub mod defenses;
pub mod error;
pub mod harness;
pub mod lm;
pub mod metrics;
pub mod optim;
pub mod store;
pub mod tensor;
pub mod util;
pub mod wire;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
