//! Desk-scale vision-language laboratory: a synthetic world, a frozen toy
//! language model and vision tower joined by a trainable linear adapter, and
//! per-layer sparse autoencoders used to probe where projected image tokens
//! start to look like native language features.

pub mod acts;
pub mod adapter;
pub mod probe;
pub mod error;
pub mod synthworld;
pub mod tinylm;
pub mod tinyvit;
pub mod saelab;

pub use error::{Error, Result};
