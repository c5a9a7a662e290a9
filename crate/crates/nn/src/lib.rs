//! Minimal CPU neural-network toolkit: strided GEMM, dense layers,
//! pre-norm transformer blocks with hand-written backward passes, Adam, a
//! finite-difference checker and the shared binary tensor format.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod scalar;
pub mod tensorfile;
pub mod transformer;

pub use adam::{clip_grad_norm, Adam, Schedule};
pub use layers::{cross_entropy, LayerNorm, Linear};
pub use params::{ParamId, ParamStore};
pub use scalar::{gemm, matmul, Op, Scalar};
pub use tensorfile::{sha256_hex, NamedTensor, TensorFile};
pub use transformer::{Block, BlockShape, Segments, Stack, StackCache, StackOutput};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checksum mismatch: trailer {expected}, content {found}")]
    Checksum { expected: String, found: String },
}
