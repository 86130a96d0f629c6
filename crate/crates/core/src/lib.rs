//! No-reference image quality assessment built on a small reverse-mode
//! autodiff engine.
//!
//! Pipeline: a convolutional backbone extracts multi-scale features, each
//! stage is L2-normalized, L2-pooled and projected into a shared token
//! sequence, a stack of downsampling transformer layers encodes the tokens,
//! and a fusion head regresses a scalar quality score. Training minimizes a
//! quality regression loss, a batch ranking loss over the extreme samples,
//! and a consistency loss between an image and its horizontal mirror.

pub mod backbone;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod par;
pub mod session;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tape, Var};
