//! Differentiable binary weight masks regularized for feature specialization
//! and cross-domain reuse, with subnetwork extraction and analysis.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod modreg;
pub mod nn;
pub mod objectives;
pub mod seed;
pub mod subnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Gradients, OpKind, Padding, Tape, Tensor, Var};
