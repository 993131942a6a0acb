//! Fine-grained sketch-to-image retrieval.
//!
//! Dual weight-sharing ViT encoders trained with a multi-positive contrastive
//! objective, plus a head that recycles the patch tokens a ViT normally
//! discards.

pub mod config;
pub mod data;
pub mod error;
pub mod evalx;
pub mod mstr;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
