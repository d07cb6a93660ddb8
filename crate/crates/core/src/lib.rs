//! Self-distilled masked autoencoder at desk scale.
//!
//! A student ViT encoder sees only the visible patches of an image; a light
//! decoder predicts, at every masked position, the features an EMA teacher
//! encoder produces for that patch. The teacher receives the masked patches
//! split into disjoint folds, each forwarded independently.

pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod masking;
pub mod tensor;
pub mod training;
pub mod vit;

pub use error::{Error, Result};
