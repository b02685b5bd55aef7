//! Basemodel/submodel specialization at desk scale.
//!
//! A frozen [`model::Basemodel`] is personalized by small residual-adapter
//! [`model::Submodel`]s that can be trained independently, trained jointly
//! as a one-hot bundle, shared through a real-valued embedding mixture, or
//! pooled. Submodels serialize to a fixed little-endian format and are
//! loaded on demand by the multi-tenant [`serve`] module.

pub mod autodiff;
mod binio;
pub mod cache;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod par;
pub mod probe;
pub mod serve;
pub mod store;
pub mod tensor;
pub mod train;

pub use binio::derive_seed;
pub use error::{Error, Result};
pub use tensor::Tensor;
