//! The frozen basemodel, residual-adapter submodels in their three
//! parameterizations, and parameter/size accounting.

mod adapter;
mod base;
mod bundle;
mod forward;
pub(crate) mod graph;

pub use adapter::{adapter_apply, AdapterBody, AdapterParams, Submodel, SubmodelMeta, ADAPTER_INIT_STD};
pub use base::{Basemodel, BasemodelConfig, Block};
pub use bundle::{EmbeddingBundle, OneHotBundle, EMBEDDING_INIT_STD};
pub use forward::{
    base_forward, forward_with_bundle, forward_with_embedding, forward_with_submodel,
};

use crate::error::{Error, Result};

/// Current on-disk format version for every artifact.
pub const FORMAT_VERSION: u16 = 1;

/// Size of the fixed header preceding every serialized submodel.
pub const HEADER_BYTES: u64 = 32;

/// Float values held by one adapter layer: LN gamma and beta, down
/// projection with bias, up projection with bias, and the residual factor.
pub fn params_per_layer(d_model: u64, d_b: u64) -> u64 {
    2 * d_model + d_model * d_b + d_b + d_b * d_model + d_model + 1
}

/// Number of stored floats in a submodel with `n_layers` adapters.
pub fn count_params(d_model: u64, d_b: u64, n_layers: u64) -> Result<u64> {
    if d_model == 0 || d_b == 0 || n_layers == 0 {
        return Err(Error::pre(format!(
            "count_params needs positive dimensions, got d_model={d_model} d_b={d_b} layers={n_layers}"
        )));
    }
    d_model
        .checked_mul(d_b)
        .and_then(|p| p.checked_mul(2))
        .and_then(|p| p.checked_add(3 * d_model + d_b + 1))
        .and_then(|p| p.checked_mul(n_layers))
        .ok_or_else(|| Error::DimMismatch(format!("d_model={d_model} d_b={d_b} layers={n_layers} overflows the format")))
}

/// Bytes on disk for `param_count` 32-bit floats behind the fixed header.
pub fn serialized_size(param_count: u64) -> u64 {
    param_count.saturating_mul(4).saturating_add(HEADER_BYTES)
}

/// FNV-1a over a byte stream; stable across builds and platforms.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_f32s(&mut self, values: &[f32]) {
        for v in values {
            self.write(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}
