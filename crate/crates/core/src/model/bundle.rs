use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{count_params, AdapterBody, BasemodelConfig, Submodel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// N independent per-speaker submodels addressed through a lookup table
/// (speaker id → member index).
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotBundle {
    index: BTreeMap<u64, usize>,
    members: Vec<Submodel>,
}

impl OneHotBundle {
    pub fn new(members: Vec<Submodel>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::pre("one-hot bundle needs at least one member"));
        };
        let (d_model, d_b, n_layers) = (first.meta.d_model, first.meta.d_b, first.meta.n_layers);
        let mut index = BTreeMap::new();
        for (i, m) in members.iter().enumerate() {
            m.validate()?;
            if (m.meta.d_model, m.meta.d_b, m.meta.n_layers) != (d_model, d_b, n_layers) {
                return Err(Error::dims(format!(
                    "bundle member {i} has shape ({}, {}, {}), expected ({d_model}, {d_b}, {n_layers})",
                    m.meta.d_model, m.meta.d_b, m.meta.n_layers
                )));
            }
            if index.insert(m.meta.speaker_id, i).is_some() {
                return Err(Error::pre(format!("duplicate speaker id {}", m.meta.speaker_id)));
            }
        }
        Ok(OneHotBundle { index, members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Submodel] {
        &self.members
    }

    pub fn into_members(self) -> Vec<Submodel> {
        self.members
    }

    pub fn speaker_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.members.iter().map(|m| m.meta.speaker_id)
    }

    pub fn index_of(&self, speaker_id: u64) -> Result<usize> {
        self.index
            .get(&speaker_id)
            .copied()
            .ok_or_else(|| Error::UnknownSpeaker(speaker_id.to_string()))
    }

    pub fn member(&self, speaker_id: u64) -> Result<&Submodel> {
        Ok(&self.members[self.index_of(speaker_id)?])
    }

    /// Total float count across all members.
    pub fn param_count(&self) -> u64 {
        self.members.iter().map(Submodel::param_count).sum()
    }
}

/// `M` shared adapter banks per layer whose outputs are mixed by a learned
/// per-speaker, per-layer weight vector. The embedding is stored as an
/// `N × (L·M)` matrix: row `s`, columns `l·M..(l+1)·M` weight layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    pub d_model: usize,
    pub d_b: usize,
    pub n_layers: usize,
    pub n_banks: usize,
    /// `banks[l][m]`.
    pub banks: Vec<Vec<AdapterBody>>,
    pub alpha: f32,
    pub speakers: Vec<u64>,
    pub embedding: Tensor,
}

/// Standard deviation of fresh embedding entries (variance 0.1).
pub const EMBEDDING_INIT_STD: f32 = 0.316_227_77;

impl EmbeddingBundle {
    pub fn init(base: &BasemodelConfig, speakers: Vec<u64>, n_banks: usize, d_b: usize, seed: u64) -> Result<Self> {
        if n_banks == 0 {
            return Err(Error::pre("embedding bundle needs M >= 1"));
        }
        count_params(base.d_model as u64, d_b as u64, base.n_layers as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let banks = (0..base.n_layers)
            .map(|_| {
                (0..n_banks)
                    .map(|_| AdapterBody::init(base.d_model, d_b, &mut rng, false))
                    .collect()
            })
            .collect();
        let embedding = Tensor::randn(
            &[speakers.len(), base.n_layers * n_banks],
            EMBEDDING_INIT_STD,
            &mut rng,
        );
        let eb = EmbeddingBundle {
            d_model: base.d_model,
            d_b,
            n_layers: base.n_layers,
            n_banks,
            banks,
            alpha: 1.0,
            speakers,
            embedding,
        };
        eb.validate()?;
        Ok(eb)
    }

    pub fn validate(&self) -> Result<()> {
        if self.banks.len() != self.n_layers || self.banks.iter().any(|l| l.len() != self.n_banks) {
            return Err(Error::dims("bank grid does not match L × M"));
        }
        for layer in &self.banks {
            for b in layer {
                b.check_shape(self.d_model, self.d_b)?;
            }
        }
        if self.embedding.shape() != [self.speakers.len(), self.n_layers * self.n_banks] {
            return Err(Error::dims(format!(
                "embedding {:?} does not match {} speakers × {}",
                self.embedding.shape(),
                self.speakers.len(),
                self.n_layers * self.n_banks
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.speakers {
            if !seen.insert(*s) {
                return Err(Error::pre(format!("duplicate speaker id {s}")));
            }
        }
        Ok(())
    }

    pub fn check_against(&self, base: &BasemodelConfig) -> Result<()> {
        if self.d_model != base.d_model || self.n_layers != base.n_layers {
            return Err(Error::dims(format!(
                "embedding bundle (d_model={}, layers={}) does not fit basemodel (d_model={}, layers={})",
                self.d_model, self.n_layers, base.d_model, base.n_layers
            )));
        }
        self.validate()
    }

    pub fn speaker_index(&self, speaker_id: u64) -> Result<usize> {
        self.speakers
            .iter()
            .position(|&s| s == speaker_id)
            .ok_or_else(|| Error::UnknownSpeaker(speaker_id.to_string()))
    }

    /// The speaker's `L × M` weight matrix.
    pub fn row(&self, speaker_id: u64) -> Result<Tensor> {
        let i = self.speaker_index(speaker_id)?;
        Tensor::matrix(self.n_layers, self.n_banks, self.embedding.row(i).to_vec())
    }

    /// Flattened `L·M` embedding vector for one speaker.
    pub fn flat_vector(&self, speaker_id: u64) -> Result<Vec<f32>> {
        Ok(self.embedding.row(self.speaker_index(speaker_id)?).to_vec())
    }

    pub fn named_bank_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.banks.iter().enumerate() {
            for (m, b) in layer.iter().enumerate() {
                out.extend(b.named_params(&format!("bank{m}.l{l}")));
            }
        }
        out
    }

    pub fn named_bank_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.banks.iter_mut().enumerate() {
            for (m, b) in layer.iter_mut().enumerate() {
                out.extend(b.named_params_mut(&format!("bank{m}.l{l}")));
            }
        }
        out
    }

    pub fn bank_hash(&self) -> u64 {
        let mut h = super::Fnv64::new();
        for (_, t) in self.named_bank_params() {
            h.write_f32s(t.data());
        }
        h.finish()
    }

    /// Adapter bodies plus embedding scalars.
    pub fn param_count(&self) -> u64 {
        let body = self.banks.first().and_then(|l| l.first()).map_or(0, |b| {
            b.tensors().iter().map(|t| t.len() as u64).sum::<u64>()
        });
        body * (self.n_layers * self.n_banks) as u64 + self.embedding.len() as u64
    }
}
