use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Fnv64;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasemodelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub d_out: usize,
    pub seed: u64,
}

impl Default for BasemodelConfig {
    fn default() -> Self {
        BasemodelConfig {
            d_in: 8,
            d_model: 32,
            d_ff: 64,
            n_layers: 4,
            d_out: 8,
            seed: 0,
        }
    }
}

impl BasemodelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_layers == 0 || self.d_out == 0 {
            return Err(Error::pre(format!("all basemodel dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Saturates at `u64::MAX` for dimensions no real model could have.
    pub fn param_count(&self) -> u64 {
        let (i, m, f, o, l) = (
            self.d_in as u128,
            self.d_model as u128,
            self.d_ff as u128,
            self.d_out as u128,
            self.n_layers as u128,
        );
        let block = 2 * m + m * f + f + f * m + m;
        u64::try_from(i * m + m + l * block + m * o + o).unwrap_or(u64::MAX)
    }
}

/// One encoder block: `h + W2·relu(W1·LN(h) + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Basemodel {
    pub config: BasemodelConfig,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub blocks: Vec<Block>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl Basemodel {
    /// Random initialization: weights `N(0, 1/fan_in)`, the second block
    /// projection scaled down so every block starts close to identity.
    pub fn init(config: BasemodelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();
        let BasemodelConfig {
            d_in,
            d_model,
            d_ff,
            d_out,
            ..
        } = config;
        let w_in = Tensor::randn(&[d_in, d_model], std(d_in), &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln_gamma: Tensor::full(&[d_model], 1.0),
                ln_beta: Tensor::zeros(&[d_model]),
                w1: Tensor::randn(&[d_model, d_ff], std(d_model), &mut rng),
                b1: Tensor::zeros(&[d_ff]),
                w2: Tensor::randn(&[d_ff, d_model], 0.1 * std(d_ff), &mut rng),
                b2: Tensor::zeros(&[d_model]),
            })
            .collect();
        let w_out = Tensor::randn(&[d_model, d_out], std(d_model), &mut rng);
        Ok(Basemodel {
            config,
            w_in,
            b_in: Tensor::zeros(&[d_model]),
            blocks,
            w_out,
            b_out: Tensor::zeros(&[d_out]),
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("base.in.w".to_string(), &self.w_in),
            ("base.in.b".to_string(), &self.b_in),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend([
                (format!("base.block{l}.ln_gamma"), &b.ln_gamma),
                (format!("base.block{l}.ln_beta"), &b.ln_beta),
                (format!("base.block{l}.w1"), &b.w1),
                (format!("base.block{l}.b1"), &b.b1),
                (format!("base.block{l}.w2"), &b.w2),
                (format!("base.block{l}.b2"), &b.b2),
            ]);
        }
        out.push(("base.out.w".to_string(), &self.w_out));
        out.push(("base.out.b".to_string(), &self.b_out));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("base.in.w".to_string(), &mut self.w_in),
            ("base.in.b".to_string(), &mut self.b_in),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend([
                (format!("base.block{l}.ln_gamma"), &mut b.ln_gamma),
                (format!("base.block{l}.ln_beta"), &mut b.ln_beta),
                (format!("base.block{l}.w1"), &mut b.w1),
                (format!("base.block{l}.b1"), &mut b.b1),
                (format!("base.block{l}.w2"), &mut b.w2),
                (format!("base.block{l}.b2"), &mut b.b2),
            ]);
        }
        out.push(("base.out.w".to_string(), &mut self.w_out));
        out.push(("base.out.b".to_string(), &mut self.b_out));
        out
    }

    /// Tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Hash over every weight; used to prove the basemodel stays frozen.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        for t in self.tensors() {
            h.write_f32s(t.data());
        }
        h.finish()
    }

    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|t| t.len() as u64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_tensors() {
        let base = Basemodel::init(BasemodelConfig::default()).unwrap();
        assert_eq!(base.param_count(), base.config.param_count());
    }

    #[test]
    fn init_is_seeded() {
        let a = Basemodel::init(BasemodelConfig::default()).unwrap();
        let b = Basemodel::init(BasemodelConfig::default()).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = Basemodel::init(BasemodelConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Basemodel::init(BasemodelConfig {
            n_layers: 0,
            ..Default::default()
        })
        .is_err());
    }
}
