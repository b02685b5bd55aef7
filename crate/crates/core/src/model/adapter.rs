use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{count_params, BasemodelConfig, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, LAYER_NORM_EPS};

/// Standard deviation of freshly initialized adapter weights.
pub const ADAPTER_INIT_STD: f32 = 0.01;

/// The trainable body of a residual adapter: LN → down → ReLU → up.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBody {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
}

impl AdapterBody {
    pub fn init(d_model: usize, d_b: usize, rng: &mut ChaCha8Rng, zero_up: bool) -> Self {
        let w_up = if zero_up {
            Tensor::zeros(&[d_b, d_model])
        } else {
            Tensor::randn(&[d_b, d_model], ADAPTER_INIT_STD, rng)
        };
        AdapterBody {
            ln_gamma: Tensor::full(&[d_model], 1.0),
            ln_beta: Tensor::zeros(&[d_model]),
            w_down: Tensor::randn(&[d_model, d_b], ADAPTER_INIT_STD, rng),
            b_down: Tensor::zeros(&[d_b]),
            w_up,
            b_up: Tensor::zeros(&[d_model]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.ln_gamma.len()
    }

    pub fn d_b(&self) -> usize {
        self.b_down.len()
    }

    pub fn check_shape(&self, d_model: usize, d_b: usize) -> Result<()> {
        let ok = self.ln_gamma.shape() == [d_model]
            && self.ln_beta.shape() == [d_model]
            && self.w_down.shape() == [d_model, d_b]
            && self.b_down.shape() == [d_b]
            && self.w_up.shape() == [d_b, d_model]
            && self.b_up.shape() == [d_model];
        if ok {
            Ok(())
        } else {
            Err(Error::dims(format!(
                "adapter tensors do not match d_model={d_model}, d_b={d_b}"
            )))
        }
    }

    /// `up(relu(down(layernorm(h))))` row-wise.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let n = tensor::layer_norm(h, &self.ln_gamma, &self.ln_beta, LAYER_NORM_EPS)?;
        let z = tensor::relu(&tensor::linear(&n, &self.w_down, &self.b_down)?);
        tensor::linear(&z, &self.w_up, &self.b_up)
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.ln_gamma,
            &self.ln_beta,
            &self.w_down,
            &self.b_down,
            &self.w_up,
            &self.b_up,
        ]
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        const NAMES: [&str; 6] = ["ln_gamma", "ln_beta", "w_down", "b_down", "w_up", "b_up"];
        NAMES
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (format!("{prefix}.{n}"), t))
            .collect()
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.ln_gamma"), &mut self.ln_gamma),
            (format!("{prefix}.ln_beta"), &mut self.ln_beta),
            (format!("{prefix}.w_down"), &mut self.w_down),
            (format!("{prefix}.b_down"), &mut self.b_down),
            (format!("{prefix}.w_up"), &mut self.w_up),
            (format!("{prefix}.b_up"), &mut self.b_up),
        ]
    }
}

/// One adapter layer of a submodel: the body plus the residual factor,
/// which is an on/off switch (`0.0` or `1.0`) and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub body: AdapterBody,
    pub alpha: f32,
}

impl AdapterParams {
    /// The four transport groups: LN stats, down projection, up projection,
    /// residual factor.
    pub fn transport_groups(&self) -> [Vec<f32>; 4] {
        let b = &self.body;
        let cat = |a: &Tensor, c: &Tensor| {
            let mut v = a.data().to_vec();
            v.extend_from_slice(c.data());
            v
        };
        [
            cat(&b.ln_gamma, &b.ln_beta),
            cat(&b.w_down, &b.b_down),
            cat(&b.w_up, &b.b_up),
            vec![self.alpha],
        ]
    }
}

/// `h + alpha · body(h)`. With `alpha == 0` the body is skipped and `h` is
/// returned unchanged.
pub fn adapter_apply(h: &Tensor, a: &AdapterParams) -> Result<Tensor> {
    if h.cols() != a.body.d_model() {
        return Err(Error::dims(format!(
            "adapter expects width {}, got {:?}",
            a.body.d_model(),
            h.shape()
        )));
    }
    if a.alpha == 0.0 {
        return Ok(h.clone());
    }
    let body = a.body.forward(h)?;
    let mut out = h.clone();
    for (o, &b) in out.data_mut().iter_mut().zip(body.data()) {
        *o += a.alpha * b;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubmodelMeta {
    pub speaker_id: u64,
    pub d_model: usize,
    pub d_b: usize,
    pub n_layers: usize,
    pub format_version: u16,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Submodel {
    pub meta: SubmodelMeta,
    pub layers: Vec<AdapterParams>,
}

impl Submodel {
    /// Fresh adapters for every layer, `alpha = 1`.
    pub fn init(speaker_id: u64, d_model: usize, d_b: usize, n_layers: usize, seed: u64) -> Result<Self> {
        Self::init_with(speaker_id, d_model, d_b, n_layers, seed, false)
    }

    pub fn init_with(
        speaker_id: u64,
        d_model: usize,
        d_b: usize,
        n_layers: usize,
        seed: u64,
        zero_up: bool,
    ) -> Result<Self> {
        count_params(d_model as u64, d_b as u64, n_layers as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..n_layers)
            .map(|_| AdapterParams {
                body: AdapterBody::init(d_model, d_b, &mut rng, zero_up),
                alpha: 1.0,
            })
            .collect();
        Ok(Submodel {
            meta: SubmodelMeta {
                speaker_id,
                d_model,
                d_b,
                n_layers,
                format_version: FORMAT_VERSION,
            },
            layers,
        })
    }

    pub fn for_base(base: &BasemodelConfig, speaker_id: u64, d_b: usize, seed: u64) -> Result<Self> {
        Self::init(speaker_id, base.d_model, d_b, base.n_layers, seed)
    }

    pub fn speaker_id(&self) -> u64 {
        self.meta.speaker_id
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.meta.n_layers {
            return Err(Error::dims(format!(
                "submodel declares {} layers but holds {}",
                self.meta.n_layers,
                self.layers.len()
            )));
        }
        for a in &self.layers {
            a.body.check_shape(self.meta.d_model, self.meta.d_b)?;
            if a.alpha != 0.0 && a.alpha != 1.0 {
                return Err(Error::pre(format!(
                    "residual factor must be 0 or 1, found {}",
                    a.alpha
                )));
            }
        }
        Ok(())
    }

    /// Errors with `DIM_MISMATCH` unless the submodel fits `base`.
    pub fn check_against(&self, base: &BasemodelConfig) -> Result<()> {
        if self.meta.d_model != base.d_model || self.meta.n_layers != base.n_layers {
            return Err(Error::dims(format!(
                "submodel (d_model={}, layers={}) does not fit basemodel (d_model={}, layers={})",
                self.meta.d_model, self.meta.n_layers, base.d_model, base.n_layers
            )));
        }
        self.validate()
    }

    pub fn set_alpha(&mut self, alpha: f32) {
        for l in &mut self.layers {
            l.alpha = alpha;
        }
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.set_alpha(alpha);
        self
    }

    /// Number of stored floats, residual factors included.
    pub fn param_count(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.body.tensors().iter().map(|t| t.len() as u64).sum::<u64>() + 1)
            .sum()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, a)| a.body.named_params(&format!("{prefix}.l{l}")))
            .collect()
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(l, a)| a.body.named_params_mut(&format!("{prefix}.l{l}")))
            .collect()
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = super::Fnv64::new();
        h.write(&self.meta.speaker_id.to_le_bytes());
        for l in &self.layers {
            for g in l.transport_groups() {
                h.write_f32s(&g);
            }
        }
        h.finish()
    }
}
