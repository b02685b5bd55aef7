//! Inference-time forward passes. Inputs are frames (a vector of width
//! `d_in`) or batches of frames (an `n × d_in` matrix); rows are processed
//! independently, so batching never changes a row's result.

use super::{adapter_apply, Basemodel, EmbeddingBundle, OneHotBundle, Submodel};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, LAYER_NORM_EPS};

fn as_batch(base: &Basemodel, x: &Tensor) -> Result<(Tensor, bool)> {
    let d_in = base.config.d_in;
    match x.shape() {
        [n] if *n == d_in => Ok((x.clone().reshape(vec![1, d_in])?, true)),
        [_, c] if *c == d_in => Ok((x.clone(), false)),
        s => Err(Error::dims(format!("expected frames of width {d_in}, got shape {s:?}"))),
    }
}

/// Runs the basemodel, calling `adapt(l, h)` on the output of block `l`.
fn run<F>(base: &Basemodel, x: &Tensor, mut adapt: F) -> Result<Tensor>
where
    F: FnMut(usize, Tensor) -> Result<Tensor>,
{
    let (x, single) = as_batch(base, x)?;
    let mut h = tensor::linear(&x, &base.w_in, &base.b_in)?;
    for (l, b) in base.blocks.iter().enumerate() {
        let n = tensor::layer_norm(&h, &b.ln_gamma, &b.ln_beta, LAYER_NORM_EPS)?;
        let z = tensor::relu(&tensor::linear(&n, &b.w1, &b.b1)?);
        let r = tensor::linear(&z, &b.w2, &b.b2)?;
        h.add_assign(&r)?;
        h = adapt(l, h)?;
    }
    let y = tensor::linear(&h, &base.w_out, &base.b_out)?;
    if single {
        let n = y.len();
        y.reshape(vec![n])
    } else {
        Ok(y)
    }
}

pub fn base_forward(base: &Basemodel, x: &Tensor) -> Result<Tensor> {
    run(base, x, |_, h| Ok(h))
}

/// Applies one adapter after every block; `None` is exactly the basemodel.
pub fn forward_with_submodel(base: &Basemodel, sub: Option<&Submodel>, x: &Tensor) -> Result<Tensor> {
    let Some(sub) = sub else {
        return base_forward(base, x);
    };
    sub.check_against(&base.config)?;
    run(base, x, |l, h| adapter_apply(&h, &sub.layers[l]))
}

pub fn forward_with_bundle(base: &Basemodel, bundle: &OneHotBundle, speaker_id: u64, x: &Tensor) -> Result<Tensor> {
    forward_with_submodel(base, Some(bundle.member(speaker_id)?), x)
}

/// At layer `l`: `h + alpha · Σ_m e_row[l, m] · body_{l,m}(h)`. Banks with a
/// zero weight are skipped, so an all-zero row reproduces the basemodel.
pub fn forward_with_embedding(base: &Basemodel, eb: &EmbeddingBundle, e_row: &Tensor, x: &Tensor) -> Result<Tensor> {
    eb.check_against(&base.config)?;
    if e_row.shape() != [eb.n_layers, eb.n_banks] {
        return Err(Error::dims(format!(
            "embedding row {:?} does not match L={} × M={}",
            e_row.shape(),
            eb.n_layers,
            eb.n_banks
        )));
    }
    run(base, x, |l, h| {
        let weights = e_row.row(l);
        if eb.alpha == 0.0 || weights.iter().all(|&w| w == 0.0) {
            return Ok(h);
        }
        let mut acc: Option<Tensor> = None;
        for (m, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let body = eb.banks[l][m].forward(&h)?;
            match &mut acc {
                None => acc = Some(body.scale(w)),
                Some(a) => {
                    for (v, &b) in a.data_mut().iter_mut().zip(body.data()) {
                        *v += w * b;
                    }
                }
            }
        }
        let acc = acc.expect("at least one non-zero weight");
        let mut out = h;
        for (o, &c) in out.data_mut().iter_mut().zip(acc.data()) {
            *o += eb.alpha * c;
        }
        Ok(out)
    })
}
