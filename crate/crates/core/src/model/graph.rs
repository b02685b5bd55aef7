//! Recorded (differentiable) forward passes used by the training regimes.

use super::{AdapterBody, Basemodel};
use crate::autodiff::{NodeId, Record};
use crate::error::Result;
use crate::tensor::LAYER_NORM_EPS;

pub(crate) struct BlockNodes {
    ln_gamma: NodeId,
    ln_beta: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

pub(crate) struct BaseNodes {
    w_in: NodeId,
    b_in: NodeId,
    blocks: Vec<BlockNodes>,
    w_out: NodeId,
    b_out: NodeId,
}

pub(crate) fn register_base<'a>(rec: &mut Record<'a>, base: &'a Basemodel, trainable: bool) -> BaseNodes {
    let mut p = base.named_params().into_iter();
    let mut next = |rec: &mut Record<'a>| {
        let (name, t) = p.next().expect("basemodel parameter order");
        rec.param(name, t, trainable)
    };
    let w_in = next(rec);
    let b_in = next(rec);
    let blocks = (0..base.blocks.len())
        .map(|_| BlockNodes {
            ln_gamma: next(rec),
            ln_beta: next(rec),
            w1: next(rec),
            b1: next(rec),
            w2: next(rec),
            b2: next(rec),
        })
        .collect();
    let w_out = next(rec);
    let b_out = next(rec);
    BaseNodes {
        w_in,
        b_in,
        blocks,
        w_out,
        b_out,
    }
}

pub(crate) struct BodyNodes {
    ln_gamma: NodeId,
    ln_beta: NodeId,
    w_down: NodeId,
    b_down: NodeId,
    w_up: NodeId,
    b_up: NodeId,
}

pub(crate) fn register_body<'a>(rec: &mut Record<'a>, prefix: &str, body: &'a AdapterBody, trainable: bool) -> BodyNodes {
    let mut p = body.named_params(prefix).into_iter();
    let mut next = |rec: &mut Record<'a>| {
        let (name, t) = p.next().expect("adapter parameter order");
        rec.param(name, t, trainable)
    };
    BodyNodes {
        ln_gamma: next(rec),
        ln_beta: next(rec),
        w_down: next(rec),
        b_down: next(rec),
        w_up: next(rec),
        b_up: next(rec),
    }
}

fn body_forward(rec: &mut Record<'_>, b: &BodyNodes, h: NodeId) -> Result<NodeId> {
    let n = rec.layer_norm(h, b.ln_gamma, b.ln_beta, LAYER_NORM_EPS)?;
    let d = rec.linear(n, b.w_down, b.b_down)?;
    let z = rec.relu(d)?;
    rec.linear(z, b.w_up, b.b_up)
}

/// What follows block `l`.
pub(crate) enum LayerAdapter {
    Single { body: BodyNodes, alpha: f32 },
    Mixture { banks: Vec<BodyNodes>, weights: NodeId, alpha: f32 },
}

fn apply_adapter(rec: &mut Record<'_>, a: &LayerAdapter, h: NodeId) -> Result<NodeId> {
    match a {
        LayerAdapter::Single { alpha, .. } | LayerAdapter::Mixture { alpha, .. } if *alpha == 0.0 => Ok(h),
        LayerAdapter::Single { body, alpha } => {
            let mut r = body_forward(rec, body, h)?;
            if *alpha != 1.0 {
                r = rec.scale(r, *alpha)?;
            }
            rec.add(h, r)
        }
        LayerAdapter::Mixture { banks, weights, alpha } => {
            let bodies = banks
                .iter()
                .map(|b| body_forward(rec, b, h))
                .collect::<Result<Vec<_>>>()?;
            let mut r = rec.mix(&bodies, *weights)?;
            if *alpha != 1.0 {
                r = rec.scale(r, *alpha)?;
            }
            rec.add(h, r)
        }
    }
}

/// Basemodel forward on an `n × d_in` input node with `adapters[l]` applied
/// after block `l` (missing entries mean no adapter).
pub(crate) fn forward(rec: &mut Record<'_>, base: &BaseNodes, adapters: &[LayerAdapter], x: NodeId) -> Result<NodeId> {
    let mut h = rec.linear(x, base.w_in, base.b_in)?;
    for (l, b) in base.blocks.iter().enumerate() {
        let n = rec.layer_norm(h, b.ln_gamma, b.ln_beta, LAYER_NORM_EPS)?;
        let f = rec.linear(n, b.w1, b.b1)?;
        let z = rec.relu(f)?;
        let r = rec.linear(z, b.w2, b.b2)?;
        h = rec.add(h, r)?;
        if let Some(a) = adapters.get(l) {
            h = apply_adapter(rec, a, h)?;
        }
    }
    rec.linear(h, base.w_out, base.b_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_with_embedding, forward_with_submodel, BasemodelConfig, EmbeddingBundle, Submodel};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Tensor, b: &Tensor) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn recorded_forward_agrees_with_inference() {
        let base = Basemodel::init(BasemodelConfig::default()).unwrap();
        let sub = Submodel::for_base(&base.config, 1, 8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);

        let mut rec = Record::new();
        let bn = register_base(&mut rec, &base, false);
        let adapters: Vec<_> = sub
            .layers
            .iter()
            .enumerate()
            .map(|(l, a)| LayerAdapter::Single {
                body: register_body(&mut rec, &format!("sub.l{l}"), &a.body, true),
                alpha: a.alpha,
            })
            .collect();
        let xn = rec.input(x.clone());
        let y = forward(&mut rec, &bn, &adapters, xn).unwrap();
        close(rec.value(y), &forward_with_submodel(&base, Some(&sub), &x).unwrap());
    }

    #[test]
    fn recorded_mixture_agrees_with_inference() {
        let base = Basemodel::init(BasemodelConfig::default()).unwrap();
        let eb = EmbeddingBundle::init(&base.config, vec![4, 5], 3, 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);

        let mut rec = Record::new();
        let bn = register_base(&mut rec, &base, false);
        let table = rec.param("embedding", &eb.embedding, true);
        let mut adapters = Vec::new();
        for (l, layer) in eb.banks.iter().enumerate() {
            let banks = layer
                .iter()
                .enumerate()
                .map(|(m, b)| register_body(&mut rec, &format!("bank{m}.l{l}"), b, true))
                .collect();
            let weights = rec.gather(table, vec![1; 5], l * 3, 3).unwrap();
            adapters.push(LayerAdapter::Mixture {
                banks,
                weights,
                alpha: 1.0,
            });
        }
        let xn = rec.input(x.clone());
        let y = forward(&mut rec, &bn, &adapters, xn).unwrap();
        let want = forward_with_embedding(&base, &eb, &eb.row(5).unwrap(), &x).unwrap();
        close(rec.value(y), &want);
    }
}
