//! Gradient-check cases shared by the gradient tests and the acceptance run.
//!
//! Each case draws parameters and data from successive seeds until every
//! ReLU pre-activation sits at least `KINK_CLEARANCE` from zero, so a central
//! difference with step `EPS` never straddles a kink.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use submodel::autodiff::GradMap;
use submodel::data::{Split, Utterance};
use submodel::gradcheck::{grad_check, upcast, GradCheckReport, ParamsF64};
use submodel::model::{Basemodel, EmbeddingBundle, Submodel};
use submodel::train::{base_batch_grads, embedding_batch_grads, onehot_batch_grads, submodel_batch_grads};
use submodel::Tensor;

use super::{empty, frozen_base, kink_margin, mse, tiny_config, Adapter, View};

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const KINK_CLEARANCE: f64 = 0.01;

pub fn batch(rows: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Tensor::randn(&[rows, 4], 1.0, &mut rng), Tensor::randn(&[rows, 4], 1.0, &mut rng))
}

pub fn utterances(n: usize, frames: usize, seed: u64) -> Vec<Utterance> {
    (0..n)
        .map(|i| {
            let (x, y) = batch(frames, seed * 1000 + i as u64);
            Utterance { x, y, split: Split::Train }
        })
        .collect()
}

/// Moves parameters off their near-zero init to a generic point.
pub fn spread(params: Vec<(String, &mut Tensor)>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params {
        let noise = Tensor::randn(t.shape(), 0.5, &mut rng);
        let offset = if name.ends_with("ln_gamma") { 1.0 } else { 0.0 };
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v = offset + n;
        }
    }
}

fn first_clear<F>(attempt: F) -> GradCheckReport
where
    F: FnMut(u64) -> Option<GradCheckReport>,
{
    (0..500)
        .find_map(attempt)
        .expect("no kink-free check point in 500 seeds")
}

fn check<L: Fn(&ParamsF64) -> f64>(loss: L, params: &ParamsF64, g: &GradMap) -> Option<GradCheckReport> {
    if kink_margin(|| {
        loss(params);
    }) < KINK_CLEARANCE
    {
        return None;
    }
    Some(grad_check(loss, params, g, EPS, TOL).expect("finite losses"))
}

pub fn single_submodel() -> GradCheckReport {
    let b = Basemodel::init(tiny_config()).unwrap();
    let frozen = frozen_base(&b);
    first_clear(|seed| {
        let mut sub = Submodel::for_base(&b.config, 1, 3, seed).unwrap();
        spread(sub.named_params_mut("sub"), seed);
        let (x, y) = batch(5, seed);
        let (_, g) = submodel_batch_grads(&b, &sub, x.clone(), y.clone()).unwrap();
        let params = upcast(sub.named_params("sub"));
        let adapter = Adapter::Single { prefix: "sub", alpha: 1.0 };
        check(|p| mse(&View { live: p, frozen: &frozen }, &b.config, &adapter, &x, &y), &params, &g)
    })
}

pub fn full_finetune() -> GradCheckReport {
    let none = empty();
    first_clear(|seed| {
        let mut b = Basemodel::init(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in b.named_params_mut() {
            let n = Tensor::randn(t.shape(), 0.1, &mut rng);
            for (v, d) in t.data_mut().iter_mut().zip(n.data()) {
                *v += d;
            }
        }
        let (x, y) = batch(4, seed);
        let (_, g) = base_batch_grads(&b, x.clone(), y.clone()).unwrap();
        let params = upcast(b.named_params());
        check(|p| mse(&View { live: p, frozen: &none }, &b.config, &Adapter::None, &x, &y), &params, &g)
    })
}

/// Three members; the batch holds two samples of member 1 and one each of
/// members 0 and 2. Members 0 and 1 are checked, member 2 is held fixed.
pub fn onehot_member() -> GradCheckReport {
    let b = Basemodel::init(tiny_config()).unwrap();
    first_clear(|seed| {
        let mut members: Vec<Submodel> = (0..3)
            .map(|i| Submodel::for_base(&b.config, 10 + i, 3, seed + i).unwrap())
            .collect();
        for (i, m) in members.iter_mut().enumerate() {
            spread(m.named_params_mut("m"), seed * 10 + i as u64);
        }
        let utts = utterances(4, 2, seed);
        let picked = vec![(1, &utts[0]), (0, &utts[1]), (1, &utts[2]), (2, &utts[3])];
        let (_, g) = onehot_batch_grads(&b, &members, &picked).unwrap();
        let mut frozen = frozen_base(&b);
        frozen.extend(upcast(members[2].named_params("member2")));
        let mut params = upcast(members[1].named_params("member1"));
        params.extend(upcast(members[0].named_params("member0")));
        let loss = |p: &ParamsF64| {
            let v = View { live: p, frozen: &frozen };
            let total: f64 = picked
                .iter()
                .map(|(i, u)| {
                    let prefix = format!("member{i}");
                    mse(&v, &b.config, &Adapter::Single { prefix: &prefix, alpha: 1.0 }, &u.x, &u.y)
                })
                .sum();
            total / picked.len() as f64
        };
        check(loss, &params, &g)
    })
}

/// M = 2 banks, three speaker rows; row 1 is absent from the batch.
pub fn mixture() -> GradCheckReport {
    let b = Basemodel::init(tiny_config()).unwrap();
    let frozen = frozen_base(&b);
    first_clear(|seed| {
        let mut eb = EmbeddingBundle::init(&b.config, vec![5, 6, 7], 2, 3, seed).unwrap();
        spread(eb.named_bank_params_mut(), seed);
        let utts = utterances(3, 2, seed);
        let picked = vec![(0, &utts[0]), (2, &utts[1]), (0, &utts[2])];
        let (_, g) = embedding_batch_grads(&b, &eb, &picked, true).unwrap();
        if g["embedding"].row(1).iter().any(|&v| v != 0.0) {
            panic!("absent speaker row received gradient");
        }
        let mut params = upcast(eb.named_bank_params());
        params.insert("embedding".into(), eb.embedding.data().iter().map(|&v| f64::from(v)).collect());
        let loss = |p: &ParamsF64| {
            let v = View { live: p, frozen: &frozen };
            let total: f64 = picked
                .iter()
                .map(|(row, u)| mse(&v, &b.config, &Adapter::Mixture { n_banks: 2, row: *row, alpha: 1.0 }, &u.x, &u.y))
                .sum();
            total / picked.len() as f64
        };
        check(loss, &params, &g)
    })
}
