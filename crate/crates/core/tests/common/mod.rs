//! Independent 64-bit reference implementation of the forward pass and
//! losses, written directly from the model equations. Used as the oracle for
//! finite-difference gradient checks.

#![allow(dead_code)]

pub mod cases;

use std::collections::BTreeMap;

use submodel::gradcheck::{upcast, ParamsF64};
use submodel::model::{Basemodel, BasemodelConfig};
use submodel::Tensor;

const LN_EPS: f64 = 1e-5;

/// Looks up `name` in the perturbed set first, then the frozen set.
pub struct View<'a> {
    pub live: &'a ParamsF64,
    pub frozen: &'a ParamsF64,
}

impl View<'_> {
    pub fn get(&self, name: &str) -> &[f64] {
        self.live
            .get(name)
            .or_else(|| self.frozen.get(name))
            .unwrap_or_else(|| panic!("no parameter {name}"))
    }
}

pub fn layer_norm(h: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = h.len() as f64;
    let mean = h.iter().sum::<f64>() / d;
    let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let r = 1.0 / (var + LN_EPS).sqrt();
    h.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| g * (v - mean) * r + b)
        .collect()
}

/// `x · W + b` with `W` stored row-major as `n_in × n_out`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n_out = b.len();
    (0..n_out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * n_out + j]).sum::<f64>())
        .collect()
}

thread_local! {
    static KINK_MARGIN: std::cell::Cell<f64> = const { std::cell::Cell::new(f64::INFINITY) };
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    KINK_MARGIN.with(|m| m.set(v.iter().fold(m.get(), |acc, x| acc.min(x.abs()))));
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// Runs `f` and returns the smallest |pre-activation| seen by any ReLU.
pub fn kink_margin(f: impl FnOnce()) -> f64 {
    KINK_MARGIN.with(|m| m.set(f64::INFINITY));
    f();
    KINK_MARGIN.with(|m| m.get())
}

/// `up(relu(down(LN(h))))` for the body stored under `prefix`.
pub fn body(p: &View<'_>, prefix: &str, h: &[f64]) -> Vec<f64> {
    let n = layer_norm(h, p.get(&format!("{prefix}.ln_gamma")), p.get(&format!("{prefix}.ln_beta")));
    let z = relu(linear(&n, p.get(&format!("{prefix}.w_down")), p.get(&format!("{prefix}.b_down"))));
    linear(&z, p.get(&format!("{prefix}.w_up")), p.get(&format!("{prefix}.b_up")))
}

/// Residual update applied after block `l` for one frame.
pub enum Adapter<'a> {
    None,
    /// Single adapter bodies stored under `{prefix}.l{l}`.
    Single { prefix: &'a str, alpha: f64 },
    /// Banks `bank{m}.l{l}` mixed with `embedding[row][l·M + m]`.
    Mixture { n_banks: usize, row: usize, alpha: f64 },
}

pub fn forward_frame(p: &View<'_>, cfg: &BasemodelConfig, adapter: &Adapter<'_>, x: &[f64]) -> Vec<f64> {
    let mut h = linear(x, p.get("base.in.w"), p.get("base.in.b"));
    for l in 0..cfg.n_layers {
        let pre = format!("base.block{l}");
        let n = layer_norm(&h, p.get(&format!("{pre}.ln_gamma")), p.get(&format!("{pre}.ln_beta")));
        let f = relu(linear(&n, p.get(&format!("{pre}.w1")), p.get(&format!("{pre}.b1"))));
        let r = linear(&f, p.get(&format!("{pre}.w2")), p.get(&format!("{pre}.b2")));
        for (a, b) in h.iter_mut().zip(r) {
            *a += b;
        }
        match adapter {
            Adapter::None => {}
            Adapter::Single { prefix, alpha } => {
                let r = body(p, &format!("{prefix}.l{l}"), &h);
                for (a, b) in h.iter_mut().zip(r) {
                    *a += alpha * b;
                }
            }
            Adapter::Mixture { n_banks, row, alpha } => {
                let e = p.get("embedding");
                let width = cfg.n_layers * n_banks;
                let mut mix = vec![0.0; h.len()];
                for m in 0..*n_banks {
                    let w = e[row * width + l * n_banks + m];
                    for (acc, v) in mix.iter_mut().zip(body(p, &format!("bank{m}.l{l}"), &h)) {
                        *acc += w * v;
                    }
                }
                for (a, b) in h.iter_mut().zip(mix) {
                    *a += alpha * b;
                }
            }
        }
    }
    linear(&h, p.get("base.out.w"), p.get("base.out.b"))
}

/// Mean squared error over every element of the `frames × d_out` output.
pub fn mse(p: &View<'_>, cfg: &BasemodelConfig, adapter: &Adapter<'_>, x: &Tensor, y: &Tensor) -> f64 {
    let mut total = 0.0;
    for r in 0..x.rows() {
        let xr: Vec<f64> = x.row(r).iter().map(|&v| f64::from(v)).collect();
        let out = forward_frame(p, cfg, adapter, &xr);
        total += out
            .iter()
            .zip(y.row(r))
            .map(|(o, &t)| (o - f64::from(t)).powi(2))
            .sum::<f64>();
    }
    total / (x.rows() * y.cols()) as f64
}

pub fn frozen_base(base: &Basemodel) -> ParamsF64 {
    upcast(base.named_params())
}

pub fn empty() -> ParamsF64 {
    BTreeMap::new()
}

/// Small shapes that keep finite differences cheap.
pub fn tiny_config() -> BasemodelConfig {
    BasemodelConfig {
        d_in: 4,
        d_model: 8,
        d_ff: 16,
        n_layers: 2,
        d_out: 4,
        seed: 11,
    }
}
