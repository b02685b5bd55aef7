//! Central finite differences in 64-bit against analytic gradients.

use std::collections::BTreeMap;

use crate::autodiff::GradMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters upcast to `f64`, keyed like the gradient map.
pub type ParamsF64 = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error, as `name[index]`.
    pub worst: String,
    pub checked: usize,
    pub pass: bool,
}

pub fn upcast<'a>(params: impl IntoIterator<Item = (String, &'a Tensor)>) -> ParamsF64 {
    params
        .into_iter()
        .map(|(k, t)| (k, t.data().iter().map(|&v| f64::from(v)).collect()))
        .collect()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1e-8f64.max(a.abs()).max(n.abs())
}

/// Compares `analytic` against `(loss(p+eps) − loss(p−eps)) / 2eps` for every
/// coordinate of every parameter in `params`. Parameters missing from
/// `analytic` are treated as having zero analytic gradient.
pub fn grad_check<F>(loss_fn: F, params: &ParamsF64, analytic: &GradMap, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamsF64) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::pre("grad_check eps must be > 0"));
    }
    let mut work = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0;
    for (name, values) in params {
        let grad = analytic.get(name);
        if let Some(g) = grad {
            if g.len() != values.len() {
                return Err(Error::dims(format!(
                    "analytic gradient for {name} has {} entries, parameter {}",
                    g.len(),
                    values.len()
                )));
            }
        }
        for i in 0..values.len() {
            let orig = values[i];
            work.get_mut(name).expect("cloned")[i] = orig + eps;
            let plus = loss_fn(&work);
            work.get_mut(name).expect("cloned")[i] = orig - eps;
            let minus = loss_fn(&work);
            work.get_mut(name).expect("cloned")[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteLoss {
                    coordinate: format!("{name}[{i}]"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| f64::from(g.data()[i]));
            let e = rel_err(a, numeric);
            if e > max_rel_err || checked == 0 {
                max_rel_err = e;
                worst = format!("{name}[{i}]");
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        checked,
        pass: max_rel_err < tol,
    })
}
