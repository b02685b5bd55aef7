//! Dense row-major `f32` tensors and the handful of kernels the models need.
//!
//! Every kernel has a fixed evaluation order so that two code paths calling
//! the same kernel on the same inputs produce bit-identical results. Matrix
//! products accumulate `Σ_t a[i,t]·b[t,j]` starting from `0.0` with `t`
//! ascending.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dims(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dims(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Stack equally sized rows into a matrix.
    pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [f32]>) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut width = None;
        let mut n = 0;
        for r in rows {
            match width {
                None => width = Some(r.len()),
                Some(w) if w != r.len() => {
                    return Err(Error::dims(format!(
                        "row {n} has width {} but earlier rows have {w}",
                        r.len()
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(r);
            n += 1;
        }
        Ok(Tensor {
            shape: vec![n, width.unwrap_or(0)],
            data,
        })
    }

    pub fn frobenius_norm(&self) -> f32 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape(self, other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dims(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// `C = A·B` for `A: m×k`, `B: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() > 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(Error::dims(format!(
            "matmul: {:?} × {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b.data[t * n..(t + 1) * n];
            for (c, &b_tj) in c_row.iter_mut().zip(b_row) {
                *c += a_it * b_tj;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `C = Aᵀ·B` without materializing the transpose.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0f32; m * n];
    for t in 0..k {
        let a_row = &a.data[t * m..(t + 1) * m];
        let b_row = &b.data[t * n..(t + 1) * n];
        for (i, &a_ti) in a_row.iter().enumerate() {
            let c_row = &mut out[i * n..(i + 1) * n];
            for (c, &b_tj) in c_row.iter_mut().zip(b_row) {
                *c += a_ti * b_tj;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `C = A·Bᵀ` without materializing the transpose.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(k, b.cols());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Adds a bias vector to every row.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.len() != x.cols() {
        return Err(Error::dims(format!(
            "add_bias: input {:?}, bias {:?}",
            x.shape, bias.shape
        )));
    }
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data.chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(out)
}

/// `x·W + b`, the dense layer used throughout (row-vector convention).
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_bias(&matmul(x, w)?, b)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Per-row statistics cached by layer norm for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct RowStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

fn layer_norm_row(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) -> (f32, f32) {
    let d = x.len() as f32;
    let mut sum = 0.0f32;
    for &v in x {
        sum += v;
    }
    let mean = sum / d;
    let mut sq = 0.0f32;
    for &v in x {
        let c = v - mean;
        sq += c * c;
    }
    let var = sq / d;
    let rstd = 1.0 / (var + eps).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = g * ((v - mean) * rstd) + b;
    }
    (mean, rstd)
}

pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, RowStats)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dims(format!(
            "layer_norm: input {:?}, gamma {:?}, beta {:?}",
            x.shape, gamma.shape, beta.shape
        )));
    }
    if d == 0 {
        return Err(Error::pre("layer_norm needs d >= 1"));
    }
    let mut out = Tensor::zeros(&x.shape);
    let rows = x.rows();
    let mut stats = RowStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for i in 0..rows {
        let (mean, rstd) = layer_norm_row(
            &x.data[i * d..(i + 1) * d],
            &gamma.data,
            &beta.data,
            eps,
            &mut out.data[i * d..(i + 1) * d],
        );
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((out, stats))
}

/// Row-wise layer normalization with population variance:
/// `gamma ⊙ (x − mean) / sqrt(var + eps) + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::pre("layer_norm eps must be > 0"));
    }
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Kahan-compensated sum; keeps reductions within a few ulps of the exact
/// value while staying in `f32`.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f32>) -> f32 {
    let mut sum = 0.0f32;
    let mut c = 0.0f32;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Mean squared error over all elements.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f32> {
    same_shape(pred, target, "mse_loss")?;
    if pred.is_empty() {
        return Err(Error::pre("mse_loss of empty tensors"));
    }
    let total = compensated_sum(pred.data.iter().zip(&target.data).map(|(p, t)| {
        let d = p - t;
        d * d
    }));
    Ok(total / pred.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, d: &[f32]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_two_by_two() {
        let b = m(2, 2, &[5., 6., 7., 8.]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let a = m(2, 2, &[1., 2., 3., 4.]);
        assert_eq!(matmul(&a, &b).unwrap(), m(2, 2, &[19., 22., 43., 50.]));
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..5 {
                let mut s = 0.0f32;
                for t in 0..3 {
                    s += a.data()[i * 3 + t] * b.data()[t * 5 + j];
                }
                assert_eq!(s.to_bits(), c.data()[i * 5 + j].to_bits());
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] × [2, 3]"), "{msg}");
        assert_eq!(err.code(), "DIM_MISMATCH");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let c = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let tn = matmul_tn(&a, &b);
        let expect = matmul(&a.transpose(), &b).unwrap();
        for (x, y) in tn.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-5);
        }
        let nt = matmul_nt(&a, &c);
        let expect = matmul(&a, &c.transpose()).unwrap();
        for (x, y) in nt.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let y = layer_norm(&Tensor::full(&[4], 3.5), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = layer_norm(
            &Tensor::vector(vec![1.0, -1.0]),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            1e-12,
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!((y.data()[1] + 1.0).abs() < 1e-6);

        assert!(layer_norm(&ones, &ones, &zeros, 0.0).is_err());
    }

    #[test]
    fn layer_norm_matches_f64_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = Tensor::randn(&[16], 2.0, &mut rng);
            let g = Tensor::randn(&[16], 1.0, &mut rng);
            let b = Tensor::randn(&[16], 1.0, &mut rng);
            let y = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
            let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
            let mean = xs.iter().sum::<f64>() / 16.0;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            for i in 0..16 {
                let want = g.data()[i] as f64 * (xs[i] - mean) / (var + 1e-5).sqrt()
                    + b.data()[i] as f64;
                let got = y.data()[i] as f64;
                assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(
            relu(&Tensor::vector(vec![-1.0, 0.0, 2.0])).data(),
            &[0.0, 0.0, 2.0]
        );
        let neg = Tensor::vector(vec![-3.0, -0.5, -1e-9]);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[64], 1.0, &mut rng);
        assert!(relu(&relu(&x)).bit_eq(&relu(&x)));
    }

    #[test]
    fn mse_cases() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(
            mse_loss(&Tensor::vector(vec![2.0]), &Tensor::vector(vec![0.0])).unwrap(),
            4.0
        );
        assert!(mse_loss(&x, &Tensor::vector(vec![1.0])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = Tensor::randn(&[1000], 1.0, &mut rng);
        let t = Tensor::randn(&[1000], 1.0, &mut rng);
        let oracle = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / 1000.0;
        let got = mse_loss(&p, &t).unwrap() as f64;
        assert!(((got - oracle) / oracle).abs() < 1e-6);
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }
}
