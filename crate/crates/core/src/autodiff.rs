//! Reverse-mode differentiation over a linear log of primitive applications.
//!
//! A [`Record`] is built fresh for every forward pass. Parameters enter it by
//! name and are either trainable or frozen; [`Record::backward`] returns
//! gradients only for the trainable ones. Nodes that do not depend on any
//! trainable parameter carry no gradient at all, so frozen subgraphs cost
//! nothing on the way back.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, RowStats, Tensor};

static NEXT_RECORD: AtomicU64 = AtomicU64::new(1);

/// Handle to a value logged in a [`Record`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId {
    record: u64,
    index: usize,
}

/// Gradients keyed by parameter name. Only trainable parameters appear.
pub type GradMap = BTreeMap<String, Tensor>;

enum Op {
    Param { name: String, trainable: bool },
    Input,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Relu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: RowStats,
    },
    Gather {
        table: usize,
        rows: Vec<usize>,
        offset: usize,
        width: usize,
    },
    Mix { bodies: Vec<usize>, weights: usize },
    Scale(usize, f32),
    Mse { pred: usize, target: usize },
    LinComb(Vec<(usize, f32)>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Record<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Record<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Record<'a> {
    pub fn new() -> Self {
        Record {
            id: NEXT_RECORD.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[self.index(id)].value
    }

    fn index(&self, id: NodeId) -> usize {
        assert_eq!(id.record, self.id, "node used with a foreign record");
        id.index
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.record != self.id {
            return Err(Error::pre("node was not produced under this record"));
        }
        Ok(id.index)
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId {
            record: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Registers a named parameter. Frozen parameters never receive gradients.
    pub fn param(&mut self, name: impl Into<String>, value: &'a Tensor, trainable: bool) -> NodeId {
        self.push(
            Cow::Borrowed(value),
            Op::Param {
                name: name.into(),
                trainable,
            },
            trainable,
        )
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Input, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = tensor::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let g = self.needs(ia) || self.needs(ib);
        Ok(self.push(Cow::Owned(v), Op::MatMul(ia, ib), g))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let v = tensor::add_bias(&self.nodes[ix].value, &self.nodes[ib].value)?;
        let g = self.needs(ix) || self.needs(ib);
        Ok(self.push(Cow::Owned(v), Op::AddBias(ix, ib), g))
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let mut v = self.nodes[ia].value.clone().into_owned();
        v.add_assign(&self.nodes[ib].value)?;
        let g = self.needs(ia) || self.needs(ib);
        Ok(self.push(Cow::Owned(v), Op::Add(ia, ib), g))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.check(x)?;
        let v = tensor::relu(&self.nodes[ix].value);
        let g = self.needs(ix);
        Ok(self.push(Cow::Owned(v), Op::Relu(ix), g))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> Result<NodeId> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (v, stats) = tensor::layer_norm_with_stats(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
            eps,
        )?;
        let g = self.needs(ix) || self.needs(ig) || self.needs(ib);
        Ok(self.push(
            Cow::Owned(v),
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                stats,
            },
            g,
        ))
    }

    /// Selects `table[rows[b], offset..offset+width]` for every `b`, giving a
    /// `rows.len() × width` matrix.
    pub fn gather(&mut self, table: NodeId, rows: Vec<usize>, offset: usize, width: usize) -> Result<NodeId> {
        let it = self.check(table)?;
        let t = &self.nodes[it].value;
        if offset + width > t.cols() || rows.iter().any(|&r| r >= t.rows()) {
            return Err(Error::dims(format!(
                "gather: table {:?}, columns {offset}..{}",
                t.shape(),
                offset + width
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in &rows {
            data.extend_from_slice(&t.row(r)[offset..offset + width]);
        }
        let v = Tensor::matrix(rows.len(), width, data)?;
        let g = self.needs(it);
        Ok(self.push(
            Cow::Owned(v),
            Op::Gather {
                table: it,
                rows,
                offset,
                width,
            },
            g,
        ))
    }

    /// Row-wise mixture `Σ_m weights[:, m] · bodies[m]`, accumulated with `m`
    /// ascending starting from the first term.
    pub fn mix(&mut self, bodies: &[NodeId], weights: NodeId) -> Result<NodeId> {
        let iw = self.check(weights)?;
        let ib = bodies.iter().map(|&b| self.check(b)).collect::<Result<Vec<_>>>()?;
        let w = &self.nodes[iw].value;
        if ib.is_empty() || w.cols() != ib.len() {
            return Err(Error::dims(format!(
                "mix: {} bodies, weights {:?}",
                ib.len(),
                w.shape()
            )));
        }
        let shape = self.nodes[ib[0]].value.shape().to_vec();
        let (rows, cols) = (self.nodes[ib[0]].value.rows(), self.nodes[ib[0]].value.cols());
        if w.rows() != rows || ib.iter().any(|&i| self.nodes[i].value.shape() != shape.as_slice()) {
            return Err(Error::dims("mix: body shapes disagree with weights"));
        }
        let mut out = Tensor::zeros(&shape);
        for r in 0..rows {
            let wr = w.row(r);
            let o = out.row_mut(r);
            for (m, &bi) in ib.iter().enumerate() {
                let body = &self.nodes[bi].value.row(r)[..cols];
                if m == 0 {
                    for (v, &x) in o.iter_mut().zip(body) {
                        *v = wr[0] * x;
                    }
                } else {
                    for (v, &x) in o.iter_mut().zip(body) {
                        *v += wr[m] * x;
                    }
                }
            }
        }
        let g = self.needs(iw) || ib.iter().any(|&i| self.needs(i));
        Ok(self.push(Cow::Owned(out), Op::Mix { bodies: ib, weights: iw }, g))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> Result<NodeId> {
        let ix = self.check(x)?;
        let v = self.nodes[ix].value.scale(c);
        let g = self.needs(ix);
        Ok(self.push(Cow::Owned(v), Op::Scale(ix, c), g))
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (ip, it) = (self.check(pred)?, self.check(target)?);
        let v = tensor::mse_loss(&self.nodes[ip].value, &self.nodes[it].value)?;
        let g = self.needs(ip) || self.needs(it);
        Ok(self.push(Cow::Owned(Tensor::scalar(v)), Op::Mse { pred: ip, target: it }, g))
    }

    /// `Σ c_i · x_i` over same-shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(NodeId, f32)]) -> Result<NodeId> {
        let idx = terms
            .iter()
            .map(|&(n, c)| self.check(n).map(|i| (i, c)))
            .collect::<Result<Vec<_>>>()?;
        let Some(&(first, _)) = idx.first() else {
            return Err(Error::pre("lin_comb of zero terms"));
        };
        let mut acc = Tensor::zeros(self.nodes[first].value.shape());
        for &(i, c) in &idx {
            acc.add_assign(&self.nodes[i].value.scale(c))?;
        }
        let g = idx.iter().any(|&(i, _)| self.needs(i));
        Ok(self.push(Cow::Owned(acc), Op::LinComb(idx), g))
    }

    /// Back-propagates from a scalar `loss`, visiting each logged primitive
    /// once in reverse order.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::pre(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = GradMap::new();
        if !self.nodes[il].needs_grad {
            return Ok(out);
        }
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), 1.0));

        for i in (0..=il).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param { name, trainable } => {
                    if *trainable {
                        match out.get_mut(name) {
                            Some(g) => g.add_assign(&dy)?,
                            None => {
                                out.insert(name.clone(), dy);
                            }
                        }
                    }
                }
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let da = tensor::matmul_nt(&dy, &self.nodes[b].value);
                        let da = da.reshape(self.nodes[a].value.shape().to_vec())?;
                        accumulate(&mut grads, a, da)?;
                    }
                    if self.needs(b) {
                        let av = &self.nodes[a].value;
                        let a2 = if av.shape().len() == 1 {
                            av.clone().into_owned().reshape(vec![1, av.len()])?
                        } else {
                            av.clone().into_owned()
                        };
                        accumulate(&mut grads, b, tensor::matmul_tn(&a2, &dy))?;
                    }
                }
                Op::AddBias(x, b) => {
                    let (x, b) = (*x, *b);
                    if self.needs(b) {
                        let c = dy.cols();
                        let mut db = vec![0.0f32; c];
                        for r in 0..dy.rows() {
                            for (s, v) in db.iter_mut().zip(dy.row(r)) {
                                *s += v;
                            }
                        }
                        let db = Tensor::new(self.nodes[b].value.shape().to_vec(), db)?;
                        accumulate(&mut grads, b, db)?;
                    }
                    if self.needs(x) {
                        accumulate(&mut grads, x, dy)?;
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) && self.needs(b) {
                        accumulate(&mut grads, a, dy.clone())?;
                        accumulate(&mut grads, b, dy)?;
                    } else if self.needs(a) {
                        accumulate(&mut grads, a, dy)?;
                    } else if self.needs(b) {
                        accumulate(&mut grads, b, dy)?;
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let mut dx = dy;
                        for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                            if y <= 0.0 {
                                *d = 0.0;
                            }
                        }
                        accumulate(&mut grads, x, dx)?;
                    }
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xv = &self.nodes[x].value;
                    let gv = self.nodes[gamma].value.data();
                    let d = xv.cols();
                    let rows = xv.rows();
                    let mut dgamma = vec![0.0f32; d];
                    let mut dbeta = vec![0.0f32; d];
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut xhat = vec![0.0f32; d];
                    let mut dxhat = vec![0.0f32; d];
                    for r in 0..rows {
                        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
                        let xr = xv.row(r);
                        let dyr = dy.row(r);
                        let mut sum_dxhat = 0.0f32;
                        let mut sum_dxhat_xhat = 0.0f32;
                        for j in 0..d {
                            xhat[j] = (xr[j] - mean) * rstd;
                            dgamma[j] += dyr[j] * xhat[j];
                            dbeta[j] += dyr[j];
                            dxhat[j] = dyr[j] * gv[j];
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat[j];
                        }
                        let inv_d = 1.0 / d as f32;
                        let dxr = dx.row_mut(r);
                        for j in 0..d {
                            dxr[j] = rstd
                                * (dxhat[j] - sum_dxhat * inv_d - xhat[j] * sum_dxhat_xhat * inv_d);
                        }
                    }
                    if self.needs(gamma) {
                        let t = Tensor::new(self.nodes[gamma].value.shape().to_vec(), dgamma)?;
                        accumulate(&mut grads, gamma, t)?;
                    }
                    if self.needs(beta) {
                        let t = Tensor::new(self.nodes[beta].value.shape().to_vec(), dbeta)?;
                        accumulate(&mut grads, beta, t)?;
                    }
                    if self.needs(x) {
                        accumulate(&mut grads, x, dx)?;
                    }
                }
                Op::Gather {
                    table,
                    rows,
                    offset,
                    width,
                } => {
                    let table = *table;
                    if self.needs(table) {
                        let mut dt = Tensor::zeros(self.nodes[table].value.shape());
                        for (b, &r) in rows.iter().enumerate() {
                            let src = dy.row(b);
                            let dst = &mut dt.row_mut(r)[*offset..*offset + *width];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        accumulate(&mut grads, table, dt)?;
                    }
                }
                Op::Mix { bodies, weights } => {
                    let w = &self.nodes[*weights].value;
                    if self.needs(*weights) {
                        let mut dw = Tensor::zeros(w.shape());
                        for r in 0..dy.rows() {
                            let dyr = dy.row(r);
                            for (m, &bi) in bodies.iter().enumerate() {
                                let br = self.nodes[bi].value.row(r);
                                let mut s = 0.0f32;
                                for (a, b) in dyr.iter().zip(br) {
                                    s += a * b;
                                }
                                dw.row_mut(r)[m] = s;
                            }
                        }
                        accumulate(&mut grads, *weights, dw)?;
                    }
                    for (m, &bi) in bodies.iter().enumerate() {
                        if !self.needs(bi) {
                            continue;
                        }
                        let mut db = dy.clone();
                        for r in 0..db.rows() {
                            let wm = w.row(r)[m];
                            for v in db.row_mut(r) {
                                *v *= wm;
                            }
                        }
                        accumulate(&mut grads, bi, db)?;
                    }
                }
                Op::Scale(x, c) => {
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dy.scale(*c))?;
                    }
                }
                Op::Mse { pred, target } => {
                    let g = dy.data()[0];
                    let p = &self.nodes[*pred].value;
                    let t = &self.nodes[*target].value;
                    let k = 2.0 * g / p.len() as f32;
                    if self.needs(*pred) {
                        let mut dp = p.sub(t)?;
                        dp.data_mut().iter_mut().for_each(|v| *v *= k);
                        accumulate(&mut grads, *pred, dp)?;
                    }
                    if self.needs(*target) {
                        let mut dt = t.sub(p)?;
                        dt.data_mut().iter_mut().for_each(|v| *v *= k);
                        accumulate(&mut grads, *target, dt)?;
                    }
                }
                Op::LinComb(terms) => {
                    for &(x, c) in terms {
                        if self.needs(x) {
                            accumulate(&mut grads, x, dy.scale(c))?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) -> Result<()> {
    match &mut grads[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_weight_gradient() {
        let w = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let mut rec = Record::new();
        let x = rec.input(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let wn = rec.param("w", &w, true);
        let y = rec.matmul(x, wn).unwrap();
        let zero = rec.input(Tensor::zeros(&[1, 1]));
        let loss = rec.mse(y, zero).unwrap();
        assert_eq!(rec.value(loss).data(), &[9.0]);
        let g = rec.backward(loss).unwrap();
        assert_eq!(g["w"].data(), &[6.0]);
    }

    #[test]
    fn frozen_parameter_gets_no_entry() {
        let w = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let mut rec = Record::new();
        let x = rec.input(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let wn = rec.param("w", &w, false);
        let y = rec.matmul(x, wn).unwrap();
        let zero = rec.input(Tensor::zeros(&[1, 1]));
        let loss = rec.mse(y, zero).unwrap();
        assert!(rec.backward(loss).unwrap().is_empty());
    }

    #[test]
    fn repeated_use_accumulates() {
        // loss = mean((w*x + w*x)^2) = 4w²x² ⇒ d/dw = 8wx² = 24
        let w = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let mut rec = Record::new();
        let x = rec.input(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let w1 = rec.param("w", &w, true);
        let w2 = rec.param("w", &w, true);
        let a = rec.matmul(x, w1).unwrap();
        let b = rec.matmul(x, w2).unwrap();
        let y = rec.add(a, b).unwrap();
        let zero = rec.input(Tensor::zeros(&[1, 1]));
        let loss = rec.mse(y, zero).unwrap();
        let g = rec.backward(loss).unwrap();
        assert_eq!(g["w"].data(), &[24.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_nodes() {
        let mut rec = Record::new();
        let x = rec.input(Tensor::zeros(&[2, 2]));
        assert!(rec.backward(x).is_err());
        let mut other = Record::new();
        let y = other.input(Tensor::scalar(1.0));
        assert!(rec.backward(y).is_err());
    }

    #[test]
    fn mix_weight_and_gather_gradients() {
        // one row, two bodies: out = w0*b0 + w1*b1, loss = mean(out²)
        let table = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut rec = Record::new();
        let t = rec.param("e", &table, true);
        let w = rec.gather(t, vec![1], 0, 2).unwrap();
        let b0 = rec.input(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b1 = rec.input(Tensor::matrix(1, 2, vec![-1.0, 3.0]).unwrap());
        let out = rec.mix(&[b0, b1], w).unwrap();
        // out = 2*[1,2] + 0.25*[-1,3] = [1.75, 4.75]
        assert_eq!(rec.value(out).data(), &[1.75, 4.75]);
        let zero = rec.input(Tensor::zeros(&[1, 2]));
        let loss = rec.mse(out, zero).unwrap();
        let g = rec.backward(loss).unwrap();
        // dL/dout = out; dw0 = 1.75*1 + 4.75*2 = 11.25; dw1 = -1.75 + 14.25 = 12.5
        assert_eq!(g["e"].data(), &[0.0, 0.0, 11.25, 12.5]);
    }
}
