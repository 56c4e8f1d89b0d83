//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward pass. Nodes are appended in evaluation order,
//! so the node index is already a topological order and [`Tape::backward`] is a
//! single reverse sweep. Tapes are not reused across passes.

use crate::error::{Error, Result};
use crate::tensor::{self, LossKind, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    CrossEntropy(Var, Tensor),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Forward values plus, after [`Tape::backward`], the adjoint of every node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `a[m×n] + b` with `b` a single row broadcast over `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.len() != va.cols() {
            return Err(Error::dim("add_row", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        let n = va.cols();
        for i in 0..va.rows() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        debug_assert_eq!(n, vb.len());
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Multiplies `a` by the single-element tensor held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::dim("scale_by", self.value(a).shape(), sv.shape()));
        }
        let out = self.value(a).scaled(sv.data()[0]);
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a), mask)?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = (vx.rows(), vx.cols());
        if vg.len() != n || vb.len() != n {
            return Err(Error::dim("layer_norm", vx.shape(), vg.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                xhat[i * n + j] = xh;
                out[i * n + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let m = self.value(*first).rows();
        let mut n = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != m {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), v.shape()));
            }
            n += v.cols();
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let n = self.value(*first).cols();
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(Error::dim("concat_rows", self.value(*first).shape(), v.shape()));
            }
            m += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Column means, returned as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let out = Tensor::matrix(1, n, out).expect("shape is consistent");
        self.push(out, Op::MeanRows(a))
    }

    /// Row lookup `table[ids]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let n = t.cols();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::Input(format!(
                    "token id {id} outside vocabulary of {}",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), n, data)?;
        Ok(self.push(out, Op::Gather(table, ids.to_vec())))
    }

    /// Mean cross-entropy of `logits` against `targets`, as a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], kind: LossKind) -> Result<Var> {
        let (losses, grad) = tensor::cross_entropy_parts(self.value(logits), targets, kind)?;
        let b = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / b;
        Ok(self.push(Tensor::scalar(mean), Op::CrossEntropy(logits, grad.scaled(1.0 / b))))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Propagates adjoints from the scalar node `loss` to every ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let nodes = &self.nodes;
            let mut acc = |v: Var, t: Tensor| accumulate(nodes, &mut grads, v, t);
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, tensor::matmul(&g, &vb.transpose())?);
                    acc(*b, tensor::matmul(&va.transpose(), &g)?);
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let vb = &nodes[b.0].value;
                    let mut gb = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (o, x) in gb.iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(*b, Tensor::new(vb.shape().to_vec(), gb)?);
                    acc(*a, g.clone());
                }
                Op::Scale(a, s) => acc(*a, g.scaled(*s)),
                Op::ScaleBy(a, s) => {
                    let va = &nodes[a.0].value;
                    let sv = nodes[s.0].value.data()[0];
                    let gs = g.frobenius_dot(va)?;
                    acc(*s, Tensor::new(nodes[s.0].value.shape().to_vec(), vec![gs])?);
                    acc(*a, g.scaled(sv));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.shape());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - dot);
                        }
                    }
                    acc(*a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let vg = &nodes[gamma.0].value;
                    let (m, n) = (g.rows(), g.cols());
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let gr = g.row(i);
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            dgamma[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                            let d = gr[j] * vg.data()[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let scale = inv_std[i] / n as f64;
                        for j in 0..n {
                            let d = gr[j] * vg.data()[j];
                            dx[i * n + j] = scale * (n as f64 * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                    acc(*gamma, Tensor::new(vg.shape().to_vec(), dgamma)?);
                    acc(*beta, Tensor::new(nodes[beta.0].value.shape().to_vec(), dbeta)?);
                    acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                Op::Gelu(a) => {
                    let va = &nodes[a.0].value;
                    let mut ga = g.clone();
                    for (o, &x) in ga.data_mut().iter_mut().zip(va.data()) {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *o *= 0.5 * (1.0 + t) + 0.5 * x * dt;
                    }
                    acc(*a, ga);
                }
                Op::SliceCols(a, start) => {
                    let va = &nodes[a.0].value;
                    let mut ga = Tensor::zeros(va.shape());
                    let w = g.cols();
                    for i in 0..g.rows() {
                        ga.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                    }
                    acc(*a, ga);
                }
                Op::SliceRows(a, start) => {
                    let va = &nodes[a.0].value;
                    let mut ga = Tensor::zeros(va.shape());
                    let n = g.cols();
                    ga.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    acc(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        acc(*p, g.slice_cols(offset, w)?);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = nodes[p.0].value.rows();
                        acc(*p, g.slice_rows(offset, h)?);
                        offset += h;
                    }
                }
                Op::MeanRows(a) => {
                    let va = &nodes[a.0].value;
                    let m = va.rows();
                    let mut ga = Tensor::zeros(va.shape());
                    for i in 0..m {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.data()) {
                            *o = x / m as f64;
                        }
                    }
                    acc(*a, ga);
                }
                Op::Gather(table, ids) => {
                    let vt = &nodes[table.0].value;
                    let mut gt = Tensor::zeros(vt.shape());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(*table, gt);
                }
                Op::CrossEntropy(logits, dlogits) => {
                    acc(*logits, dlogits.scaled(g.data()[0]));
                }
                Op::Sum(a) => {
                    let va = &nodes[a.0].value;
                    acc(*a, Tensor::filled(va.shape(), g.data()[0]));
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Adjoint of `v`; zeros when `v` does not influence the loss.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Tape("gradient requested before backward".into()))?;
        Ok(grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape())))
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if matches!(nodes[v.0].op, Op::Constant) {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
