//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so reverse insertion order is a
//! valid topological order for the backward pass. Gradients are only
//! propagated into nodes that (transitively) depend on a leaf created with
//! `requires_grad = true`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{dot, Matrix};
use crate::resample::Resample2d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCols(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Matrix, rstd: Vec<f64> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Matrix, rstd: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    NormalizeCols { x: NodeId, rstd: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<Matrix> },
    VConcat(Vec<NodeId>),
    HConcat(Vec<NodeId>),
    RowSlice { x: NodeId, start: usize },
    Resample { x: NodeId, plan: Arc<Resample2d> },
    CrossEntropySum { logits: NodeId, targets: Arc<Vec<Option<u16>>>, probs: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Broadcast-add a `1×C` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "add_row shape");
        let mut v = x.clone();
        for chunk in v.data.chunks_mut(x.cols) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// `a · diag(row)` for a `1×C` row.
    pub fn mul_cols(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "mul_cols shape");
        let v = x.mul_cols(&r.data);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::MulCols(a, row), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data = x.data.iter().map(|&v| 0.5 * v * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2))).collect();
        let v = Matrix::from_vec(x.rows, x.cols, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with `1×C` gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut xhat = Matrix::zeros(n, c);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / libm::sqrt(var + eps);
            rstd.push(s);
            for (o, &v) in xhat.data[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let v = affine(&xhat, &self.value(gamma).data, &self.value(beta).data);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Column-wise batch normalization using the statistics of this batch.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row_slice(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row_slice(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut xhat = Matrix::zeros(n, c);
        for r in 0..n {
            for (j, (o, v)) in xhat.data[r * c..(r + 1) * c].iter_mut().zip(xv.row_slice(r)).enumerate() {
                *o = (v - mean[j]) * rstd[j];
            }
        }
        let v = affine(&xhat, &self.value(gamma).data, &self.value(beta).data);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(v, Op::BatchNorm { x, gamma, beta, xhat, rstd, mean, var }, rg)
    }

    /// Batch mean and biased variance of a [`batch_norm`](Self::batch_norm) node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// `(x − mean) / sqrt(var + eps)` per column with fixed statistics.
    pub fn normalize_cols(&mut self, x: NodeId, mean: &[f64], var: &[f64], eps: f64) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols;
        assert_eq!(mean.len(), c);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut v = xv.clone();
        for chunk in v.data.chunks_mut(c) {
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = (*o - mean[j]) * rstd[j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::NormalizeCols { x, rstd }, rg)
    }

    /// Multi-head scaled dot-product self-attention over `N×D` q, k, v.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert!(heads > 0 && d % heads == 0, "embed dim must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &qv.row_slice(i)[cols.clone()];
                let row = &mut p.data[i * n..(i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &kv.row_slice(j)[cols.clone()]) * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = libm::exp(*s - max);
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
                let o = &mut out.data[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &pij) in row.iter().enumerate() {
                    for (ov, vj) in o.iter_mut().zip(&vv.row_slice(j)[cols.clone()]) {
                        *ov += pij * vj;
                    }
                }
            }
            probs.push(p);
        }
        let rg = self.rg(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, probs }, rg)
    }

    pub fn vconcat(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "vconcat column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let rg = self.rg(parts);
        self.push(Matrix::from_vec(rows, cols, data), Op::VConcat(parts.to_vec()), rg)
    }

    pub fn hconcat(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "hconcat row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row_slice(r));
            }
            off += m.cols;
        }
        let rg = self.rg(parts);
        self.push(out, Op::HConcat(parts.to_vec()), rg)
    }

    pub fn row_slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let m = self.value(x);
        assert!(start + len <= m.rows, "row_slice out of range");
        let v = Matrix::from_vec(len, m.cols, m.data[start * m.cols..(start + len) * m.cols].to_vec());
        let rg = self.rg(&[x]);
        self.push(v, Op::RowSlice { x, start }, rg)
    }

    pub fn resample(&mut self, x: NodeId, plan: Arc<Resample2d>) -> NodeId {
        let v = plan.apply(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Resample { x, plan }, rg)
    }

    /// Sum over labeled rows of `−log softmax(logits)[target]`; a `1×1` node.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: Arc<Vec<Option<u16>>>) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "one target per logit row");
        let c = l.cols;
        let mut probs = Matrix::zeros(l.rows, c);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = l.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs.data[r * c..(r + 1) * c];
            let mut z = 0.0;
            for (pv, &lv) in p.iter_mut().zip(row) {
                *pv = libm::exp(lv - max);
                z += *pv;
            }
            for pv in p.iter_mut() {
                *pv /= z;
            }
            if let Some(t) = t {
                total += libm::log(z) + max - row[*t as usize];
            }
        }
        let rg = self.rg(&[logits]);
        self.push(Matrix::from_vec(1, 1, vec![total]), Op::CrossEntropySum { logits, targets, probs }, rg)
    }

    pub fn backward(&self, root: NodeId) -> Gradients {
        let root_v = self.value(root);
        assert_eq!(root_v.shape(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |id: NodeId, d: Matrix| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(e) => e.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let need = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    acc(*a, g.matmul_nt(self.value(*b)));
                }
                if need(*b) {
                    acc(*b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if need(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if need(*b) {
                    acc(*b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if need(*row) {
                    acc(*row, col_sums(g));
                }
            }
            Op::MulCols(a, row) => {
                let r = self.value(*row);
                if need(*a) {
                    acc(*a, g.mul_cols(&r.data));
                }
                if need(*row) {
                    let x = self.value(*a);
                    let mut s = vec![0.0; x.cols];
                    for (gr, xr) in g.data.chunks(x.cols).zip(x.data.chunks(x.cols)) {
                        for ((o, gv), xv) in s.iter_mut().zip(gr).zip(xr) {
                            *o += gv * xv;
                        }
                    }
                    acc(*row, Matrix::row(s));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| {
                        let cdf = 0.5 * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2));
                        let pdf = libm::exp(-0.5 * v * v) / libm::sqrt(2.0 * core::f64::consts::PI);
                        gv * (cdf + v * pdf)
                    })
                    .collect();
                acc(*a, Matrix::from_vec(x.rows, x.cols, data));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = xhat.cols;
                let gm = &self.value(*gamma).data;
                if need(*gamma) {
                    acc(*gamma, Matrix::row(col_dot(g, xhat)));
                }
                if need(*beta) {
                    acc(*beta, col_sums(g));
                }
                if need(*x) {
                    let mut dx = Matrix::zeros(xhat.rows, c);
                    for r in 0..xhat.rows {
                        let gr = g.row_slice(r);
                        let xr = xhat.row_slice(r);
                        let dxhat: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dxhat, xr) / c as f64;
                        for (j, o) in dx.data[r * c..(r + 1) * c].iter_mut().enumerate() {
                            *o = rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, .. } => {
                let (n, c) = xhat.shape();
                if need(*gamma) {
                    acc(*gamma, Matrix::row(col_dot(g, xhat)));
                }
                if need(*beta) {
                    acc(*beta, col_sums(g));
                }
                if need(*x) {
                    let gm = &self.value(*gamma).data;
                    let sum_g = col_sums(g).data;
                    let sum_gx = col_dot(g, xhat);
                    let mut dx = Matrix::zeros(n, c);
                    for r in 0..n {
                        for j in 0..c {
                            let dxhat = g.get(r, j) * gm[j];
                            let m1 = sum_g[j] * gm[j] / n as f64;
                            let m2 = sum_gx[j] * gm[j] / n as f64;
                            dx.data[r * c + j] = rstd[j] * (dxhat - m1 - xhat.get(r, j) * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::NormalizeCols { x, rstd } => acc(*x, g.mul_cols(rstd)),
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let dh = d / heads;
                let scale = 1.0 / libm::sqrt(dh as f64);
                let mut dq = Matrix::zeros(n, d);
                let mut dk = Matrix::zeros(n, d);
                let mut dv = Matrix::zeros(n, d);
                for (h, p) in probs.iter().enumerate() {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..n {
                        let gi = &g.row_slice(i)[cols.clone()];
                        let pi = p.row_slice(i);
                        // dP_ij = gᵢ · vⱼ ; dS = P ⊙ (dP − Σ_j P dP)
                        let dp: Vec<f64> = (0..n).map(|j| dot(gi, &vv.row_slice(j)[cols.clone()])).collect();
                        let inner = dot(pi, &dp);
                        for j in 0..n {
                            let pij = pi[j];
                            if pij == 0.0 {
                                continue;
                            }
                            // dV_j += P_ij gᵢ
                            for (o, gv) in dv.data[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(gi) {
                                *o += pij * gv;
                            }
                            let ds = pij * (dp[j] - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kv.row_slice(j)[cols.clone()];
                            for (o, kvj) in dq.data[i * d + h * dh..i * d + (h + 1) * dh].iter_mut().zip(kj) {
                                *o += ds * kvj;
                            }
                            let qi = &qv.row_slice(i)[cols.clone()];
                            for (o, qvi) in dk.data[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(qi) {
                                *o += ds * qvi;
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::VConcat(parts) => {
                let c = g.cols;
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if need(p) {
                        acc(p, Matrix::from_vec(rows, c, g.data[off * c..(off + rows) * c].to_vec()));
                    }
                    off += rows;
                }
            }
            Op::HConcat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    if need(p) {
                        let mut d = Matrix::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            d.data[r * pc..(r + 1) * pc].copy_from_slice(&g.row_slice(r)[off..off + pc]);
                        }
                        acc(p, d);
                    }
                    off += pc;
                }
            }
            Op::RowSlice { x, start } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows, xv.cols);
                d.data[start * xv.cols..start * xv.cols + g.data.len()].copy_from_slice(&g.data);
                acc(*x, d);
            }
            Op::Resample { x, plan } => acc(*x, plan.apply_transpose(g)),
            Op::CrossEntropySum { logits, targets, probs } => {
                let up = g.data[0];
                let c = probs.cols;
                let mut d = Matrix::zeros(probs.rows, c);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        let row = &mut d.data[r * c..(r + 1) * c];
                        for (o, p) in row.iter_mut().zip(probs.row_slice(r)) {
                            *o = up * p;
                        }
                        row[*t as usize] -= up;
                    }
                }
                acc(*logits, d);
            }
        }
    }
}

fn affine(xhat: &Matrix, gamma: &[f64], beta: &[f64]) -> Matrix {
    let c = xhat.cols;
    assert!(gamma.len() == c && beta.len() == c, "norm parameter width");
    let mut v = xhat.clone();
    for chunk in v.data.chunks_mut(c) {
        for ((o, g), b) in chunk.iter_mut().zip(gamma).zip(beta) {
            *o = *o * g + b;
        }
    }
    v
}

fn col_sums(g: &Matrix) -> Matrix {
    let mut s = vec![0.0; g.cols];
    for chunk in g.data.chunks(g.cols) {
        for (o, v) in s.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Matrix::row(s)
}

fn col_dot(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; a.cols];
    for (ar, br) in a.data.chunks(a.cols).zip(b.data.chunks(b.cols)) {
        for ((o, x), y) in s.iter_mut().zip(ar).zip(br) {
            *o += x * y;
        }
    }
    s
}
