//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! replays the record in reverse. Reductions over unordered sets (set means,
//! attention over keys) use order-independent summation, so permuting the
//! rows of a set input yields bit-identical results.

use crate::linalg::{dot, order_free_sum, Matrix};
use crate::nn::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    ScalarMul(Var, Var),
    Relu(Var),
    Silu(Var),
    Tanh(Var),
    Square(Var),
    SegmentMax(Var, Matrix),
    SegmentMean(Var, Vec<usize>),
    MeanAll(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    LayerNorm { x: Var, normed: Matrix, inv_std: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Vec<(usize, usize, usize, usize)>,
        probs: Vec<Matrix>,
        scale: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one backward pass, for every node that needed them.
pub struct Backward {
    node_grads: Vec<Option<Matrix>>,
    param_of_node: Vec<Option<ParamId>>,
    num_params: usize,
}

impl Backward {
    /// Gradient w.r.t. an [`Graph::input`] leaf (or any intermediate).
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.node_grads[v.0].as_ref()
    }

    pub fn into_param_grads(self) -> Gradients {
        let mut out: Vec<Option<Matrix>> = vec![None; self.num_params];
        for (g, p) in self.node_grads.into_iter().zip(self.param_of_node) {
            if let (Some(g), Some(p)) = (g, p) {
                match &mut out[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients::from_vec(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m[(0, 0)]
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Const, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let r = rv.row(0);
        let mut value = av.clone();
        for i in 0..value.rows() {
            value.row_mut(i).iter_mut().zip(r).for_each(|(x, b)| *x += b);
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "mul_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "mul_row width mismatch");
        let r = rv.row(0);
        let mut value = av.clone();
        for i in 0..value.rows() {
            value.row_mut(i).iter_mut().zip(r).for_each(|(x, b)| *x *= b);
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// `s · a` for a `1 × 1` variable `s`.
    pub fn scalar_mul(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let value = self.value(a).scale(c);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::ScalarMul(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(value, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// Column-wise maximum over rows (`1 × n`).
    pub fn max_rows(&mut self, a: Var) -> Var {
        let rows = self.shape(a).0;
        self.segment_max(a, &[rows])
    }

    /// Column-wise maximum within consecutive row segments of lengths `lens`;
    /// one output row per segment. Ties resolve to the first row.
    pub fn segment_max(&mut self, a: Var, lens: &[usize]) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        assert_eq!(lens.iter().sum::<usize>(), rows, "segment lengths must cover the rows");
        let mut out = Matrix::zeros(lens.len(), cols);
        let mut arg = Matrix::zeros(lens.len(), cols);
        let mut start = 0;
        for (s, &len) in lens.iter().enumerate() {
            assert!(len > 0, "max over an empty set");
            for j in 0..cols {
                let mut best = av[(start, j)];
                let mut at = start;
                for i in start + 1..start + len {
                    if av[(i, j)] > best {
                        best = av[(i, j)];
                        at = i;
                    }
                }
                out[(s, j)] = best;
                arg[(s, j)] = at as f64;
            }
            start += len;
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentMax(a, arg), ng)
    }

    /// Column-wise mean over rows, independent of row order.
    pub fn set_mean_rows(&mut self, a: Var) -> Var {
        let rows = self.shape(a).0;
        self.segment_mean(a, &[rows])
    }

    /// Order-independent column means within consecutive row segments.
    pub fn segment_mean(&mut self, a: Var, lens: &[usize]) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        assert_eq!(lens.iter().sum::<usize>(), rows, "segment lengths must cover the rows");
        let mut out = Matrix::zeros(lens.len(), cols);
        let mut start = 0;
        for (s, &len) in lens.iter().enumerate() {
            assert!(len > 0, "mean over an empty set");
            let mut buf = vec![0.0; len];
            for j in 0..cols {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = av[(start + i, j)];
                }
                out[(s, j)] = order_free_sum(&mut buf) / len as f64;
            }
            start += len;
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentMean(a, lens.to_vec()), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.data().len().max(1) as f64;
        let value = Matrix::scalar(av.sum() / n);
        let ng = self.ng(a);
        self.push(value, Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hcat(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vcat(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice out of range");
        let value = Matrix::from_fn(av.rows(), len, |i, j| av[(i, start + j)]);
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut normed = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + EPS).sqrt();
            inv_std.push(s);
            for (o, v) in normed.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * s;
            }
        }
        let ng = self.ng(x);
        self.push(
            normed.clone(),
            Op::LayerNorm {
                x,
                normed,
                inv_std,
            },
            ng,
        )
    }

    /// `softmax(q·kᵀ·scale)·v`, keys and values treated as an unordered set.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Var {
        let (nq, nk) = (self.shape(q).0, self.shape(k).0);
        self.block_attention(q, k, v, &[nq], &[nk], scale)
    }

    /// Block-diagonal attention: query block `b` (of `q_lens[b]` rows) attends
    /// only to key/value block `b` (of `k_lens[b]` rows).
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_lens: &[usize],
        k_lens: &[usize],
        scale: f64,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.cols(), kv.cols(), "query/key width mismatch");
        assert_eq!(kv.rows(), vv.rows(), "key/value count mismatch");
        assert_eq!(q_lens.len(), k_lens.len(), "block count mismatch");
        assert_eq!(q_lens.iter().sum::<usize>(), qv.rows(), "query blocks must cover the rows");
        assert_eq!(k_lens.iter().sum::<usize>(), kv.rows(), "key blocks must cover the rows");
        let dv = vv.cols();
        let mut out = Matrix::zeros(qv.rows(), dv);
        let mut blocks = Vec::with_capacity(q_lens.len());
        let mut all_probs = Vec::with_capacity(q_lens.len());
        let (mut q0, mut k0) = (0, 0);
        for (&nq, &nk) in q_lens.iter().zip(k_lens) {
            assert!(nk > 0 || nq == 0, "queries with no keys to attend to");
            let mut probs = Matrix::zeros(nq, nk);
            let mut buf = vec![0.0; nk];
            for i in 0..nq {
                let qi = qv.row(q0 + i);
                let mut max = f64::NEG_INFINITY;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = dot(qi, kv.row(k0 + j)) * scale;
                    max = max.max(*b);
                }
                for b in buf.iter_mut() {
                    *b = (*b - max).exp();
                }
                let mut tmp = buf.clone();
                let z = order_free_sum(&mut tmp);
                for (j, e) in buf.iter().enumerate() {
                    probs[(i, j)] = e / z;
                }
            }
            for i in 0..nq {
                for c in 0..dv {
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b = probs[(i, j)] * vv[(k0 + j, c)];
                    }
                    out[(q0 + i, c)] = order_free_sum(&mut buf);
                }
            }
            blocks.push((q0, nq, k0, nk));
            all_probs.push(probs);
            q0 += nq;
            k0 += nk;
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                blocks,
                probs: all_probs,
                scale,
            },
            ng,
        )
    }

    pub fn backward(&self, loss: Var) -> Backward {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, m: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&m),
                    slot @ None => *slot = Some(m),
                }
            };
            match &node.op {
                Op::Const | Op::Input | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.matmul_t(self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(*b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    acc(*row, Matrix::row_vector(&col_sums(&g)));
                    acc(*a, g);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row);
                    if self.ng(*row) {
                        let prod = g.zip_map(self.value(*a), |x, y| x * y);
                        acc(*row, Matrix::row_vector(&col_sums(&prod)));
                    }
                    if self.ng(*a) {
                        let mut da = g;
                        for i in 0..da.rows() {
                            da.row_mut(i).iter_mut().zip(r.row(0)).for_each(|(x, b)| *x *= b);
                        }
                        acc(*a, da);
                    }
                }
                Op::AddConst(a) => acc(*a, g),
                Op::Scale(a, c) => acc(*a, g.scale(*c)),
                Op::ScalarMul(a, s) => {
                    if self.ng(*s) {
                        let ds = g.zip_map(self.value(*a), |x, y| x * y).sum();
                        acc(*s, Matrix::scalar(ds));
                    }
                    let c = self.scalar(*s);
                    acc(*a, g.scale(c));
                }
                Op::Relu(a) => {
                    acc(*a, g.zip_map(self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 }));
                }
                Op::Silu(a) => {
                    acc(
                        *a,
                        g.zip_map(self.value(*a), |gx, x| {
                            let s = sigmoid(x);
                            gx * s * (1.0 + x * (1.0 - s))
                        }),
                    );
                }
                Op::Tanh(a) => {
                    acc(*a, g.zip_map(&node.value, |gx, y| gx * (1.0 - y * y)));
                }
                Op::Square(a) => {
                    acc(*a, g.zip_map(self.value(*a), |gx, x| 2.0 * gx * x));
                }
                Op::SegmentMax(a, arg) => {
                    let (rows, cols) = self.shape(*a);
                    let mut da = Matrix::zeros(rows, cols);
                    for s in 0..arg.rows() {
                        for j in 0..cols {
                            da[(arg[(s, j)] as usize, j)] += g[(s, j)];
                        }
                    }
                    acc(*a, da);
                }
                Op::SegmentMean(a, lens) => {
                    let (rows, cols) = self.shape(*a);
                    let mut da = Matrix::zeros(rows, cols);
                    let mut start = 0;
                    for (s, &len) in lens.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        for i in start..start + len {
                            for j in 0..cols {
                                da[(i, j)] = g[(s, j)] * inv;
                            }
                        }
                        start += len;
                    }
                    acc(*a, da);
                }
                Op::MeanAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    let v = g[(0, 0)] / (rows * cols).max(1) as f64;
                    acc(*a, Matrix::filled(rows, cols, v));
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(*a, Matrix::filled(rows, cols, g[(0, 0)]));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        if self.ng(p) {
                            acc(p, Matrix::from_fn(rows, cols, |i, j| g[(i, off + j)]));
                        }
                        off += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        if self.ng(p) {
                            acc(p, Matrix::from_fn(rows, cols, |i, j| g[(off + i, j)]));
                        }
                        off += rows;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut da = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        da.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(*a, da);
                }
                Op::LayerNorm { x, normed, inv_std } => {
                    let (rows, cols) = normed.shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let gi = g.row(i);
                        let yi = normed.row(i);
                        let mg = gi.iter().sum::<f64>() / cols as f64;
                        let mgy = dot(gi, yi) / cols as f64;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (gi[j] - mg - yi[j] * mgy);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    blocks,
                    probs,
                    scale,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                    let mut dk = Matrix::zeros(kv.rows(), kv.cols());
                    let mut dvm = Matrix::zeros(vv.rows(), vv.cols());
                    for (&(q0, nq, k0, nk), p) in blocks.iter().zip(probs) {
                        for i in 0..nq {
                            let gi = g.row(q0 + i);
                            let pr = p.row(i);
                            // dV += pᵢᵀ gᵢ; dP = gᵢ·Vᵀ
                            let mut dp = vec![0.0; nk];
                            for j in 0..nk {
                                let vj = vv.row(k0 + j);
                                dp[j] = dot(gi, vj);
                                if pr[j] != 0.0 {
                                    for (o, gx) in dvm.row_mut(k0 + j).iter_mut().zip(gi) {
                                        *o += pr[j] * gx;
                                    }
                                }
                            }
                            // dS = P ⊙ (dP − ⟨dP, P⟩)
                            let inner = dot(pr, &dp);
                            for j in 0..nk {
                                let ds = pr[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = kv.row(k0 + j).to_vec();
                                for (o, x) in dq.row_mut(q0 + i).iter_mut().zip(&kj) {
                                    *o += ds * x;
                                }
                                let qi = qv.row(q0 + i).to_vec();
                                for (o, x) in dk.row_mut(k0 + j).iter_mut().zip(&qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                    acc(*v, dvm);
                    acc(*q, dq);
                    acc(*k, dk);
                }
            }
        }
        Backward {
            node_grads: grads,
            param_of_node: self
                .nodes
                .iter()
                .map(|n| match n.op {
                    Op::Param(p) => Some(p),
                    _ => None,
                })
                .collect(),
            num_params: self.params.len(),
        }
    }
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around every entry of `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| {
            let t = (seed as f64 + 1.0) * 0.37 + i as f64 * 1.3 + j as f64 * 0.71;
            (t * 12.9898).sin() * 1.5
        })
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Matrix) {
        let store = ParamStore::new();
        let f = |m: &Matrix| {
            let mut g = Graph::new(&store);
            let v = g.input(m.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new(&store);
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let back = g.backward(out);
        let analytic = back.wrt(v).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let numeric = numeric_grad(&x, &f);
        let err = analytic.max_abs_diff(&numeric);
        let scale = numeric.max_abs().max(1.0);
        assert!(err / scale < 1e-6, "gradient mismatch {err}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn elementwise_ops() {
        let w = sample(3, 4, 9);
        check(
            |g, x| {
                let c = g.constant(w.clone());
                let a = g.mul(x, c);
                let b = g.silu(a);
                let t = g.tanh(b);
                let s = g.square(t);
                let d = g.sub(s, x);
                let e = g.add_const(d, 0.3);
                let f = g.scale(e, -1.7);
                g.sum_all(f)
            },
            sample(3, 4, 1),
        );
    }

    #[test]
    fn matmul_rows_and_reductions() {
        let w = sample(4, 5, 3);
        let r = sample(1, 5, 4);
        check(
            |g, x| {
                let c = g.constant(w.clone());
                let rr = g.constant(r.clone());
                let m = g.matmul(x, c);
                let m = g.add_row(m, rr);
                let m = g.mul_row(m, rr);
                let p = g.max_rows(m);
                let q = g.set_mean_rows(m);
                let cat = g.concat_cols(&[p, q]);
                let sl = g.slice_cols(cat, 3, 4);
                let sq = g.square(sl);
                g.mean_all(sq)
            },
            sample(3, 4, 2),
        );
    }

    #[test]
    fn layer_norm_and_attention() {
        let kv = sample(5, 4, 7);
        check(
            |g, x| {
                let n = g.layer_norm(x);
                let k = g.constant(kv.clone());
                let a = g.attention(n, k, k, 0.5);
                let s = g.attention(x, x, x, 0.7);
                let rows = g.concat_rows(&[a, s]);
                let sq = g.square(rows);
                g.sum_all(sq)
            },
            sample(3, 4, 5),
        );
    }

    #[test]
    fn segment_pooling_and_block_attention() {
        let kv = sample(5, 3, 8);
        check(
            |g, x| {
                let mx = g.segment_max(x, &[2, 3, 1]);
                let mn = g.segment_mean(x, &[4, 2]);
                let k = g.constant(kv.clone());
                let a = g.block_attention(x, k, k, &[3, 3], &[2, 3], 0.8);
                let a = g.segment_mean(a, &[6]);
                let cat = g.concat_rows(&[mx, mn, a]);
                let sq = g.square(cat);
                g.sum_all(sq)
            },
            sample(6, 3, 6),
        );
    }

    #[test]
    fn block_attention_matches_separate_blocks() {
        let store = ParamStore::new();
        let q = sample(5, 3, 1);
        let k = sample(4, 3, 2);
        let v = sample(4, 2, 3);
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let joint = g.block_attention(qv, kv, vv, &[2, 3], &[1, 3], 0.5);
        let q1 = g.constant(q.select_rows(&[0, 1]));
        let q2 = g.constant(q.select_rows(&[2, 3, 4]));
        let k1 = g.constant(k.select_rows(&[0]));
        let k2 = g.constant(k.select_rows(&[1, 2, 3]));
        let v1 = g.constant(v.select_rows(&[0]));
        let v2 = g.constant(v.select_rows(&[1, 2, 3]));
        let a1 = g.attention(q1, k1, v1, 0.5);
        let a2 = g.attention(q2, k2, v2, 0.5);
        let sep = g.concat_rows(&[a1, a2]);
        assert_eq!(g.value(joint), g.value(sep));
    }

    #[test]
    fn scalar_mul_gradient_for_both_sides() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Matrix::new(1, 2, vec![2.0, -3.0]));
        let s = g.input(Matrix::scalar(0.5));
        let y = g.scalar_mul(a, s);
        let y2 = g.square(y);
        let l = g.sum_all(y2);
        let b = g.backward(l);
        // l = s²(4 + 9)
        assert!((b.wrt(s).unwrap()[(0, 0)] - 13.0).abs() < 1e-12);
        assert_eq!(b.wrt(a).unwrap().data(), &[1.0, -1.5]);
    }

    #[test]
    fn attention_is_permutation_equivariant_bitwise() {
        let store = ParamStore::new();
        let q = sample(3, 4, 11);
        let k = sample(6, 4, 12);
        let v = sample(6, 2, 13);
        let perm = [4, 0, 5, 2, 1, 3];
        let run = |k: &Matrix, v: &Matrix| {
            let mut g = Graph::new(&store);
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = g.attention(qv, kv, vv, 0.5);
            g.value(o).clone()
        };
        assert_eq!(run(&k, &v), run(&k.select_rows(&perm), &v.select_rows(&perm)));
    }

    #[test]
    fn param_gradients_accumulate_over_reuse() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(3.0));
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y).into_param_grads();
        assert_eq!(grads.get(id).unwrap()[(0, 0)], 6.0);
    }
}
