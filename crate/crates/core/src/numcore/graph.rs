//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding its
//! value and whatever the backward rule needs. [`Graph::backward`] walks the
//! tape in reverse and returns the gradient of a scalar node with respect to
//! every node that influences it. Parameter leaves are pulled in by name from
//! a [`ParamStore`] and their gradients are written back with
//! [`Graph::accumulate_param_grads`].
//!
//! All node values are matrices (`rows x cols`); vectors are single rows.
//! Only the operations the gene-query network needs are provided.

use std::collections::BTreeMap;

use super::tensor::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(NodeId),
    Relu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<usize>,
        /// Per head, each segment's `len x len` weights; zero at masked keys.
        probs: Vec<T>,
    },
    Gather {
        x: NodeId,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    MeanRows(NodeId),
    MaskedMse {
        pred: NodeId,
        target: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

// out[n x m] += a[n x k] * b[k x m]
fn matmul_into<T: Real>(out: &mut [T], a: &[T], b: &[T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

const GELU_K: f64 = 0.044715;

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let a = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let inner = a * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * a * (T::one() + T::lit(3.0) * k * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn data(&self, id: NodeId) -> &[T] {
        &self.node(id).value
    }

    /// Node value as a `rows x cols` tensor.
    pub fn value(&self, id: NodeId) -> Tensor<T> {
        let n = self.node(id);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape")
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.node(id).value[0]
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        let (r, c) = t.dims2();
        self.push(r, c, t.into_data(), Op::Input)
    }

    /// Parameter leaf; repeated requests for the same name share one node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let t = store.value(name)?;
        let (r, c) = t.dims2();
        let id = self.push(r, c, t.data().to_vec(), Op::Param);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {n}x{k} by {k2}x{m}: inner dimensions differ"
            )));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_into(&mut out, self.data(a), self.data(b), n, k, m);
        Ok(self.push(n, m, out, Op::MatMul(a, b)))
    }

    /// Adds a single-row node to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, m) = self.dims(a);
        let (r, c) = self.dims(row);
        if r != 1 || c != m {
            return Err(Error::Shape(format!(
                "broadcast add of {r}x{c} onto {n}x{m}"
            )));
        }
        let rv = self.data(row);
        let out: Vec<T> = self
            .data(a)
            .chunks(m)
            .flat_map(|ar| ar.iter().zip(rv).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(n, m, out, Op::AddRow(a, row)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let (n, m) = self.dims(a);
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(n, m, out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let (n, m) = self.dims(a);
        let out = self.data(a).iter().map(|&x| x * c).collect();
        self.push(n, m, out, Op::Scale(a, c))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (n, d) = self.dims(x);
        if self.dims(gamma) != (1, d) || self.dims(beta) != (1, d) {
            return Err(Error::Shape(format!(
                "layer norm over width {d} with gamma {:?}, beta {:?}",
                self.dims(gamma),
                self.dims(beta)
            )));
        }
        let dt = T::from_usize(d).unwrap();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = Vec::with_capacity(n * d);
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        Ok(self.push(
            n,
            d,
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

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.dims(x);
        let out = self.data(x).iter().map(|&v| gelu_parts(v).0).collect();
        self.push(n, m, out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.dims(x);
        let out = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(n, m, out, Op::Relu(x))
    }

    /// Multi-head scaled dot-product attention core, `softmax(QK^T/sqrt(dh)) V`
    /// per head over the column blocks of `q`, `k`, `v`. Keys with
    /// `mask[j] == false` receive weight exactly zero.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &[bool],
        heads: usize,
    ) -> Result<NodeId> {
        let n = self.dims(q).0;
        self.attention_segments(q, k, v, mask, heads, &[n])
    }

    /// Attention over stacked independent sequences: the rows are split into
    /// consecutive segments of the given lengths and each row attends only
    /// within its own segment. Every segment needs a valid key.
    pub fn attention_segments(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &[bool],
        heads: usize,
        segments: &[usize],
    ) -> Result<NodeId> {
        let (n, d) = self.dims(q);
        if self.dims(k) != (n, d) || self.dims(v) != (n, d) {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "mask length {} for sequence length {n}",
                mask.len()
            )));
        }
        if segments.iter().sum::<usize>() != n {
            return Err(Error::Shape(format!(
                "segments {segments:?} do not cover {n} rows"
            )));
        }
        let mut start = 0;
        for &len in segments {
            if !mask[start..start + len].iter().any(|&m| m) {
                return Err(Error::Argument("attention mask has no valid position".into()));
            }
            start += len;
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.data(q), self.data(k), self.data(v));
        let total: usize = segments.iter().map(|l| l * l).sum();
        let mut probs = vec![T::zero(); heads * total];
        let mut out = vec![T::zero(); n * d];
        let mut scores = vec![T::zero(); segments.iter().copied().max().unwrap_or(0)];
        for h in 0..heads {
            let cs = h * dh..(h + 1) * dh;
            let (mut start, mut pbase) = (0, h * total);
            for &len in segments {
                let keys = start..start + len;
                for i in keys.clone() {
                    let qi = &qv[i * d..(i + 1) * d][cs.clone()];
                    let mut max = T::neg_infinity();
                    for j in keys.clone() {
                        if mask[j] {
                            let s = dot(qi, &kv[j * d..(j + 1) * d][cs.clone()]) * scale;
                            scores[j - start] = s;
                            max = max.max(s);
                        }
                    }
                    let off = pbase + (i - start) * len;
                    let prow = &mut probs[off..off + len];
                    let mut sum = T::zero();
                    for j in keys.clone() {
                        if mask[j] {
                            let e = (scores[j - start] - max).exp();
                            prow[j - start] = e;
                            sum += e;
                        }
                    }
                    let orow = &mut out[i * d..(i + 1) * d][cs.clone()];
                    for j in keys.clone() {
                        if mask[j] {
                            let pj = prow[j - start] / sum;
                            prow[j - start] = pj;
                            for (o, &x) in orow.iter_mut().zip(&vv[j * d..(j + 1) * d][cs.clone()]) {
                                *o += pj * x;
                            }
                        }
                    }
                }
                start += len;
                pbase += len * len;
            }
        }
        Ok(self.push(
            n,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    /// Attention weights recorded by an attention node. For a single
    /// segment the layout is `heads x n x n` (query-major within a head).
    pub fn attention_weights(&self, id: NodeId) -> Option<(usize, &[T])> {
        match &self.node(id).op {
            Op::Attention { heads, probs, .. } => Some((*heads, probs.as_slice())),
            _ => None,
        }
    }

    /// Element gather: `out.flat[i] = x.flat[idx[i]]`, shaped `rows x cols`.
    pub fn gather(&mut self, x: NodeId, idx: Vec<usize>, rows: usize, cols: usize) -> Result<NodeId> {
        if idx.len() != rows * cols {
            return Err(Error::Shape(format!(
                "gather of {} indices into {rows}x{cols}",
                idx.len()
            )));
        }
        let src = self.data(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range {}",
                src.len()
            )));
        }
        let out = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(rows, cols, out, Op::Gather { x, idx }))
    }

    /// Selects whole rows of `x`.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (_, c) = self.dims(x);
        let idx = rows
            .iter()
            .flat_map(|&r| (r * c..(r + 1) * c).collect::<Vec<_>>())
            .collect();
        self.gather(x, idx, rows.len(), c)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Argument("concat of zero nodes".into()));
        };
        let c = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::Shape(format!("concat widths {c} and {pc}")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec())))
    }

    /// Column means, a single row.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.dims(x);
        let mut out = vec![T::zero(); m];
        for row in self.data(x).chunks(m) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let nt = T::from_usize(n.max(1)).unwrap();
        out.iter_mut().for_each(|o| *o = *o / nt);
        self.push(1, m, out, Op::MeanRows(x))
    }

    /// Mean squared error over the cells of `pred` where `mask` is set.
    pub fn masked_mse(&mut self, pred: NodeId, target: &[T], mask: &[bool]) -> Result<NodeId> {
        let p = self.data(pred);
        if target.len() != p.len() || mask.len() != p.len() {
            return Err(Error::Shape(format!(
                "mse over {} predictions with {} targets and {} mask cells",
                p.len(),
                target.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Argument("mse with zero valid cells".into()));
        }
        let sse = p
            .iter()
            .zip(target)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&a, &b), _)| (a - b) * (a - b))
            .sum::<T>();
        let loss = sse / T::from_usize(count).unwrap();
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from non-scalar node of shape {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        fn slot<'a, T: Real>(
            grads: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            id: NodeId,
        ) -> &'a mut Vec<T> {
            grads[id.0].get_or_insert_with(|| vec![T::zero(); nodes[id.0].value.len()])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            match &node.op {
                Op::Input | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (n, k) = self.dims(*a);
                    let m = node.cols;
                    let (av, bv) = (self.data(*a), self.data(*b));
                    {
                        let ga = slot(&mut grads, nodes, *a);
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for p in 0..k {
                                ga[r * k + p] += dot(grow, &bv[p * m..(p + 1) * m]);
                            }
                        }
                    }
                    let gb = slot(&mut grads, nodes, *b);
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let arp = av[r * k + p];
                            if arp == T::zero() {
                                continue;
                            }
                            for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += arp * gv;
                            }
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    let m = node.cols;
                    {
                        let ga = slot(&mut grads, nodes, *a);
                        ga.iter_mut().zip(&g).for_each(|(o, &v)| *o += v);
                    }
                    let gr = slot(&mut grads, nodes, *row);
                    for grow in g.chunks(m) {
                        gr.iter_mut().zip(grow).for_each(|(o, &v)| *o += v);
                    }
                }
                Op::Add(a, b) => {
                    for id in [*a, *b] {
                        let ga = slot(&mut grads, nodes, id);
                        ga.iter_mut().zip(&g).for_each(|(o, &v)| *o += v);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = slot(&mut grads, nodes, *a);
                    ga.iter_mut().zip(&g).for_each(|(o, &v)| *o += v * *c);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = node.cols;
                    let dt = T::from_usize(d).unwrap();
                    let gv = self.data(*gamma).to_vec();
                    {
                        let gg = slot(&mut grads, nodes, *gamma);
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    {
                        let gb = slot(&mut grads, nodes, *beta);
                        for grow in g.chunks(d) {
                            gb.iter_mut().zip(grow).for_each(|(o, &v)| *o += v);
                        }
                    }
                    let gx = slot(&mut grads, nodes, *x);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / dt;
                        let mean_dh = dot(&dxhat, hrow) / dt;
                        let is = inv_std[r];
                        for j in 0..d {
                            gx[r * d + j] += is * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.data(*x);
                    let gx = slot(&mut grads, nodes, *x);
                    for ((o, &gv), &v) in gx.iter_mut().zip(&g).zip(xv) {
                        *o += gv * gelu_parts(v).1;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.data(*x);
                    let gx = slot(&mut grads, nodes, *x);
                    for ((o, &gv), &v) in gx.iter_mut().zip(&g).zip(xv) {
                        if v > T::zero() {
                            *o += gv;
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    probs,
                } => {
                    let (n, d) = (node.rows, node.cols);
                    let dh = d / heads;
                    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                    let (qv, kv, vv) = (self.data(*q), self.data(*k), self.data(*v));
                    let total: usize = segments.iter().map(|l| l * l).sum();
                    let mut gq = vec![T::zero(); n * d];
                    let mut gk = vec![T::zero(); n * d];
                    let mut gvv = vec![T::zero(); n * d];
                    let mut dp = vec![T::zero(); segments.iter().copied().max().unwrap_or(0)];
                    for h in 0..*heads {
                        let cs = h * dh..(h + 1) * dh;
                        let (mut start, mut pbase) = (0, h * total);
                        for &len in segments {
                            for i in start..start + len {
                                let off = pbase + (i - start) * len;
                                let prow = &probs[off..off + len];
                                let gi = &g[i * d..(i + 1) * d][cs.clone()];
                                let mut s = T::zero();
                                for (jj, &pij) in prow.iter().enumerate() {
                                    let j = start + jj;
                                    if pij == T::zero() {
                                        dp[jj] = T::zero();
                                        continue;
                                    }
                                    dp[jj] = dot(gi, &vv[j * d..(j + 1) * d][cs.clone()]);
                                    s += pij * dp[jj];
                                    for (o, &x) in gvv[j * d..(j + 1) * d][cs.clone()].iter_mut().zip(gi) {
                                        *o += pij * x;
                                    }
                                }
                                let qi = &qv[i * d..(i + 1) * d][cs.clone()];
                                for (jj, &pij) in prow.iter().enumerate() {
                                    if pij == T::zero() {
                                        continue;
                                    }
                                    let j = start + jj;
                                    let ds = pij * (dp[jj] - s) * scale;
                                    let kj = &kv[j * d..(j + 1) * d][cs.clone()];
                                    for (o, &x) in gq[i * d..(i + 1) * d][cs.clone()].iter_mut().zip(kj) {
                                        *o += ds * x;
                                    }
                                    for (o, &x) in gk[j * d..(j + 1) * d][cs.clone()].iter_mut().zip(qi) {
                                        *o += ds * x;
                                    }
                                }
                            }
                            start += len;
                            pbase += len * len;
                        }
                    }
                    for (id, part) in [(*q, gq), (*k, gk), (*v, gvv)] {
                        let dst = slot(&mut grads, nodes, id);
                        dst.iter_mut().zip(&part).for_each(|(o, &x)| *o += x);
                    }
                }
                Op::Gather { x, idx } => {
                    let gx = slot(&mut grads, nodes, *x);
                    for (&src, &gv) in idx.iter().zip(&g) {
                        gx[src] += gv;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.len();
                        let gp = slot(&mut grads, nodes, p);
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(o, &v)| *o += v);
                        offset += len;
                    }
                }
                Op::MeanRows(x) => {
                    let (n, m) = self.dims(*x);
                    let nt = T::from_usize(n.max(1)).unwrap();
                    let gx = slot(&mut grads, nodes, *x);
                    for row in gx.chunks_mut(m) {
                        row.iter_mut().zip(&g).for_each(|(o, &v)| *o += v / nt);
                    }
                }
                Op::MaskedMse {
                    pred,
                    target,
                    mask,
                    count,
                } => {
                    let pv = self.data(*pred);
                    let c = T::lit(2.0) * g[0] / T::from_usize(*count).unwrap();
                    let gp = slot(&mut grads, nodes, *pred);
                    for j in 0..pv.len() {
                        if mask[j] {
                            gp[j] += c * (pv[j] - target[j]);
                        }
                    }
                }
                Op::Sum(x) => {
                    let gx = slot(&mut grads, nodes, *x);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradient of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (name, &id) in &self.params {
            let Some(g) = grads.get(id) else { continue };
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("no parameter named {name:?}")))?;
            if p.grad.len() != g.len() {
                return Err(Error::State(format!(
                    "gradient of {name:?} has {} values, parameter has {}",
                    g.len(),
                    p.grad.len()
                )));
            }
            p.grad.data_mut().iter_mut().zip(g).for_each(|(o, &v)| *o += v);
        }
        Ok(())
    }
}
