//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever
//! cache its backward rule needs. [`Graph::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order because a
//! node can only reference nodes created before it.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::gemm::{matmul_into, Transpose};
use super::tensor::{ParamId, ParamStore, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention group: query rows `q_start..q_start+q_len` attend to key and
/// value rows `k_start..k_start+k_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        tb: Transpose,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: Vec<AttnSegment>,
        probs: Vec<f64>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Var, Var),
    SegmentMean {
        a: Var,
        segs: Vec<(usize, usize)>,
    },
    GroupMaxCols {
        a: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    ReverseGrad(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Graph {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that receives gradients but is not tied to a parameter.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf holding a copy of a stored parameter. Repeated calls return the
    /// same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(p, v)| (*p, *v))
    }

    /// `a · b` (or `a · bᵀ` when `tb` is [`Transpose::Yes`]).
    pub fn matmul_t(&mut self, a: Var, b: Var, tb: Transpose) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = match tb {
            Transpose::No => (bv.rows(), bv.cols()),
            Transpose::Yes => (bv.cols(), bv.rows()),
        };
        if k != bk {
            return Err(dim_err(format!(
                "matmul inner dimensions {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(m, k, n, av.data(), Transpose::No, bv.data(), tb, 0.0, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul { a, b, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, Transpose::No)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err(format!("{what}: shapes {:?} and {:?}", x.shape(), y.shape())));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.len() != c {
            return Err(dim_err(format!("add_row: row of {} values for width {c}", rv.len())));
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(rv.data()).for_each(|(x, b)| *x += b);
        }
        let t = Tensor::new(vec![av.rows(), c], data)?;
        Ok(self.push(t, Op::AddRow { a, row }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale { a, s })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| gelu(*x).0).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        if c > 0 {
            data.chunks_mut(c).for_each(softmax_in_place);
        }
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::SoftmaxRows(a))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(dim_err(format!("layer_norm: gain/bias must have {c} values")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over segments.
    ///
    /// `q` is `Rq×d`, `k` and `v` are `Rk×d`. Each query row inside a segment
    /// attends only to that segment's key rows. Query rows outside every
    /// segment produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segs: Vec<AttnSegment>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || kv.cols() != d || vv.cols() != d {
            return Err(dim_err(format!(
                "attention: width {d} with {heads} heads, key width {}, value width {}",
                kv.cols(),
                vv.cols()
            )));
        }
        if kv.rows() != vv.rows() {
            return Err(dim_err("attention: key/value row mismatch".into()));
        }
        for s in &segs {
            if s.k_len == 0 {
                return Err(Error::EmptySequence("attention segment without keys".into()));
            }
            if s.q_start + s.q_len > qv.rows() || s.k_start + s.k_len > kv.rows() {
                return Err(dim_err("attention segment out of range".into()));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; qv.rows() * d];
        let total: usize = segs.iter().map(|s| s.q_len * s.k_len * heads).sum();
        let mut probs = Vec::with_capacity(total);
        let mut scores = Vec::new();
        for s in &segs {
            for h in 0..heads {
                let off = h * dh;
                for qi in 0..s.q_len {
                    let r = s.q_start + qi;
                    let qrow = &qd[r * d + off..r * d + off + dh];
                    scores.clear();
                    for c in 0..s.k_len {
                        let kr = (s.k_start + c) * d + off;
                        let dot: f64 = qrow.iter().zip(&kd[kr..kr + dh]).map(|(a, b)| a * b).sum();
                        scores.push(dot * scale);
                    }
                    softmax_in_place(&mut scores);
                    let orow = &mut out[r * d + off..r * d + off + dh];
                    for (c, p) in scores.iter().enumerate() {
                        let vr = (s.k_start + c) * d + off;
                        orow.iter_mut().zip(&vd[vr..vr + dh]).for_each(|(o, x)| *o += p * x);
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let t = Tensor::matrix(qv.rows(), d, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segs,
                probs,
            },
        ))
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= r {
                return Err(dim_err(format!("gather_rows: row {i} of {r}")));
            }
            out.extend_from_slice(av.row(i));
        }
        let t = Tensor::matrix(idx.len(), c, out)?;
        Ok(self.push(t, Op::GatherRows { a, idx }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(dim_err(format!("concat_rows: widths {} and {}", av.cols(), bv.cols())));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let t = Tensor::matrix(av.rows() + bv.rows(), av.cols(), data)?;
        Ok(self.push(t, Op::ConcatRows(a, b)))
    }

    /// Mean of each row range `(start, len)`; one output row per segment.
    pub fn segment_mean(&mut self, a: Var, segs: Vec<(usize, usize)>) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = vec![0.0; segs.len() * c];
        for (s, &(start, len)) in segs.iter().enumerate() {
            if len == 0 {
                return Err(Error::EmptySequence("segment_mean over zero rows".into()));
            }
            if start + len > av.rows() {
                return Err(dim_err("segment_mean out of range".into()));
            }
            let o = &mut out[s * c..(s + 1) * c];
            for r in start..start + len {
                o.iter_mut().zip(av.row(r)).for_each(|(x, y)| *x += y);
            }
            o.iter_mut().for_each(|x| *x /= len as f64);
        }
        let t = Tensor::matrix(segs.len(), c, out)?;
        Ok(self.push(t, Op::SegmentMean { a, segs }))
    }

    /// Maximum over each column range `(start, len)` per row.
    pub fn group_max_cols(&mut self, a: Var, groups: &[(usize, usize)]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let g = groups.len();
        let mut out = vec![0.0; r * g];
        let mut argmax = vec![0; r * g];
        for &(start, len) in groups {
            if len == 0 {
                return Err(Error::EmptySequence("max over an empty column group".into()));
            }
            if start + len > c {
                return Err(dim_err("group_max_cols out of range".into()));
            }
        }
        for i in 0..r {
            let row = av.row(i);
            for (j, &(start, len)) in groups.iter().enumerate() {
                let mut best = start;
                for col in start + 1..start + len {
                    if row[col] > row[best] {
                        best = col;
                    }
                }
                out[i * g + j] = row[best];
                argmax[i * g + j] = best;
            }
        }
        let t = Tensor::matrix(r, g, out)?;
        Ok(self.push(t, Op::GroupMaxCols { a, argmax }))
    }

    /// `Σ_r weights[r] · (logsumexp(logits[r]) − logits[r][targets[r]])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.len() != r || weights.len() != r {
            return Err(dim_err(format!(
                "cross_entropy: {r} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| **t >= c) {
            return Err(dim_err(format!("cross_entropy: target {t} of {c} columns")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for i in 0..r {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += weights[i] * (lse - row[targets[i]]);
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, out).expect("sized");
        self.push(t, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Identity in the forward pass; negates the gradient flowing back.
    pub fn reverse_grad(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::ReverseGrad(a))
    }

    /// Reverse-mode pass from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        let mut pairs: Vec<_> = self.param_vars().collect();
        pairs.sort_by_key(|(p, _)| *p);
        for (p, v) in pairs {
            if let Some(g) = grads.wrt(v) {
                store.get_mut(p).accumulate_grad(g);
            }
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        let s = self.slot(grads, v);
        s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                // dA = dC · B'ᵀ
                let ga = self.slot(grads, *a);
                let tb_inv = match tb {
                    Transpose::No => Transpose::Yes,
                    Transpose::Yes => Transpose::No,
                };
                matmul_into(m, n, k, g, Transpose::No, bv.data(), tb_inv, 1.0, ga);
                // dB' = Aᵀ · dC, stored in B's own layout.
                let gb = self.slot(grads, *b);
                match tb {
                    Transpose::No => matmul_into(k, m, n, av.data(), Transpose::Yes, g, Transpose::No, 1.0, gb),
                    Transpose::Yes => matmul_into(n, m, k, g, Transpose::Yes, av.data(), Transpose::No, 1.0, gb),
                }
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, g);
                let s = self.slot(grads, *b);
                s.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
            Op::AddRow { a, row } => {
                self.add_into(grads, *a, g);
                let c = node.value.cols();
                let s = self.slot(grads, *row);
                for chunk in g.chunks(c) {
                    s.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
            Op::Scale { a, s } => {
                let sa = self.slot(grads, *a);
                sa.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                let sa = self.slot(grads, *a);
                for ((x, gi), inp) in sa.iter_mut().zip(g).zip(av) {
                    *x += gi * gelu(*inp).1;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let sa = self.slot(grads, *a);
                for ((yr, gr), sr) in y.chunks(c).zip(g.chunks(c)).zip(sa.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        sr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data().to_vec();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                let mut dxhat = vec![0.0; c];
                for (r, gr) in g.chunks(c).enumerate() {
                    let h = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..c {
                        dgain[j] += gr[j] * h[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * h[j];
                    }
                    mean_d /= c as f64;
                    mean_dh /= c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                    }
                }
                self.add_into(grads, *x, &dx);
                self.add_into(grads, *gain, &dgain);
                self.add_into(grads, *bias, &dbias);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segs,
                probs,
            } => {
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let d = node.value.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = Vec::new();
                let mut pos = 0;
                for s in segs {
                    for h in 0..*heads {
                        let off = h * dh;
                        for qi in 0..s.q_len {
                            let r = s.q_start + qi;
                            let p = &probs[pos..pos + s.k_len];
                            pos += s.k_len;
                            let grow = &g[r * d + off..r * d + off + dh];
                            dp.clear();
                            let mut weighted = 0.0;
                            for (c, pc) in p.iter().enumerate() {
                                let vr = (s.k_start + c) * d + off;
                                let dot: f64 = grow.iter().zip(&vd[vr..vr + dh]).map(|(a, b)| a * b).sum();
                                dp.push(dot);
                                weighted += pc * dot;
                                dv[vr..vr + dh].iter_mut().zip(grow).for_each(|(x, y)| *x += pc * y);
                            }
                            let qrow = &qd[r * d + off..r * d + off + dh];
                            for (c, pc) in p.iter().enumerate() {
                                let ds = pc * (dp[c] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kr = (s.k_start + c) * d + off;
                                dq[r * d + off..r * d + off + dh]
                                    .iter_mut()
                                    .zip(&kd[kr..kr + dh])
                                    .for_each(|(x, y)| *x += ds * y);
                                dk[kr..kr + dh].iter_mut().zip(qrow).for_each(|(x, y)| *x += ds * y);
                            }
                        }
                    }
                }
                self.add_into(grads, *q, &dq);
                self.add_into(grads, *k, &dk);
                self.add_into(grads, *v, &dv);
            }
            Op::GatherRows { a, idx } => {
                let c = node.value.cols();
                let sa = self.slot(grads, *a);
                for (o, &src) in idx.iter().enumerate() {
                    sa[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&g[o * c..(o + 1) * c])
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                self.add_into(grads, *a, &g[..na]);
                self.add_into(grads, *b, &g[na..]);
            }
            Op::SegmentMean { a, segs } => {
                let c = node.value.cols();
                let sa = self.slot(grads, *a);
                for (s, &(start, len)) in segs.iter().enumerate() {
                    let gs = &g[s * c..(s + 1) * c];
                    for r in start..start + len {
                        sa[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(x, y)| *x += y / len as f64);
                    }
                }
            }
            Op::GroupMaxCols { a, argmax } => {
                let cin = self.value(*a).cols();
                let gcols = node.value.cols();
                let sa = self.slot(grads, *a);
                for (o, &col) in argmax.iter().enumerate() {
                    let r = o / gcols;
                    sa[r * cin + col] += g[o];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let sa = self.slot(grads, *logits);
                for (r, (t, w)) in targets.iter().zip(weights).enumerate() {
                    let scale = g[0] * w;
                    for j in 0..c {
                        sa[r * c + j] += scale * probs[r * c + j];
                    }
                    sa[r * c + t] -= scale;
                }
            }
            Op::Reshape(a) => self.add_into(grads, *a, g),
            Op::ReverseGrad(a) => {
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.add_into(grads, *a, &neg);
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let sa = self.slot(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        sa[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::Sum(a) => {
                let sa = self.slot(grads, *a);
                sa.iter_mut().for_each(|x| *x += g[0]);
            }
        }
    }
}
