use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use super::tensor::{dot, mm, mm_nt, mm_tn};
use super::{ParamId, ParamStore, Tensor};

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-add count of forward ops executed on this thread since the last reset.
pub fn flop_count() -> u64 {
    FLOPS.with(|f| f.get())
}

pub fn reset_flop_count() {
    FLOPS.with(|f| f.set(0));
}

fn count(n: usize) {
    FLOPS.with(|f| f.set(f.get() + n as u64));
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {a:?} and {b:?}")]
    Shape {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    MaskedFill(Var, Rc<Vec<bool>>),
    LayerNorm(Var, Vec<f64>),
    GatherRows(Var, Rc<Vec<usize>>),
    GatherCols(Var, Rc<Vec<usize>>),
    Select(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    SumLast(Var),
    SegmentLse(Var, Rc<Vec<usize>>, Rc<Vec<usize>>),
    Huber(Var, Rc<Vec<f64>>, f64),
    Expand(Var),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        offsets: Rc<Vec<usize>>,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for reverse-mode differentiation. Single-writer; values are
/// computed eagerly and every reduction runs in a fixed sequential order.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape {
        op,
        a: a.shape.clone(),
        b: b.shape.clone(),
    }
}

fn invalid(op: &'static str, message: impl Into<String>) -> AutodiffError {
    AutodiffError::Invalid {
        op,
        message: message.into(),
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.0) {
            return v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Param(id.0));
        self.params.insert(id.0, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape.len() != 2 || ta.shape.is_empty() || ta.cols() != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.shape[1]);
        count(n * k * m);
        let mut shape = ta.shape.clone();
        *shape.last_mut().expect("non-empty") = m;
        let out = Tensor::new(&shape, mm(&ta.data, &tb.data, n, k, m));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.cols() != tb.cols() {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
        count(n * k * m);
        let out = Tensor::matrix(n, m, mm_nt(&ta.data, &tb.data, n, k, m));
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(name, ta, tb));
        }
        count(ta.len());
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(&ta.shape, data);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn check_bias(&self, a: Var, b: Var, name: &'static str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.shape.len();
        if nb > ta.shape.len() || ta.shape[ta.shape.len() - nb..] != tb.shape[..] {
            return Err(shape_err(name, ta, tb));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_bias(a, b, "add_bias")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.len();
        count(ta.len());
        let data = ta.data.iter().enumerate().map(|(i, &x)| x + tb.data[i % n]).collect();
        let out = Tensor::new(&ta.shape, data);
        Ok(self.push(out, Op::AddBias(a, b)))
    }

    /// `a * b` where `b`'s shape equals the trailing axes of `a`.
    pub fn mul_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_bias(a, b, "mul_bias")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.len();
        count(ta.len());
        let data = ta.data.iter().enumerate().map(|(i, &x)| x * tb.data[i % n]).collect();
        let out = Tensor::new(&ta.shape, data);
        Ok(self.push(out, Op::MulBias(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        count(ta.len());
        let out = Tensor::new(&ta.shape, ta.data.iter().map(|x| x * s).collect());
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        count(ta.len() * 8);
        let out = Tensor::new(&ta.shape, ta.data.iter().map(|&x| gelu(x)).collect());
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        count(ta.len() * 4);
        let out = Tensor::new(&ta.shape, ta.data.iter().map(|x| x.tanh()).collect());
        self.push(out, Op::Tanh(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        count(ta.len() * 4);
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(&ta.shape, data);
        self.push(out, Op::Softmax(a))
    }

    /// Log-softmax over the last axis; `-inf` entries stay `-inf`.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        count(ta.len() * 4);
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            let l = lse(row);
            for x in row.iter_mut() {
                *x -= l;
            }
        }
        let out = Tensor::new(&ta.shape, data);
        self.push(out, Op::LogSoftmax(a))
    }

    /// Replaces entries where `mask` is true with `value`; no gradient flows to them.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(invalid(
                "masked_fill",
                format!("mask of {} for shape {:?}", mask.len(), ta.shape),
            ));
        }
        let data = ta
            .data
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let out = Tensor::new(&ta.shape, data);
        Ok(self.push(out, Op::MaskedFill(a, Rc::new(mask.to_vec()))))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let ta = self.value(a);
        let c = ta.cols();
        count(ta.len() * 6);
        let mut data = ta.data.clone();
        let mut rstds = Vec::with_capacity(ta.rows());
        for row in data.chunks_mut(c.max(1)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let out = Tensor::new(&ta.shape, data);
        self.push(out, Op::LayerNorm(a, rstds))
    }

    /// Rows (first-axis slices) of `a` in the order of `idx`; an embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.is_empty() {
            return Err(invalid("gather_rows", "scalar input"));
        }
        let n = ta.shape[0];
        let w = ta.len() / n.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(invalid("gather_rows", format!("index {bad} out of {n} rows")));
        }
        count(idx.len() * w);
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&ta.data[i * w..(i + 1) * w]);
        }
        let mut shape = ta.shape.clone();
        shape[0] = idx.len();
        let out = Tensor::new(&shape, data);
        Ok(self.push(out, Op::GatherRows(a, Rc::new(idx.to_vec()))))
    }

    /// Columns of a matrix in the order of `idx`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 {
            return Err(invalid("gather_cols", format!("needs a matrix, got {:?}", ta.shape)));
        }
        let (n, m) = (ta.shape[0], ta.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(invalid("gather_cols", format!("index {bad} out of {m} columns")));
        }
        let mut data = Vec::with_capacity(n * idx.len());
        for r in 0..n {
            for &j in idx {
                data.push(ta.data[r * m + j]);
            }
        }
        let out = Tensor::matrix(n, idx.len(), data);
        Ok(self.push(out, Op::GatherCols(a, Rc::new(idx.to_vec()))))
    }

    /// Flat elements of `a` as a vector.
    pub fn select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.len()) {
            return Err(invalid("select", format!("index {bad} out of {}", ta.len())));
        }
        let out = Tensor::vector(idx.iter().map(|&i| ta.data[i]).collect());
        Ok(self.push(out, Op::Select(a, Rc::new(idx.to_vec()))))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?);
        let tail = first.shape[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape.is_empty() || t.shape[1..] != tail[..] {
                return Err(shape_err("concat_rows", first, t));
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Concatenation of matrices along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?);
        let n = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape.len() != 2 || t.rows() != n {
                return Err(shape_err("concat_cols", first, t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(n, total, data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.shape.len() {
            return Err(invalid("mean_axis", format!("axis {axis} of {:?}", t.shape)));
        }
        let (outer, n, inner) = split_axis(&t.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += t.data[(o * n + j) * inner + i];
                }
            }
        }
        for x in &mut data {
            *x /= n as f64;
        }
        let mut shape = t.shape.clone();
        shape.remove(axis);
        let out = Tensor::new(&shape, data);
        Ok(self.push(out, Op::MeanAxis(a, axis)))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols().max(1);
        let data: Vec<f64> = t.data.chunks(c).map(|r| r.iter().sum()).collect();
        let shape = t.shape[..t.shape.len().saturating_sub(1)].to_vec();
        let out = Tensor::new(&shape, data);
        self.push(out, Op::SumLast(a))
    }

    /// For a matrix `[n, m]`, the log-sum-exp of each row over every column group:
    /// output `[n, groups.len()]`, `-inf` for empty groups.
    pub fn segment_logsumexp(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 {
            return Err(invalid(
                "segment_logsumexp",
                format!("needs a matrix, got {:?}", t.shape),
            ));
        }
        let (n, m) = (t.shape[0], t.shape[1]);
        let mut perm = Vec::new();
        let mut offsets = vec![0];
        for g in groups {
            if let Some(&bad) = g.iter().find(|&&j| j >= m) {
                return Err(invalid("segment_logsumexp", format!("column {bad} out of {m}")));
            }
            perm.extend_from_slice(g);
            offsets.push(perm.len());
        }
        count(n * perm.len() * 2);
        let k = groups.len();
        let mut data = vec![f64::NEG_INFINITY; n * k];
        let mut buf = Vec::new();
        for r in 0..n {
            for g in 0..k {
                buf.clear();
                buf.extend(perm[offsets[g]..offsets[g + 1]].iter().map(|&j| t.data[r * m + j]));
                data[r * k + g] = lse(&buf);
            }
        }
        let out = Tensor::matrix(n, k, data);
        Ok(self.push(out, Op::SegmentLse(a, Rc::new(perm), Rc::new(offsets))))
    }

    /// Elementwise Huber loss against fixed targets.
    pub fn huber(&mut self, a: Var, target: &[f64], delta: f64) -> Result<Var> {
        let t = self.value(a);
        if target.len() != t.len() {
            return Err(invalid(
                "huber",
                format!("{} targets for shape {:?}", target.len(), t.shape),
            ));
        }
        let data = t
            .data
            .iter()
            .zip(target)
            .map(|(&x, &y)| {
                let r = (x - y).abs();
                if r <= delta {
                    0.5 * r * r
                } else {
                    delta * (r - 0.5 * delta)
                }
            })
            .collect();
        let out = Tensor::new(&t.shape, data);
        Ok(self.push(out, Op::Huber(a, Rc::new(target.to_vec()), delta)))
    }

    /// Repeats `a` `n` times along a new leading axis.
    pub fn expand(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(n * t.len());
        for _ in 0..n {
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&t.shape);
        let out = Tensor::new(&shape, data);
        self.push(out, Op::Expand(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() || shape.len() > 4 {
            return Err(AutodiffError::Shape {
                op: "reshape",
                a: t.shape.clone(),
                b: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape, t.data.clone());
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Multi-head attention over ragged key lists. Query `i` attends to key/value rows
    /// `offsets[i]..offsets[i + 1]` of `k` and `v`; `bias` (`[E, heads]`) is added to
    /// the scores. Queries without keys output zeros. Work is `O(E · d)`.
    pub fn ragged_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        offsets: &[usize],
        heads: usize,
        bias: Option<Var>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape.len() != 2 || tk.shape != tv.shape || tk.shape.len() != 2 || tq.cols() != tk.cols() {
            return Err(shape_err("ragged_attention", tq, tk));
        }
        let (n, d, e) = (tq.rows(), tq.cols(), tk.rows());
        if heads == 0 || d % heads != 0 {
            return Err(invalid(
                "ragged_attention",
                format!("{d} not divisible by {heads} heads"),
            ));
        }
        if offsets.len() != n + 1 || offsets[n] != e || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid(
                "ragged_attention",
                "offsets must be monotone and cover all keys",
            ));
        }
        let tb = match bias {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape != [e, heads] {
                    return Err(shape_err("ragged_attention bias", tk, tb));
                }
                Some(tb)
            }
            None => None,
        };
        count(e * d * 4);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; e * heads];
        let mut scores = Vec::new();
        for i in 0..n {
            let (lo, hi) = (offsets[i], offsets[i + 1]);
            if lo == hi {
                continue;
            }
            for h in 0..heads {
                let qh = &tq.data[i * d + h * dh..i * d + (h + 1) * dh];
                scores.clear();
                for j in lo..hi {
                    let kh = &tk.data[j * d + h * dh..j * d + (h + 1) * dh];
                    let mut s = dot(qh, kh) * scale;
                    if let Some(tb) = tb {
                        s += tb.data[j * heads + h];
                    }
                    scores.push(s);
                }
                softmax_in_place(&mut scores);
                let oh = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &p) in (lo..hi).zip(&scores) {
                    probs[j * heads + h] = p;
                    let vh = &tv.data[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &x) in oh.iter_mut().zip(vh) {
                        *o += p * x;
                    }
                }
            }
        }
        let out = Tensor::matrix(n, d, out);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                offsets: Rc::new(offsets.to_vec()),
                heads,
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Nodes the loss does not depend on get no
    /// gradient; [`Gradients::for_params`] fills those with zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.shape[1]);
                acc(grads, *a, mm_nt(g, &tb.data, n, m, k));
                acc(grads, *b, mm_tn(&ta.data, g, n, k, m));
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                acc(grads, *a, mm(g, &tb.data, n, m, k));
                acc(grads, *b, mm_tn(g, &ta.data, n, m, k));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(grads, *a, g.iter().zip(&tb.data).map(|(x, y)| x * y).collect());
                acc(grads, *b, g.iter().zip(&ta.data).map(|(x, y)| x * y).collect());
            }
            Op::AddBias(a, b) => {
                let nb = val(*b).len();
                let mut gb = vec![0.0; nb];
                for (j, x) in g.iter().enumerate() {
                    gb[j % nb] += x;
                }
                acc(grads, *a, g.to_vec());
                acc(grads, *b, gb);
            }
            Op::MulBias(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let nb = tb.len();
                let mut gb = vec![0.0; nb];
                let mut ga = Vec::with_capacity(g.len());
                for (j, x) in g.iter().enumerate() {
                    gb[j % nb] += x * ta.data[j];
                    ga.push(x * tb.data[j % nb]);
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, s) => acc(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::Gelu(a) => {
                let ta = val(*a);
                acc(
                    grads,
                    *a,
                    g.iter().zip(&ta.data).map(|(x, &v)| x * gelu_grad(v)).collect(),
                );
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                acc(grads, *a, g.iter().zip(y).map(|(x, y)| x * (1.0 - y * y)).collect());
            }
            Op::Softmax(a) => {
                let y = &node.value.data;
                let c = node.value.cols().max(1);
                let mut ga = vec![0.0; g.len()];
                for r in 0..y.len() / c {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let s = dot(yr, gr);
                    for j in 0..c {
                        ga[r * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value.data;
                let c = node.value.cols().max(1);
                let mut ga = vec![0.0; g.len()];
                for r in 0..y.len() / c {
                    let gr = &g[r * c..(r + 1) * c];
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        let yj = y[r * c + j];
                        if yj != f64::NEG_INFINITY {
                            ga[r * c + j] = gr[j] - yj.exp() * s;
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::MaskedFill(a, mask) => {
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(mask.iter())
                        .map(|(&x, &m)| if m { 0.0 } else { x })
                        .collect(),
                );
            }
            Op::LayerNorm(a, rstds) => {
                let y = &node.value.data;
                let c = node.value.cols().max(1);
                let mut ga = vec![0.0; g.len()];
                for (r, &rstd) in rstds.iter().enumerate() {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = dot(gr, yr) / c as f64;
                    for j in 0..c {
                        ga[r * c + j] = rstd * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let ta = val(*a);
                let w = ta.len() / ta.shape[0].max(1);
                let mut ga = vec![0.0; ta.len()];
                for (o, &src) in idx.iter().enumerate() {
                    for c in 0..w {
                        ga[src * w + c] += g[o * w + c];
                    }
                }
                acc(grads, *a, ga);
            }
            Op::GatherCols(a, idx) => {
                let ta = val(*a);
                let (n, m) = (ta.shape[0], ta.shape[1]);
                let mut ga = vec![0.0; ta.len()];
                for r in 0..n {
                    for (o, &j) in idx.iter().enumerate() {
                        ga[r * m + j] += g[r * idx.len() + o];
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Select(a, idx) => {
                let mut ga = vec![0.0; val(*a).len()];
                for (o, &j) in idx.iter().enumerate() {
                    ga[j] += g[o];
                }
                acc(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let l = val(p).len();
                    acc(grads, p, g[at..at + l].to_vec());
                    at += l;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut at = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut gp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        gp.extend_from_slice(&g[r * total + at..r * total + at + w]);
                    }
                    acc(grads, p, gp);
                    at += w;
                }
            }
            Op::Sum(a) => acc(grads, *a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(grads, *a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::MeanAxis(a, axis) => {
                let ta = val(*a);
                let (outer, n, inner) = split_axis(&ta.shape, *axis);
                let mut ga = vec![0.0; ta.len()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            ga[(o * n + j) * inner + i] = g[o * inner + i] / n as f64;
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::SumLast(a) => {
                let ta = val(*a);
                let c = ta.cols().max(1);
                acc(grads, *a, (0..ta.len()).map(|j| g[j / c]).collect());
            }
            Op::SegmentLse(a, perm, offsets) => {
                let ta = val(*a);
                let (n, m) = (ta.shape[0], ta.shape[1]);
                let k = offsets.len() - 1;
                let out = &node.value.data;
                let mut ga = vec![0.0; ta.len()];
                for r in 0..n {
                    for s in 0..k {
                        let o = out[r * k + s];
                        if o == f64::NEG_INFINITY {
                            continue;
                        }
                        for &j in &perm[offsets[s]..offsets[s + 1]] {
                            ga[r * m + j] += g[r * k + s] * (ta.data[r * m + j] - o).exp();
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Huber(a, target, delta) => {
                let ta = val(*a);
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(&ta.data)
                        .zip(target.iter())
                        .map(|((x, v), y)| x * (v - y).clamp(-delta, *delta))
                        .collect(),
                );
            }
            Op::Expand(a) => {
                let l = val(*a).len();
                let mut ga = vec![0.0; l];
                for (j, x) in g.iter().enumerate() {
                    ga[j % l] += x;
                }
                acc(grads, *a, ga);
            }
            Op::Reshape(a) => acc(grads, *a, g.to_vec()),
            Op::Attention {
                q,
                k,
                v,
                bias,
                offsets,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (n, d) = (tq.rows(), tq.cols());
                let heads = *heads;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; tq.len()];
                let mut gk = vec![0.0; tk.len()];
                let mut gv = vec![0.0; tv.len()];
                let mut gb = bias.map(|_| vec![0.0; probs.len()]);
                let mut dp = Vec::new();
                for i in 0..n {
                    let (lo, hi) = (offsets[i], offsets[i + 1]);
                    for h in 0..heads {
                        let gi = &g[i * d + h * dh..i * d + (h + 1) * dh];
                        dp.clear();
                        let mut sum = 0.0;
                        for j in lo..hi {
                            let p = probs[j * heads + h];
                            let vh = &tv.data[j * d + h * dh..j * d + (h + 1) * dh];
                            let dpj = dot(gi, vh);
                            sum += p * dpj;
                            dp.push(dpj);
                            for (gvx, &gx) in gv[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(gi) {
                                *gvx += p * gx;
                            }
                        }
                        for (t, j) in (lo..hi).enumerate() {
                            let ds = probs[j * heads + h] * (dp[t] - sum);
                            if let Some(gb) = gb.as_mut() {
                                gb[j * heads + h] += ds;
                            }
                            let c = ds * scale;
                            for x in 0..dh {
                                gq[i * d + h * dh + x] += c * tk.data[j * d + h * dh + x];
                                gk[j * d + h * dh + x] += c * tq.data[i * d + h * dh + x];
                            }
                        }
                    }
                }
                acc(grads, *q, gq);
                acc(grads, *k, gk);
                acc(grads, *v, gv);
                if let (Some(b), Some(gb)) = (bias, gb) {
                    acc(grads, *b, gb);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Log-sum-exp; `-inf` for an empty or all `-inf` slice.
pub(crate) fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        xs.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// One gradient tensor per stored parameter, zero where the loss did not reach.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(&t.shape)).collect();
        for &(p, node) in &self.params {
            if let Some(Some(g)) = self.grads.get(node) {
                out[p].data.copy_from_slice(g);
            }
        }
        out
    }
}
