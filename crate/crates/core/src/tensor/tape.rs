use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gates, gemm, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddTrailing(Var, Var),
    MulScalar { x: Var, s: Var },
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    BroadcastLeading(Var),
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | BatchMatMul { a, b } | Add(a, b) | Sub(a, b) | AddTrailing(a, b) => {
                vec![*a, *b]
            }
            MulScalar { x, s } => vec![*x, *s],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { inputs, .. } => inputs.clone(),
            Embedding { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
            Transpose(x) | Scale(x, _) | Relu(x) | Abs(x) | Square(x) | Softmax(x)
            | Slice { x, .. } | BroadcastLeading(x) | MeanAxis { x, .. } | SumAll(x)
            | Reshape(x) | Dropout { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of the differentiable operations of one forward pass.
///
/// A tape is built fresh for every forward pass. Parameters enter through
/// [`Tape::param`]; [`Tape::backward`] replays the record in reverse and adds
/// the resulting gradients into the [`ParamStore`].
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
    dropout_used: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every recorded node with respect to a backward root.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.clone()))
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accum<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    /// A tape with dropout disabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            dropout_rng: None,
            dropout_used: false,
        }
    }

    /// A tape whose dropout layers draw masks from a generator seeded with `seed`.
    pub fn with_dropout(seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Whether any dropout layer actually masked values on this tape.
    pub fn dropout_used(&self) -> bool {
        self.dropout_used
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
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-trainable value.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// Records an input leaf; its gradient is available from [`Gradients::get`].
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf(value, requires_grad, None)
    }

    /// Records a parameter. Repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Matrix product.
    ///
    /// With a rank-2 right operand `[k, n]`, the left operand `[..., k]` is
    /// treated as a stack of rows sharing the same right matrix. With equal
    /// ranks above 2, leading extents must agree and the product is batched.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() < 2 || (sb.len() > 2 && sa.len() != sb.len()) {
            return Err(self.mismatch("matmul", a, b));
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(self.mismatch("matmul", a, b));
            }
            let n = sb[1];
            let rows = self.value(a).numel() / k;
            let mut out = vec![0.0; rows * n];
            gemm(
                rows,
                k,
                n,
                self.value(a).data(),
                false,
                self.value(b).data(),
                false,
                &mut out,
                false,
            );
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            return Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }));
        }
        let r = sa.len();
        if sb.len() != r || sa[..r - 2] != sb[..r - 2] || sb[r - 2] != k {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, n) = (sa[r - 2], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa.clone();
        shape[r - 1] = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::BatchMatMul { a, b }))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "transpose needs rank >= 2".into(),
            });
        }
        let r = s.len();
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let batch = self.value(x).numel() / (rows * cols);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..batch {
            let off = bi * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = src[off + i * cols + j];
                }
            }
        }
        let mut shape = s;
        shape.swap(r - 2, r - 1);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Transpose(x)))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b)))
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x`'s shape.
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(b);
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(self.mismatch("add_trailing", x, b));
        }
        let bd = self.value(b).data();
        let n = bd.len();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let shape = sx.to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddTrailing(x, b)))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let Some(sv) = self.value(s).item() else {
            return Err(self.mismatch("mul_scalar", x, s));
        };
        let out = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulScalar { x, s }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, c))
    }

    fn map(&mut self, x: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), op)
    }

    fn gated(&mut self, x: Var, open: fn(f64) -> bool, on: fn(f64) -> f64, off: fn(f64) -> f64, op: Op) -> Var {
        let out = gates::apply(self.value(x).data(), open, on, off);
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.gated(x, |v| v > 0.0, |v| v, |_| 0.0, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.gated(x, |v| v >= 0.0, |v| v, |v| -v, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    /// Softmax over the last axis, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let c = *t.shape().last().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "softmax of a scalar".into(),
        })?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
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
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x)))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.shape(beta) != [d] {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(self.mismatch("concat", first, v));
            }
            total += s[axis];
        }
        if xs.len() == 1 {
            return Ok(first);
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: xs.to_vec(),
                axis,
            },
        ))
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let r = self.shape(first).len();
        if r == 0 {
            return Err(Error::InvalidArgument("concat of scalars".into()));
        }
        self.concat(xs, r - 1)
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} of axis {axis} in shape {s:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn broadcast_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::InvalidArgument("broadcast to zero copies".into()));
        }
        let t = self.value(x);
        let out = t.data().repeat(n);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        Ok(self.push(Tensor::from_parts(shape, out), Op::BroadcastLeading(x)))
    }

    /// Arithmetic mean along `axis`, which is removed from the shape.
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for shape {s:?}"
            )));
        }
        let (outer, extent, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / extent as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, axis }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Inverted dropout: zeroes elements with probability `p` and scales the
    /// survivors by `1 / (1 - p)`. Identity on tapes built without dropout.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} not in [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].value.numel();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.dropout_used = true;
        let t = self.value(x);
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }))
    }

    /// Gathers rows of a `[V, d]` table; the result has shape `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::InvalidShape {
                shape: st,
                reason: "embedding table must be [V, d]".into(),
            });
        }
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::InvalidArgument("id count does not match shape".into()));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!("token id {bad} >= vocab {v}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let c = s[1];
        if targets.iter().any(|&t| t >= c) {
            return Err(Error::InvalidArgument("class index out of range".into()));
        }
        let src = self.value(logits).data();
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cross_entropy"));
        }
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates from a single-element `root`, adding parameter
    /// gradients into `store`. Gradients accumulate across calls until
    /// [`ParamStore::zero_grad`].
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for node_idx in self.param_vars.values() {
            let node = &self.nodes[node_idx.0];
            if let (Some(id), Some(g)) = (node.param, grads[node_idx.0].as_ref()) {
                store.accumulate(id, g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let rows = len(*a) / k;
                if needs(*a) {
                    let da = accum(grads, *a, rows * k);
                    gemm(rows, n, k, g, false, val(*b), true, da, true);
                }
                if needs(*b) {
                    let db = accum(grads, *b, k * n);
                    gemm(k, rows, n, val(*a), true, g, false, db, true);
                }
            }
            Op::BatchMatMul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch = len(*a) / (m * k);
                if needs(*a) {
                    let bd = val(*b);
                    let da = accum(grads, *a, batch * m * k);
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bd[i * k * n..(i + 1) * k * n],
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if needs(*b) {
                    let ad = val(*a);
                    let db = accum(grads, *b, batch * k * n);
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &ad[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut db[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let r = s.len();
                let (rows, cols) = (s[r - 2], s[r - 1]);
                let batch = len(*x) / (rows * cols);
                let dx = accum(grads, *x, batch * rows * cols);
                for bi in 0..batch {
                    let off = bi * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[off + i * cols + j] += g[off + j * rows + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_assign(accum(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_assign(accum(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    let db = accum(grads, *b, g.len());
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }
            Op::AddTrailing(x, b) => {
                if needs(*x) {
                    add_assign(accum(grads, *x, g.len()), g);
                }
                if needs(*b) {
                    let n = len(*b);
                    let db = accum(grads, *b, n);
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let sv = val(*s)[0];
                if needs(*x) {
                    let dx = accum(grads, *x, g.len());
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += sv * gi;
                    }
                }
                if needs(*s) {
                    let dot: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                    accum(grads, *s, 1)[0] += dot;
                }
            }
            Op::Scale(x, c) => {
                let dx = accum(grads, *x, g.len());
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let dx = accum(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            }
            Op::Abs(x) => {
                let xv = val(*x);
                let dx = accum(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        dx[i] += g[i];
                    } else if xv[i] < 0.0 {
                        dx[i] -= g[i];
                    }
                }
            }
            Op::Square(x) => {
                let xv = val(*x);
                let dx = accum(grads, *x, g.len());
                for i in 0..g.len() {
                    dx[i] += 2.0 * xv[i] * g[i];
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                let dx = accum(grads, *x, g.len());
                for r in 0..g.len() / c {
                    let rg = &g[r * c..(r + 1) * c];
                    let ry = &y[r * c..(r + 1) * c];
                    let dot: f64 = rg.iter().zip(ry).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] += ry[j] * (rg[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap();
                let rows = g.len() / d;
                let gv = val(*gamma);
                if needs(*x) {
                    let dx = accum(grads, *x, g.len());
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            dx[r * d + j] +=
                                rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                }
                if needs(*gamma) {
                    let dg = accum(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(*beta) {
                    let db = accum(grads, *beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    if needs(v) {
                        let dv = accum(grads, v, outer * ext * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            add_assign(&mut dv[o * ext * inner..(o + 1) * ext * inner], src);
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, extent, inner) = split_axis(self.shape(*x), *axis);
                let l = node.value.shape()[*axis];
                let dx = accum(grads, *x, outer * extent * inner);
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    add_assign(&mut dx[base..base + l * inner], &g[o * l * inner..(o + 1) * l * inner]);
                }
            }
            Op::BroadcastLeading(x) => {
                let n = len(*x);
                let dx = accum(grads, *x, n);
                for chunk in g.chunks(n) {
                    add_assign(dx, chunk);
                }
            }
            Op::MeanAxis { x, axis } => {
                let (outer, extent, inner) = split_axis(self.shape(*x), *axis);
                let inv = 1.0 / extent as f64;
                let dx = accum(grads, *x, outer * extent * inner);
                for o in 0..outer {
                    for a in 0..extent {
                        let base = (o * extent + a) * inner;
                        for i in 0..inner {
                            dx[base + i] += g[o * inner + i] * inv;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let n = len(*x);
                accum(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Reshape(x) => add_assign(accum(grads, *x, g.len()), g),
            Op::Dropout { x, mask } => {
                let dx = accum(grads, *x, g.len());
                for i in 0..g.len() {
                    dx[i] += g[i] * mask[i];
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let n = len(*table);
                let dt = accum(grads, *table, n);
                for (r, &id) in ids.iter().enumerate() {
                    add_assign(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / targets.len() as f64;
                let dl = accum(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
