use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    CircCorr(Var, Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<Vec<usize>>),
    RepeatRows(Var),
    RepeatCols(Var),
    Reshape(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    CosineRows { a: Var, b: Var },
    BceWithLogits { logits: Var, targets: Vec<f64>, pos_weight: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are created in topological order, so reverse creation order is a
/// valid backward schedule. `backward` accumulates into leaf gradients; call
/// [`Graph::zero_grad`] between passes to reset them.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit clamp applied before binary cross-entropy.
pub const LOGIT_CLAMP: f64 = 30.0;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph in training mode (dropout active).
    pub fn training() -> Self {
        Self {
            nodes: Vec::new(),
            train: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn set_training(&mut self, train: bool) {
        self.train = train;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            needs_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Contract(format!("{op}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// Sums along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let ad = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += ad[(o * len + k) * inner + i];
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(oshape, out)?, Op::SumAxis(a, axis), ng))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let ad = self.value(a).data();
        let mut out = vec![0.0; ad.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| ad[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (ad[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a, axis), ng))
    }

    /// Row-wise circular correlation over the trailing dimension:
    /// `out[.., k] = Σ_i a[.., i] · b[.., (i + k) mod d]`.
    pub fn circular_correlation(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("circular_correlation", a, b)?;
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| {
            TensorError::Contract("circular_correlation: scalar input".into())
        })?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let rows = ad.len() / d.max(1);
        let mut out = vec![0.0; ad.len()];
        for r in 0..rows {
            let (ar, br) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
            let orow = &mut out[r * d..(r + 1) * d];
            for (i, av) in ar.iter().enumerate() {
                if *av == 0.0 {
                    continue;
                }
                // k ranges over 0..d with j = (i + k) mod d
                for k in 0..d {
                    let j = if i + k >= d { i + k - d } else { i + k };
                    orow[k] += av * br[j];
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::CircCorr(a, b), ng))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat: no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut oshape = base.clone();
        oshape[axis] = total;
        let (outer, _, inner) = axis_split(&oshape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis];
                let d = self.value(*v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let ng = inputs.iter().any(|v| self.ng(*v));
        Ok(self.push(Tensor::new(oshape, out)?, Op::Concat(inputs.to_vec(), axis), ng))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                len: shape[axis],
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&ad[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Narrow(a, axis, start), ng))
    }

    /// Selects rows of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims("gather_rows", a)?;
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(&ad[i * d..(i + 1) * d]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::GatherRows(a, idx.to_vec()),
            ng,
        ))
    }

    /// Sums row `i` of `a` into output row `idx[i]` of an `n × d` result.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (e, d) = self.matrix_dims("scatter_add_rows", a)?;
        if idx.len() != e {
            return Err(TensorError::Shape {
                op: "scatter_add_rows",
                lhs: vec![e, d],
                rhs: vec![idx.len()],
            });
        }
        let ad = self.value(a).data();
        let mut out = vec![0.0; n * d];
        for (r, &t) in idx.iter().enumerate() {
            if t >= n {
                return Err(TensorError::Index {
                    op: "scatter_add_rows",
                    index: t,
                    len: n,
                });
            }
            for (o, v) in out[t * d..(t + 1) * d].iter_mut().zip(&ad[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::ScatterAddRows(a, idx.to_vec()),
            ng,
        ))
    }

    /// Output row `s` is the mean of `a`'s rows listed in `segments[s]`.
    pub fn segment_mean(&mut self, a: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let (n, d) = self.matrix_dims("segment_mean", a)?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(TensorError::Contract(format!("segment_mean: segment {s} is empty")));
            }
            let w = 1.0 / seg.len() as f64;
            let orow = &mut out[s * d..(s + 1) * d];
            for &i in seg {
                if i >= n {
                    return Err(TensorError::Index {
                        op: "segment_mean",
                        index: i,
                        len: n,
                    });
                }
                for (o, v) in orow.iter_mut().zip(&ad[i * d..(i + 1) * d]) {
                    *o += v * w;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![segments.len(), d], out)?,
            Op::SegmentMean(a, segments.to_vec()),
            ng,
        ))
    }

    /// Tiles a length-`d` vector (or `1 × d` matrix) into `n × d`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = match s.as_slice() {
            [d] | [1, d] => *d,
            _ => {
                return Err(TensorError::Contract(format!(
                    "repeat_rows: expected a vector, got shape {s:?}"
                )))
            }
        };
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(ad);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::RepeatRows(a), ng))
    }

    /// Tiles a length-`n` vector (or `n × 1` matrix) across `d` columns.
    pub fn repeat_cols(&mut self, a: Var, d: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = match s.as_slice() {
            [n] | [n, 1] => *n,
            _ => {
                return Err(TensorError::Contract(format!(
                    "repeat_cols: expected a column, got shape {s:?}"
                )))
            }
        };
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(n * d);
        for v in ad.iter().take(n) {
            out.extend(std::iter::repeat_n(*v, d));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::RepeatCols(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.matrix_dims("layer_norm", a)?;
        let ad = self.value(a).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &ad[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, x) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (x - mu) * is;
            }
        }
        let t = Tensor::new(vec![n, d], xhat.clone())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::LayerNorm { x: a, xhat, inv_std }, ng))
    }

    /// Inverted dropout. In eval mode (or with `p == 0`) returns `a` itself.
    /// The mask is drawn from a ChaCha stream keyed by `seed`, so a forward
    /// pass is reproducible from its seed alone.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout: p={p} not in [0,1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let va = self.value(a);
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Dropout { x: a, mask }, ng))
    }

    /// Cosine similarity between every row of `a` (`n × d`) and every row of
    /// `b` (`m × d`). Pairs involving a zero-norm row score 0 and pass no
    /// gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("cosine_rows", a)?;
        let (m, d2) = self.matrix_dims("cosine_rows", b)?;
        if d != d2 {
            return Err(TensorError::Shape {
                op: "cosine_rows",
                lhs: vec![n, d],
                rhs: vec![m, d2],
            });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let an = row_norms(ad, n, d);
        let bn = row_norms(bd, m, d);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                if an[i] == 0.0 || bn[j] == 0.0 {
                    continue;
                }
                let dot: f64 = ad[i * d..(i + 1) * d]
                    .iter()
                    .zip(&bd[j * d..(j + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum();
                out[i * m + j] = dot / (an[i] * bn[j]);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::CosineRows { a, b }, ng))
    }

    /// Mean binary cross-entropy over every element, computed from logits
    /// clamped to `[-30, 30]`. `pos_weight` scales the positive-class term.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], pos_weight: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len().max(1) as f64;
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(z, y)| {
                let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z)
            })
            .sum::<f64>()
            / n;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                pos_weight,
            },
            ng,
        ))
    }

    /// Mean categorical cross-entropy of `B × C` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix_dims("cross_entropy", logits)?;
        if b != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: vec![b, c],
                rhs: vec![targets.len()],
            });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &ld[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            let t = targets[r];
            if t >= c {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    len: c,
                });
            }
            loss += lse - row[t];
            for (p, x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        loss /= b.max(1) as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse-mode pass from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.ng(loss) {
            return Err(TensorError::Contract(
                "backward: loss does not depend on any trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                if self.nodes[id].requires_grad {
                    match &mut self.nodes[id].grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let slot = |grads: &mut [Option<Vec<f64>>], v: Var| -> bool {
            if !nodes[v.0].needs_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; nodes[v.0].value.len()]);
            }
            true
        };
        macro_rules! acc {
            ($v:expr, |$ga:ident| $body:block) => {
                if slot(grads, $v) {
                    let $ga = grads[$v.0].as_mut().unwrap();
                    $body
                }
            };
        }
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                acc!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
            }
            Op::Sub(a, b) => {
                acc!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                acc!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y) });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc!(*b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, s) => acc!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y) }),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) })
            }
            Op::MatMul(a, b) => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let (ad, bd) = (va.data(), vb.data());
                acc!(*a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc!(*b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (x, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *x += av * y;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[1], out.shape()[0]);
                acc!(*a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc!(*a, |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::SumAll(a) => acc!(*a, |ga| { ga.iter_mut().for_each(|x| *x += g[0]) }),
            Op::MeanAll(a) => {
                let n = nodes[a.0].value.len().max(1) as f64;
                acc!(*a, |ga| { ga.iter_mut().for_each(|x| *x += g[0] / n) });
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(nodes[a.0].value.shape(), *axis);
                acc!(*a, |ga| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                ga[(o * len + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                acc!(*a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CircCorr(a, b) => {
                let d = *out.shape().last().unwrap();
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let rows = ad.len() / d.max(1);
                acc!(*a, |ga| {
                    for r in 0..rows {
                        let (gr, br) = (&g[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
                        for i in 0..d {
                            let mut s = 0.0;
                            for k in 0..d {
                                s += gr[k] * br[(i + k) % d];
                            }
                            ga[r * d + i] += s;
                        }
                    }
                });
                acc!(*b, |gb| {
                    for r in 0..rows {
                        let (gr, ar) = (&g[r * d..(r + 1) * d], &ad[r * d..(r + 1) * d]);
                        for j in 0..d {
                            let mut s = 0.0;
                            for k in 0..d {
                                s += gr[k] * ar[(j + d - k) % d];
                            }
                            gb[r * d + j] += s;
                        }
                    }
                });
            }
            Op::Concat(inputs, axis) => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    acc!(*v, |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gv[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let (outer, full, inner) = axis_split(nodes[a.0].value.shape(), *axis);
                let len = out.shape()[*axis];
                acc!(*a, |ga| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            ga[dst + t] += g[src + t];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let d = out.cols();
                acc!(*a, |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            ga[i * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::ScatterAddRows(a, idx) => {
                let d = out.cols();
                acc!(*a, |ga| {
                    for (r, &t) in idx.iter().enumerate() {
                        for c in 0..d {
                            ga[r * d + c] += g[t * d + c];
                        }
                    }
                });
            }
            Op::SegmentMean(a, segments) => {
                let d = out.cols();
                acc!(*a, |ga| {
                    for (s, seg) in segments.iter().enumerate() {
                        let w = 1.0 / seg.len() as f64;
                        for &i in seg {
                            for c in 0..d {
                                ga[i * d + c] += g[s * d + c] * w;
                            }
                        }
                    }
                });
            }
            Op::RepeatRows(a) => {
                let d = nodes[a.0].value.len();
                acc!(*a, |ga| {
                    for (t, v) in g.iter().enumerate() {
                        ga[t % d] += v;
                    }
                });
            }
            Op::RepeatCols(a) => {
                let d = out.cols();
                acc!(*a, |ga| {
                    for (t, v) in g.iter().enumerate() {
                        ga[t / d] += v;
                    }
                });
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let d = out.cols();
                acc!(*x, |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let sg: f64 = gr.iter().sum();
                        let sgx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            gx[r * d + c] += is / d as f64 * (d as f64 * gr[c] - sg - xr[c] * sgx);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc!(*x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                });
            }
            Op::CosineRows { a, b } => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let (n, d) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[0];
                let (ad, bd) = (va.data(), vb.data());
                let an = row_norms(ad, n, d);
                let bn = row_norms(bd, m, d);
                let c = out.data();
                acc!(*a, |ga| {
                    for i in 0..n {
                        if an[i] == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            if bn[j] == 0.0 {
                                continue;
                            }
                            let gij = g[i * m + j];
                            let cij = c[i * m + j];
                            for t in 0..d {
                                ga[i * d + t] += gij
                                    * (bd[j * d + t] / (an[i] * bn[j]) - cij * ad[i * d + t] / (an[i] * an[i]));
                            }
                        }
                    }
                });
                acc!(*b, |gb| {
                    for i in 0..n {
                        if an[i] == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            if bn[j] == 0.0 {
                                continue;
                            }
                            let gij = g[i * m + j];
                            let cij = c[i * m + j];
                            for t in 0..d {
                                gb[j * d + t] += gij
                                    * (ad[i * d + t] / (an[i] * bn[j]) - cij * bd[j * d + t] / (bn[j] * bn[j]));
                            }
                        }
                    }
                });
            }
            Op::BceWithLogits {
                logits,
                targets,
                pos_weight,
            } => {
                let z = nodes[logits.0].value.data();
                let n = targets.len().max(1) as f64;
                acc!(*logits, |gl| {
                    for i in 0..z.len() {
                        if z[i].abs() > LOGIT_CLAMP {
                            continue;
                        }
                        let s = sigmoid(z[i]);
                        let y = targets[i];
                        gl[i] += g[0] * ((1.0 - y) * s - pos_weight * y * (1.0 - s)) / n;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = targets.len();
                let c = probs.len() / b.max(1);
                acc!(*logits, |gl| {
                    for r in 0..b {
                        for k in 0..c {
                            let y = if targets[r] == k { 1.0 } else { 0.0 };
                            gl[r * c + k] += g[0] * (probs[r * c + k] - y) / b as f64;
                        }
                    }
                });
            }
        }
    }
}

fn row_norms(data: &[f64], n: usize, d: usize) -> Vec<f64> {
    (0..n)
        .map(|i| data[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}
