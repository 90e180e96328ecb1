//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! whatever it needs for the backward sweep. Nodes are only ever appended, so
//! a node's inputs always precede it and a single reverse pass visits each
//! node exactly once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{axis_layout, matmul_a_bt_acc, matmul_at_b_acc, softmax_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows that forms one independent sequence inside a
/// packed batch. Attention never crosses segment boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    /// Lays out consecutive segments of the given lengths.
    pub fn pack(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
        let mut start = 0;
        lengths
            .into_iter()
            .map(|len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }
}

/// Which key positions each query position may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    /// keep[i][j] = j <= i
    Causal,
    /// keep everything
    Bidirectional,
    /// Row-major `len × len` keep matrix.
    Explicit { len: usize, keep: Vec<bool> },
}

impl AttentionMask {
    pub fn explicit(keep: Vec<Vec<bool>>) -> Result<Self> {
        let len = keep.len();
        if keep.iter().any(|r| r.len() != len) {
            return Err(Error::dim("explicit attention mask must be square"));
        }
        Ok(AttentionMask::Explicit { len, keep: keep.into_iter().flatten().collect() })
    }

    #[inline]
    pub fn keeps(&self, i: usize, j: usize) -> bool {
        match self {
            AttentionMask::Causal => j <= i,
            AttentionMask::Bidirectional => true,
            AttentionMask::Explicit { len, keep } => keep[i * len + j],
        }
    }
}

enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Offset(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<Segment>, mask: AttentionMask, probs: Vec<F> },
    Gather { src: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    MeanRows { x: Var, segments: Vec<Segment> },
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, weights: Vec<F> },
    CosinePairs { a: Var, b: Var, pairs: Vec<(usize, usize)>, eps: F },
    Nll { logp: Var, picks: Vec<(usize, usize)> },
    Dropout { x: Var, scale: Vec<F> },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

/// Record of executed operations. One tape per forward pass.
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const MASKED_LOGIT: f64 = -1e9;

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients flow into it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        let tracked = value.requires_grad();
        self.nodes.push(Node { value, op: Op::Leaf, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.item()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Attention weights saved by an attention node, laid out per segment then
    /// per head as `len × len` blocks.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Copy of a node's value without gradient state.
    fn detached(&self, v: Var) -> Tensor<F> {
        let t = self.value(v);
        Tensor::new(t.shape(), t.data().to_vec()).expect("shape already valid")
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---------------------------------------------------------------------
    // Forward operations
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        self.same_shape(a, b, what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.value(bias).len() != c {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not match rows of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut out = self.detached(x);
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&b).for_each(|(o, bv)| *o += *bv);
        }
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let mut out = self.detached(x);
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: F) -> Var {
        let mut out = self.detached(x);
        out.data_mut().iter_mut().for_each(|v| *v += c);
        self.push(out, Op::Offset(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.detached(x);
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_layout(self.shape(x), axis)?;
        let mut out = self.detached(x);
        softmax_axis(out.data_mut(), outer, len, inner);
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if c == 0 {
            return Err(Error::dim("log-softmax over an empty axis"));
        }
        let mut out = self.detached(x);
        for row in out.data_mut().chunks_mut(c).take(r) {
            let max = row.iter().fold(F::neg_infinity(), |m, v| m.max(*v));
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<F>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if c == 0 {
            return Err(Error::dim("layer norm over an empty last dimension"));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim(format!(
                "layer norm parameters {:?}/{:?} do not match width {}",
                self.shape(gamma),
                self.shape(beta),
                c
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = F::of(c as f64);
        let mut xhat = vec![F::zero(); r * c];
        let mut rstd = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / n;
            let denom = var + eps;
            // A zero-variance row with eps = 0 normalizes to zeros.
            let rs = if denom > F::zero() { F::one() / denom.sqrt() } else { F::zero() };
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values (each `N × d`). Heads are contiguous column
    /// blocks of width `d / heads`; the output concatenates them.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        mask: &AttentionMask,
    ) -> Result<Var> {
        let (n, d) = self.dims2(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::dim(format!(
                "attention operands {:?}, {:?}, {:?} differ",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("width {d} is not divisible by {heads} heads")));
        }
        check_segments(segments, n)?;
        if let AttentionMask::Explicit { len, .. } = mask {
            if let Some(s) = segments.iter().find(|s| s.len != *len) {
                return Err(Error::dim(format!("explicit {len}×{len} mask applied to a segment of length {}", s.len)));
            }
        }
        for s in segments {
            for i in 0..s.len {
                if !(0..s.len).any(|j| mask.keeps(i, j)) {
                    return Err(Error::Contract(format!("attention row {i} keeps no positions")));
                }
            }
        }
        let dk = d / heads;
        let scale = F::one() / F::of(dk as f64).sqrt();
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut out = vec![F::zero(); n * d];
        let total: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![F::zero(); total];
        let mut off = 0;
        let mut logits = Vec::new();
        for s in segments {
            let t = s.len;
            for h in 0..heads {
                let col = h * dk;
                for i in 0..t {
                    let qi = &qs[(s.start + i) * d + col..(s.start + i) * d + col + dk];
                    logits.clear();
                    let mut max = F::of(MASKED_LOGIT);
                    for j in 0..t {
                        if !mask.keeps(i, j) {
                            continue;
                        }
                        let kj = &ks[(s.start + j) * d + col..(s.start + j) * d + col + dk];
                        let l = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum::<F>() * scale;
                        max = max.max(l);
                        logits.push((j, l));
                    }
                    // Masked logits sit at -1e9; their weight underflows to
                    // exactly zero, so they are left out of the sums.
                    let mut sum = F::zero();
                    let prow = &mut probs[off + i * t..off + (i + 1) * t];
                    for &(j, l) in &logits {
                        let e = (l - max).exp();
                        prow[j] = e;
                        sum += e;
                    }
                    let orow = &mut out[(s.start + i) * d + col..(s.start + i) * d + col + dk];
                    for &(j, _) in &logits {
                        let p = prow[j] / sum;
                        prow[j] = p;
                        let vj = &vs[(s.start + j) * d + col..(s.start + j) * d + col + dk];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += p * *vv;
                        }
                    }
                }
                off += t * t;
            }
        }
        let out = Tensor::new(&[n, d], out)?;
        let op = Op::Attention { q, k, v, heads, segments: segments.to_vec(), mask: mask.clone(), probs };
        Ok(self.push(out, op, &[q, k, v]))
    }

    /// Row lookup: `out[r] = src[ids[r]]`.
    pub fn gather(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(src);
        if let Some(bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Range(format!("row {bad} out of range for {r} rows")));
        }
        let s = self.value(src).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&s[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(&[ids.len(), c], data)?;
        Ok(self.push(out, Op::Gather { src, ids: ids.to_vec() }, &[src]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|p| self.dims2(*p).1).ok_or_else(|| Error::dim("concat of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = self.dims2(*p);
            if pc != c {
                return Err(Error::dim(format!("concat widths {pc} and {c} differ")));
            }
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Mean over the rows of each segment, one output row per segment.
    pub fn mean_rows(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        let (n, c) = self.dims2(x);
        check_segments(segments, n)?;
        if let Some(s) = segments.iter().find(|s| s.len == 0) {
            return Err(Error::Degenerate(format!("mean over empty segment at row {}", s.start)));
        }
        let xs = self.value(x).data();
        let mut data = vec![F::zero(); segments.len() * c];
        for (si, s) in segments.iter().enumerate() {
            let orow = &mut data[si * c..(si + 1) * c];
            for r in s.start..s.start + s.len {
                orow.iter_mut().zip(&xs[r * c..(r + 1) * c]).for_each(|(o, v)| *o += *v);
            }
            let inv = F::one() / F::of(s.len as f64);
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let out = Tensor::new(&[segments.len(), c], data)?;
        Ok(self.push(out, Op::MeanRows { x, segments: segments.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Degenerate("mean of an empty tensor".into()));
        }
        let s = self.value(x).data().iter().copied().sum::<F>() / F::of(n as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Scalar `Σ w_i x_i`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<F>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::dim(format!("{} weights for {} values", weights.len(), self.value(x).len())));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(a, b)| *a * *b).sum::<F>();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Cosine similarity between row `i` of `a` and row `j` of `b` for each
    /// `(i, j)` in `pairs`. Norms are floored at `eps`.
    pub fn cosine_pairs(&mut self, a: Var, b: Var, pairs: &[(usize, usize)], eps: F) -> Result<Var> {
        let (ra, ca) = self.dims2(a);
        let (rb, cb) = self.dims2(b);
        if ca != cb {
            return Err(Error::dim(format!("cosine widths {ca} and {cb} differ")));
        }
        if let Some(p) = pairs.iter().find(|(i, j)| *i >= ra || *j >= rb) {
            return Err(Error::Range(format!("cosine pair {p:?} out of range")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let data = pairs
            .iter()
            .map(|&(i, j)| crate::tensor::cosine_sim(av.row(i), bv.row(j), eps))
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::CosinePairs { a, b, pairs: pairs.to_vec(), eps }, &[a, b]))
    }

    /// Mean negative log-likelihood over the positions where `mask` is set.
    pub fn nll(&mut self, logp: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2(logp);
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim(format!(
                "{} targets and {} mask flags for {t} positions",
                targets.len(),
                mask.len()
            )));
        }
        let mut picks = Vec::new();
        for (pos, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if tgt >= v {
                return Err(Error::Range(format!("target {tgt} at position {pos} outside vocabulary {v}")));
            }
            picks.push((pos, tgt));
        }
        if picks.is_empty() {
            return Err(Error::Degenerate("every position is masked out of the loss".into()));
        }
        let lp = self.value(logp).data();
        let total = picks.iter().map(|&(p, tg)| lp[p * v + tg]).sum::<F>();
        let out = Tensor::scalar(-total / F::of(picks.len() as f64));
        Ok(self.push(out, Op::Nll { logp, picks }, &[logp]))
    }

    /// Inverted dropout. Identity when `training` is false or `p` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - p));
        let scale: Vec<F> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let mut out = self.detached(x);
        out.data_mut().iter_mut().zip(&scale).for_each(|(o, s)| *o *= *s);
        Ok(self.push(out, Op::Dropout { x, scale }, &[x]))
    }

    // ---------------------------------------------------------------------
    // Backward sweep
    // ---------------------------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape. Leaves that require
    /// gradients accumulate into their `grad` slot across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[idx];
                if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let tracked = |v: Var| nodes[v.0].tracked;
        let node = &nodes[idx];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = nodes[b.0].value.cols();
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| matmul_a_bt_acc(g, bd, ga, m, k, n));
                acc(*b, &mut |gb| matmul_at_b_acc(ad, g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= *x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(bd).for_each(|((o, x), y)| *o += *x * *y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).zip(ad).for_each(|((o, x), y)| *o += *x * *y));
            }
            Op::AddRow(x, bias) => {
                let c = nodes[bias.0].value.len();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += *v * *c)),
            Op::Offset(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Gelu(x) => {
                let xd = val(*x);
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).zip(xd).for_each(|((o, gv), xv)| *o += *gv * gelu_grad(*xv))
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(nodes[idx].value.shape(), *axis).expect("validated in forward");
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot = (0..len).map(|j| g[at(j)] * y[at(j)]).sum::<F>();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = gr.iter().copied().sum::<F>();
                        for j in 0..c {
                            gxr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = node.value.cols();
                let gm = val(*gamma);
                let n = F::of(c as f64);
                acc(*x, &mut |gx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            let dh = gr[j] * gm[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..c {
                            gx[r * c + j] += *rs * (gr[j] * gm[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        gg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(o, (a, b))| *o += *a * *b);
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(c) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Attention { q, k, v, heads, segments, mask, probs } => {
                let d = node.value.cols();
                let dk = d / heads;
                let scale = F::one() / F::of(dk as f64).sqrt();
                let (qs, ks, vs) = (val(*q), val(*k), val(*v));
                let n = node.value.rows();
                let mut gq = vec![F::zero(); n * d];
                let mut gk = vec![F::zero(); n * d];
                let mut gv = vec![F::zero(); n * d];
                let mut dp = Vec::new();
                let mut off = 0;
                for s in segments {
                    let t = s.len;
                    for h in 0..*heads {
                        let col = h * dk;
                        let rng = |r: usize| (s.start + r) * d + col..(s.start + r) * d + col + dk;
                        for i in 0..t {
                            let prow = &probs[off + i * t..off + (i + 1) * t];
                            let gi = &g[rng(i)];
                            dp.clear();
                            dp.resize(t, F::zero());
                            let mut dot = F::zero();
                            for j in 0..t {
                                if !mask.keeps(i, j) {
                                    continue;
                                }
                                let vj = &vs[rng(j)];
                                let dpj = gi.iter().zip(vj).map(|(a, b)| *a * *b).sum::<F>();
                                dp[j] = dpj;
                                dot += prow[j] * dpj;
                                let p = prow[j];
                                gv[rng(j)].iter_mut().zip(gi).for_each(|(o, x)| *o += p * *x);
                            }
                            for j in 0..t {
                                if !mask.keeps(i, j) {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                let (qi, kj) = (&qs[rng(i)], &ks[rng(j)]);
                                gq[rng(i)].iter_mut().zip(kj).for_each(|(o, x)| *o += ds * *x);
                                gk[rng(j)].iter_mut().zip(qi).for_each(|(o, x)| *o += ds * *x);
                            }
                        }
                        off += t * t;
                    }
                }
                acc(*q, &mut |o| add_into(o, &gq));
                acc(*k, &mut |o| add_into(o, &gk));
                acc(*v, &mut |o| add_into(o, &gv));
            }
            Op::Gather { src, ids } => {
                let c = node.value.cols();
                acc(*src, &mut |gs| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gs[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |gp| add_into(gp, &g[start..start + len]));
                    start += len;
                }
            }
            Op::MeanRows { x, segments } => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for (si, s) in segments.iter().enumerate() {
                        let inv = F::one() / F::of(s.len as f64);
                        let gr = &g[si * c..(si + 1) * c];
                        for r in s.start..s.start + s.len {
                            gx[r * c..(r + 1) * c].iter_mut().zip(gr).for_each(|(o, v)| *o += *v * inv);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = F::of(nodes[x.0].value.len() as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(weights).for_each(|(o, w)| *o += g[0] * *w));
            }
            Op::CosinePairs { a, b, pairs, eps } => {
                let c = nodes[a.0].value.cols();
                let (ad, bd) = (val(*a), val(*b));
                let mut ga = vec![F::zero(); ad.len()];
                let mut gb = vec![F::zero(); bd.len()];
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let (ar, br) = (&ad[i * c..(i + 1) * c], &bd[j * c..(j + 1) * c]);
                    let (na, nb) = (crate::tensor::norm(ar), crate::tensor::norm(br));
                    let (fa, fb) = (na.max(*eps), nb.max(*eps));
                    let cos = y[p];
                    let gp = g[p];
                    let inv = F::one() / (fa * fb);
                    let ka = if na > *eps { cos / (na * na) } else { F::zero() };
                    let kb = if nb > *eps { cos / (nb * nb) } else { F::zero() };
                    for t in 0..c {
                        ga[i * c + t] += gp * (br[t] * inv - ka * ar[t]);
                        gb[j * c + t] += gp * (ar[t] * inv - kb * br[t]);
                    }
                }
                if tracked(*a) {
                    acc(*a, &mut |o| add_into(o, &ga));
                }
                if tracked(*b) {
                    acc(*b, &mut |o| add_into(o, &gb));
                }
            }
            Op::Nll { logp, picks } => {
                let v = nodes[logp.0].value.cols();
                let w = g[0] / F::of(picks.len() as f64);
                acc(*logp, &mut |gl| {
                    for &(p, t) in picks {
                        gl[p * v + t] -= w;
                    }
                });
            }
            Op::Dropout { x, scale } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).zip(scale).for_each(|((o, gv), s)| *o += *gv * *s));
            }
        }
    }
}

fn check_segments(segments: &[Segment], rows: usize) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start < next || s.start + s.len > rows {
            return Err(Error::dim(format!("segment {s:?} does not fit {rows} rows in order")));
        }
        next = s.start + s.len;
    }
    Ok(())
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += *v);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    F::of(0.5) * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}
