//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value. Nodes are only
//! ever appended after their inputs, so the node index order is a topological
//! order and backward simply walks the tape from the end.

use super::tensor::{gemm, Strided};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiplier applied by the `scale` primitive.
#[derive(Clone, Debug)]
pub enum Factor {
    Const(f64),
    /// A one-element value recorded on the same tape.
    Scalar(Var),
    /// Elementwise constant mask with the same length as the input.
    Mask(Vec<f64>),
}

/// The eleven primitive operations a tape can record, plus leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Input,
    Param,
    MatMul,
    Add,
    Scale,
    Concat,
    SoftmaxRows,
    Relu,
    LayerNorm,
    CrossEntropy,
    Slice,
    Transpose,
    Broadcast,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, Factor),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SoftmaxRows(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        counts: Vec<f64>,
        total: f64,
        probs: Vec<f64>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Broadcast(Var),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Input => Primitive::Input,
            Op::Param(_) => Primitive::Param,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Scale(..) => Primitive::Scale,
            Op::Concat { .. } => Primitive::Concat,
            Op::SoftmaxRows(_) => Primitive::SoftmaxRows,
            Op::Relu(_) => Primitive::Relu,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::CrossEntropy { .. } => Primitive::CrossEntropy,
            Op::Slice { .. } => Primitive::Slice,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Broadcast(_) => Primitive::Broadcast,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::Scale(x, Factor::Scalar(s)) => vec![*x, *s],
            Op::Scale(x, _) => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::SoftmaxRows(x) | Op::Relu(x) | Op::Transpose(x) | Op::Broadcast(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Slice { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the parameters of a store.
///
/// Trainable parameters always have an entry (zero when unreachable); frozen
/// parameters never do.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_for(store: &ParamStore) -> Self {
        let grads = store
            .iter()
            .map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.tensor.shape())))
            .collect();
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let (Some(m), Some(t)) = (mine.as_mut(), theirs.as_ref()) {
                for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// A single forward/backward session over a parameter store.
///
/// The store is borrowed read-only, so several tapes may record in parallel
/// against the same parameters.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    consumed: bool,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// The recorded primitives with their input indices, in tape order.
    pub fn record(&self) -> Vec<(Primitive, Vec<usize>)> {
        self.nodes
            .iter()
            .map(|n| (n.op.primitive(), n.op.inputs().iter().map(|v| v.0).collect()))
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(id) => self.store.get(*id).trainable,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.tensor(id).clone();
        self.push(value, Op::Param(id))
    }

    fn dims2(&self, v: Var, context: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(context, "[rows, cols]", other)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul lhs")?;
        let (k2, m) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape("matmul inner dimension", [n, k], [k2, m]));
        }
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            n,
            k,
            m,
            1.0,
            Strided::row_major(self.value(a).data(), k),
            Strided::row_major(self.value(b).data(), m),
            0.0,
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: Factor) -> Result<Var> {
        let mut out = self.value(x).clone();
        match &factor {
            Factor::Const(c) => out.data_mut().iter_mut().for_each(|v| *v *= c),
            Factor::Scalar(s) => {
                if self.value(*s).len() != 1 {
                    return Err(Error::shape("scale factor", [1], self.shape(*s)));
                }
                let c = self.value(*s).item();
                out.data_mut().iter_mut().for_each(|v| *v *= c);
            }
            Factor::Mask(mask) => {
                if mask.len() != out.len() {
                    return Err(Error::shape("scale mask", out.len(), mask.len()));
                }
                out.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
            }
        }
        Ok(self.push(out, Op::Scale(x, factor)))
    }

    /// Concatenate matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "concat needs at least one part and axis 0 or 1 (axis = {axis})"
            )));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2(p, "concat part"))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let out = if axis == 1 {
            if let Some(d) = dims.iter().find(|d| d.0 != r0) {
                return Err(Error::shape("concat rows", r0, d.0));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = vec![0.0; r0 * total];
            let mut offset = 0;
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                let src = self.value(p).data();
                for r in 0..r0 {
                    data[r * total + offset..r * total + offset + c]
                        .copy_from_slice(&src[r * c..(r + 1) * c]);
                }
                offset += c;
            }
            Tensor::new(&[r0, total], data)?
        } else {
            if let Some(d) = dims.iter().find(|d| d.1 != c0) {
                return Err(Error::shape("concat cols", c0, d.1));
            }
            let total: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(total * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(&[total, c0], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2(x, "softmax_rows")?;
        let mut out = self.value(x).clone();
        for r in 0..n {
            let row = &mut out.data_mut()[r * m..(r + 1) * m];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("softmax_rows: row {r} has a non-finite entry")));
            }
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    /// Rectified linear unit. The derivative at exactly zero is taken as ½,
    /// the value a central difference reports there, so zero-initialized
    /// layers feeding a ReLU still receive gradient.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm affine", c, self.value(gamma).len()));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut mean = vec![0.0; n];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &xv[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for j in 0..c {
                out[r * c + j] = (row[j] - mu) * rs * g[j] + b[j];
            }
        }
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        ))
    }

    /// Weighted softmax cross-entropy.
    ///
    /// `counts` is an `n × K` matrix of target weights: entry `(r, k)` is the
    /// number of targets with class `k` that read their logits from row `r`.
    /// The loss is the mean negative log-likelihood over all targets.
    pub fn cross_entropy(&mut self, logits: Var, counts: Vec<f64>) -> Result<Var> {
        let (n, k) = self.dims2(logits, "cross_entropy logits")?;
        if counts.len() != n * k {
            return Err(Error::shape("cross_entropy counts", n * k, counts.len()));
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("cross_entropy has no targets".into()));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * k..(r + 1) * k];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("cross_entropy: logits row {r} is non-finite")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                let w = counts[r * k + j];
                if w != 0.0 {
                    loss -= w * (row[j] - lse);
                }
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / total);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                counts,
                total,
                probs,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.dims2(x, "slice")?;
        let extent = if axis == 0 { n } else { c };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(Error::shape("slice range", extent, start..start + len));
        }
        let src = self.value(x).data();
        let out = if axis == 0 {
            Tensor::new(&[len, c], src[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(n * len);
            for r in 0..n {
                data.extend_from_slice(&src[r * c + start..r * c + start + len]);
            }
            Tensor::new(&[n, len], data)?
        };
        Ok(self.push(out, Op::Slice { x, axis, start }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    /// Broadcast with right-aligned size-1 (or missing) dimensions.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let strides = broadcast_strides(&in_shape, shape)
            .ok_or_else(|| Error::shape("broadcast", shape, &in_shape))?;
        let src = self.value(x).data();
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        for_each_broadcast_index(shape, &strides, |src_idx| data.push(src[src_idx]));
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Broadcast(x)))
    }

    /// Propagate gradients from the scalar `loss` to every trainable parameter.
    ///
    /// A tape can be replayed once; a second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward loss", [1], self.shape(loss)));
        }
        self.consumed = true;

        let mut out = Gradients::zeros_for(self.store);
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                if let Some(g) = out.grads[id.0].as_mut() {
                    for (a, b) in g.data_mut().iter_mut().zip(dy) {
                        *a += b;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (n, k) = (av.rows(), av.cols());
                let m = bv.cols();
                if wants(a) {
                    let ga = grad_buf(grads, *a, n * k);
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        Strided::row_major(dy, m),
                        Strided::transposed(bv.data(), m),
                        1.0,
                        ga,
                    );
                }
                if wants(b) {
                    let gb = grad_buf(grads, *b, k * m);
                    gemm(
                        k,
                        n,
                        m,
                        1.0,
                        Strided::transposed(av.data(), k),
                        Strided::row_major(dy, m),
                        1.0,
                        gb,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        add_into(grad_buf(grads, *v, dy.len()), dy);
                    }
                }
            }
            Op::Scale(x, factor) => match factor {
                Factor::Const(c) => {
                    if wants(x) {
                        let g = grad_buf(grads, *x, dy.len());
                        g.iter_mut().zip(dy).for_each(|(a, b)| *a += c * b);
                    }
                }
                Factor::Mask(mask) => {
                    if wants(x) {
                        let g = grad_buf(grads, *x, dy.len());
                        g.iter_mut()
                            .zip(dy.iter().zip(mask))
                            .for_each(|(a, (b, m))| *a += m * b);
                    }
                }
                Factor::Scalar(s) => {
                    let c = nodes[s.0].value.item();
                    if wants(s) {
                        let xv = nodes[x.0].value.data();
                        let ds: f64 = dy.iter().zip(xv).map(|(a, b)| a * b).sum();
                        grad_buf(grads, *s, 1)[0] += ds;
                    }
                    if wants(x) {
                        let g = grad_buf(grads, *x, dy.len());
                        g.iter_mut().zip(dy).for_each(|(a, b)| *a += c * b);
                    }
                }
            },
            Op::Concat { parts, axis } => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = &nodes[p.0].value;
                    let (r, c) = (pv.rows(), pv.cols());
                    if wants(p) {
                        let g = grad_buf(grads, *p, r * c);
                        if *axis == 1 {
                            for row in 0..r {
                                add_into(
                                    &mut g[row * c..(row + 1) * c],
                                    &dy[row * total_cols + offset..row * total_cols + offset + c],
                                );
                            }
                        } else {
                            add_into(g, &dy[offset * c..(offset + r) * c]);
                        }
                    }
                    offset += if *axis == 1 { c } else { r };
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let m = node.value.cols();
                let g = grad_buf(grads, *x, dy.len());
                for r in 0..node.value.rows() {
                    let yr = &y[r * m..(r + 1) * m];
                    let dr = &dy[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        g[r * m + j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                let g = grad_buf(grads, *x, dy.len());
                for ((a, &b), &xi) in g.iter_mut().zip(dy).zip(xv) {
                    if xi > 0.0 {
                        *a += b;
                    } else if xi == 0.0 {
                        *a += 0.5 * b;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = nodes[x.0].value.data();
                let gv = nodes[gamma.0].value.data();
                let c = gv.len();
                let n = mean.len();
                let xhat = |r: usize, j: usize| (xv[r * c + j] - mean[r]) * rstd[r];
                if wants(beta) {
                    let gb = grad_buf(grads, *beta, c);
                    for r in 0..n {
                        add_into(gb, &dy[r * c..(r + 1) * c]);
                    }
                }
                if wants(gamma) {
                    let gg = grad_buf(grads, *gamma, c);
                    for r in 0..n {
                        for j in 0..c {
                            gg[j] += dy[r * c + j] * xhat(r, j);
                        }
                    }
                }
                if wants(x) {
                    let gx = grad_buf(grads, *x, n * c);
                    for r in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = dy[r * c + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat(r, j);
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let d = dy[r * c + j] * gv[j];
                            gx[r * c + j] += rstd[r] * (d - mean_d - xhat(r, j) * mean_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                counts,
                total,
                probs,
            } => {
                let k = nodes[logits.0].value.cols();
                let n = nodes[logits.0].value.rows();
                let scale = dy[0] / total;
                let g = grad_buf(grads, *logits, n * k);
                for r in 0..n {
                    let row_total: f64 = counts[r * k..(r + 1) * k].iter().sum();
                    if row_total == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        g[r * k + j] += scale * (row_total * probs[r * k + j] - counts[r * k + j]);
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = &nodes[x.0].value;
                let (n, c) = (xv.rows(), xv.cols());
                let g = grad_buf(grads, *x, n * c);
                if *axis == 0 {
                    add_into(&mut g[start * c..start * c + dy.len()], dy);
                } else {
                    let len = node.value.cols();
                    for r in 0..n {
                        add_into(&mut g[r * c + start..r * c + start + len], &dy[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let g = grad_buf(grads, *x, r * c);
                // y is r × c, x is c × r.
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] += dy[i * c + j];
                    }
                }
            }
            Op::Broadcast(x) => {
                let in_shape = nodes[x.0].value.shape();
                let strides = broadcast_strides(in_shape, node.value.shape()).expect("validated in forward");
                let g = grad_buf(grads, *x, nodes[x.0].value.len());
                let mut i = 0;
                for_each_broadcast_index(node.value.shape(), &strides, |src| {
                    g[src] += dy[i];
                    i += 1;
                });
            }
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Max-subtracted softmax of one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Input strides (0 on broadcast axes) for reading `in_shape` as `out_shape`.
fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape.len() > out_shape.len() {
        return None;
    }
    let pad = out_shape.len() - in_shape.len();
    let mut strides = vec![0; out_shape.len()];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        let (d_in, d_out) = (in_shape[i], out_shape[i + pad]);
        if d_in == d_out {
            strides[i + pad] = stride;
        } else if d_in != 1 {
            return None;
        }
        stride *= d_in;
    }
    Some(strides)
}

fn for_each_broadcast_index(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let total: usize = shape.iter().product();
    let mut counter = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        f(src);
        for axis in (0..shape.len()).rev() {
            counter[axis] += 1;
            src += strides[axis];
            if counter[axis] < shape[axis] {
                break;
            }
            src -= strides[axis] * shape[axis];
            counter[axis] = 0;
        }
    }
}
