use std::borrow::Cow;

use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Relu(Var),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f32>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    data: Cow<'p, [f32]>,
    requires_grad: bool,
    op: Op,
}

/// Records a single forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep. Leaves may
/// borrow parameter storage for the lifetime `'p`.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const LN_EPS: f32 = 1e-5;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// `c = a·b + beta·c` for logical shapes a: (m,k), b: (k,n). Transposed
/// operands are read through strides without materializing them.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_rows(x: &[f32], cols: usize, out: &mut [f32]) {
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        or.iter_mut().for_each(|o| *o *= inv);
    }
}

fn log_softmax_rows(x: &[f32], cols: usize, out: &mut [f32]) {
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = xr.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

/// Row-wise softmax of a plain slice; shared by the decoders.
pub fn softmax(x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    if !x.is_empty() {
        softmax_rows(x, x.len(), &mut out);
    }
    out
}

/// Row-wise log-softmax of a plain slice.
pub fn log_softmax(x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    if !x.is_empty() {
        log_softmax_rows(x, x.len(), &mut out);
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.to_vec()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, data: Cow<'p, [f32]>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: &[Var],
        op: Op,
    ) -> Result<Var, TensorError> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push(shape, Cow::Owned(data), requires_grad, op))
    }

    /// Owned leaf.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf borrowing `t`; gradients are recorded for it when `requires_grad`.
    pub fn borrowed(&mut self, t: &'p Tensor, requires_grad: bool) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            requires_grad,
            Op::Leaf,
        )
    }

    /// Constant `(ids.len(), depth)` one-hot matrix.
    pub fn one_hot(&mut self, ids: &[usize], depth: usize) -> Result<Var, TensorError> {
        let mut data = vec![0.0; ids.len() * depth];
        for (row, &id) in ids.iter().enumerate() {
            if id >= depth {
                return Err(TensorError::IndexOutOfRange {
                    op: "one_hot",
                    index: id,
                    bound: depth,
                });
            }
            data[row * depth + id] = 1.0;
        }
        Ok(self.push(vec![ids.len(), depth], Cow::Owned(data), false, Op::Leaf))
    }

    /// Identity forward, no gradient backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let shape = n.shape.clone();
        let data = Cow::Owned(n.data.to_vec());
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        self.push_checked("matmul", vec![m, n], out, &[a, b], Op::MatMul(a, b))
    }

    /// `b` must match `a` or a trailing suffix of `a`'s shape (row broadcast).
    fn broadcast_check(&self, name: &'static str, a: Var, b: Var) -> Result<usize, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::shape(name, sa, sb));
        }
        Ok(self.value(b).len().max(1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let period = self.broadcast_check("add", a, b)?;
        let bv = self.value(b);
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % period])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("add", shape, out, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let period = self.broadcast_check("mul", a, b)?;
        let bv = self.value(b);
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % period])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("mul", shape, out, &[a, b], Op::Mul(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var, TensorError> {
        let out: Vec<f32> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("scale", shape, out, &[a], Op::Scale(a, c))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .ok_or(TensorError::Invalid { op: "concat", msg: "no inputs".into() })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid { op: "concat", msg: format!("axis {axis} out of range for {base:?}") });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                let chunk = d * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push_checked(
            "concat",
            shape,
            out,
            inputs,
            Op::Concat { inputs: inputs.to_vec(), axis },
        )
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of {s:?}"),
            });
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let width = (end - start) * inner;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&xv[base..base + width]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        self.push_checked("slice", shape, out, &[x], Op::Slice { input: x, axis, start })
    }

    /// Rows of a `(v, d)` table selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::shape("embedding", s, &[ids.len()]));
        }
        let (v, d) = (s[0], s[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { op: "embedding", index: id, bound: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push_checked(
            "embedding",
            vec![ids.len(), d],
            out,
            &[table],
            Op::Embedding { table, ids: ids.to_vec() },
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let cols = last_dim(self.shape(x));
        let mut out = vec![0.0; self.value(x).len()];
        softmax_rows(self.value(x), cols, &mut out);
        let shape = self.shape(x).to_vec();
        self.push_checked("softmax", shape, out, &[x], Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let cols = last_dim(self.shape(x));
        let mut out = vec![0.0; self.value(x).len()];
        log_softmax_rows(self.value(x), cols, &mut out);
        let shape = self.shape(x).to_vec();
        self.push_checked("log_softmax", shape, out, &[x], Op::LogSoftmax(x))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (each of
    /// the last-axis length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let cols = last_dim(self.shape(x));
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(TensorError::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / cols.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xr = &xv[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f32>() / cols as f32;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (xr[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push_checked(
            "layer_norm",
            shape,
            out,
            &[x, gain, bias],
            Op::LayerNorm { x, gain, bias, xhat, rstd },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out: Vec<f32> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push_checked("relu", shape, out, &[x], Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(TensorError::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        self.push_checked("reshape", shape, out, &[x], Op::Reshape(x))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.push_checked("transpose", vec![c, r], out, &[x], Op::Transpose(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: f32 = self.value(x).iter().sum();
        self.push_checked("sum", vec![1], vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::Invalid { op: "mean", msg: "empty tensor".into() });
        }
        let s: f32 = self.value(x).iter().sum::<f32>() / n as f32;
        self.push_checked("mean", vec![1], vec![s], &[x], Op::Mean(x))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over the rows where `mask` is set.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || s[0] != mask.len() {
            return Err(TensorError::shape("masked_cross_entropy", s, &[targets.len()]));
        }
        let (rows, v) = (s[0], s[1]);
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "masked_cross_entropy",
                msg: "mask selects no rows".into(),
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; rows * v];
        softmax_rows(lv, v, &mut probs);
        let mut logp = vec![0.0; v];
        let mut total = 0.0f32;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(TensorError::IndexOutOfRange { op: "masked_cross_entropy", index: t, bound: v });
            }
            log_softmax_rows(&lv[r * v..(r + 1) * v], v, &mut logp);
            total -= logp[t];
        }
        let loss = total / count as f32;
        self.push_checked(
            "masked_cross_entropy",
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_node = &self.nodes[root.0];
        if root_node.data.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        if !root_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate<F: FnOnce(&mut [f32])>(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: F) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.data.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<'p>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| gemm(m, n, k, g, false, bv, true, ga, 1.0));
                self.accumulate(grads, *b, |gb| gemm(k, m, n, av, true, g, false, gb, 1.0));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.accumulate(grads, *b, |gb| {
                    let p = gb.len().max(1);
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % p] += y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let p = bv.len().max(1);
                self.accumulate(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bv[i % p];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % p] += y * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let d = self.shape(v)[*axis];
                    self.accumulate(grads, v, |gv| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..d * inner];
                            let dst = &mut gv[o * d * inner..(o + 1) * d * inner];
                            dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    });
                    offset += d;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, dim, inner) = split_axis(self.shape(*input), *axis);
                let width = node.shape[*axis] * inner;
                self.accumulate(grads, *input, |gi| {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        gi[base..base + width]
                            .iter_mut()
                            .zip(&g[o * width..(o + 1) * width])
                            .for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[row * d..(row + 1) * d])
                            .for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = last_dim(&node.shape);
                let y = &node.data;
                self.accumulate(grads, *x, |gx| {
                    for ((yr, gr), xr) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            xr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let cols = last_dim(&node.shape);
                let y = &node.data;
                self.accumulate(grads, *x, |gx| {
                    for ((yr, gr), xr) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let total: f32 = gr.iter().sum();
                        for c in 0..cols {
                            xr[c] += gr[c] - yr[c].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = last_dim(&node.shape);
                let gv = self.value(*gain);
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; cols];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                            sum_d += dxhat[c];
                            sum_dh += dxhat[c] * hr[c];
                        }
                        let n = cols as f32;
                        for c in 0..cols {
                            gx[r * cols + c] += rs / n * (n * dxhat[c] - sum_d - hr[c] * sum_dh);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gr in g.chunks(cols) {
                        gb.iter_mut().zip(gr).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f32;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let v = self.shape(*logits)[1];
                let s = g[0] / *count as f32;
                self.accumulate(grads, *logits, |gl| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for c in 0..v {
                            gl[r * v + c] += s * probs[r * v + c];
                        }
                        gl[r * v + targets[r]] -= s;
                    }
                });
            }
        }
    }
}
