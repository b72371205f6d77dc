//! Dynamically recorded reverse-mode tape.
//!
//! Every forward op appends one node; node ids are therefore already in
//! topological order and `backward` is a single reverse sweep. A tape is
//! built per forward pass and dropped afterwards.

use super::{KernelError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    ClampMin(NodeId, f64),
    Scale(NodeId, f64),
    Softmax(NodeId, usize),
    Sum(NodeId, usize),
    Mean(NodeId, usize),
    SumAll(NodeId),
    Concat(Vec<NodeId>, usize),
    Narrow { src: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    Transpose(NodeId),
    Repeat(NodeId),
    L2Norm(NodeId),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::ClampMin(..) => "clamp_min",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAll(_) => "sum_all",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Repeat(_) => "repeat",
            Op::L2Norm(_) => "l2_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Sizes before, along and after `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, KernelError> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(KernelError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }),
        };
    }
    Ok(out)
}

/// Row-major strides of `shape` aligned to `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// True when `shape` (ignoring leading 1s) is a trailing suffix of `out`.
fn is_suffix(shape: &[usize], out: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let lead = shape.iter().take_while(|&&d| d == 1).count();
        &shape[lead..]
    };
    trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed
}

/// Values of `t` expanded to `out` by broadcasting.
fn expand(t: &Tensor, out: &[usize]) -> Vec<f64> {
    let n: usize = out.iter().product();
    let src = t.data();
    if t.shape() == out {
        return src.to_vec();
    }
    if src.len() == 1 {
        return vec![src[0]; n];
    }
    if is_suffix(t.shape(), out) {
        return (0..n).map(|i| src[i % src.len()]).collect();
    }
    let strides = broadcast_strides(t.shape(), out);
    let mut res = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        res.push(src[off]);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    res
}

/// Sums a gradient of shape `out` back down to the broadcast input `shape`.
fn reduce_to(grad: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    let n_in: usize = shape.iter().product();
    if shape == out {
        return grad.to_vec();
    }
    if n_in == 1 {
        return vec![grad.iter().sum()];
    }
    let mut res = vec![0.0; n_in];
    if is_suffix(shape, out) {
        for g in grad.chunks(n_in) {
            for (r, v) in res.iter_mut().zip(g) {
                *r += v;
            }
        }
        return res;
    }
    let strides = broadcast_strides(shape, out);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for &g in grad {
        res[off] += g;
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    res
}

/// `c[m,n] = a[m,k] * b[k,n]` with arbitrary strides, `c` overwritten.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: callers pass slices that cover the strided extents of
    // m x k, k x n and m x n row-major (or transposed) matrices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Leaf that receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if any reached this node.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads[id.0].as_ref()?;
        Some(Tensor::new(self.shape(id).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Like [`Tape::grad`] but moves the buffer out instead of copying it.
    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        let g = self.grads[id.0].take()?;
        Some(Tensor::new(self.shape(id).to_vec(), g).expect("grad shape"))
    }

    fn binary_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>, KernelError> {
        broadcast_shape(op, self.shape(a), self.shape(b))
    }

    fn check_axis(&self, op: &'static str, id: NodeId, axis: usize) -> Result<(), KernelError> {
        let ndim = self.shape(id).len();
        if axis >= ndim {
            return Err(KernelError::InvalidAxis { op, axis, ndim });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(KernelError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out);
        Ok(self.push_op(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(KernelError::ShapeMismatch { op: "bmm", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                (k, 1),
                &db[i * k * n..],
                (n, 1),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.push_op(value, Op::BatchMatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, KernelError> {
        let out = self.binary_shape(op.tag(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ea = expand(va, &out);
            let eb = expand(vb, &out);
            ea.into_iter().zip(eb).map(|(x, y)| f(x, y)).collect()
        };
        Ok(self.push_op(Tensor::new(out, data)?, op, &[a, b]))
    }

    /// Elementwise sum with broadcasting (covers bias addition).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Elementwise quotient with broadcasting; a single-element divisor gives scalar division.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.value(a).map(f);
        self.push_op(value, op, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(Op::LeakyRelu(a, slope), a, move |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Ln(a), a, f64::ln)
    }

    /// `max(x, min)`; values below `min` get zero gradient.
    pub fn clamp_min(&mut self, a: NodeId, min: f64) -> NodeId {
        self.unary(Op::ClampMin(a, min), a, move |x| x.max(min))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(Op::Scale(a, factor), a, move |x| x * factor)
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, KernelError> {
        self.check_axis("softmax", a, axis)?;
        let v = self.value(a);
        let data = softmax_forward(v.data(), v.shape(), axis);
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Softmax(a, axis), &[a]))
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId, KernelError> {
        let tag = if mean { "mean" } else { "sum" };
        self.check_axis(tag, a, axis)?;
        let v = self.value(a);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean && len > 0 {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let op = if mean { Op::Mean(a, axis) } else { Op::Sum(a, axis) };
        Ok(self.push_op(Tensor::new(shape, out)?, op, &[a]))
    }

    /// Sum along `axis`, removing it.
    pub fn sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId, KernelError> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId, KernelError> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, KernelError> {
        let first = *parts.first().ok_or(KernelError::BadShape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(KernelError::ShapeMismatch { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push_op(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, KernelError> {
        self.check_axis("narrow", a, axis)?;
        let v = self.value(a);
        let (outer, full, inner) = split_axis(v.shape(), axis);
        if start + len > full {
            return Err(KernelError::BadShape {
                op: "narrow",
                detail: format!("range {}..{} exceeds axis {} of shape {:?}", start, start + len, axis, v.shape()),
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.push_op(Tensor::new(shape, out)?, Op::Narrow { src: a, axis, start }, &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, KernelError> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push_op(value, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let v = self.value(a);
        if v.ndim() != 2 {
            return Err(KernelError::BadShape { op: "transpose", detail: format!("needs 2-D, got {:?}", v.shape()) });
        }
        let (r, c) = (v.rows(), v.cols());
        let x = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.push_op(Tensor::matrix(c, r, out), Op::Transpose(a), &[a]))
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn repeat(&mut self, a: NodeId, times: usize) -> NodeId {
        let v = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(times);
        let value = Tensor::new(shape, data).expect("repeat shape");
        self.push_op(value, Op::Repeat(a), &[a])
    }

    /// Euclidean norm over all entries, as a scalar.
    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).l2_norm();
        self.push_op(Tensor::scalar(n), Op::L2Norm(a), &[a])
    }

    /// Populates gradients of every node reachable from the scalar `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<(), KernelError> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(KernelError::NonScalarRoot { shape: root_shape.to_vec() });
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(vec![1.0]);
        let mut contributions: Vec<(NodeId, Vec<f64>)> = Vec::new();
        for idx in (0..=root.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.node_vjp(idx, &g, &mut contributions);
            }
            self.grads[idx] = Some(g);
            for (parent, contrib) in contributions.drain(..) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut self.grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` with upstream gradient `g`.
    fn node_vjp(&self, idx: usize, g: &[f64], out: &mut Vec<(NodeId, Vec<f64>)>) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), vb.data(), (1, n), &mut da);
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), (1, k), g, (n, 1), &mut db);
                    out.push((*b, db));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                if wants(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            (n, 1),
                            &vb.data()[i * k * n..],
                            (1, n),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &va.data()[i * m * k..],
                            (1, k),
                            &g[i * m * n..],
                            (n, 1),
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                let shape = node.value.shape();
                if wants(*a) {
                    out.push((*a, reduce_to(g, shape, self.shape(*a))));
                }
                if wants(*b) {
                    out.push((*b, reduce_to(g, shape, self.shape(*b))));
                }
            }
            Op::Mul(a, b) => {
                let shape = node.value.shape();
                if wants(*a) {
                    let eb = expand(self.value(*b), shape);
                    let prod: Vec<f64> = g.iter().zip(&eb).map(|(x, y)| x * y).collect();
                    out.push((*a, reduce_to(&prod, shape, self.shape(*a))));
                }
                if wants(*b) {
                    let ea = expand(self.value(*a), shape);
                    let prod: Vec<f64> = g.iter().zip(&ea).map(|(x, y)| x * y).collect();
                    out.push((*b, reduce_to(&prod, shape, self.shape(*b))));
                }
            }
            Op::Div(a, b) => {
                let shape = node.value.shape();
                let eb = expand(self.value(*b), shape);
                if wants(*a) {
                    let q: Vec<f64> = g.iter().zip(&eb).map(|(x, d)| x / d).collect();
                    out.push((*a, reduce_to(&q, shape, self.shape(*a))));
                }
                if wants(*b) {
                    let q: Vec<f64> = g
                        .iter()
                        .zip(&eb)
                        .zip(y)
                        .map(|((gi, d), yi)| -gi * yi / d)
                        .collect();
                    out.push((*b, reduce_to(&q, shape, self.shape(*b))));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                out.push((*a, g.iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect()));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                out.push((*a, g.iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { slope * gi }).collect()));
            }
            Op::Exp(a) => out.push((*a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect())),
            Op::Ln(a) => {
                let x = self.value(*a).data();
                out.push((*a, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect()));
            }
            Op::ClampMin(a, min) => {
                let x = self.value(*a).data();
                out.push((*a, g.iter().zip(x).map(|(gi, xi)| if *xi >= *min { *gi } else { 0.0 }).collect()));
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|gi| gi * f).collect())),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                out.push((*a, dx));
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let in_shape = self.shape(*a);
                let (outer, len, inner) = split_axis(in_shape, *axis);
                let factor = match node.op {
                    Op::Mean(..) if len > 0 => 1.0 / len as f64,
                    _ => 1.0,
                };
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        dx.extend(src.iter().map(|v| v * factor));
                    }
                }
                out.push((*a, dx));
            }
            Op::SumAll(a) => out.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if wants(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push((p, dp));
                    }
                    offset += len;
                }
            }
            Op::Narrow { src, axis, start } => {
                let in_shape = self.shape(*src);
                let (outer, full, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*src, dx));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                out.push((*a, dx));
            }
            Op::Repeat(a) => {
                let n = self.value(*a).len();
                let mut dx = vec![0.0; n];
                for chunk in g.chunks(n.max(1)) {
                    dx.iter_mut().zip(chunk).for_each(|(d, c)| *d += c);
                }
                out.push((*a, dx));
            }
            Op::L2Norm(a) => {
                let x = self.value(*a).data();
                let norm = y[0];
                let dx = if norm > 0.0 {
                    x.iter().map(|xi| g[0] * xi / norm).collect()
                } else {
                    vec![0.0; x.len()]
                };
                out.push((*a, dx));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape("add", &[3, 1, 4], &[2, 1]).unwrap(), vec![3, 2, 4]);
        assert_eq!(broadcast_shape("add", &[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape("add", &[3], &[4]).is_err());
    }

    #[test]
    fn expand_and_reduce_general() {
        let t = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let e = expand(&t, &[2, 3]);
        assert_eq!(e, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let r = reduce_to(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[2, 1]);
        assert_eq!(r, vec![6.0, 15.0]);
    }
}
