//! Reverse-mode automatic differentiation over an append-only node arena.
//!
//! Nodes only reference earlier nodes, so arena order is a topological
//! order and the backward sweep is a single reverse scan.

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dGeom, Padding};
use crate::tensor::{axis_split, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: Conv2dGeom,
        frames: usize,
        cout: usize,
    },
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad: usize,
        kernel: usize,
    },
    Relu(NodeId),
    Gelu(NodeId),
    LayerNorm {
        input: NodeId,
        inv_std: Vec<T>,
    },
    Softmax(NodeId),
    MeanAxis {
        input: NodeId,
        axis: usize,
    },
    MaxAxis {
        input: NodeId,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAll(NodeId),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Narrow {
        input: NodeId,
        axis: usize,
        start: usize,
        step: usize,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph. Build with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::shape(
            op,
            format!("right operand {b:?} must equal or be a trailing suffix of {a:?}"),
        ));
    }
    Ok(())
}

fn two_d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, format!("expected a 2-D operand, got {shape:?}"))),
    }
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / n, n)
}

/// Sums a tensor of `a`'s shape down to the trailing-suffix shape of `b`.
fn reduce_to_suffix<T: Scalar>(grad: &Tensor<T>, b_shape: &[usize]) -> Tensor<T> {
    let bn: usize = b_shape.iter().product();
    let mut out = vec![T::zero(); bn];
    for chunk in grad.data().chunks(bn) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o = *o + g;
        }
    }
    Tensor::new(b_shape.to_vec(), out).expect("suffix shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn binary_broadcast(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_suffix(op, av.shape(), bv.shape())?;
        let bn = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bn]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + b`, where `b`'s shape equals `a`'s or is a trailing suffix of it.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if let Some(bad) = av.data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let v = av.map(|x| x.ln());
        Ok(self.push(v, Op::Log(a), &[a]))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if let Some(bad) = av.data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::domain("sqrt", format!("non-positive input {bad}")));
        }
        let v = av.map(|x| x.sqrt());
        Ok(self.push(v, Op::Sqrt(a), &[a]))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = two_d("matmul", self.shape(a))?;
        let (k2, n) = two_d("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = two_d("transpose", self.shape(a))?;
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], out)?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    /// Per-frame 2-D convolution with weights shared across frames.
    ///
    /// input `[frames, cin, h, w]`, weight `[cout, cin, kh, kw]`, bias `[cout]`
    /// → `[frames, cout, oh, ow]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        let (frames, cin, h, w) = match ishape[..] {
            [f, c, h, w] => (f, c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input must be 4-D, got {ishape:?}"))),
        };
        let (cout, wcin, kh, kw) = match wshape[..] {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(Error::shape("conv2d", format!("weight must be 4-D, got {wshape:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if bshape != [cout] {
            return Err(Error::shape("conv2d", format!("bias {bshape:?} != [{cout}]")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (oh, pad_top) = padding
            .resolve(h, kh, stride)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kh} exceeds height {h}")))?;
        let (ow, pad_left) = padding
            .resolve(w, kw, stride)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kw} exceeds width {w}")))?;
        let geom = Conv2dGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        };
        let rows = geom.col_rows();
        let p = geom.col_cols();
        let x = self.nodes[input.0].value.data();
        let wt = self.nodes[weight.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let mut out = vec![T::zero(); frames * cout * p];
        let mut cols = vec![T::zero(); rows * p];
        let frame_len = cin * h * w;
        for f in 0..frames {
            kernels::im2col(&x[f * frame_len..(f + 1) * frame_len], &geom, &mut cols);
            let dst = &mut out[f * cout * p..(f + 1) * cout * p];
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b[o]);
            }
            kernels::matmul_acc(wt, &cols, dst, cout, rows, p);
        }
        let v = Tensor::new(vec![frames, cout, oh, ow], out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                frames,
                cout,
            },
            &[input, weight, bias],
        ))
    }

    /// 1-D convolution along the sequence axis, stride 1.
    ///
    /// input `[t, cin]`, weight `[cout, cin, kernel]`, bias `[cout]` → `[t', cout]`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        padding: Padding,
    ) -> Result<NodeId> {
        let (t, cin) = two_d("conv1d", self.shape(input))?;
        let wshape = self.shape(weight).to_vec();
        let (cout, wcin, kernel) = match wshape[..] {
            [o, c, k] => (o, c, k),
            _ => return Err(Error::shape("conv1d", format!("weight must be 3-D, got {wshape:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv1d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape(
                "conv1d",
                format!("bias {:?} != [{cout}]", self.shape(bias)),
            ));
        }
        let (tout, pad) = padding
            .resolve(t, kernel, 1)
            .ok_or_else(|| Error::shape("conv1d", format!("kernel {kernel} exceeds length {t}")))?;
        let x = self.nodes[input.0].value.data();
        let wt = self.nodes[weight.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let mut out = vec![T::zero(); tout * cout];
        for s in 0..tout {
            for o in 0..cout {
                let mut acc = b[o];
                for j in 0..kernel {
                    let src = (s + j) as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xrow = &x[src as usize * cin..(src as usize + 1) * cin];
                    for (c, &xv) in xrow.iter().enumerate() {
                        acc = acc + wt[(o * cin + c) * kernel + j] * xv;
                    }
                }
                out[s * cout + o] = acc;
            }
        }
        let v = Tensor::new(vec![tout, cout], out)?;
        Ok(self.push(
            v,
            Op::Conv1d {
                input,
                weight,
                bias,
                pad,
                kernel,
            },
            &[input, weight, bias],
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c = T::from_f64_lossy(GELU_C);
        let k = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let v = self.nodes[a.0]
            .value
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: NodeId, eps: T) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (_, n) = last_axis(av.shape());
        let nf = T::from_usize(n).expect("usize fits");
        let mut out = vec![T::zero(); av.numel()];
        let mut inv_std = Vec::with_capacity(av.numel() / n);
        for (src, dst) in av.data().chunks(n).zip(out.chunks_mut(n)) {
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::LayerNorm { input: a, inv_std }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (_, n) = last_axis(av.shape());
        let mut out = vec![T::zero(); av.numel()];
        for (src, dst) in av.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(src, dst);
        }
        let v = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Mean over `axis`; the axis is removed (rank-1 inputs give shape `[1]`).
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); outer * inner];
        let lf = T::from_usize(len).expect("usize fits");
        for o in 0..outer {
            for i in 0..len {
                let row = &src[(o * len + i) * inner..(o * len + i + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d = *d + x;
                }
            }
        }
        for d in out.iter_mut() {
            *d = *d / lf;
        }
        let v = Tensor::new(reduced_shape(&shape, axis), out)?;
        Ok(self.push(v, Op::MeanAxis { input: a, axis }, &[a]))
    }

    /// Max over `axis`; ties route the gradient to the lowest index.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("max_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut best = 0;
                let mut bv = src[o * len * inner + j];
                for i in 1..len {
                    let v = src[(o * len + i) * inner + j];
                    if v > bv {
                        bv = v;
                        best = i;
                    }
                }
                out[o * inner + j] = bv;
                argmax[o * inner + j] = best;
            }
        }
        let v = Tensor::new(reduced_shape(&shape, axis), out)?;
        Ok(self.push(v, Op::MaxAxis { input: a, axis, argmax }, &[a]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[a.0].value.clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let v = &self.nodes[id.0].value;
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Keeps `len` positions along `axis` starting at `start`, `step` apart.
    pub fn narrow(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
        step: usize,
    ) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || step == 0 || start + (len - 1) * step >= shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("start {start}, len {len}, step {step} invalid on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for i in 0..len {
                let s = o * extent + start + i * step;
                out.extend_from_slice(&src[s * inner..(s + 1) * inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let v = Tensor::new(oshape, out)?;
        Ok(self.push(
            v,
            Op::Narrow {
                input: a,
                axis,
                start,
                step,
            },
            &[a],
        ))
    }

    /// Per-row cross-entropy of `logits [b, m]` against class ids → `[b]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, m) = two_d("cross_entropy", self.shape(logits))?;
        if labels.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("{b} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::invalid(format!("label {bad} out of range for {m} classes")));
        }
        let z = self.nodes[logits.0].value.data();
        let mut probs = vec![T::zero(); b * m];
        let mut out = Vec::with_capacity(b);
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * m..(i + 1) * m];
            out.push(log_sum_exp(row) - row[label]);
            softmax_row(row, &mut probs[i * m..(i + 1) * m]);
        }
        let v = Tensor::new(vec![b], out)?;
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, contrib: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e = *e + *c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let gb = reduce_to_suffix(g, self.shape(*b));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let gb = reduce_to_suffix(&g.map(|x| -x), self.shape(*b));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let bn = bv.numel();
                if self.wants(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * bv.data()[i % bn])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data).unwrap());
                }
                if self.wants(*b) {
                    let full = Tensor::new(
                        av.shape().to_vec(),
                        g.data().iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect(),
                    )
                    .unwrap();
                    self.accumulate(grads, *b, reduce_to_suffix(&full, bv.shape()));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * *c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => {
                let d = zip_map(g, out, |gv, y| gv * y);
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = zip_map(g, self.value(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let two = T::from_f64_lossy(2.0);
                let d = zip_map(g, out, |gv, y| gv / (two * y));
                self.accumulate(grads, *a, d);
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_a_bt_acc(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_at_b_acc(av.data(), g.data(), &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![c, r], d).unwrap());
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                frames,
                cout,
            } => {
                let (frames, cout) = (*frames, *cout);
                let rows = geom.col_rows();
                let p = geom.col_cols();
                let x = self.value(*input);
                let wt = self.value(*weight);
                let frame_len = geom.cin * geom.h * geom.w;
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); cout];
                    for (i, chunk) in g.data().chunks(p).enumerate() {
                        let o = i % cout;
                        db[o] = db[o] + chunk.iter().copied().sum::<T>();
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![cout], db).unwrap());
                }
                let want_w = self.wants(*weight);
                let want_x = self.wants(*input);
                let mut dw = vec![T::zero(); if want_w { cout * rows } else { 0 }];
                let mut dx = vec![T::zero(); if want_x { frames * frame_len } else { 0 }];
                let mut cols = vec![T::zero(); rows * p];
                for f in 0..frames {
                    let gf = &g.data()[f * cout * p..(f + 1) * cout * p];
                    if want_w {
                        kernels::im2col(&x.data()[f * frame_len..(f + 1) * frame_len], geom, &mut cols);
                        kernels::matmul_a_bt_acc(gf, &cols, &mut dw, cout, p, rows);
                    }
                    if want_x {
                        cols.fill(T::zero());
                        kernels::matmul_at_b_acc(wt.data(), gf, &mut cols, cout, rows, p);
                        kernels::col2im_acc(&cols, geom, &mut dx[f * frame_len..(f + 1) * frame_len]);
                    }
                }
                if want_w {
                    self.accumulate(grads, *weight, Tensor::new(wt.shape().to_vec(), dw).unwrap());
                }
                if want_x {
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                pad,
                kernel,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (t, cin) = (x.shape()[0], x.shape()[1]);
                let (tout, cout) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![T::zero(); t * cin];
                let mut dw = vec![T::zero(); wt.numel()];
                let mut db = vec![T::zero(); cout];
                for s in 0..tout {
                    for o in 0..cout {
                        let gv = g.data()[s * cout + o];
                        db[o] = db[o] + gv;
                        for j in 0..*kernel {
                            let src = (s + j) as isize - *pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..cin {
                                let wi = (o * cin + c) * kernel + j;
                                dw[wi] = dw[wi] + gv * x.data()[src * cin + c];
                                dx[src * cin + c] = dx[src * cin + c] + gv * wt.data()[wi];
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(vec![t, cin], dx).unwrap());
                self.accumulate(grads, *weight, Tensor::new(wt.shape().to_vec(), dw).unwrap());
                self.accumulate(grads, *bias, Tensor::new(vec![cout], db).unwrap());
            }
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let c = T::from_f64_lossy(GELU_C);
                let k = T::from_f64_lossy(GELU_A);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let d = zip_map(g, self.value(*a), |gv, x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    gv * (half * (T::one() + t) + half * x * dt)
                });
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { input, inv_std } => {
                let (_, n) = last_axis(out.shape());
                let nf = T::from_usize(n).expect("usize fits");
                let mut d = vec![T::zero(); out.numel()];
                for (r, ((y, gy), dst)) in out
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(d.chunks_mut(n))
                    .enumerate()
                {
                    let mean_g = gy.iter().copied().sum::<T>() / nf;
                    let mean_gy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for ((dv, &yv), &gv) in dst.iter_mut().zip(y).zip(gy) {
                        *dv = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *input, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::Softmax(a) => {
                let (_, n) = last_axis(out.shape());
                let mut d = vec![T::zero(); out.numel()];
                for ((y, gy), dst) in out.data().chunks(n).zip(g.data().chunks(n)).zip(d.chunks_mut(n)) {
                    let dot = y.iter().zip(gy).map(|(&a, &b)| a * b).sum::<T>();
                    for ((dv, &yv), &gv) in dst.iter_mut().zip(y).zip(gy) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::MeanAxis { input, axis } => {
                let shape = self.shape(*input).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let lf = T::from_usize(len).expect("usize fits");
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            d[(o * len + i) * inner + j] = g.data()[o * inner + j] / lf;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(shape, d).unwrap());
            }
            Op::MaxAxis { input, axis, argmax } => {
                let shape = self.shape(*input).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        let i = argmax[o * inner + j];
                        d[(o * len + i) * inner + j] = g.data()[o * inner + j];
                    }
                }
                self.accumulate(grads, *input, Tensor::new(shape, d).unwrap());
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.shape(*a)).expect("same numel");
                self.accumulate(grads, *a, d);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &id in inputs {
                    let shape = self.shape(id).to_vec();
                    let len = shape[*axis];
                    if self.wants(id) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[s..s + len * inner]);
                        }
                        self.accumulate(grads, id, Tensor::new(shape, d).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Narrow {
                input,
                axis,
                start,
                step,
            } => {
                let shape = self.shape(*input).to_vec();
                let (outer, extent, inner) = axis_split(&shape, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    for i in 0..len {
                        let s = o * extent + start + i * step;
                        let src = &g.data()[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (dv, &gv) in d[s * inner..(s + 1) * inner].iter_mut().zip(src) {
                            *dv = *dv + gv;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(shape, d).unwrap());
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = self.shape(*logits)[1];
                let mut d = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    let gv = g.data()[i];
                    for v in &mut d[i * m..(i + 1) * m] {
                        *v = *v * gv;
                    }
                    d[i * m + label] = d[i * m + label] - gv;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![labels.len(), m], d).unwrap());
            }
        }
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn zip_map<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Stabilized `ln(sum(exp(row)))`.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Max-shifted softmax of one row into `dst`.
pub fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = (x - max).exp();
        total = total + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn softmax_symmetric() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(z);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_sign_boundary() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(z);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn dot_gradient_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // f = x*x built from two separate multiply consumers of x.
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.5, -2.0, 0.25]));
        let one = g.constant(Tensor::ones(&[3]));
        let a = g.mul(x, one).unwrap();
        let b = g.mul(one, x).unwrap();
        let prod = g.mul(a, b).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn log_and_sqrt_domain() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
        assert!(matches!(g.sqrt(x), Err(Error::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, c).unwrap_err().to_string().starts_with("add"));
    }

    #[test]
    fn narrow_with_stride() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[8, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let y = g.narrow(x, 0, 0, 2, 4).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 4.0]);
        assert!(g.narrow(x, 0, 1, 2, 7).is_err());
    }

    #[test]
    fn conv2d_same_padding_box_filter() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, Padding::Same).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
        let v = g.conv2d(x, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(v).data(), &[9.0]);
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1, 2], &[2.0, 0.0]));
        let ce = g.cross_entropy(z, &[0]).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((g.value(ce).data()[0] - expected).abs() < 1e-15);
    }
}
