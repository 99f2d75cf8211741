//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every op evaluates eagerly and appends a node to the [`Tape`]. Nodes are
//! only ever appended, so an op's inputs always precede it and a single
//! reverse sweep visits nodes in reverse topological order.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, BnSaved, ConvGeom};
use super::tensor::{numel, strides, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight kept by the running statistics at each train-mode update.
pub const BN_MOMENTUM: f64 = 0.9;

enum Op<T> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Reshape(usize),
    Transpose { input: usize, a: usize, b: usize },
    SumAxis { input: usize, axis: usize },
    SumAll(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Softmax(usize),
    LogSoftmax(usize),
    Conv2d { input: usize, kernel: usize, bias: usize, geom: ConvGeom },
    MaxPool { input: usize, argmax: Vec<usize> },
    BatchNorm { input: usize, gamma: usize, beta: usize, saved: BnSaved<T>, batch_stats: bool },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Train mode normalizes with batch statistics and updates the running ones;
/// infer mode reads the running statistics only.
pub enum BnMode<'a, T> {
    Train(&'a mut BnStats<T>),
    Infer(&'a BnStats<T>),
}

/// Recording of a forward computation.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Maps an output flat index to an input flat index under broadcasting.
enum Broadcast {
    Same,
    Suffix(usize),
    General(Vec<usize>),
}

impl Broadcast {
    fn new(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return Broadcast::Same;
        }
        if inp.len() <= out.len() && out[out.len() - inp.len()..] == *inp {
            return Broadcast::Suffix(numel(inp));
        }
        let lead = out.len() - inp.len();
        let in_strides = strides(inp);
        let mut eff = vec![0; out.len()];
        for (k, (&e, &s)) in inp.iter().zip(&in_strides).enumerate() {
            eff[lead + k] = if e == 1 { 0 } else { s };
        }
        let out_strides = strides(out);
        let map = (0..numel(out))
            .map(|i| {
                let mut rem = i;
                let mut off = 0;
                for (&os, &es) in out_strides.iter().zip(&eff) {
                    off += (rem / os) * es;
                    rem %= os;
                }
                off
            })
            .collect();
        Broadcast::General(map)
    }

    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(n) => i % n,
            Broadcast::General(m) => m[i],
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let ea = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let eb = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Splits a shape around `axis` into (outer, extent, inner).
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Output shape and gather map for swapping two axes.
fn transpose_map(shape: &[usize], a: usize, b: usize) -> (Vec<usize>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut in_strides = strides(shape);
    in_strides.swap(a, b);
    let out_strides = strides(&out_shape);
    let map = (0..numel(shape))
        .map(|i| {
            let mut rem = i;
            let mut off = 0;
            for (&os, &is) in out_strides.iter().zip(&in_strides) {
                off += (rem / os) * is;
                rem %= os;
            }
            off
        })
        .collect();
    (out_shape, map)
}

/// Matmul dimensions: (batch, m, k, n, rhs shared across the batch).
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    let bad = || shape_err("matmul", format!("{a:?} x {b:?}"));
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok((1, a[0], a[1], b[1], true)),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok((a[0], a[1], a[2], b[2], false)),
        (3, 2) if a[2] == b[0] => Ok((1, a[0] * a[1], a[2], b[1], true)),
        _ => Err(bad()),
    }
}

fn softmax_rows<T: Scalar>(x: &[T], width: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (r, (row, dst)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let keep = |j: usize| mask.map_or(true, |m| m[r * width + j]);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if keep(j) {
                *d = (v - max).exp();
                sum = sum + *d;
            }
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite: Cell::new(false),
        }
    }

    /// When enabled, any op producing NaN or infinity returns
    /// [`Error::NonFinite`].
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let op = if requires_grad { op } else { Op::Constant };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(
        &self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[usize],
        op: Op<T>,
    ) -> Result<Var<'_, T>> {
        if self.check_finite.get() && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, rg))
    }

    /// Trainable input: gradients flow to it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn same_tape(&self, v: &Var<'_, T>) -> usize {
        assert!(std::ptr::eq(self, v.tape), "Var used with a different tape");
        v.id
    }

    // ---- elementwise --------------------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: Var<'_, T>,
        b: Var<'_, T>,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'_, T>> {
        let (ia, ib) = (self.same_tape(&a), self.same_tape(&b));
        let (va, vb) = (self.value_of(ia), self.value_of(ib));
        let shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let (ma, mb) = (Broadcast::new(&shape, va.shape()), Broadcast::new(&shape, vb.shape()));
        let (da, db) = (va.data(), vb.data());
        let data = (0..numel(&shape)).map(|i| f(da[ma.get(i)], db[mb.get(i)])).collect();
        self.record(name, Tensor::from_parts(shape, data), &[ia, ib], op(ia, ib))
    }

    pub fn add<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale<'t>(&'t self, a: Var<'t, T>, c: T) -> Result<Var<'t, T>> {
        let ia = self.same_tape(&a);
        let out = self.value_of(ia).map(|v| v * c);
        self.record("scale", out, &[ia], Op::Scale(ia, c))
    }

    fn unary(
        &self,
        name: &'static str,
        a: Var<'_, T>,
        f: impl Fn(T) -> T,
        op: fn(usize) -> Op<T>,
    ) -> Result<Var<'_, T>> {
        let ia = self.same_tape(&a);
        let out = self.value_of(ia).map(f);
        self.record(name, out, &[ia], op(ia))
    }

    pub fn relu<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.unary("relu", a, |v| v.max(T::zero()), Op::Relu)
    }

    pub fn sigmoid<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid)
    }

    pub fn tanh<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.unary("tanh", a, |v| v.tanh(), Op::Tanh)
    }

    pub fn exp<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.unary("exp", a, |v| v.exp(), Op::Exp)
    }

    pub fn log<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.unary("log", a, |v| v.ln(), Op::Log)
    }

    // ---- linear algebra and layout -----------------------------------

    /// Matrix product. Supports `[m,k]·[k,n]`, batched `[b,m,k]·[b,k,n]`, and
    /// `[b,m,k]·[k,n]` with a shared right operand.
    pub fn matmul<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (ia, ib) = (self.same_tape(&a), self.same_tape(&b));
        let (va, vb) = (self.value_of(ia), self.value_of(ib));
        let (batch, m, k, n, shared) = matmul_dims(va.shape(), vb.shape())?;
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let bo = if shared { 0 } else { bi * k * n };
            T::gemm(
                m,
                k,
                n,
                &va.data()[bi * m * k..],
                (k, 1),
                &vb.data()[bo..],
                (n, 1),
                T::zero(),
                &mut out[bi * m * n..],
                (n, 1),
            );
        }
        let mut shape = va.shape()[..va.rank() - 1].to_vec();
        shape.push(n);
        self.record("matmul", Tensor::from_parts(shape, out), &[ia, ib], Op::MatMul(ia, ib))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let ids: Vec<usize> = parts.iter().map(|p| self.same_tape(p)).collect();
        let vals: Vec<_> = ids.iter().map(|&i| self.value_of(i)).collect();
        let first = vals[0].shape();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            let ok = s.len() == first.len()
                && s.iter().zip(first).enumerate().all(|(k, (x, y))| k == axis || x == y);
            if !ok {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.record(
            "concat",
            Tensor::from_parts(shape, out),
            &ids,
            Op::Concat { inputs: ids.clone(), axis },
        )
    }

    pub fn slice<'t>(&'t self, a: Var<'t, T>, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let ia = self.same_tape(&a);
        let va = self.value_of(ia);
        let s = va.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err("slice", format!("[{start}..{}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, ext, inner) = split_at_axis(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.record("slice", Tensor::from_parts(shape, out), &[ia], Op::Slice { input: ia, axis, start })
    }

    pub fn reshape<'t>(&'t self, a: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
        let ia = self.same_tape(&a);
        let va = self.value_of(ia);
        let out = Tensor::new(shape.to_vec(), va.data().to_vec())
            .map_err(|_| shape_err("reshape", format!("{:?} -> {shape:?}", va.shape())))?;
        self.record("reshape", out, &[ia], Op::Reshape(ia))
    }

    /// Swaps axes `x` and `y`.
    pub fn transpose<'t>(&'t self, a: Var<'t, T>, x: usize, y: usize) -> Result<Var<'t, T>> {
        let ia = self.same_tape(&a);
        let va = self.value_of(ia);
        if x >= va.rank() || y >= va.rank() {
            return Err(shape_err("transpose", format!("axes ({x},{y}) of {:?}", va.shape())));
        }
        let (shape, map) = transpose_map(va.shape(), x, y);
        let out = map.iter().map(|&j| va.data()[j]).collect();
        self.record(
            "transpose",
            Tensor::from_parts(shape, out),
            &[ia],
            Op::Transpose { input: ia, a: x, b: y },
        )
    }

    pub fn sum_axis<'t>(&'t self, a: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        let ia = self.same_tape(&a);
        let va = self.value_of(ia);
        if axis >= va.rank() {
            return Err(shape_err("sum", format!("axis {axis} of {:?}", va.shape())));
        }
        let (outer, ext, inner) = split_at_axis(va.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &va.data()[(o * ext + e) * inner..][..inner];
                for (d, &s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        self.record("sum", Tensor::from_parts(shape, out), &[ia], Op::SumAxis { input: ia, axis })
    }

    pub fn mean_axis<'t>(&'t self, a: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        let ext = a.shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::from_usize(ext).unwrap())
    }

    pub fn sum_all<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let ia = self.same_tape(&a);
        let total = self.value_of(ia).sum();
        self.record("sum_all", Tensor::scalar(total), &[ia], Op::SumAll(ia))
    }

    /// Rows of `table` (`[V,D]`) selected by `ids`, shape `[ids.len(), D]`.
    pub fn embedding<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let it = self.same_tape(&table);
        let vt = self.value_of(it);
        if vt.rank() != 2 {
            return Err(shape_err("embedding", format!("table shape {:?}", vt.shape())));
        }
        if ids.is_empty() {
            return Err(shape_err("embedding", "empty id list"));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange { op: "embedding", index: id, extent: v });
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        self.record(
            "embedding",
            Tensor::from_parts(vec![ids.len(), d], out),
            &[it],
            Op::Embedding { table: it, ids: ids.to_vec() },
        )
    }

    /// Softmax along the last axis. Positions where `mask` is false get
    /// weight exactly zero and are excluded from the normalization.
    pub fn softmax<'t>(&'t self, a: Var<'t, T>, mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        let ia = self.same_tape(&a);
        let va = self.value_of(ia);
        let width = *va.shape().last().unwrap_or(&1);
        if let Some(m) = mask {
            if m.len() != va.len() {
                return Err(shape_err("softmax", format!("mask of {} for {:?}", m.len(), va.shape())));
            }
        }
        let out = softmax_rows(va.data(), width, mask);
        self.record("softmax", Tensor::from_parts(va.shape().to_vec(), out), &[ia], Op::Softmax(ia))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let ia = self.same_tape(&a);
        let va = self.value_of(ia);
        let width = *va.shape().last().unwrap_or(&1);
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        self.record(
            "log_softmax",
            Tensor::from_parts(va.shape().to_vec(), out),
            &[ia],
            Op::LogSoftmax(ia),
        )
    }

    // ---- spatial ------------------------------------------------------

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d<'t>(
        &'t self,
        input: Var<'t, T>,
        kernel: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let (ix, ik, ib) = (self.same_tape(&input), self.same_tape(&kernel), self.same_tape(&bias));
        let (vx, vk, vb) = (self.value_of(ix), self.value_of(ik), self.value_of(ib));
        let (xs, ks) = (vx.shape(), vk.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || vb.shape() != [ks[0]] || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?}, kernel {ks:?}, bias {:?}, stride {stride}", vb.shape()),
            ));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ks[2], ks[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(shape_err(
                "conv2d",
                format!("non-positive output extent for input {xs:?}, kernel {ks:?}, pad {pad}"),
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w,
            f: ks[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, vx.data(), vk.data(), vb.data());
        self.record(
            "conv2d",
            Tensor::from_parts(vec![geom.n, geom.f, geom.oh, geom.ow], out),
            &[ix, ik, ib],
            Op::Conv2d { input: ix, kernel: ik, bias: ib, geom },
        )
    }

    /// Disjoint 2×2 max pooling over the last two axes of `[N,C,H,W]`.
    pub fn maxpool2x2<'t>(&'t self, input: Var<'t, T>) -> Result<Var<'t, T>> {
        let ix = self.same_tape(&input);
        let vx = self.value_of(ix);
        let s = vx.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("maxpool2x2", format!("input {s:?} needs rank 4 with H,W >= 2")));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(s[0] * s[1], s[2], s[3], vx.data());
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
        self.record("maxpool2x2", Tensor::from_parts(shape, out), &[ix], Op::MaxPool { input: ix, argmax })
    }

    /// Per-channel batch normalization of `[N,C,H,W]`.
    pub fn batch_norm<'t>(
        &'t self,
        input: Var<'t, T>,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mode: BnMode<'_, T>,
    ) -> Result<Var<'t, T>> {
        let (ix, ig, ib) = (self.same_tape(&input), self.same_tape(&gamma), self.same_tape(&beta));
        let (vx, vg, vb) = (self.value_of(ix), self.value_of(ig), self.value_of(ib));
        let s = vx.shape();
        if s.len() != 4 || vg.shape() != [s[1]] || vb.shape() != [s[1]] {
            return Err(shape_err(
                "batch_norm",
                format!("input {s:?}, gamma {:?}, beta {:?}", vg.shape(), vb.shape()),
            ));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let eps = T::lit(BN_EPS);
        let (mean, var, batch_stats) = match mode {
            BnMode::Train(stats) => {
                if n * hw < 2 {
                    return Err(shape_err("batch_norm", "train mode needs at least 2 values per channel"));
                }
                if stats.mean.len() != c {
                    return Err(shape_err("batch_norm", format!("running stats for {} channels", stats.mean.len())));
                }
                let (mean, var) = kernels::channel_moments(n, c, hw, vx.data());
                let mom = T::lit(BN_MOMENTUM);
                let unbias = T::from_usize(n * hw).unwrap() / T::from_usize(n * hw - 1).unwrap();
                for ch in 0..c {
                    stats.mean[ch] = mom * stats.mean[ch] + (T::one() - mom) * mean[ch];
                    stats.var[ch] = mom * stats.var[ch] + (T::one() - mom) * var[ch] * unbias;
                }
                (mean, var, true)
            }
            BnMode::Infer(stats) => {
                if stats.mean.len() != c {
                    return Err(shape_err("batch_norm", format!("running stats for {} channels", stats.mean.len())));
                }
                (stats.mean.clone(), stats.var.clone(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batchnorm_apply(n, c, hw, vx.data(), &mean, &inv_std, vg.data(), vb.data());
        self.record(
            "batch_norm",
            Tensor::from_parts(s.to_vec(), y),
            &[ix, ig, ib],
            Op::BatchNorm {
                input: ix,
                gamma: ig,
                beta: ib,
                saved: BnSaved { xhat, inv_std },
                batch_stats,
            },
        )
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let il = self.same_tape(&loss);
        let nodes = self.nodes.borrow();
        if nodes[il].value.len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", nodes[il].value.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);

        for id in (0..=il).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &nodes[i].value;
            let mut acc = |i: usize, d: Vec<T>| accumulate(&mut grads, i, d);
            match &node.op {
                Op::Leaf | Op::Constant => {}
                &Op::Add(a, b) | &Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    let out = node.value.shape();
                    if needs(a) {
                        acc(a, reduce_broadcast(&g, out, val(a).shape(), |x, _| x));
                    }
                    if needs(b) {
                        let d = reduce_broadcast(&g, out, val(b).shape(), |x, _| x);
                        acc(b, if neg { d.into_iter().map(|v| -v).collect() } else { d });
                    }
                }
                &Op::Mul(a, b) => {
                    let out = node.value.shape();
                    let (va, vb) = (val(a), val(b));
                    if needs(a) {
                        let mb = Broadcast::new(out, vb.shape());
                        let vbd = vb.data();
                        acc(a, reduce_broadcast(&g, out, va.shape(), |x, i| x * vbd[mb.get(i)]));
                    }
                    if needs(b) {
                        let ma = Broadcast::new(out, va.shape());
                        let vad = va.data();
                        acc(b, reduce_broadcast(&g, out, vb.shape(), |x, i| x * vad[ma.get(i)]));
                    }
                }
                &Op::Scale(a, c) => acc(a, g.iter().map(|&v| v * c).collect()),
                &Op::MatMul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let (batch, m, k, n, shared) = matmul_dims(va.shape(), vb.shape())?;
                    if needs(a) {
                        let mut da = vec![T::zero(); batch * m * k];
                        for bi in 0..batch {
                            let bo = if shared { 0 } else { bi * k * n };
                            // da = g · bᵀ
                            T::gemm(m, n, k, &g[bi * m * n..], (n, 1), &vb.data()[bo..], (1, n), T::zero(), &mut da[bi * m * k..], (k, 1));
                        }
                        acc(a, da);
                    }
                    if needs(b) {
                        let mut db = vec![T::zero(); vb.len()];
                        for bi in 0..batch {
                            let bo = if shared { 0 } else { bi * k * n };
                            let beta = if shared && bi > 0 { T::one() } else { T::zero() };
                            // db = aᵀ · g
                            T::gemm(k, m, n, &va.data()[bi * m * k..], (1, k), &g[bi * m * n..], (n, 1), beta, &mut db[bo..], (n, 1));
                        }
                        acc(b, db);
                    }
                }
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = split_at_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    let total = node.value.shape()[*axis] * inner;
                    for &inp in inputs {
                        let chunk = val(inp).shape()[*axis] * inner;
                        if needs(inp) {
                            let mut d = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                d.extend_from_slice(&g[o * total + offset..][..chunk]);
                            }
                            acc(inp, d);
                        }
                        offset += chunk;
                    }
                }
                &Op::Slice { input, axis, start } => {
                    let in_shape = val(input).shape();
                    let (outer, ext, inner) = split_at_axis(in_shape, axis);
                    let len = node.value.shape()[axis];
                    let mut d = vec![T::zero(); numel(in_shape)];
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        d[base..base + len * inner].copy_from_slice(&g[o * len * inner..][..len * inner]);
                    }
                    acc(input, d);
                }
                &Op::Reshape(a) => acc(a, g),
                &Op::Transpose { input, a, b } => {
                    let (_, map) = transpose_map(val(input).shape(), a, b);
                    let mut d = vec![T::zero(); g.len()];
                    for (i, &j) in map.iter().enumerate() {
                        d[j] = g[i];
                    }
                    acc(input, d);
                }
                &Op::SumAxis { input, axis } => {
                    let (outer, ext, inner) = split_at_axis(val(input).shape(), axis);
                    let mut d = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        for _ in 0..ext {
                            d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc(input, d);
                }
                &Op::SumAll(a) => acc(a, vec![g[0]; val(a).len()]),
                &Op::Relu(a) => {
                    let x = val(a).data();
                    acc(a, g.iter().zip(x).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect());
                }
                &Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc(a, g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect());
                }
                &Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(a, g.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect());
                }
                &Op::Exp(a) => {
                    let y = node.value.data();
                    acc(a, g.iter().zip(y).map(|(&d, &e)| d * e).collect());
                }
                &Op::Log(a) => {
                    let x = val(a).data();
                    acc(a, g.iter().zip(x).map(|(&d, &v)| d / v).collect());
                }
                Op::Embedding { table, ids } => {
                    let d = val(*table).shape()[1];
                    let mut dt = vec![T::zero(); val(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, &s) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *t = *t + s;
                        }
                    }
                    acc(*table, dt);
                }
                &Op::Softmax(a) => {
                    let y = node.value.data();
                    let width = *node.value.shape().last().unwrap_or(&1);
                    let mut d = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks(width).zip(g.chunks(width)).zip(d.chunks_mut(width)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((o, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = p * (q - dot);
                        }
                    }
                    acc(a, d);
                }
                &Op::LogSoftmax(a) => {
                    let y = node.value.data();
                    let width = *node.value.shape().last().unwrap_or(&1);
                    let mut d = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks(width).zip(g.chunks(width)).zip(d.chunks_mut(width)) {
                        let total: T = gr.iter().copied().sum();
                        for ((o, &ly), &q) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = q - ly.exp() * total;
                        }
                    }
                    acc(a, d);
                }
                Op::Conv2d { input, kernel, bias, geom } => {
                    let (dx, dk, db) = kernels::conv2d_backward(
                        geom,
                        val(*input).data(),
                        val(*kernel).data(),
                        &g,
                        needs(*input),
                        needs(*kernel),
                    );
                    if needs(*input) {
                        acc(*input, dx);
                    }
                    if needs(*kernel) {
                        acc(*kernel, dk);
                    }
                    if needs(*bias) {
                        acc(*bias, db);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let mut d = vec![T::zero(); val(*input).len()];
                    for (&j, &v) in argmax.iter().zip(&g) {
                        d[j] = d[j] + v;
                    }
                    acc(*input, d);
                }
                Op::BatchNorm { input, gamma, beta, saved, batch_stats } => {
                    let s = val(*input).shape();
                    let (dx, dg, db) = kernels::batchnorm_backward(
                        s[0],
                        s[1],
                        s[2] * s[3],
                        saved,
                        val(*gamma).data(),
                        &g,
                        *batch_stats,
                    );
                    if needs(*input) {
                        acc(*input, dx);
                    }
                    if needs(*gamma) {
                        acc(*gamma, dg);
                    }
                    if needs(*beta) {
                        acc(*beta, db);
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::from_parts(n.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, d: Vec<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(d) {
                *e = *e + v;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Sums `f(g[i], i)` over broadcast positions into an input of `in_shape`.
fn reduce_broadcast<T: Scalar>(
    g: &[T],
    out_shape: &[usize],
    in_shape: &[usize],
    f: impl Fn(T, usize) -> T,
) -> Vec<T> {
    let map = Broadcast::new(out_shape, in_shape);
    if let Broadcast::Same = map {
        return g.iter().enumerate().map(|(i, &x)| f(x, i)).collect();
    }
    let mut d = vec![T::zero(); numel(in_shape)];
    for (i, &x) in g.iter().enumerate() {
        let j = map.get(i);
        d[j] = d[j] + f(x, i);
    }
    d
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Gradients of a loss with respect to the leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` when the leaf did not influence the loss.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when it did not influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn add(self, o: Self) -> Result<Self> {
        self.tape.add(self, o)
    }
    pub fn sub(self, o: Self) -> Result<Self> {
        self.tape.sub(self, o)
    }
    pub fn mul(self, o: Self) -> Result<Self> {
        self.tape.mul(self, o)
    }
    pub fn scale(self, c: T) -> Result<Self> {
        self.tape.scale(self, c)
    }
    pub fn matmul(self, o: Self) -> Result<Self> {
        self.tape.matmul(self, o)
    }
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.tape.slice(self, axis, start, len)
    }
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        self.tape.reshape(self, shape)
    }
    pub fn transpose(self, a: usize, b: usize) -> Result<Self> {
        self.tape.transpose(self, a, b)
    }
    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        self.tape.sum_axis(self, axis)
    }
    pub fn mean_axis(self, axis: usize) -> Result<Self> {
        self.tape.mean_axis(self, axis)
    }
    pub fn sum_all(self) -> Result<Self> {
        self.tape.sum_all(self)
    }
    pub fn relu(self) -> Result<Self> {
        self.tape.relu(self)
    }
    pub fn sigmoid(self) -> Result<Self> {
        self.tape.sigmoid(self)
    }
    pub fn tanh(self) -> Result<Self> {
        self.tape.tanh(self)
    }
    pub fn exp(self) -> Result<Self> {
        self.tape.exp(self)
    }
    pub fn log(self) -> Result<Self> {
        self.tape.log(self)
    }
    pub fn softmax(self, mask: Option<&[bool]>) -> Result<Self> {
        self.tape.softmax(self, mask)
    }
    pub fn log_softmax(self) -> Result<Self> {
        self.tape.log_softmax(self)
    }
    pub fn maxpool2x2(self) -> Result<Self> {
        self.tape.maxpool2x2(self)
    }
}
