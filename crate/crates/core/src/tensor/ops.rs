// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward primitives and their vector-Jacobian products.

use super::kernels as k;
use super::{Autograd, DType, Element, Storage, Tensor};
use crate::error::{Error, Result};

/// A recorded primitive application. Index-valued ops keep their indices
/// here; values needed by backward are read back from the inputs/output.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Tanh,
    Sigmoid,
    Gelu,
    Softmax,
    LayerNorm { eps: f64 },
    MatMul,
    BatchMatMul,
    Transpose,
    Reshape,
    Permute(Vec<usize>),
    EmbedLookup(Vec<usize>),
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize },
    IndexRows(Vec<usize>),
    SetRows(Vec<usize>),
    MaskSelect(Vec<bool>),
    SelectCols(Vec<usize>),
    CrossEntropy(Vec<usize>),
    Sum,
    Mean,
    Inverse,
    Cast,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Gelu => "gelu",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::MatMul => "matmul",
            Op::BatchMatMul => "batch_matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::EmbedLookup(_) => "embed_lookup",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::IndexRows(_) => "index_rows",
            Op::SetRows(_) => "set_rows",
            Op::MaskSelect(_) => "mask_select",
            Op::SelectCols(_) => "select_cols",
            Op::CrossEntropy(_) => "cross_entropy",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Inverse => "inverse",
            Op::Cast => "cast",
        }
    }
}

macro_rules! map1 {
    ($t:expr, $x:ident => $body:expr) => {
        match &$t.0.data {
            Storage::F32($x) => Storage::F32($body),
            Storage::F64($x) => Storage::F64($body),
        }
    };
}

macro_rules! map2 {
    ($name:expr, $a:expr, $b:expr, ($x:ident, $y:ident) => $body:expr) => {
        match (&$a.0.data, &$b.0.data) {
            (Storage::F32($x), Storage::F32($y)) => Storage::F32($body),
            (Storage::F64($x), Storage::F64($y)) => Storage::F64($body),
            _ => {
                return Err(Error::DTypeMismatch {
                    op: $name,
                    lhs: $a.dtype(),
                    rhs: $b.dtype(),
                })
            }
        }
    };
}

macro_rules! try_map1 {
    ($t:expr, $x:ident => $body:expr) => {
        match &$t.0.data {
            Storage::F32($x) => Storage::F32($body?),
            Storage::F64($x) => Storage::F64($body?),
        }
    };
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn map_unary<T: Element>(x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    x.iter().map(|&v| f(v)).collect()
}

fn scale_vec<T: Element>(x: &[T], c: f64) -> Vec<T> {
    let c = T::lit(c);
    x.iter().map(|&v| v * c).collect()
}

fn add_scalar_vec<T: Element>(x: &[T], c: f64) -> Vec<T> {
    let c = T::lit(c);
    x.iter().map(|&v| v + c).collect()
}

fn leading(shape: &[usize], tail: usize) -> usize {
    shape[..shape.len() - tail].iter().product()
}

impl Tensor {
    fn from_op(shape: Vec<usize>, data: Storage, op: Op, inputs: &[&Tensor]) -> Tensor {
        let autograd = if inputs.iter().any(|t| t.requires_grad()) {
            Autograd::Node {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            }
        } else {
            Autograd::Constant
        };
        Tensor::raw(shape, data, autograd)
    }

    fn check_broadcast(&self, rhs: &Tensor, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), rhs.shape());
        if b.len() > a.len() || a[a.len() - b.len()..] != *b {
            return Err(shape_err(op, a, b));
        }
        Ok(())
    }

    /// Elementwise sum; `rhs` may broadcast over leading dims.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_broadcast(rhs, "add")?;
        let data = map2!("add", self, rhs, (a, b) => k::zip_broadcast(a, b, |x, y| x + y));
        Ok(Self::from_op(self.shape().to_vec(), data, Op::Add, &[self, rhs]))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_broadcast(rhs, "sub")?;
        let data = map2!("sub", self, rhs, (a, b) => k::zip_broadcast(a, b, |x, y| x - y));
        Ok(Self::from_op(self.shape().to_vec(), data, Op::Sub, &[self, rhs]))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_broadcast(rhs, "mul")?;
        let data = map2!("mul", self, rhs, (a, b) => k::zip_broadcast(a, b, |x, y| x * y));
        Ok(Self::from_op(self.shape().to_vec(), data, Op::Mul, &[self, rhs]))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = map1!(self, x => scale_vec(x, c));
        Self::from_op(self.shape().to_vec(), data, Op::Scale(c), &[self])
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = map1!(self, x => add_scalar_vec(x, c));
        Self::from_op(self.shape().to_vec(), data, Op::AddScalar, &[self])
    }

    pub fn tanh(&self) -> Tensor {
        let data = map1!(self, x => map_unary(x, |v| v.tanh()));
        Self::from_op(self.shape().to_vec(), data, Op::Tanh, &[self])
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = map1!(self, x => map_unary(x, k::sigmoid));
        Self::from_op(self.shape().to_vec(), data, Op::Sigmoid, &[self])
    }

    pub fn gelu(&self) -> Tensor {
        let data = map1!(self, x => map_unary(x, k::gelu));
        Self::from_op(self.shape().to_vec(), data, Op::Gelu, &[self])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let d = self.last_dim();
        let data = map1!(self, x => k::softmax_rows(x, d));
        Self::from_op(self.shape().to_vec(), data, Op::Softmax, &[self])
    }

    /// Normalise the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let d = self.last_dim();
        let data = map1!(self, x => k::layernorm_rows(x, d, eps));
        Self::from_op(self.shape().to_vec(), data, Op::LayerNorm { eps }, &[self])
    }

    /// `[..., n, k] x [k, m]`, or batched `[B.., n, k] x [B.., k, m]` with identical leading dims.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.is_empty() || b.len() < 2 {
            return Err(shape_err("matmul", a, b));
        }
        let kdim = a[a.len() - 1];
        if b.len() == 2 {
            if b[0] != kdim {
                return Err(shape_err("matmul", a, b));
            }
            let (n, m) = (self.numel() / kdim.max(1), b[1]);
            let data = map2!("matmul", self, rhs, (x, y) => k::gemm(x, y, n, kdim, m));
            let mut shape = a[..a.len() - 1].to_vec();
            shape.push(m);
            return Ok(Self::from_op(shape, data, Op::MatMul, &[self, rhs]));
        }
        if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] || b[b.len() - 2] != kdim {
            return Err(shape_err("matmul", a, b));
        }
        let batch = leading(a, 2);
        let (n, m) = (a[a.len() - 2], b[b.len() - 1]);
        let data = map2!("matmul", self, rhs, (x, y) => k::batched_gemm(x, y, batch, n, kdim, m));
        let mut shape = a[..a.len() - 1].to_vec();
        shape.push(m);
        Ok(Self::from_op(shape, data, Op::BatchMatMul, &[self, rhs]))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(shape_err("transpose", s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = leading(s, 2);
        let data = map1!(self, x => k::batched_transpose(x, batch, r, c));
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(Self::from_op(shape, data, Op::Transpose, &[self]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Self::from_op(shape.to_vec(), self.0.data.clone(), Op::Reshape, &[self]))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", s, axes));
        }
        let data = map1!(self, x => k::permute(x, s, axes));
        let shape = axes.iter().map(|&a| s[a]).collect();
        Ok(Self::from_op(shape, data, Op::Permute(axes.to_vec()), &[self]))
    }

    /// Gather rows of a `[vocab, dim]` table; output shape is `prefix + [dim]`.
    pub fn embed_lookup(&self, ids: &[usize], prefix: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embed_lookup", s, prefix));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::LocationOutOfRange { index: bad, len: s[0] });
        }
        let data = self.gather_rows(ids);
        let mut shape = prefix.to_vec();
        shape.push(s[1]);
        Ok(Self::from_op(shape, data, Op::EmbedLookup(ids.to_vec()), &[self]))
    }

    fn gather_rows(&self, rows: &[usize]) -> Storage {
        let d = self.last_dim();
        fn go<T: Element>(x: &[T], rows: &[usize], d: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                out.extend_from_slice(&x[r * d..(r + 1) * d]);
            }
            out
        }
        map1!(self, x => go(x, rows, d))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(shape_err("concat", base, &[axis]));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter().zip(base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", base, s));
            }
            if p.dtype() != first.dtype() {
                return Err(Error::DTypeMismatch {
                    op: "concat",
                    lhs: first.dtype(),
                    rhs: p.dtype(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        fn go<T: Element>(parts: &[&[T]], sizes: &[usize], outer: usize, inner: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
            for o in 0..outer {
                for (p, &sz) in parts.iter().zip(sizes) {
                    out.extend_from_slice(&p[o * sz * inner..(o + 1) * sz * inner]);
                }
            }
            out
        }
        let data = match first.dtype() {
            DType::F32 => {
                let views: Vec<&[f32]> = parts.iter().map(|p| p.view::<f32>()).collect::<Result<_>>()?;
                Storage::F32(go(&views, &sizes, outer, inner))
            }
            DType::F64 => {
                let views: Vec<&[f64]> = parts.iter().map(|p| p.view::<f64>()).collect::<Result<_>>()?;
                Storage::F64(go(&views, &sizes, outer, inner))
            }
        };
        let mut shape = base.to_vec();
        shape[axis] = sizes.iter().sum();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Self::from_op(shape, data, Op::Concat { axis, sizes }, &refs))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(shape_err("slice", s, &[axis, start, end]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let full = s[axis];
        fn go<T: Element>(x: &[T], outer: usize, full: usize, inner: usize, start: usize, end: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&x[(o * full + start) * inner..(o * full + end) * inner]);
            }
            out
        }
        let data = map1!(self, x => go(x, outer, full, inner, start, end));
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        Ok(Self::from_op(shape, data, Op::Slice { axis, start }, &[self]))
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn num_rows(&self) -> usize {
        self.numel() / self.last_dim().max(1)
    }

    /// Select rows of the `[rows, last_dim]` view; output is `[rows.len(), last_dim]`.
    pub fn index_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = self.num_rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::LocationOutOfRange { index: bad, len: n });
        }
        let data = self.gather_rows(rows);
        Ok(Self::from_op(
            vec![rows.len(), self.last_dim()],
            data,
            Op::IndexRows(rows.to_vec()),
            &[self],
        ))
    }

    /// Copy of `self` with the listed rows of the `[rows, last_dim]` view
    /// overwritten by the rows of `values`. Later duplicates win.
    pub fn set_rows(&self, rows: &[usize], values: &Tensor) -> Result<Tensor> {
        let d = self.last_dim();
        if values.shape() != [rows.len(), d] {
            return Err(shape_err("set_rows", &[rows.len(), d], values.shape()));
        }
        let n = self.num_rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::LocationOutOfRange { index: bad, len: n });
        }
        fn go<T: Element>(x: &[T], v: &[T], rows: &[usize], d: usize) -> Vec<T> {
            let mut out = x.to_vec();
            for (i, &r) in rows.iter().enumerate() {
                out[r * d..(r + 1) * d].copy_from_slice(&v[i * d..(i + 1) * d]);
            }
            out
        }
        let data = map2!("set_rows", self, values, (x, v) => go(x, v, rows, d));
        Ok(Self::from_op(
            self.shape().to_vec(),
            data,
            Op::SetRows(rows.to_vec()),
            &[self, values],
        ))
    }

    /// `out[.., i] = if mask[i] { on[.., i] } else { off[.., i] }` along the last axis.
    pub fn mask_select(mask: &[bool], off: &Tensor, on: &Tensor) -> Result<Tensor> {
        if off.shape() != on.shape() {
            return Err(shape_err("mask_select", off.shape(), on.shape()));
        }
        if mask.len() != off.last_dim() {
            return Err(Error::DimMismatch {
                expected: off.last_dim(),
                got: mask.len(),
            });
        }
        fn go<T: Element>(a: &[T], b: &[T], mask: &[bool]) -> Vec<T> {
            let d = mask.len();
            a.iter()
                .zip(b)
                .enumerate()
                .map(|(i, (&x, &y))| if mask[i % d] { y } else { x })
                .collect()
        }
        let data = map2!("mask_select", off, on, (a, b) => go(a, b, mask));
        Ok(Self::from_op(
            off.shape().to_vec(),
            data,
            Op::MaskSelect(mask.to_vec()),
            &[off, on],
        ))
    }

    /// Gather columns of the last axis.
    pub fn select_cols(&self, cols: &[usize]) -> Result<Tensor> {
        let d = self.last_dim();
        if let Some(&bad) = cols.iter().find(|&&c| c >= d) {
            return Err(Error::SubspaceOutOfRange { index: bad, dim: d });
        }
        fn go<T: Element>(x: &[T], cols: &[usize], d: usize) -> Vec<T> {
            x.chunks(d).flat_map(|row| cols.iter().map(move |&c| row[c])).collect()
        }
        let data = map1!(self, x => go(x, cols, d));
        let mut shape = self.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = cols.len();
        }
        Ok(Self::from_op(shape, data, Op::SelectCols(cols.to_vec()), &[self]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `[N, V]` logits.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let v = self.last_dim();
        if self.num_rows() != targets.len() || targets.is_empty() {
            return Err(shape_err("cross_entropy", self.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::LocationOutOfRange { index: bad, len: v });
        }
        fn go<T: Element>(x: &[T], targets: &[usize], v: usize) -> Vec<T> {
            let mut total = T::zero();
            for (row, &t) in x.chunks(v).zip(targets) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
                total += lse - row[t];
            }
            vec![total / T::lit(targets.len() as f64)]
        }
        let data = map1!(self, x => go(x, targets, v));
        Ok(Self::from_op(vec![], data, Op::CrossEntropy(targets.to_vec()), &[self]))
    }

    pub fn sum(&self) -> Tensor {
        fn go<T: Element>(x: &[T]) -> Vec<T> {
            vec![x.iter().copied().sum()]
        }
        let data = map1!(self, x => go(x));
        Self::from_op(vec![], data, Op::Sum, &[self])
    }

    pub fn mean(&self) -> Tensor {
        fn go<T: Element>(x: &[T]) -> Vec<T> {
            vec![x.iter().copied().sum::<T>() / T::lit(x.len() as f64)]
        }
        let data = map1!(self, x => go(x));
        Self::from_op(vec![], data, Op::Mean, &[self])
    }

    /// Inverse of a square matrix.
    pub fn inverse(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(shape_err("inverse", s, &[]));
        }
        let n = s[0];
        let data = try_map1!(self, x => k::inverse(x, n));
        Ok(Self::from_op(s.to_vec(), data, Op::Inverse, &[self]))
    }

    /// Differentiable dtype conversion.
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        Self::from_op(self.shape().to_vec(), self.0.data.cast(dtype), Op::Cast, &[self])
    }
}

fn wrap<T: Element>(v: Vec<Option<Vec<T>>>) -> Vec<Option<Storage>> {
    v.into_iter().map(|g| g.map(T::wrap)).collect()
}

impl Op {
    /// Gradients of each input given the gradient of `out`. Entries for
    /// inputs that do not require grad are `None`.
    pub(crate) fn backward(&self, out: &Tensor, g: &Storage, inputs: &[Tensor]) -> Result<Vec<Option<Storage>>> {
        if let Op::Cast = self {
            return Ok(vec![Some(g.cast(inputs[0].dtype()))]);
        }
        match g {
            Storage::F32(g) => Ok(wrap(self.backward_t::<f32>(out, g, inputs)?)),
            Storage::F64(g) => Ok(wrap(self.backward_t::<f64>(out, g, inputs)?)),
        }
    }

    fn backward_t<T: Element>(&self, out: &Tensor, g: &[T], inputs: &[Tensor]) -> Result<Vec<Option<Vec<T>>>> {
        let need = |i: usize| inputs[i].requires_grad();
        let x = || inputs[0].view::<T>();
        let grads = match self {
            Op::Add | Op::Sub => {
                let gb = need(1).then(|| {
                    let r = k::reduce_leading(g, inputs[1].numel());
                    if matches!(self, Op::Sub) {
                        r.into_iter().map(|v| -v).collect()
                    } else {
                        r
                    }
                });
                vec![need(0).then(|| g.to_vec()), gb]
            }
            Op::Mul => {
                let (a, b) = (x()?, inputs[1].view::<T>()?);
                let ga = need(0).then(|| k::zip_broadcast(g, b, |p, q| p * q));
                let gb = need(1).then(|| {
                    let prod: Vec<T> = g.iter().zip(a).map(|(&p, &q)| p * q).collect();
                    k::reduce_leading(&prod, b.len())
                });
                vec![ga, gb]
            }
            Op::Scale(c) => vec![Some(scale_vec(g, *c))],
            Op::AddScalar | Op::Reshape => vec![Some(g.to_vec())],
            Op::Tanh => {
                let y = out.view::<T>()?;
                vec![Some(g.iter().zip(y).map(|(&gi, &yi)| gi * (T::one() - yi * yi)).collect())]
            }
            Op::Sigmoid => {
                let y = out.view::<T>()?;
                vec![Some(g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect())]
            }
            Op::Gelu => {
                let xv = x()?;
                vec![Some(g.iter().zip(xv).map(|(&gi, &xi)| gi * k::gelu_grad(xi)).collect())]
            }
            Op::Softmax => vec![Some(k::softmax_backward(out.view::<T>()?, g, out.last_dim()))],
            Op::LayerNorm { eps } => {
                vec![Some(k::layernorm_backward(x()?, g, inputs[0].last_dim(), *eps))]
            }
            Op::MatMul => {
                let (a, b) = (x()?, inputs[1].view::<T>()?);
                let (kd, m) = (inputs[1].shape()[0], inputs[1].shape()[1]);
                let n = a.len() / kd.max(1);
                let ga = need(0).then(|| k::gemm(g, &k::transpose2(b, kd, m), n, m, kd));
                let gb = need(1).then(|| k::gemm(&k::transpose2(a, n, kd), g, kd, n, m));
                vec![ga, gb]
            }
            Op::BatchMatMul => {
                let (a, b) = (x()?, inputs[1].view::<T>()?);
                let sa = inputs[0].shape();
                let sb = inputs[1].shape();
                let (n, kd, m) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let batch = leading(sa, 2);
                let ga = need(0).then(|| {
                    k::batched_gemm(g, &k::batched_transpose(b, batch, kd, m), batch, n, m, kd)
                });
                let gb = need(1).then(|| {
                    k::batched_gemm(&k::batched_transpose(a, batch, n, kd), g, batch, kd, n, m)
                });
                vec![ga, gb]
            }
            Op::Transpose => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                vec![Some(k::batched_transpose(g, leading(s, 2), r, c))]
            }
            Op::Permute(axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![Some(k::permute(g, out.shape(), &inv))]
            }
            Op::EmbedLookup(ids) => {
                let d = inputs[0].last_dim();
                let mut gt = vec![T::zero(); inputs[0].numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, &src) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *dst += src;
                    }
                }
                vec![Some(gt)]
            }
            Op::Concat { axis, sizes } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(sizes.len());
                for (i, &sz) in sizes.iter().enumerate() {
                    grads.push(need(i).then(|| {
                        let mut gi = Vec::with_capacity(outer * sz * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gi.extend_from_slice(&g[start..start + sz * inner]);
                        }
                        gi
                    }));
                    offset += sz;
                }
                grads
            }
            Op::Slice { axis, start } => {
                let s = inputs[0].shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let (full, len) = (s[*axis], out.shape()[*axis]);
                let mut gx = vec![T::zero(); inputs[0].numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }
            Op::IndexRows(rows) => {
                let d = inputs[0].last_dim();
                let mut gx = vec![T::zero(); inputs[0].numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for (dst, &src) in gx[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *dst += src;
                    }
                }
                vec![Some(gx)]
            }
            Op::SetRows(rows) => {
                let d = inputs[0].last_dim();
                let gx = need(0).then(|| {
                    let mut gx = g.to_vec();
                    for &r in rows {
                        gx[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = T::zero());
                    }
                    gx
                });
                let gv = need(1).then(|| {
                    let mut gv = vec![T::zero(); rows.len() * d];
                    for (i, &r) in rows.iter().enumerate() {
                        let overwritten = rows[i + 1..].contains(&r);
                        if !overwritten {
                            gv[i * d..(i + 1) * d].copy_from_slice(&g[r * d..(r + 1) * d]);
                        }
                    }
                    gv
                });
                vec![gx, gv]
            }
            Op::MaskSelect(mask) => {
                let d = mask.len();
                let pick = |on: bool| -> Vec<T> {
                    g.iter()
                        .enumerate()
                        .map(|(i, &v)| if mask[i % d] == on { v } else { T::zero() })
                        .collect()
                };
                vec![need(0).then(|| pick(false)), need(1).then(|| pick(true))]
            }
            Op::SelectCols(cols) => {
                let d = inputs[0].last_dim();
                let c = cols.len();
                let mut gx = vec![T::zero(); inputs[0].numel()];
                for (r, grow) in g.chunks(c.max(1)).enumerate().take(inputs[0].numel() / d.max(1)) {
                    for (j, &col) in cols.iter().enumerate() {
                        gx[r * d + col] += grow[j];
                    }
                }
                vec![Some(gx)]
            }
            Op::CrossEntropy(targets) => {
                let v = inputs[0].last_dim();
                let scale = g[0] / T::lit(targets.len() as f64);
                let mut gx = k::softmax_rows(x()?, v);
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * v + t] -= T::one();
                }
                gx.iter_mut().for_each(|e| *e *= scale);
                vec![Some(gx)]
            }
            Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::Mean => {
                let n = inputs[0].numel();
                vec![Some(vec![g[0] / T::lit(n as f64); n])]
            }
            Op::Inverse => {
                let n = out.shape()[0];
                let yt = k::transpose2(out.view::<T>()?, n, n);
                let tmp = k::gemm(&yt, g, n, n, n);
                let gx = k::gemm(&tmp, &yt, n, n, n);
                vec![Some(gx.into_iter().map(|v| -v).collect())]
            }
            Op::Cast => unreachable!("handled in backward"),
        };
        Ok(grads)
    }
}
