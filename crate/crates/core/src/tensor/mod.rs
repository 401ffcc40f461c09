// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, cheaply clonable handle. Operations on
//! tensors that require gradients record a node pointing at their inputs;
//! the resulting DAG is linearised into a [`Tape`] when [`backward`] runs.
//! Tensors that need no gradient carry no graph, so inference never pays
//! for bookkeeping.
//!
//! Broadcasting is limited to leading dimensions: a binary op accepts a
//! right-hand side whose shape is a suffix of the left-hand shape.

mod autograd;
pub mod blob;
mod check;
pub(crate) mod kernels;
mod ops;
mod optim;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use autograd::{backward, Gradients, Tape};
pub use check::finite_diff_check;
pub(crate) use ops::Op;
pub use optim::{adam_step, AdamConfig, OptimState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

/// Flat element buffer tagged with its dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, len: usize) -> Self {
        match dtype {
            DType::F32 => Storage::F32(vec![0.0; len]),
            DType::F64 => Storage::F64(vec![0.0; len]),
        }
    }

    pub fn from_f64(dtype: DType, values: &[f64]) -> Self {
        match dtype {
            DType::F32 => Storage::F32(values.iter().map(|&v| v as f32).collect()),
            DType::F64 => Storage::F64(values.to_vec()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Storage::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    pub fn cast(&self, dtype: DType) -> Storage {
        match (self, dtype) {
            (Storage::F32(v), DType::F32) => Storage::F32(v.clone()),
            (Storage::F64(v), DType::F64) => Storage::F64(v.clone()),
            (Storage::F32(v), DType::F64) => Storage::F64(v.iter().map(|&x| f64::from(x)).collect()),
            (Storage::F64(v), DType::F32) => Storage::F32(v.iter().map(|&x| x as f32).collect()),
        }
    }

    /// Elementwise `self += other`. Both must share dtype and length.
    pub(crate) fn accumulate(&mut self, other: &Storage) {
        match (self, other) {
            (Storage::F32(a), Storage::F32(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
            (Storage::F64(a), Storage::F64(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
            _ => unreachable!("gradient dtype mismatch"),
        }
    }
}

/// Scalar types a [`Storage`] can hold.
pub trait Element:
    Float
    + Send
    + Sync
    + fmt::Debug
    + Default
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const DTYPE: DType;
    fn wrap(values: Vec<Self>) -> Storage;
    fn view(storage: &Storage) -> Option<&[Self]>;
    fn lit(x: f64) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn wrap(values: Vec<Self>) -> Storage {
        Storage::F32(values)
    }
    fn view(storage: &Storage) -> Option<&[Self]> {
        match storage {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }
    fn lit(x: f64) -> Self {
        x as f32
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn wrap(values: Vec<Self>) -> Storage {
        Storage::F64(values)
    }
    fn view(storage: &Storage) -> Option<&[Self]> {
        match storage {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }
    fn lit(x: f64) -> Self {
        x
    }
}

/// Stable identity of a trainable leaf. Survives in-place parameter updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        ParamId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

pub(crate) enum Autograd {
    Constant,
    Leaf(ParamId),
    Node { op: Op, inputs: Vec<Tensor> },
}

pub(crate) struct Inner {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Storage,
    pub(crate) autograd: Autograd,
}

#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.0.autograd {
            Autograd::Constant => "const".to_string(),
            Autograd::Leaf(id) => format!("param {}", id.0),
            Autograd::Node { op, .. } => format!("{}", op.name()),
        };
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &self.dtype())
            .field("grad", &kind)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Storage) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::raw(shape, data, Autograd::Constant))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Storage, autograd: Autograd) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            shape,
            data,
            autograd,
        }))
    }

    pub fn from_f64(shape: &[usize], values: &[f64], dtype: DType) -> Result<Self> {
        Self::new(shape.to_vec(), Storage::from_f64(dtype, values))
    }

    pub fn from_f32(shape: &[usize], values: Vec<f32>) -> Result<Self> {
        Self::new(shape.to_vec(), Storage::F32(values))
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::raw(vec![], Storage::from_f64(dtype, &[value]), Autograd::Constant)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), Storage::zeros(dtype, n), Autograd::Constant)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Self {
        let n: usize = shape.iter().product();
        Self::raw(shape.to_vec(), Storage::from_f64(dtype, &vec![1.0; n]), Autograd::Constant)
    }

    pub fn eye(n: usize, dtype: DType) -> Self {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Self::raw(vec![n, n], Storage::from_f64(dtype, &v), Autograd::Constant)
    }

    /// Normal(0, std) samples drawn in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, dtype: DType, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::raw(shape.to_vec(), Storage::from_f64(dtype, &v), Autograd::Constant)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, dtype: DType, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::raw(shape.to_vec(), Storage::from_f64(dtype, &v), Autograd::Constant)
    }

    /// A fresh trainable leaf holding a copy of this tensor's values.
    pub fn into_parameter(&self) -> Tensor {
        Self::raw(self.0.shape.clone(), self.0.data.clone(), Autograd::Leaf(ParamId::fresh()))
    }

    /// Re-attach the data of `self` to an existing parameter identity.
    pub fn as_parameter(&self, id: ParamId) -> Tensor {
        Self::raw(self.0.shape.clone(), self.0.data.clone(), Autograd::Leaf(id))
    }

    /// Same values, no graph and no parameter identity.
    pub fn detach(&self) -> Tensor {
        match self.0.autograd {
            Autograd::Constant => self.clone(),
            _ => Self::raw(self.0.shape.clone(), self.0.data.clone(), Autograd::Constant),
        }
    }

    /// Toggle gradient tracking on a leaf; keeps an existing [`ParamId`].
    pub fn with_requires_grad(&self, requires_grad: bool, id: ParamId) -> Tensor {
        if requires_grad {
            self.as_parameter(id)
        } else {
            self.detach()
        }
    }

    /// Replace the values of a parameter, preserving its identity.
    pub fn set_data(&mut self, data: Storage) -> Result<()> {
        if data.len() != self.numel() || data.dtype() != self.dtype() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                lhs: self.0.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        let autograd = match self.0.autograd {
            Autograd::Leaf(id) => Autograd::Leaf(id),
            _ => Autograd::Constant,
        };
        *self = Self::raw(self.0.shape.clone(), data, autograd);
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.0.data.dtype()
    }

    pub fn storage(&self) -> &Storage {
        &self.0.data
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.0.shape.last().copied().unwrap_or(1)
    }

    pub fn requires_grad(&self) -> bool {
        !matches!(self.0.autograd, Autograd::Constant)
    }

    pub fn param_id(&self) -> Option<ParamId> {
        match self.0.autograd {
            Autograd::Leaf(id) => Some(id),
            _ => None,
        }
    }

    pub(crate) fn view<T: Element>(&self) -> Result<&[T]> {
        T::view(&self.0.data).ok_or(Error::DTypeMismatch {
            op: "view",
            lhs: T::DTYPE,
            rhs: self.dtype(),
        })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.to_f64_vec()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.0.data {
            Storage::F32(v) => v.clone(),
            Storage::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.0.shape.clone()));
        }
        Ok(self.to_f64_vec()[0])
    }

    /// Exact elementwise equality of values and shape (`-0.0 == 0.0`).
    pub fn values_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape() && self.storage() == other.storage()
    }

    /// Largest absolute elementwise difference, computed in f64.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.to_f64_vec()
            .iter()
            .zip(other.to_f64_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest element of each row of the last axis; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let d = self.last_dim();
        let v = self.to_f64_vec();
        v.chunks(d)
            .map(|row| {
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}
