// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intervention kinds as pure functions of (base, source, subspace).
//!
//! All functions act on the last axis, so they accept a single site vector
//! `[d]` or a batch of them `[n, d]`. Outputs are assembled with
//! [`Tensor::mask_select`], which copies coordinates exactly: coordinates
//! outside the subspace are bit-identical to `base`.

mod rotation;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Storage, Tensor};

pub use rotation::{cayley, orthonormalize_rows, random_orthonormal_rows, RotationParams, DEFAULT_TEMPERATURE};

/// Dimensions of a site vector targeted by an intervention.
///
/// `None` means the whole vector; an empty list means no dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Subspace(pub Option<Vec<usize>>);

impl Subspace {
    pub fn all() -> Self {
        Subspace(None)
    }

    pub fn none() -> Self {
        Subspace(Some(Vec::new()))
    }

    pub fn dims(dims: impl Into<Vec<usize>>) -> Self {
        Subspace(Some(dims.into()))
    }

    pub fn is_all(&self) -> bool {
        self.0.is_none()
    }

    /// The explicit empty list.
    pub fn is_empty(&self) -> bool {
        self.0.as_ref().is_some_and(Vec::is_empty)
    }

    /// Validated indices for a vector of width `dim`.
    pub fn indices(&self, dim: usize) -> Result<Vec<usize>> {
        match &self.0 {
            None => Ok((0..dim).collect()),
            Some(idx) => {
                let mut seen = vec![false; dim];
                for &i in idx {
                    if i >= dim {
                        return Err(Error::SubspaceOutOfRange { index: i, dim });
                    }
                    if std::mem::replace(&mut seen[i], true) {
                        return Err(Error::InvalidArgument(format!("subspace repeats index {i}")));
                    }
                }
                Ok(idx.clone())
            }
        }
    }

    pub fn mask(&self, dim: usize) -> Result<Vec<bool>> {
        let mut m = vec![false; dim];
        for i in self.indices(dim)? {
            m[i] = true;
        }
        Ok(m)
    }
}

/// Signature of user-registered interventions: `(base, source, subspace) -> output`.
pub type CustomFn = Arc<dyn Fn(&Tensor, Option<&Tensor>, &Subspace) -> Result<Tensor> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InterventionKind {
    Vanilla,
    Addition,
    Zero,
    Noise,
    Collect,
    Rotated,
    LowRankRotated,
    BoundlessRotated,
    Custom(String),
}

impl InterventionKind {
    pub const BUILTIN: [InterventionKind; 8] = [
        InterventionKind::Vanilla,
        InterventionKind::Addition,
        InterventionKind::Zero,
        InterventionKind::Noise,
        InterventionKind::Collect,
        InterventionKind::Rotated,
        InterventionKind::LowRankRotated,
        InterventionKind::BoundlessRotated,
    ];

    pub fn name(&self) -> &str {
        match self {
            InterventionKind::Vanilla => "vanilla",
            InterventionKind::Addition => "addition",
            InterventionKind::Zero => "zero",
            InterventionKind::Noise => "noise",
            InterventionKind::Collect => "collect",
            InterventionKind::Rotated => "rotated",
            InterventionKind::LowRankRotated => "low_rank_rotated",
            InterventionKind::BoundlessRotated => "boundless_rotated",
            InterventionKind::Custom(name) => name,
        }
    }

    fn builtin(name: &str) -> Option<InterventionKind> {
        Self::BUILTIN.into_iter().find(|k| k.name() == name)
    }

    /// Kinds that read a source activation (or a constant in its place).
    pub fn needs_source(&self) -> bool {
        matches!(
            self,
            InterventionKind::Vanilla
                | InterventionKind::Addition
                | InterventionKind::Rotated
                | InterventionKind::LowRankRotated
                | InterventionKind::BoundlessRotated
        )
    }

    /// Kinds that may use a source when one is available.
    pub fn accepts_source(&self) -> bool {
        self.needs_source() || matches!(self, InterventionKind::Custom(_))
    }

    pub fn is_trainable(&self) -> bool {
        matches!(
            self,
            InterventionKind::Rotated | InterventionKind::LowRankRotated | InterventionKind::BoundlessRotated
        )
    }
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Built-in kinds plus user-registered custom functions.
#[derive(Clone, Default)]
pub struct Registry {
    custom: BTreeMap<String, CustomFn>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("custom", &self.custom.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_custom<F>(&mut self, name: &str, f: F) -> Result<InterventionKind>
    where
        F: Fn(&Tensor, Option<&Tensor>, &Subspace) -> Result<Tensor> + Send + Sync + 'static,
    {
        if InterventionKind::builtin(name).is_some() || self.custom.contains_key(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        self.custom.insert(name.to_string(), Arc::new(f));
        Ok(InterventionKind::Custom(name.to_string()))
    }

    /// Resolve a kind name; accepts the builtin names and registered custom names.
    pub fn resolve(&self, name: &str) -> Result<InterventionKind> {
        if let Some(k) = InterventionKind::builtin(name) {
            return Ok(k);
        }
        if self.custom.contains_key(name) {
            return Ok(InterventionKind::Custom(name.to_string()));
        }
        Err(Error::UnknownKind(name.to_string()))
    }

    pub fn custom(&self, name: &str) -> Result<&CustomFn> {
        self.custom.get(name).ok_or_else(|| Error::UnknownKind(name.to_string()))
    }
}

/// Gaussian noise of scale `scale`, reproducible from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub scale: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(scale: f64, seed: u64) -> Result<Self> {
        if !(scale >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise scale must be >= 0, got {scale}")));
        }
        Ok(Self { scale, seed })
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

fn check_pair(base: &Tensor, source: &Tensor) -> Result<()> {
    if base.shape() != source.shape() {
        return Err(Error::DimMismatch {
            expected: base.last_dim(),
            got: source.last_dim(),
        });
    }
    Ok(())
}

/// Copy `source` into `base` on the subspace.
pub fn vanilla(base: &Tensor, source: &Tensor, subspace: &Subspace) -> Result<Tensor> {
    check_pair(base, source)?;
    Tensor::mask_select(&subspace.mask(base.last_dim())?, base, source)
}

/// `base + source` on the subspace, `base` elsewhere.
pub fn addition(base: &Tensor, source: &Tensor, subspace: &Subspace) -> Result<Tensor> {
    check_pair(base, source)?;
    Tensor::mask_select(&subspace.mask(base.last_dim())?, base, &base.add(source)?)
}

/// Vanilla with an all-zero source.
pub fn zero(base: &Tensor, subspace: &Subspace) -> Result<Tensor> {
    vanilla(base, &Tensor::zeros(base.shape(), base.dtype()), subspace)
}

/// `base + scale * g` on the subspace, with `g ~ N(0, I)` drawn in row-major
/// order over the full shape of `base` from `rng`.
pub fn noise_with_rng<R: Rng + ?Sized>(base: &Tensor, scale: f64, subspace: &Subspace, rng: &mut R) -> Result<Tensor> {
    let mask = subspace.mask(base.last_dim())?;
    let draws: Vec<f64> = (0..base.numel())
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let g = Tensor::new(base.shape().to_vec(), Storage::from_f64(base.dtype(), &draws))?;
    Tensor::mask_select(&mask, base, &base.add(&g)?)
}

pub fn noise(base: &Tensor, spec: &NoiseSpec, subspace: &Subspace) -> Result<Tensor> {
    noise_with_rng(base, spec.scale, subspace, &mut spec.rng())
}

/// Pass-through plus a copy of the subspace coordinates.
pub fn collect(base: &Tensor, subspace: &Subspace) -> Result<(Tensor, Tensor)> {
    let cols = subspace.indices(base.last_dim())?;
    let copy = if subspace.is_all() {
        base.clone()
    } else {
        base.select_cols(&cols)?
    };
    Ok((base.clone(), copy))
}

fn rows_of(rotation: &Tensor, like: &Tensor) -> Tensor {
    rotation.to_dtype(like.dtype())
}

/// Interchange in a rotated basis. With `rotation` = R (rows are basis
/// vectors): rotate both inputs, swap the subspace coordinates, rotate back.
pub fn rotated(base: &Tensor, source: &Tensor, subspace: &Subspace, rotation: &Tensor) -> Result<Tensor> {
    check_pair(base, source)?;
    let d = base.last_dim();
    if rotation.shape() != [d, d] {
        return Err(Error::DimMismatch {
            expected: d,
            got: rotation.shape().first().copied().unwrap_or(0),
        });
    }
    if subspace.is_empty() {
        return Ok(base.clone());
    }
    let r = rows_of(rotation, base);
    let rt = r.transpose()?;
    let rb = base.matmul(&rt)?;
    let rs = source.matmul(&rt)?;
    let mixed = Tensor::mask_select(&subspace.mask(d)?, &rb, &rs)?;
    mixed.matmul(&r)
}

/// `base + R_Sᵀ (R_S source − R_S base)` where `R_S` are the selected rows
/// of the `k × d` orthonormal map. The subspace indexes rows (default: all).
pub fn low_rank(base: &Tensor, source: &Tensor, subspace: &Subspace, rows: &Tensor) -> Result<Tensor> {
    check_pair(base, source)?;
    let d = base.last_dim();
    if rows.rank() != 2 || rows.shape()[1] != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: rows.last_dim(),
        });
    }
    let k = rows.shape()[0];
    let selected = subspace.indices(k)?;
    if selected.is_empty() {
        return Ok(base.clone());
    }
    let r = rows_of(rows, base);
    let r = if subspace.is_all() { r } else { r.index_rows(&selected)? };
    let rt = r.transpose()?;
    let delta = source.matmul(&rt)?.sub(&base.matmul(&rt)?)?;
    base.add(&delta.matmul(&r)?)
}

/// `Rᵀ((1 − m) ⊙ R base + m ⊙ R source)` with `m = sigmoid(boundary / temperature)`
/// on the subspace and `m = 0` off it.
pub fn boundless(
    base: &Tensor,
    source: &Tensor,
    subspace: &Subspace,
    rotation: &Tensor,
    boundary: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    check_pair(base, source)?;
    let d = base.last_dim();
    if rotation.shape() != [d, d] || boundary.shape() != [d] {
        return Err(Error::DimMismatch {
            expected: d,
            got: boundary.numel(),
        });
    }
    let on = subspace.mask(d)?;
    if subspace.is_empty() {
        return Ok(base.clone());
    }
    let r = rows_of(rotation, base);
    let rt = r.transpose()?;
    let m = boundary.scale(1.0 / temperature).sigmoid();
    let m = if subspace.is_all() {
        m
    } else {
        Tensor::mask_select(&on, &Tensor::zeros(&[d], m.dtype()), &m)?
    };
    let m = m.to_dtype(base.dtype());
    let keep = m.scale(-1.0).add_scalar(1.0);
    let mixed = base.matmul(&rt)?.mul(&keep)?.add(&source.matmul(&rt)?.mul(&m)?)?;
    mixed.matmul(&r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn v(values: &[f64]) -> Tensor {
        Tensor::from_f64(&[values.len()], values, DType::F32).unwrap()
    }

    fn ramp(n: usize, offset: f64) -> Tensor {
        let vals: Vec<f64> = (0..n).map(|i| i as f64 + offset).collect();
        v(&vals)
    }

    #[test]
    fn vanilla_touches_only_subspace() {
        let base = ramp(16, 0.0);
        let source = ramp(16, 100.0);
        let out = vanilla(&base, &source, &Subspace::dims([10, 11, 12])).unwrap().to_f64_vec();
        for (i, x) in out.iter().enumerate() {
            let expected = if (10..=12).contains(&i) { i as f64 + 100.0 } else { i as f64 };
            assert_eq!(*x, expected);
        }
    }

    #[test]
    fn empty_subspace_is_identity() {
        let base = ramp(8, 0.5);
        let source = ramp(8, 9.0);
        assert!(vanilla(&base, &source, &Subspace::none()).unwrap().values_eq(&base));
        assert!(addition(&base, &source, &Subspace::none()).unwrap().values_eq(&base));
    }

    #[test]
    fn vanilla_with_self_is_identity() {
        let base = ramp(8, 0.25);
        assert!(vanilla(&base, &base, &Subspace::all()).unwrap().values_eq(&base));
    }

    #[test]
    fn subspace_errors() {
        let base = ramp(4, 0.0);
        assert!(matches!(
            vanilla(&base, &base, &Subspace::dims([4])),
            Err(Error::SubspaceOutOfRange { index: 4, dim: 4 })
        ));
        assert!(matches!(vanilla(&base, &ramp(5, 0.0), &Subspace::all()), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn zero_equals_vanilla_with_zero_source() {
        let base = ramp(6, -2.0);
        let sub = Subspace::dims([1, 4]);
        let a = zero(&base, &sub).unwrap();
        let b = vanilla(&base, &Tensor::zeros(&[6], DType::F32), &sub).unwrap();
        assert!(a.values_eq(&b));
        assert!(zero(&base, &Subspace::all()).unwrap().to_f64_vec().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn addition_of_zero_is_identity() {
        let base = ramp(6, 1.5);
        let out = addition(&base, &Tensor::zeros(&[6], DType::F32), &Subspace::all()).unwrap();
        assert!(out.values_eq(&base));
    }

    #[test]
    fn addition_then_subtraction_restores() {
        let base = v(&[0.1, -3.7, 2.25, 8.5]);
        let src = v(&[1.3, 0.02, -7.0, 3.3]);
        let there = addition(&base, &src, &Subspace::all()).unwrap();
        let back = addition(&there, &src.scale(-1.0), &Subspace::all()).unwrap();
        assert!(back.max_abs_diff(&base) < 1e-6);
    }

    #[test]
    fn noise_is_seeded() {
        let base = ramp(32, 0.0);
        let spec = NoiseSpec::new(0.5, 11).unwrap();
        let a = noise(&base, &spec, &Subspace::all()).unwrap();
        let b = noise(&base, &spec, &Subspace::all()).unwrap();
        assert!(a.values_eq(&b));
        let silent = noise(&base, &NoiseSpec::new(0.0, 11).unwrap(), &Subspace::all()).unwrap();
        assert!(silent.values_eq(&base));
        assert!(NoiseSpec::new(-1.0, 0).is_err());
    }

    #[test]
    fn noise_mean_is_zero() {
        let n = 100_000;
        let base = Tensor::zeros(&[n], DType::F64);
        let spec = NoiseSpec::new(2.0, 5).unwrap();
        let out = noise(&base, &spec, &Subspace::all()).unwrap().to_f64_vec();
        let mean = out.iter().map(|x| x / 2.0).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn collect_is_passthrough() {
        let base = ramp(5, 0.0);
        let (pass, copy) = collect(&base, &Subspace::dims([0, 3])).unwrap();
        assert!(pass.values_eq(&base));
        assert_eq!(copy.to_f64_vec(), vec![0.0, 3.0]);
        let (_, full) = collect(&base, &Subspace::all()).unwrap();
        assert_eq!(full.numel(), 5);
    }

    #[test]
    fn registry_rejects_duplicates_and_unknowns() {
        let mut reg = Registry::new();
        let kind = reg.register_custom("mult", |b, _, _| Ok(b.scale(0.3))).unwrap();
        assert_eq!(kind, InterventionKind::Custom("mult".into()));
        assert!(matches!(reg.register_custom("mult", |b, _, _| Ok(b.clone())), Err(Error::DuplicateName(_))));
        assert!(matches!(reg.register_custom("vanilla", |b, _, _| Ok(b.clone())), Err(Error::DuplicateName(_))));
        assert!(matches!(reg.resolve("nope"), Err(Error::UnknownKind(_))));
        let f = reg.custom("mult").unwrap();
        let out = f(&v(&[1.0, 2.0]), None, &Subspace::all()).unwrap();
        assert_eq!(out.to_f64_vec(), vec![0.30000001192092896, 0.6000000238418579]);
    }
}
