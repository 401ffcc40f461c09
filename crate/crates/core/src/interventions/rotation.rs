// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trainable bases for the rotated kinds. Parameters live in f64 and are
//! cast to the model dtype at application time.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{boundless, low_rank, rotated, Subspace};
use crate::error::{Error, Result};
use crate::model::rng_for;
use crate::tensor::{DType, Storage, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// `(I - A)(I + A)^{-1}` with `A = W - Wᵀ`; orthogonal for any square `W`.
pub fn cayley(weight: &Tensor) -> Result<Tensor> {
    let s = weight.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::InvalidArgument(format!("cayley needs a square matrix, got {s:?}")));
    }
    let eye = Tensor::eye(s[0], weight.dtype());
    let a = weight.sub(&weight.transpose()?)?;
    eye.sub(&a)?.matmul(&eye.add(&a)?.inverse()?)
}

/// Modified Gram-Schmidt over the rows of a `k × d` row-major buffer.
/// Rows that collapse are replaced by the first basis vector that survives.
pub fn orthonormalize_rows(values: &mut [f64], k: usize, d: usize) {
    assert!(k <= d, "cannot fit {k} orthonormal rows in {d} dims");
    let mut fallback = 0usize;
    let mut i = 0;
    while i < k {
        let (done, rest) = values.split_at_mut(i * d);
        let row = &mut rest[..d];
        for j in 0..i {
            let prev = &done[j * d..(j + 1) * d];
            let dot: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
            row.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            row.iter_mut().for_each(|x| *x = 0.0);
            row[fallback % d] = 1.0;
            fallback += 1;
            continue;
        }
        row.iter_mut().for_each(|x| *x /= norm);
        i += 1;
    }
}

/// `k` orthonormal rows of width `d` from a Gaussian draw.
pub fn random_orthonormal_rows<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Tensor> {
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("low rank dimension {k} must be in 1..={d}")));
    }
    let mut v: Vec<f64> = (0..k * d).map(|_| rng.sample(StandardNormal)).collect();
    orthonormalize_rows(&mut v, k, d);
    Tensor::from_f64(&[k, d], &v, DType::F64)
}

/// Parameters of a rotated-family intervention.
#[derive(Debug, Clone)]
pub enum RotationParams {
    /// Full `d × d` rotation via [`cayley`].
    Full { weight: Tensor },
    /// `k × d` orthonormal rows, re-orthonormalized after each update.
    LowRank { rows: Tensor },
    /// Full rotation plus per-dimension boundary logits.
    Boundless { weight: Tensor, boundary: Tensor, temperature: f64 },
}

impl RotationParams {
    pub fn full(d: usize, seed: u64) -> Result<Self> {
        let weight = Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), DType::F64, &mut rng_for(seed));
        Ok(RotationParams::Full {
            weight: weight.into_parameter(),
        })
    }

    pub fn identity(d: usize) -> Self {
        RotationParams::Full {
            weight: Tensor::zeros(&[d, d], DType::F64).into_parameter(),
        }
    }

    pub fn low_rank(d: usize, k: usize, seed: u64) -> Result<Self> {
        let rows = random_orthonormal_rows(k, d, &mut rng_for(seed))?;
        Ok(RotationParams::LowRank {
            rows: rows.into_parameter(),
        })
    }

    pub fn boundless(d: usize, seed: u64, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
        }
        let RotationParams::Full { weight } = Self::full(d, seed)? else { unreachable!() };
        Ok(RotationParams::Boundless {
            weight,
            boundary: Tensor::zeros(&[d], DType::F64).into_parameter(),
            temperature,
        })
    }

    /// Width of the site vectors this basis applies to.
    pub fn dim(&self) -> usize {
        match self {
            RotationParams::Full { weight } | RotationParams::Boundless { weight, .. } => weight.shape()[0],
            RotationParams::LowRank { rows } => rows.shape()[1],
        }
    }

    /// Differentiable basis in f64: `d × d` for full/boundless, `k × d` for low rank.
    pub fn basis(&self) -> Result<Tensor> {
        match self {
            RotationParams::Full { weight } | RotationParams::Boundless { weight, .. } => cayley(weight),
            RotationParams::LowRank { rows } => Ok(rows.clone()),
        }
    }

    pub fn apply(&self, base: &Tensor, source: &Tensor, subspace: &Subspace) -> Result<Tensor> {
        match self {
            RotationParams::Full { .. } => rotated(base, source, subspace, &self.basis()?),
            RotationParams::LowRank { rows } => low_rank(base, source, subspace, rows),
            RotationParams::Boundless { boundary, temperature, .. } => {
                boundless(base, source, subspace, &self.basis()?, boundary, *temperature)
            }
        }
    }

    /// Named tensors, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            RotationParams::Full { weight } => vec![("weight", weight)],
            RotationParams::LowRank { rows } => vec![("rows", rows)],
            RotationParams::Boundless { weight, boundary, .. } => vec![("weight", weight), ("boundary", boundary)],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            RotationParams::Full { weight } => vec![weight],
            RotationParams::LowRank { rows } => vec![rows],
            RotationParams::Boundless { weight, boundary, .. } => vec![weight, boundary],
        }
    }

    /// Replace a named tensor (used when loading). Shapes must match.
    pub fn set_tensor(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let target = match (self, name) {
            (RotationParams::Full { weight }, "weight") | (RotationParams::Boundless { weight, .. }, "weight") => weight,
            (RotationParams::LowRank { rows }, "rows") => rows,
            (RotationParams::Boundless { boundary, .. }, "boundary") => boundary,
            (_, other) => return Err(Error::InvalidArgument(format!("no rotation tensor named {other}"))),
        };
        if target.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_tensor",
                lhs: target.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        target.set_data(value.storage().cast(DType::F64))
    }

    pub fn temperature(&self) -> Option<f64> {
        match self {
            RotationParams::Boundless { temperature, .. } => Some(*temperature),
            _ => None,
        }
    }

    pub fn set_temperature(&mut self, value: f64) -> Result<()> {
        match self {
            RotationParams::Boundless { temperature, .. } if value > 0.0 => {
                *temperature = value;
                Ok(())
            }
            RotationParams::Boundless { .. } => Err(Error::InvalidArgument(format!("temperature must be > 0, got {value}"))),
            _ => Err(Error::InvalidArgument("only boundless rotations have a temperature".into())),
        }
    }

    /// Boundary mask `sigmoid(b / τ)` for boundless rotations.
    pub fn mask(&self) -> Option<Vec<f64>> {
        match self {
            RotationParams::Boundless { boundary, temperature, .. } => {
                Some(boundary.scale(1.0 / temperature).sigmoid().to_f64_vec())
            }
            _ => None,
        }
    }

    /// Restore constraints after an optimizer step.
    pub fn project(&mut self) -> Result<()> {
        if let RotationParams::LowRank { rows } = self {
            let (k, d) = (rows.shape()[0], rows.shape()[1]);
            let mut v = rows.to_f64_vec();
            orthonormalize_rows(&mut v, k, d);
            rows.set_data(Storage::from_f64(DType::F64, &v))?;
        }
        Ok(())
    }

    /// `max |B Bᵀ - I|` over the basis rows.
    pub fn orthogonality_error(&self) -> Result<f64> {
        let b = self.basis()?.detach();
        let k = b.shape()[0];
        let gram = b.matmul(&b.transpose()?)?;
        Ok(gram.max_abs_diff(&Tensor::eye(k, DType::F64)))
    }
}
