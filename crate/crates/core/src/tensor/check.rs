// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{backward, Storage, Tensor};
use crate::error::Result;

/// Compare the analytic gradient of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / (|analytic_i| + floor)` with
/// `floor = max(1e-3 * max_j |analytic_j|, 1e-12)`. The floor keeps
/// components at the rounding level of the difference quotient (about
/// `1e-16 * |f| / eps`) from dominating. `f` is evaluated in f64; NaNs
/// propagate into the result.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let values = x.to_f64_vec();
    let shape = x.shape().to_vec();
    let param = Tensor::new(shape.clone(), Storage::F64(values.clone()))?.into_parameter();
    let out = f(&param)?;
    let analytic = backward(&out)?.get_or_zero(&param).to_f64_vec();

    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let eval = |v: Vec<f64>| -> Result<f64> { f(&Tensor::new(shape.clone(), Storage::F64(v))?)?.item() };
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        let mut plus = values.clone();
        plus[i] += eps;
        let mut minus = values.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + floor);
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
