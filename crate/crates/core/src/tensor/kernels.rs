// SPDX-License-Identifier: MIT OR Apache-2.0

//! Slice-level numeric kernels shared by forward and backward passes.

use super::Element;
use crate::error::{Error, Result};

/// `out[i] = f(a[i], b[i % b.len()])`; `b` broadcasts over leading dims of `a`.
pub fn zip_broadcast<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let n = b.len();
    if n == a.len() {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    a.chunks(n)
        .flat_map(|chunk| chunk.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
        .collect()
}

/// Sum `g` over leading dims down to a vector of length `n`.
pub fn reduce_leading<T: Element>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

#[cfg(feature = "parallel")]
const PAR_GEMM_WORK: usize = 1 << 21;

/// Row-major `[n, k] x [k, m] -> [n, m]`.
///
/// Every output element accumulates over `k` in ascending order, so results
/// do not depend on how rows are split across threads.
pub fn gemm<T: Element>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    if m == 0 {
        return out;
    }
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        if n * k * m >= PAR_GEMM_WORK {
            use rayon::prelude::*;
            out.par_chunks_mut(m).enumerate().for_each(row);
            return out;
        }
    }
    out.chunks_mut(m).enumerate().for_each(row);
    out
}

pub fn transpose2<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Transpose the last two axes of a `[batch, rows, cols]` buffer.
pub fn batched_transpose<T: Element>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let sz = rows * cols;
    let mut out = Vec::with_capacity(x.len());
    for b in 0..batch {
        out.extend(transpose2(&x[b * sz..(b + 1) * sz], rows, cols));
    }
    out
}

pub fn batched_gemm<T: Element>(a: &[T], b: &[T], batch: usize, n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * n * m);
    for i in 0..batch {
        out.extend(gemm(&a[i * n * k..(i + 1) * n * k], &b[i * k * m..(i + 1) * k * m], n, k, m));
    }
    out
}

pub fn softmax_rows<T: Element>(x: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

/// `dx = y * (dy - sum(dy * y))` per row.
pub fn softmax_backward<T: Element>(y: &[T], g: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    out
}

/// Per-row mean and inverse standard deviation.
pub fn row_stats<T: Element>(x: &[T], d: usize, eps: f64) -> Vec<(T, T)> {
    let dn = T::lit(d as f64);
    x.chunks(d)
        .map(|row| {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            (mean, T::one() / (var + T::lit(eps)).sqrt())
        })
        .collect()
}

pub fn layernorm_rows<T: Element>(x: &[T], d: usize, eps: f64) -> Vec<T> {
    let stats = row_stats(x, d, eps);
    let mut out = Vec::with_capacity(x.len());
    for (row, &(mean, inv)) in x.chunks(d).zip(&stats) {
        out.extend(row.iter().map(|&v| (v - mean) * inv));
    }
    out
}

/// `dx = inv * (dy - mean(dy) - xhat * mean(dy * xhat))` per row.
pub fn layernorm_backward<T: Element>(x: &[T], g: &[T], d: usize, eps: f64) -> Vec<T> {
    let stats = row_stats(x, d, eps);
    let dn = T::lit(d as f64);
    let mut out = Vec::with_capacity(x.len());
    for ((row, gr), &(mean, inv)) in x.chunks(d).zip(g.chunks(d)).zip(&stats) {
        let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv).collect();
        let g_mean = gr.iter().copied().sum::<T>() / dn;
        let gx_mean = gr.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
        out.extend(
            gr.iter()
                .zip(&xhat)
                .map(|(&gi, &xh)| inv * (gi - g_mean - xh * gx_mean)),
        );
    }
    out
}

const GELU_C: f64 = 0.044_715;

fn gelu_inner<T: Element>(x: T) -> T {
    let s = T::lit((2.0 / std::f64::consts::PI).sqrt());
    s * (x + T::lit(GELU_C) * x * x * x)
}

/// Tanh-approximated GELU.
pub fn gelu<T: Element>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + gelu_inner(x).tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let s = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let t = gelu_inner(x).tanh();
    let du = s * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

pub fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Reorder axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Element>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse<T: Element>(x: &[T], n: usize) -> Result<Vec<T>> {
    let mut a = x.to_vec();
    let mut inv = vec![T::zero(); n * n];
    for i in 0..n {
        inv[i * n + i] = T::one();
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a[i * n + col]
                    .abs()
                    .partial_cmp(&a[j * n + col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        if a[pivot * n + col].abs() <= T::epsilon() * T::lit(n as f64) {
            return Err(Error::Singular);
        }
        if pivot != col {
            for j in 0..n {
                a.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        let p = a[col * n + col];
        for j in 0..n {
            a[col * n + j] = a[col * n + j] / p;
            inv[col * n + j] = inv[col * n + j] / p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == T::zero() {
                continue;
            }
            for j in 0..n {
                let av = a[col * n + j];
                let iv = inv[col * n + j];
                a[r * n + j] -= f * av;
                inv[r * n + j] -= f * iv;
            }
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_identity() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let i = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(gemm(&a, &i, 2, 2, 2), a.to_vec());
    }

    #[test]
    fn permute_matches_transpose() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        assert_eq!(permute(&x, &[2, 3], &[1, 0]), transpose2(&x, 2, 3));
    }

    #[test]
    fn inverse_roundtrip() {
        let a = [4.0f64, 7.0, 2.0, 6.0];
        let inv = inverse(&a, 2).unwrap();
        let prod = gemm(&a, &inv, 2, 2, 2);
        for (p, e) in prod.iter().zip([1.0, 0.0, 0.0, 1.0]) {
            assert!((p - e).abs() < 1e-12);
        }
        assert!(matches!(inverse(&[1.0f64, 2.0, 2.0, 4.0], 2), Err(Error::Singular)));
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
