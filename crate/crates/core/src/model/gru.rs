// SPDX-License-Identifier: MIT OR Apache-2.0

//! Unrolled GRU. `cell_output` is offered once per time step with shape
//! `[batch, hidden]`; hooks distinguish steps by counting calls.

use super::{Component, Init, Model, ModelInput, ModelSchema, SiteKey, SiteVisitor};
use crate::error::Result;
use crate::tensor::Tensor;

const GATES: [&str; 3] = ["r", "z", "n"];

pub(crate) fn param_shapes(s: &ModelSchema) -> Vec<(String, Vec<usize>, Init)> {
    let d = s.hidden_dim;
    let mut out = vec![("wte".to_string(), vec![s.vocab_size, d], Init::Normal)];
    for l in 0..s.num_layers {
        for g in GATES {
            out.push((format!("gru.{l}.w_i{g}"), vec![d, d], Init::Normal));
            out.push((format!("gru.{l}.w_h{g}"), vec![d, d], Init::Normal));
            out.push((format!("gru.{l}.b_i{g}"), vec![d], Init::Zeros));
            out.push((format!("gru.{l}.b_h{g}"), vec![d], Init::Zeros));
        }
    }
    out
}

/// One GRU step:
/// `r = σ(x Wir + bir + h Whr + bhr)`, `z = σ(x Wiz + biz + h Whz + bhz)`,
/// `n = tanh(x Win + bin + r ⊙ (h Whn + bhn))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
pub(crate) fn cell(model: &Model, layer: usize, x: &Tensor, h: &Tensor) -> Result<Tensor> {
    let p = |n: &str| &model.params[&format!("gru.{layer}.{n}")];
    let gate = |g: &str| -> Result<(Tensor, Tensor)> {
        let xi = x.matmul(p(&format!("w_i{g}")))?.add(p(&format!("b_i{g}")))?;
        let hh = h.matmul(p(&format!("w_h{g}")))?.add(p(&format!("b_h{g}")))?;
        Ok((xi, hh))
    };
    let (xr, hr) = gate("r")?;
    let (xz, hz) = gate("z")?;
    let (xn, hn) = gate("n")?;
    let r = xr.add(&hr)?.sigmoid();
    let z = xz.add(&hz)?.sigmoid();
    let n = xn.add(&r.mul(&hn)?)?.tanh();
    // (1 - z) * n + z * h  ==  n + z * (h - n)
    n.add(&z.mul(&h.sub(&n)?)?)
}

pub(crate) fn forward(model: &Model, input: &ModelInput, sites: &mut SiteVisitor<'_>) -> Result<Tensor> {
    let s = model.schema();
    let (b, t, d) = (input.batch_size(), input.seq_len(), s.hidden_dim);
    let mut seq = model.embed(input)?;
    for l in 0..s.num_layers {
        let mut h = Tensor::zeros(&[b, d], model.dtype());
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let x = seq.slice(1, step, step + 1)?.reshape(&[b, d])?;
            h = cell(model, l, &x, &h)?;
            h = sites.visit(SiteKey::new(Component::CellOutput, l), h)?;
            outputs.push(h.reshape(&[b, 1, d])?);
        }
        seq = Tensor::concat(&outputs, 1)?;
    }
    Ok(seq)
}
