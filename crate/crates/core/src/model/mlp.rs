// SPDX-License-Identifier: MIT OR Apache-2.0

//! Position-wise feed-forward classifier: `x ← tanh(x W + b)` per layer.

use super::{Component, Init, Model, ModelInput, ModelSchema, SiteKey, SiteVisitor};
use crate::error::Result;
use crate::tensor::Tensor;

pub(crate) fn param_shapes(s: &ModelSchema) -> Vec<(String, Vec<usize>, Init)> {
    let d = s.hidden_dim;
    let mut out = vec![("wte".to_string(), vec![s.vocab_size, d], Init::Normal)];
    for l in 0..s.num_layers {
        out.push((format!("mlp.{l}.w"), vec![d, d], Init::Normal));
        out.push((format!("mlp.{l}.b"), vec![d], Init::Zeros));
    }
    out
}

pub(crate) fn forward(model: &Model, input: &ModelInput, sites: &mut SiteVisitor<'_>) -> Result<Tensor> {
    let mut x: Tensor = model.embed(input)?;
    for l in 0..model.schema().num_layers {
        x = sites.visit(SiteKey::new(Component::LayerInput, l), x)?;
        x = x
            .matmul(&model.params[&format!("mlp.{l}.w")])?
            .add(&model.params[&format!("mlp.{l}.b")])?
            .tanh();
        x = sites.visit(SiteKey::new(Component::LayerOutput, l), x)?;
    }
    Ok(x)
}
