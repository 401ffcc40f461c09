// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-LayerNorm decoder-only transformer with learned positions.
//!
//! Per layer, sites are offered in this order:
//! `block_input` → attention → `attention_output` (after the output
//! projection, before the residual add) → `mlp_activation` (post-GELU,
//! 4×hidden) → `mlp_output` (after the down-projection) → `block_output`.

use super::{Init, Model, ModelInput, ModelSchema, SiteKey, SiteVisitor, Component, LN_EPS};
use crate::error::Result;
use crate::tensor::Tensor;

pub(crate) fn param_shapes(s: &ModelSchema) -> Vec<(String, Vec<usize>, Init)> {
    let d = s.hidden_dim;
    let mut out = vec![
        ("wte".to_string(), vec![s.vocab_size, d], Init::Normal),
        ("wpe".to_string(), vec![s.max_positions, d], Init::Normal),
        ("ln_f.g".to_string(), vec![d], Init::Ones),
        ("ln_f.b".to_string(), vec![d], Init::Zeros),
    ];
    for l in 0..s.num_layers {
        let p = |n: &str| format!("h.{l}.{n}");
        out.extend([
            (p("ln1.g"), vec![d], Init::Ones),
            (p("ln1.b"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Normal),
            (p("attn.bq"), vec![d], Init::Zeros),
            (p("attn.wk"), vec![d, d], Init::Normal),
            (p("attn.bk"), vec![d], Init::Zeros),
            (p("attn.wv"), vec![d, d], Init::Normal),
            (p("attn.bv"), vec![d], Init::Zeros),
            (p("attn.wo"), vec![d, d], Init::Normal),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln2.g"), vec![d], Init::Ones),
            (p("ln2.b"), vec![d], Init::Zeros),
            (p("mlp.w1"), vec![d, 4 * d], Init::Normal),
            (p("mlp.b1"), vec![4 * d], Init::Zeros),
            (p("mlp.w2"), vec![4 * d, d], Init::Normal),
            (p("mlp.b2"), vec![d], Init::Zeros),
        ]);
    }
    out
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.layer_norm(LN_EPS).mul(g)?.add(b)
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add(b)
}

/// Additive causal mask `[seq, seq]`: 0 on and below the diagonal, -inf above.
fn causal_mask(seq: usize, like: &Tensor) -> Result<Tensor> {
    let mut v = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in i + 1..seq {
            v[i * seq + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::from_f64(&[seq, seq], &v, like.dtype())
}

pub(crate) fn forward(model: &Model, input: &ModelInput, sites: &mut SiteVisitor<'_>) -> Result<Tensor> {
    let s = model.schema();
    let p = |n: String| &model.params[&n];
    let (b, seq, d, h) = (input.batch_size(), input.seq_len(), s.hidden_dim, s.num_heads);
    let dh = d / h;

    let pos = model.params["wpe"].slice(0, 0, seq)?;
    let mut x = model.embed(input)?.add(&pos)?;
    let mask = causal_mask(seq, &x)?;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    for l in 0..s.num_layers {
        let k = |n: &str| format!("h.{l}.{n}");
        x = sites.visit(SiteKey::new(Component::BlockInput, l), x)?;

        let hn = layer_norm(&x, p(k("ln1.g")), p(k("ln1.b")))?;
        let heads = |t: Tensor| -> Result<Tensor> { t.reshape(&[b, seq, h, dh])?.permute(&[0, 2, 1, 3]) };
        let q = heads(linear(&hn, p(k("attn.wq")), p(k("attn.bq")))?)?;
        let kk = heads(linear(&hn, p(k("attn.wk")), p(k("attn.bk")))?)?;
        let v = heads(linear(&hn, p(k("attn.wv")), p(k("attn.bv")))?)?;
        let scores = q.matmul(&kk.transpose()?)?.scale(inv_sqrt).add(&mask)?;
        let ctx = scores
            .softmax()
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, seq, d])?;
        let attn = linear(&ctx, p(k("attn.wo")), p(k("attn.bo")))?;
        let attn = sites.visit(SiteKey::new(Component::AttentionOutput, l), attn)?;
        x = x.add(&attn)?;

        let hn = layer_norm(&x, p(k("ln2.g")), p(k("ln2.b")))?;
        let act = linear(&hn, p(k("mlp.w1")), p(k("mlp.b1")))?.gelu();
        let act = sites.visit(SiteKey::new(Component::MlpActivation, l), act)?;
        let out = linear(&act, p(k("mlp.w2")), p(k("mlp.b2")))?;
        let out = sites.visit(SiteKey::new(Component::MlpOutput, l), out)?;
        x = x.add(&out)?;

        x = sites.visit(SiteKey::new(Component::BlockOutput, l), x)?;
    }
    layer_norm(&x, &model.params["ln_f.g"], &model.params["ln_f.b"])
}
