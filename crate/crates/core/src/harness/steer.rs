// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation steering: add a scaled token embedding to `mlp_output` of
//! every layer at the last position of every decoding step.

use std::collections::BTreeSet;

use crate::engine::{Generation, IntervenableConfig, IntervenableModel, InterventionSpec, StepSelector};
use crate::error::{Error, Result};
use crate::interventions::InterventionKind;
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_COEFFICIENT: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct SteerReport {
    pub prompt: Vec<usize>,
    pub original: Vec<usize>,
    pub steered: Vec<usize>,
    /// Mean over decoding steps of the steer token's logit.
    pub original_logit: f64,
    pub steered_logit: f64,
}

impl SteerReport {
    pub fn logit_shift(&self) -> f64 {
        self.steered_logit - self.original_logit
    }
}

/// Addition at `mlp_output` of every layer.
pub fn steering_model(model: &Model) -> Result<IntervenableModel> {
    let specs = (0..model.schema().num_layers)
        .map(|l| InterventionSpec::new(l, "mlp_output", InterventionKind::Addition))
        .collect();
    IntervenableModel::wrap(model.clone(), IntervenableConfig::parallel(specs))
}

fn mean_logit(g: &Generation, token: usize) -> f64 {
    g.step_logits.iter().map(|l| l.to_f64_vec()[token]).sum::<f64>() / g.step_logits.len() as f64
}

/// Greedy generations with and without steering toward `steer_token`.
pub fn steer(pv: &IntervenableModel, prompt: &[usize], steer_token: usize, coefficient: f64, steps: usize) -> Result<SteerReport> {
    let model = pv.model();
    if steer_token >= model.schema().vocab_size {
        return Err(Error::UnknownToken(format!("id {steer_token}")));
    }
    let source: Tensor = model.embedding_of(steer_token)?.scale(coefficient);
    let reps = vec![Some(source); pv.config().len()];
    let original = pv.generate(prompt, steps, &StepSelector::Steps(BTreeSet::new()), &reps)?;
    let steered = pv.generate(prompt, steps, &StepSelector::All, &reps)?;
    Ok(SteerReport {
        prompt: prompt.to_vec(),
        original_logit: mean_logit(&original, steer_token),
        steered_logit: mean_logit(&steered, steer_token),
        original: original.tokens,
        steered: steered.tokens,
    })
}
