// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{rng_for, Model, ModelInput};
use crate::error::{Error, Result};
use crate::tensor::{adam_step, backward, AdamConfig, OptimState, Tensor};

/// Input ids with an optional target per position (`None` positions are not scored).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Example {
    /// Score only the last position.
    pub fn last_token(input: Vec<usize>, target: usize) -> Self {
        let mut targets = vec![None; input.len()];
        if let Some(t) = targets.last_mut() {
            *t = Some(target);
        }
        Self { input, targets }
    }

    /// Next-token prediction over the whole sequence `tokens`.
    pub fn language_model(tokens: &[usize]) -> Self {
        let input = tokens[..tokens.len() - 1].to_vec();
        let targets = tokens[1..].iter().map(|&t| Some(t)).collect();
        Self { input, targets }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean minibatch loss per step.
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Rows of the flattened `[batch*seq, vocab]` logits that carry targets.
fn scored_rows(batch: &[&Example]) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, ex) in batch.iter().enumerate() {
        let s = ex.input.len();
        for (p, t) in ex.targets.iter().enumerate() {
            if let Some(t) = t {
                rows.push(b * s + p);
                targets.push(*t);
            }
        }
    }
    (rows, targets)
}

fn batch_loss(model: &Model, batch: &[&Example]) -> Result<Tensor> {
    let input = ModelInput::Tokens(batch.iter().map(|e| e.input.clone()).collect());
    let trace = model.forward(&input, &[])?;
    let v = model.schema().vocab_size;
    let (rows, targets) = scored_rows(batch);
    let flat = trace.logits.reshape(&[trace.logits.numel() / v, v])?;
    flat.index_rows(&rows)?.cross_entropy(&targets)
}

/// Group examples by length, then cut each group into minibatches.
fn minibatches<'a>(data: &'a [Example], order: &[usize], batch_size: usize) -> Vec<Vec<&'a Example>> {
    let mut by_len: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
    for &i in order {
        by_len.entry(data[i].input.len()).or_default().push(&data[i]);
    }
    by_len
        .into_values()
        .flat_map(|group| group.chunks(batch_size.max(1)).map(<[_]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Adam on mean cross-entropy of the scored positions.
pub fn train_model(model: &Model, data: &[Example], cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    if data.is_empty() || data.iter().all(|e| e.targets.iter().all(Option::is_none)) {
        return Err(Error::EmptyDataset);
    }
    let mut trained = model.with_grad(true);
    let mut state = OptimState::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = rng_for(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut queue: Vec<Vec<&Example>> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        if queue.is_empty() {
            order.shuffle(&mut rng);
            queue = minibatches(data, &order, cfg.batch_size);
            queue.reverse();
        }
        let batch = queue.pop().expect("non-empty queue");
        let loss = batch_loss(&trained, &batch)?;
        losses.push(loss.item()?);
        let grads = backward(&loss)?;
        let mut params: Vec<&mut Tensor> = trained.params_mut().map(|(_, t)| t).collect();
        adam_step(&mut params, &grads, &mut state)?;
    }
    let trained = trained.with_grad(false);
    let train_accuracy = evaluate(&trained, data)?;
    Ok((trained, TrainReport { losses, train_accuracy }))
}

/// Fraction of scored positions whose argmax equals the target.
pub fn evaluate(model: &Model, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for batch in minibatches(data, &order, 256) {
        let input = ModelInput::Tokens(batch.iter().map(|e| e.input.clone()).collect());
        let logits = model.forward(&input, &[])?.logits;
        let preds = logits.argmax_rows();
        let (rows, targets) = scored_rows(&batch);
        for (r, t) in rows.iter().zip(targets) {
            total += 1;
            hits += usize::from(preds[*r] == t);
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(hits as f64 / total as f64)
}

/// Append `steps` argmax tokens to `prompt`; returns only the new tokens.
pub fn greedy_decode(model: &Model, prompt: &[usize], steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("greedy_decode needs at least one step".into()));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = model.forward(&ModelInput::single(&seq), &[])?.last_logits()?;
        let next = logits.argmax_rows()[0];
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}
