// SPDX-License-Identifier: MIT OR Apache-2.0

//! Where does the pronoun model keep the gender bit? For each residual
//! stream cell `(layer, pos)` we train a low-rank rotated interchange
//! intervention (DAS) and score it by interchange intervention accuracy
//! (IIA), and fit a linear probe on collected activations and score it by
//! held-out accuracy.

use rand::seq::SliceRandom;
use rand::Rng;

use super::data::PronounData;
use crate::engine::{IntervenableConfig, IntervenableModel, InterventionSpec, Request, UnitLocations};
use crate::error::{Error, Result};
use crate::interventions::{InterventionKind, Registry};
use crate::model::{rng_for, Model, ModelInput, Vocab};
use crate::par::{self, Execution};
use crate::tensor::{adam_step, backward, AdamConfig, DType, OptimState, Tensor};

pub const METRIC_IIA: &str = "iia";
pub const METRIC_PROBE: &str = "probe";

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub layer: usize,
    pub pos: usize,
    pub metric: &'static str,
    pub value: f64,
}

/// Encoded pronoun prompts.
#[derive(Debug, Clone)]
pub struct PronounSet {
    pub prompts: Vec<Vec<usize>>,
    pub genders: Vec<usize>,
    /// Token id of the pronoun for each class.
    pub pronouns: [usize; 2],
    /// Counterfactual training pairs (differing genders).
    pub train_pairs: Vec<(usize, usize)>,
}

impl PronounSet {
    pub fn encode(data: &PronounData, vocab: &Vocab) -> Result<Self> {
        let prompts = data
            .prompts
            .iter()
            .map(|p| p.prompt.iter().map(|t| vocab.id(t)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        if prompts.is_empty() || data.pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            prompts,
            genders: data.prompts.iter().map(|p| p.gender).collect(),
            pronouns: [vocab.id(&data.pronouns[0])?, vocab.id(&data.pronouns[1])?],
            train_pairs: data.pairs.clone(),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.prompts[0].len()
    }

    /// Pronoun expected after swapping in the source's gender.
    pub fn counterfactual(&self, pair: (usize, usize)) -> usize {
        self.pronouns[self.genders[pair.1]]
    }

    /// `count` evaluation pairs, half with matching and half with differing
    /// genders, none of them a training pair.
    pub fn eval_pairs(&self, count: usize, seed: u64) -> Vec<(usize, usize)> {
        let mut rng = rng_for(seed);
        let n = self.prompts.len();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let same = out.len() % 2 == 0;
            let (b, s) = (rng.random_range(0..n), rng.random_range(0..n));
            if (self.genders[b] == self.genders[s]) == same && !self.train_pairs.contains(&(b, s)) {
                out.push((b, s));
            }
        }
        out
    }

    fn batch(&self, idx: impl Iterator<Item = usize>) -> ModelInput {
        ModelInput::Tokens(idx.map(|i| self.prompts[i].clone()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DasConfig {
    pub layer: usize,
    pub pos: usize,
    pub k: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl DasConfig {
    pub fn new(layer: usize, pos: usize) -> Self {
        Self {
            layer,
            pos,
            k: 1,
            steps: 120,
            batch_size: 32,
            lr: 0.02,
            seed: 0,
        }
    }
}

/// An untrained low-rank interchange at `block_output` of `cfg.layer`.
pub fn das_intervention(model: &Model, cfg: &DasConfig) -> Result<IntervenableModel> {
    let spec = InterventionSpec::new(cfg.layer, "block_output", InterventionKind::LowRankRotated).with_low_rank(cfg.k);
    IntervenableModel::wrap_with(model.clone(), IntervenableConfig::parallel(vec![spec]), Registry::new(), cfg.seed)
}

fn interchange(pv: &IntervenableModel, set: &PronounSet, pairs: &[(usize, usize)], pos: usize) -> Result<Tensor> {
    let req = Request::new(
        set.batch(pairs.iter().map(|p| p.0)),
        vec![set.batch(pairs.iter().map(|p| p.1))],
        UnitLocations::at(pos, 1, pairs.len()),
    );
    pv.run(&req)?.intervened.last_logits()
}

/// Train the rotation on last-token cross-entropy toward the counterfactual pronoun.
pub fn train_das(model: &Model, set: &PronounSet, cfg: &DasConfig) -> Result<IntervenableModel> {
    let mut pv = das_intervention(model, cfg)?;
    let mut state = OptimState::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = rng_for(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            order = (0..set.train_pairs.len()).collect();
            order.shuffle(&mut rng);
        }
        let pairs: Vec<(usize, usize)> = order
            .split_off(order.len().saturating_sub(cfg.batch_size))
            .into_iter()
            .map(|i| set.train_pairs[i])
            .collect();
        let targets: Vec<usize> = pairs.iter().map(|&p| set.counterfactual(p)).collect();
        let loss = interchange(&pv, set, &pairs, cfg.pos)?.cross_entropy(&targets)?;
        let grads = backward(&loss)?;
        pv.apply_gradients(&grads, &mut state)?;
    }
    Ok(pv)
}

/// Fraction of pairs whose intervened argmax is the counterfactual pronoun.
pub fn iia(pv: &IntervenableModel, set: &PronounSet, pairs: &[(usize, usize)], pos: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for chunk in pairs.chunks(256) {
        let preds = interchange(pv, set, chunk, pos)?.argmax_rows();
        hits += chunk
            .iter()
            .zip(preds)
            .filter(|&(&p, pred)| pred == set.counterfactual(p))
            .count();
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// `[n, d]` activations of `block_output` at `(layer, pos)` for every prompt,
/// gathered with a collect intervention.
pub fn collect_features(model: &Model, set: &PronounSet, layer: usize, pos: usize) -> Result<Tensor> {
    let spec = InterventionSpec::new(layer, "block_output", InterventionKind::Collect);
    let pv = IntervenableModel::wrap(model.clone(), IntervenableConfig::parallel(vec![spec]))?;
    let n = set.prompts.len();
    let req = Request::new(set.batch(0..n), Vec::new(), UnitLocations::at(pos, 1, n));
    let mut out = pv.run(&req)?;
    Ok(out.collected.remove(0).value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 0.05 }
    }
}

/// Logistic-regression probe on standardised features; returns accuracy on `test`.
pub fn train_probe(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = features.last_dim();
    let x = features.detach().to_dtype(DType::F64).to_f64_vec();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in train {
        for j in 0..d {
            mean[j] += x[i * d + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in train {
        for j in 0..d {
            std[j] += (x[i * d + j] - mean[j]).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-6));
    let rows = |idx: &[usize]| -> Result<Tensor> {
        let v: Vec<f64> = idx
            .iter()
            .flat_map(|&i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| (x[i * d + j] - mean[j]) / std[j])
            .collect();
        Tensor::from_f64(&[idx.len(), d], &v, DType::F64)
    };
    let (xtr, xte) = (rows(train)?, rows(test)?);
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let mut w = Tensor::zeros(&[d, classes], DType::F64).into_parameter();
    let mut b = Tensor::zeros(&[classes], DType::F64).into_parameter();
    let mut state = OptimState::new(AdamConfig::with_lr(cfg.lr));
    for _ in 0..cfg.steps {
        let loss = xtr.matmul(&w)?.add(&b)?.cross_entropy(&ytr)?;
        let grads = backward(&loss)?;
        adam_step(&mut [&mut w, &mut b], &grads, &mut state)?;
    }
    let preds = xte.matmul(&w)?.add(&b)?.argmax_rows();
    let hits = test.iter().zip(preds).filter(|&(&i, p)| labels[i] == p).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Random half/half split of `0..n`.
pub fn split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed));
    let test = idx.split_off(n / 2);
    (idx, test)
}

/// Probe accuracy for the gender label at one cell; `shuffle_labels`
/// permutes labels first as a null control.
pub fn probe_cell(model: &Model, set: &PronounSet, layer: usize, pos: usize, seed: u64, shuffle_labels: bool) -> Result<f64> {
    let features = collect_features(model, set, layer, pos)?;
    let mut labels = set.genders.clone();
    if shuffle_labels {
        labels.shuffle(&mut rng_for(seed ^ 0x5eed));
    }
    let (train, test) = split(set.prompts.len(), seed);
    train_probe(&features, &labels, 2, &train, &test, &ProbeConfig::default())
}

#[derive(Debug, Clone)]
pub struct Localization {
    pub rows: Vec<GridRow>,
}

impl Localization {
    fn values<'a>(&'a self, metric: &'a str) -> impl Iterator<Item = &'a GridRow> + 'a {
        self.rows.iter().filter(move |r| r.metric == metric)
    }

    pub fn count_above(&self, metric: &str, threshold: f64) -> usize {
        self.values(metric).filter(|r| r.value > threshold).count()
    }

    pub fn get(&self, layer: usize, pos: usize, metric: &str) -> Option<f64> {
        self.values(metric).find(|r| r.layer == layer && r.pos == pos).map(|r| r.value)
    }

    /// Cells where the probe reaches `probe_min` but IIA stays at or below `iia_max`.
    pub fn probe_only_cells(&self, probe_min: f64, iia_max: f64) -> Vec<(usize, usize)> {
        self.values(METRIC_PROBE)
            .filter(|r| r.value >= probe_min)
            .filter(|r| self.get(r.layer, r.pos, METRIC_IIA).is_some_and(|v| v <= iia_max))
            .map(|r| (r.layer, r.pos))
            .collect()
    }
}

/// DAS and probe metrics for every `(layer, pos)` of the residual stream.
pub fn localize(model: &Model, set: &PronounSet, eval_pairs: &[(usize, usize)], steps: usize, seed: u64, exec: Execution) -> Result<Localization> {
    let mut cells = Vec::new();
    for layer in 0..model.schema().num_layers {
        for pos in 0..set.seq_len() {
            cells.push((layer, pos));
        }
    }
    let per_cell = par::try_map(exec, &cells, |&(layer, pos)| -> Result<[GridRow; 2]> {
        let cfg = DasConfig {
            steps,
            seed,
            ..DasConfig::new(layer, pos)
        };
        let pv = train_das(model, set, &cfg)?;
        let iia = iia(&pv, set, eval_pairs, pos)?;
        let probe = probe_cell(model, set, layer, pos, seed, false)?;
        Ok([
            GridRow {
                layer,
                pos,
                metric: METRIC_IIA,
                value: iia,
            },
            GridRow {
                layer,
                pos,
                metric: METRIC_PROBE,
                value: probe,
            },
        ])
    })?;
    Ok(Localization {
        rows: per_cell.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_separates_separable_points() {
        let mut v = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let y = i % 2;
            v.extend([if y == 0 { -1.0 } else { 1.0 } + 0.01 * i as f64, 0.3]);
            labels.push(y);
        }
        let x = Tensor::from_f64(&[40, 2], &v, DType::F64).unwrap();
        let (train, test) = split(40, 1);
        let acc = train_probe(&x, &labels, 2, &train, &test, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn split_is_a_partition() {
        let (a, b) = split(11, 3);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
    }
}
