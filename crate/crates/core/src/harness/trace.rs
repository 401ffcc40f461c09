// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing: corrupt the subject embeddings with Gaussian noise, then
//! restore a window of clean activations at one position and measure how
//! much of the gold-token probability comes back.

use crate::engine::{IntervenableConfig, IntervenableModel, InterventionSpec, Locations, Request, UnitLocations};
use crate::error::{Error, Result};
use crate::interventions::InterventionKind;
use crate::model::{Component, Model, ModelInput, SiteKey};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

/// Streams swept by [`Tracer::grid`], in output order.
pub const STREAMS: [Component; 3] = [Component::BlockOutput, Component::MlpActivation, Component::AttentionOutput];

/// Default window width for sub-block streams; the residual stream uses width 1.
pub const WINDOW: usize = 10;

/// Layers restored around a target layer: `[l - ⌊w/2⌋, l - ⌊-w/2⌋)`
/// clipped to `[0, total_layers)`. For even `w` the window holds `w`
/// layers with `l` right of centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceWindow {
    pub layer: usize,
    pub width: usize,
    pub total_layers: usize,
}

impl TraceWindow {
    /// `window` applies to sub-block streams; `block_output` always uses 1.
    pub fn for_stream(stream: Component, layer: usize, total_layers: usize, window: usize) -> Self {
        let width = if stream == Component::BlockOutput { 1 } else { window };
        Self {
            layer,
            width,
            total_layers,
        }
    }

    pub fn range(&self) -> (usize, usize) {
        let (l, w) = (self.layer as i64, self.width as i64);
        let s = (l - w.div_euclid(2)).max(0);
        let e = (l - (-w).div_euclid(2)).min(self.total_layers as i64);
        (s as usize, e.max(s) as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub stream: Component,
    pub layer: usize,
    pub pos: usize,
    pub prob: f64,
}

/// Softmax probability of `gold` in the last row of `[.., vocab]` logits.
pub fn gold_prob(logits: &Tensor, gold: usize) -> f64 {
    let v = logits.last_dim();
    let all = logits.to_f64_vec();
    let row = &all[all.len() - v..];
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
    (row[gold] - max).exp() / z
}

/// A prompt, its gold next token, and the subject positions to corrupt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceCase {
    pub prompt: Vec<usize>,
    pub gold: usize,
    pub subject: Vec<usize>,
}

/// One prompt prepared for tracing.
#[derive(Debug, Clone)]
pub struct Tracer<'a> {
    model: &'a Model,
    prompt: Vec<usize>,
    gold: usize,
    subject: Vec<usize>,
    noise_scale: Option<f64>,
    seed: u64,
    window: usize,
}

impl<'a> Tracer<'a> {
    /// `noise_scale: None` uses the engine default (a multiple of the
    /// token-embedding standard deviation).
    pub fn new(
        model: &'a Model,
        prompt: Vec<usize>,
        gold: usize,
        subject: Vec<usize>,
        noise_scale: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        if gold >= model.schema().vocab_size {
            return Err(Error::UnknownToken(format!("id {gold}")));
        }
        if let Some(&p) = subject.iter().find(|&&p| p >= prompt.len()) {
            return Err(Error::LocationOutOfRange {
                index: p,
                len: prompt.len(),
            });
        }
        Ok(Self {
            model,
            prompt,
            gold,
            subject,
            noise_scale,
            seed,
            window: WINDOW,
        })
    }

    pub fn with_window(mut self, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("trace window must be positive".into()));
        }
        self.window = window;
        Ok(self)
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    pub fn clean_prob(&self) -> Result<f64> {
        let logits = self.model.forward(&ModelInput::single(&self.prompt), &[])?.last_logits()?;
        Ok(gold_prob(&logits, self.gold))
    }

    /// Probability with the subject corrupted and the given `(site,
    /// positions)` restored from the clean run.
    pub fn restored_prob(&self, restores: &[(SiteKey, Vec<usize>)]) -> Result<f64> {
        let mut specs = vec![
            InterventionSpec::new(0, "embedding_output", InterventionKind::Noise).with_noise(self.noise_scale, self.seed),
        ];
        let mut locs = vec![Locations::link(None, Some(vec![self.subject.clone()]))];
        for (site, positions) in restores {
            specs.push(InterventionSpec::new(site.layer, site.component.name(), InterventionKind::Vanilla));
            locs.push(Locations::both(vec![positions.clone()]));
        }
        let pv = IntervenableModel::wrap(self.model.clone(), IntervenableConfig::parallel(specs))?;
        let input = ModelInput::single(&self.prompt);
        let req = Request::new(input.clone(), vec![input], UnitLocations(locs));
        let logits = pv.run(&req)?.intervened.last_logits()?;
        Ok(gold_prob(&logits, self.gold))
    }

    pub fn noise_only_prob(&self) -> Result<f64> {
        self.restored_prob(&[])
    }

    /// Every residual-stream site at every position restored.
    pub fn restore_all_prob(&self) -> Result<f64> {
        let all: Vec<usize> = (0..self.prompt.len()).collect();
        let restores: Vec<(SiteKey, Vec<usize>)> = (0..self.model.schema().num_layers)
            .map(|l| (SiteKey::new(Component::BlockOutput, l), all.clone()))
            .collect();
        self.restored_prob(&restores)
    }

    /// Restore the window around `layer` for `stream` at `pos`.
    pub fn cell(&self, stream: Component, layer: usize, pos: usize) -> Result<f64> {
        let (s, e) = TraceWindow::for_stream(stream, layer, self.model.schema().num_layers, self.window).range();
        let restores: Vec<(SiteKey, Vec<usize>)> = (s..e).map(|l| (SiteKey::new(stream, l), vec![pos])).collect();
        self.restored_prob(&restores)
    }

    /// Rows for every `(stream, layer, pos)`, ordered stream-major.
    pub fn grid(&self, streams: &[Component], exec: Execution) -> Result<Vec<TraceRow>> {
        let layers = self.model.schema().num_layers;
        let mut cells = Vec::new();
        for &stream in streams {
            for layer in 0..layers {
                for pos in 0..self.prompt.len() {
                    cells.push((stream, layer, pos));
                }
            }
        }
        let probs = par::try_map(exec, &cells, |&(s, l, p)| self.cell(s, l, p))?;
        Ok(cells
            .into_iter()
            .zip(probs)
            .map(|((stream, layer, pos), prob)| TraceRow {
                stream,
                layer,
                pos,
                prob,
            })
            .collect())
    }
}

/// Aggregates of tracing several prompts.
#[derive(Debug, Clone)]
pub struct TraceStudy {
    pub prompts: usize,
    pub clean_mean: f64,
    pub noise_mean: f64,
    /// Largest `|restore_all - clean|` over prompts.
    pub restore_all_max_gap: f64,
    /// Grid averaged over prompts.
    pub mean_grid: Vec<TraceRow>,
}

impl TraceStudy {
    /// Highest mean restored probability at position `pos` over streams and layers.
    pub fn max_at(&self, pos: usize) -> f64 {
        self.mean_grid
            .iter()
            .filter(|r| r.pos == pos)
            .map(|r| r.prob)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Trace every case with the default noise and window; prompts must share a length.
pub fn study(model: &Model, cases: &[TraceCase], seed: u64, exec: Execution) -> Result<TraceStudy> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let len = cases[0].prompt.len();
    if cases.iter().any(|c| c.prompt.len() != len) {
        return Err(Error::InvalidArgument("traced prompts must share a length".into()));
    }
    let (mut clean, mut noise, mut gap) = (0.0, 0.0, 0.0f64);
    let mut sum: Option<Vec<TraceRow>> = None;
    for (i, case) in cases.iter().enumerate() {
        let t = Tracer::new(
            model,
            case.prompt.clone(),
            case.gold,
            case.subject.clone(),
            None,
            seed.wrapping_add(i as u64),
        )?;
        let c = t.clean_prob()?;
        clean += c;
        noise += t.noise_only_prob()?;
        gap = gap.max((t.restore_all_prob()? - c).abs());
        let rows = t.grid(&STREAMS, exec)?;
        match &mut sum {
            None => sum = Some(rows),
            Some(acc) => acc.iter_mut().zip(rows).for_each(|(a, r)| a.prob += r.prob),
        }
    }
    let n = cases.len() as f64;
    let mut mean_grid = sum.expect("at least one case");
    mean_grid.iter_mut().for_each(|r| r.prob /= n);
    Ok(TraceStudy {
        prompts: cases.len(),
        clean_mean: clean / n,
        noise_mean: noise / n,
        restore_all_max_gap: gap,
        mean_grid,
    })
}
