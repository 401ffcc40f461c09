// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wrap a [`Model`] with an [`IntervenableConfig`] and run intervened
//! forward passes.
//!
//! Parallel mode runs every source once (plain forward, identical inputs
//! shared), then one base forward in which each intervention writes its
//! base-side locations. Serial mode chains the sources: link `i` reads
//! `source_i` (itself already intervened by link `i - 1`) and writes into
//! `source_{i+1}`, the last link writing into the base.
//!
//! Interventions at the same site run in config order, so a collect listed
//! before a writer sees the pre-write value and one listed after sees the
//! post-write value.

mod config;
mod locations;

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::interventions::{self as iv, InterventionKind, NoiseSpec, Registry, RotationParams, Subspace, DEFAULT_TEMPERATURE};
use crate::model::{Component, ForwardTrace, Model, ModelInput, SiteHook, SiteInfo, SiteKey, Unit};
use crate::tensor::{adam_step, Gradients, OptimState, Tensor};

pub use config::{ConstantSource, IntervenableConfig, InterventionSpec, Mode, NoiseOptions};
pub use locations::{Grid, Locations, UnitLocations};

/// Multiple of the token-embedding standard deviation used when a noise
/// spec gives no scale.
pub const DEFAULT_NOISE_MULTIPLIER: f64 = 3.0;

/// Inputs of one engine invocation.
#[derive(Debug, Clone)]
pub struct Request {
    pub base: ModelInput,
    pub sources: Vec<ModelInput>,
    pub locations: UnitLocations,
    /// One entry per intervention; empty means the full vector everywhere.
    pub subspaces: Vec<Subspace>,
    /// Call-time source vectors, one slot per intervention. A vector of
    /// width `d` is broadcast to every location.
    pub source_representations: Vec<Option<Tensor>>,
    /// Sites to record in the returned traces.
    pub record: Vec<SiteKey>,
    pub return_original: bool,
}

impl Request {
    pub fn new(base: ModelInput, sources: Vec<ModelInput>, locations: UnitLocations) -> Self {
        Self {
            base,
            sources,
            locations,
            subspaces: Vec::new(),
            source_representations: Vec::new(),
            record: Vec::new(),
            return_original: false,
        }
    }

    pub fn subspaces(mut self, subspaces: Vec<Subspace>) -> Self {
        self.subspaces = subspaces;
        self
    }

    pub fn source_representations(mut self, reps: Vec<Option<Tensor>>) -> Self {
        self.source_representations = reps;
        self
    }

    pub fn record(mut self, sites: &[SiteKey]) -> Self {
        self.record = sites.to_vec();
        self
    }

    pub fn with_original(mut self) -> Self {
        self.return_original = true;
        self
    }
}

/// Activations copied by a collect intervention.
#[derive(Debug, Clone)]
pub struct Collected {
    /// Index of the spec in the config.
    pub spec: usize,
    /// `[batch * units, |subspace|]`, rows ordered by batch then unit.
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct IntervenedOutput {
    pub original: Option<ForwardTrace>,
    pub intervened: ForwardTrace,
    /// Collect buffers in config order.
    pub collected: Vec<Collected>,
}

/// Which decoding steps [`IntervenableModel::generate`] intervenes on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepSelector {
    All,
    Steps(BTreeSet<usize>),
}

impl StepSelector {
    pub fn contains(&self, step: usize) -> bool {
        match self {
            StepSelector::All => true,
            StepSelector::Steps(s) => s.contains(&step),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    /// Newly generated tokens.
    pub tokens: Vec<usize>,
    /// `[vocab]` logits that produced each token.
    pub step_logits: Vec<Tensor>,
}

/// One intervention ready to fire during a forward pass.
struct Prepared {
    spec: usize,
    site: SiteKey,
    unit: Unit,
    /// `[batch][m]` base-side units.
    base: Grid,
    m: usize,
    /// `[batch * m, d]` source rows, when the kind takes a source.
    source: Option<Tensor>,
    subspace: Subspace,
}

/// Per-invocation mutable state; never shared between calls.
struct HookState {
    calls: BTreeMap<SiteKey, usize>,
    collected: BTreeMap<usize, Vec<(Vec<usize>, Tensor)>>,
    rngs: BTreeMap<usize, ChaCha8Rng>,
}

impl HookState {
    fn new(engine: &IntervenableModel) -> Self {
        let rngs = engine
            .noise
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (i, n.rng())))
            .collect();
        Self {
            calls: BTreeMap::new(),
            collected: BTreeMap::new(),
            rngs,
        }
    }

    fn collected(self) -> Result<Vec<Collected>> {
        let mut out = Vec::new();
        for (spec, pieces) in self.collected {
            let order: Vec<usize> = pieces.iter().flat_map(|(idx, _)| idx.iter().copied()).collect();
            let parts: Vec<Tensor> = pieces.into_iter().map(|(_, t)| t).collect();
            let value = if parts.len() == 1 { parts[0].clone() } else { Tensor::concat(&parts, 0)? };
            let mut perm: Vec<usize> = (0..order.len()).collect();
            perm.sort_by_key(|&r| order[r]);
            let value = if perm.iter().enumerate().all(|(i, &p)| i == p) {
                value
            } else {
                value.index_rows(&perm)?
            };
            out.push(Collected { spec, value });
        }
        Ok(out)
    }
}

struct EngineHook<'a> {
    engine: &'a IntervenableModel,
    prepared: &'a [Prepared],
    state: HookState,
}

impl SiteHook for EngineHook<'_> {
    fn on_site(&mut self, site: SiteKey, mut value: Tensor) -> Result<Tensor> {
        let call = {
            let c = self.state.calls.entry(site).or_insert(0);
            *c += 1;
            *c - 1
        };
        for p in self.prepared.iter().filter(|p| p.site == site) {
            value = self.fire(p, value, call)?;
        }
        Ok(value)
    }
}

impl EngineHook<'_> {
    fn fire(&mut self, p: &Prepared, value: Tensor, call: usize) -> Result<Tensor> {
        // (target row in the flattened site tensor, index into the source rows)
        let (flat, pairs) = match p.unit {
            Unit::Pos => {
                let s = value.shape().to_vec();
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut pairs = Vec::with_capacity(b * p.m);
                for (bi, row) in p.base.iter().enumerate() {
                    for (j, &u) in row.iter().enumerate() {
                        pairs.push((bi * t + u, bi * p.m + j));
                    }
                }
                (value.reshape(&[b * t, d])?, pairs)
            }
            Unit::T => {
                let mut pairs = Vec::new();
                for (bi, row) in p.base.iter().enumerate() {
                    for (j, &u) in row.iter().enumerate() {
                        if u == call {
                            pairs.push((bi, bi * p.m + j));
                        }
                    }
                }
                (value.clone(), pairs)
            }
        };
        if pairs.is_empty() {
            return Ok(value);
        }
        let targets: Vec<usize> = pairs.iter().map(|x| x.0).collect();
        let slots: Vec<usize> = pairs.iter().map(|x| x.1).collect();
        let base_rows = flat.index_rows(&targets)?;
        let kind = &self.engine.config.interventions[p.spec].kind;
        if let InterventionKind::Collect = kind {
            let (_, copy) = iv::collect(&base_rows, &p.subspace)?;
            self.state.collected.entry(p.spec).or_default().push((slots, copy));
            return Ok(value);
        }
        let source = p.source.as_ref().map(|s| s.index_rows(&slots)).transpose()?;
        let need = |s: &Option<Tensor>| s.clone().ok_or(Error::MissingSource(p.spec));
        let new_rows = match kind {
            InterventionKind::Vanilla => iv::vanilla(&base_rows, &need(&source)?, &p.subspace)?,
            InterventionKind::Addition => iv::addition(&base_rows, &need(&source)?, &p.subspace)?,
            InterventionKind::Zero => iv::zero(&base_rows, &p.subspace)?,
            InterventionKind::Noise => {
                let scale = self.engine.noise[p.spec].expect("noise spec prepared at wrap").scale;
                let rng = self.state.rngs.get_mut(&p.spec).expect("rng per noise spec");
                iv::noise_with_rng(&base_rows, scale, &p.subspace, rng)?
            }
            InterventionKind::Rotated | InterventionKind::LowRankRotated | InterventionKind::BoundlessRotated => {
                let params = self.engine.params[p.spec].as_ref().expect("params prepared at wrap");
                params.apply(&base_rows, &need(&source)?, &p.subspace)?
            }
            InterventionKind::Custom(name) => {
                let f = self.engine.registry.custom(name)?;
                let out = f(&base_rows, source.as_ref(), &p.subspace)?;
                if out.shape() != base_rows.shape() {
                    return Err(Error::DimMismatch {
                        expected: base_rows.last_dim(),
                        got: out.last_dim(),
                    });
                }
                out.to_dtype(base_rows.dtype())
            }
            InterventionKind::Collect => unreachable!("handled above"),
        };
        let out = flat.set_rows(&targets, &new_rows)?;
        match p.unit {
            Unit::Pos => out.reshape(value.shape()),
            Unit::T => Ok(out),
        }
    }
}

/// A model together with an intervention plan and its trainable parameters.
#[derive(Debug, Clone)]
pub struct IntervenableModel {
    model: Model,
    config: IntervenableConfig,
    registry: Registry,
    sites: Vec<SiteInfo>,
    params: Vec<Option<RotationParams>>,
    constants: Vec<Option<Tensor>>,
    noise: Vec<Option<NoiseSpec>>,
    model_grads: bool,
}

fn resolve_site(model: &Model, spec: &InterventionSpec) -> Result<SiteInfo> {
    let unknown = || Error::UnknownSite {
        component: spec.component.clone(),
        layer: spec.layer,
    };
    let (component, forced) = Component::parse(&spec.component).ok_or_else(unknown)?;
    if forced.is_some_and(|l| l != spec.layer) {
        return Err(unknown());
    }
    let info = model.schema().site(SiteKey::new(component, spec.layer))?;
    if spec.unit.is_some_and(|u| u != info.unit) {
        return Err(unknown());
    }
    Ok(info)
}

impl IntervenableModel {
    pub fn wrap(model: Model, config: IntervenableConfig) -> Result<Self> {
        Self::wrap_with(model, config, Registry::new(), 0)
    }

    /// Wrap with custom kinds available; `seed` initialises trainable bases.
    pub fn wrap_with(model: Model, config: IntervenableConfig, registry: Registry, seed: u64) -> Result<Self> {
        if config.is_empty() {
            return Err(Error::MalformedDocument("config has no interventions".into()));
        }
        if config.mode == Mode::Serial && config.len() < 2 {
            return Err(Error::MalformedDocument("serial mode needs at least two interventions".into()));
        }
        let sites = config
            .interventions
            .iter()
            .map(|s| resolve_site(&model, s))
            .collect::<Result<Vec<_>>>()?;
        if config.mode == Mode::Serial {
            for i in 1..sites.len() {
                if sites[i].key < sites[i - 1].key {
                    return Err(Error::SerialOrderViolation { index: i, prev: i - 1 });
                }
            }
        }
        let default_noise = DEFAULT_NOISE_MULTIPLIER * model.embedding_std();
        let mut params = Vec::new();
        let mut constants = Vec::new();
        let mut noise = Vec::new();
        for (i, (spec, site)) in config.interventions.iter().zip(&sites).enumerate() {
            if let InterventionKind::Custom(name) = &spec.kind {
                registry.custom(name)?;
            }
            let d = site.dim;
            let pseed = seed.wrapping_add(i as u64);
            params.push(match spec.kind {
                InterventionKind::Rotated => Some(RotationParams::full(d, pseed)?),
                InterventionKind::LowRankRotated => {
                    Some(RotationParams::low_rank(d, spec.low_rank_dimension.unwrap_or(1), pseed)?)
                }
                InterventionKind::BoundlessRotated => Some(RotationParams::boundless(
                    d,
                    pseed,
                    spec.temperature.unwrap_or(DEFAULT_TEMPERATURE),
                )?),
                _ => None,
            });
            constants.push(match &spec.constant_source {
                None => None,
                Some(ConstantSource::Values(v)) => {
                    if v.len() != d {
                        return Err(Error::DimMismatch { expected: d, got: v.len() });
                    }
                    Some(Tensor::from_f64(&[d], v, model.dtype())?)
                }
                Some(ConstantSource::Blob(name)) => {
                    return Err(Error::MalformedDocument(format!(
                        "constant source blob {name:?} must be loaded through a bundle"
                    )))
                }
            });
            noise.push(match spec.kind {
                InterventionKind::Noise => {
                    let o = spec.noise.unwrap_or_default();
                    Some(NoiseSpec::new(o.scale.unwrap_or(default_noise), o.seed)?)
                }
                _ => None,
            });
        }
        Ok(Self {
            model,
            config,
            registry,
            sites,
            params,
            constants,
            noise,
            model_grads: false,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Give back the model, with gradient tracking off.
    pub fn unwrap(self) -> Model {
        self.model.with_grad(false)
    }

    pub fn config(&self) -> &IntervenableConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn site(&self, spec: usize) -> SiteInfo {
        self.sites[spec]
    }

    pub fn rotation(&self, spec: usize) -> Option<&RotationParams> {
        self.params.get(spec).and_then(Option::as_ref)
    }

    pub fn rotation_mut(&mut self, spec: usize) -> Option<&mut RotationParams> {
        self.params.get_mut(spec).and_then(Option::as_mut)
    }

    pub fn constant(&self, spec: usize) -> Option<&Tensor> {
        self.constants.get(spec).and_then(Option::as_ref)
    }

    pub fn noise_spec(&self, spec: usize) -> Option<NoiseSpec> {
        self.noise.get(spec).copied().flatten()
    }

    /// Let the base model's weights receive gradients too.
    pub fn enable_model_gradients(&mut self) {
        self.model = self.model.with_grad(true);
        self.model_grads = true;
    }

    pub fn disable_model_gradients(&mut self) {
        self.model = self.model.with_grad(false);
        self.model_grads = false;
    }

    pub fn model_gradients_enabled(&self) -> bool {
        self.model_grads
    }

    /// Intervention parameters, followed by model weights when enabled.
    pub fn trainable_parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self
            .params
            .iter()
            .flatten()
            .flat_map(|p| p.tensors().into_iter().map(|(_, t)| t))
            .collect();
        if self.model_grads {
            out.extend(self.model.params().values());
        }
        out
    }

    pub fn num_trainable_intervention_scalars(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| p.tensors())
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// One Adam step on every trainable parameter, then re-project
    /// constrained bases.
    pub fn apply_gradients(&mut self, grads: &Gradients, state: &mut OptimState) -> Result<()> {
        let mut handles: Vec<&mut Tensor> = self.params.iter_mut().flatten().flat_map(RotationParams::tensors_mut).collect();
        if self.model_grads {
            handles.extend(self.model.params_mut().map(|(_, t)| t));
        }
        adam_step(&mut handles, grads, state)?;
        for p in self.params.iter_mut().flatten() {
            p.project()?;
        }
        Ok(())
    }

    pub fn run(&self, req: &Request) -> Result<IntervenedOutput> {
        let n = self.config.len();
        if req.locations.0.len() != n {
            return Err(Error::IndexShapeMismatch(format!(
                "locations cover {} interventions, config has {n}",
                req.locations.0.len()
            )));
        }
        for (what, len) in [
            ("subspaces", req.subspaces.len()),
            ("source representations", req.source_representations.len()),
        ] {
            if len != 0 && len != n {
                return Err(Error::InvalidArgument(format!("{len} {what} for {n} interventions")));
            }
        }
        let original = if req.return_original {
            Some(self.model.forward(&req.base, &req.record)?)
        } else {
            None
        };
        let (intervened, collected) = match self.config.mode {
            Mode::Parallel => self.run_parallel(req)?,
            Mode::Serial => self.run_serial(req)?,
        };
        Ok(IntervenedOutput {
            original,
            intervened,
            collected,
        })
    }

    fn subspace(&self, req: &Request, i: usize) -> Subspace {
        req.subspaces.get(i).cloned().unwrap_or_default()
    }

    /// Call-time representation, else the spec constant.
    fn fixed_source(&self, req_reps: &[Option<Tensor>], i: usize) -> Option<Tensor> {
        req_reps
            .get(i)
            .cloned()
            .flatten()
            .or_else(|| self.constants[i].clone())
    }

    fn takes_source(&self, i: usize) -> bool {
        self.config.interventions[i].kind.accepts_source()
    }

    fn needs_source(&self, i: usize) -> bool {
        self.config.interventions[i].kind.needs_source()
    }

    /// Validate the base grid of spec `i` against a base of `batch × len`.
    fn base_grid(&self, i: usize, loc: &Locations, batch: usize, len: usize) -> Result<(Grid, usize)> {
        let grid = loc.base_grid().expect("active link has a grid").clone();
        if grid.len() != batch {
            return Err(Error::IndexShapeMismatch(format!(
                "intervention {i}: locations cover {} batch rows, batch is {batch}",
                grid.len()
            )));
        }
        let m = grid.first().map_or(0, Vec::len);
        if grid.iter().any(|r| r.len() != m) {
            return Err(Error::IndexShapeMismatch(format!("intervention {i}: ragged unit lists")));
        }
        self.check_range(i, grid.iter().flatten().copied(), len)?;
        Ok((grid, m))
    }

    fn check_range(&self, i: usize, mut units: impl Iterator<Item = usize>, len: usize) -> Result<()> {
        match units.find(|&u| u >= len) {
            None => Ok(()),
            Some(u) => Err(match self.sites[i].unit {
                Unit::Pos => Error::LocationOutOfRange { index: u, len },
                Unit::T => Error::TimeStepOutOfRange { step: u, len },
            }),
        }
    }

    /// `[batch * m, d]` rows from a fixed source vector or matrix.
    fn broadcast_fixed(&self, i: usize, t: &Tensor, rows: usize) -> Result<Tensor> {
        let d = self.sites[i].dim;
        let t = t.to_dtype(self.model.dtype());
        if t.numel() == d {
            let flat = t.reshape(&[1, d])?;
            flat.index_rows(&vec![0; rows])
        } else if t.numel() == rows * d {
            t.reshape(&[rows, d])
        } else {
            Err(Error::DimMismatch { expected: d, got: t.last_dim() })
        }
    }

    /// Gather `[batch * m, d]` source rows from a recorded `[bs, len, d]` site.
    fn gather_source(&self, i: usize, recorded: &Tensor, grid: &Grid, batch: usize, m: usize) -> Result<Tensor> {
        let s = recorded.shape();
        let (bs, len, d) = (s[0], s[1], s[2]);
        if bs != batch && bs != 1 {
            return Err(Error::IndexShapeMismatch(format!("source batch {bs} vs base batch {batch}")));
        }
        if grid.len() != batch {
            return Err(Error::IndexShapeMismatch(format!(
                "intervention {i}: source locations cover {} batch rows, batch is {batch}",
                grid.len()
            )));
        }
        let mut rows = Vec::with_capacity(batch * m);
        for (b, units) in grid.iter().enumerate() {
            if units.len() != m && units.len() != 1 {
                return Err(Error::IndexShapeMismatch(format!(
                    "intervention {i}: {} source units for {m} base units",
                    units.len()
                )));
            }
            self.check_range(i, units.iter().copied(), len)?;
            let sb = if bs == 1 { 0 } else { b };
            for j in 0..m {
                let u = if units.len() == 1 { units[0] } else { units[j] };
                rows.push(sb * len + u);
            }
        }
        recorded.reshape(&[bs * len, d])?.index_rows(&rows)
    }

    /// Which entry of `sources` feeds each spec in parallel mode.
    fn source_assignment(&self, req: &Request) -> Result<Vec<Option<usize>>> {
        let n = self.config.len();
        let wants: Vec<bool> = (0..n)
            .map(|i| {
                !req.locations.0[i].is_empty()
                    && self.takes_source(i)
                    && self.fixed_source(&req.source_representations, i).is_none()
            })
            .collect();
        let k = req.sources.len();
        let count = wants.iter().filter(|&&w| w).count();
        let mut next = 0;
        let mut out = Vec::with_capacity(n);
        for (i, &w) in wants.iter().enumerate() {
            let idx = if !w || k == 0 {
                None
            } else if k == n {
                Some(i)
            } else if k == 1 {
                Some(0)
            } else if k == count {
                next += 1;
                Some(next - 1)
            } else {
                return Err(Error::InvalidArgument(format!(
                    "{k} sources for {n} interventions ({count} reading a source)"
                )));
            };
            if w && idx.is_none() && self.needs_source(i) {
                return Err(Error::MissingSource(i));
            }
            out.push(idx);
        }
        Ok(out)
    }

    fn prepare(
        &self,
        i: usize,
        req: &Request,
        target: &ModelInput,
        source_site: Option<&Tensor>,
    ) -> Result<Option<Prepared>> {
        let loc = &req.locations.0[i];
        if loc.is_empty() {
            return Ok(None);
        }
        let batch = target.batch_size();
        let (base, m) = self.base_grid(i, loc, batch, target.seq_len())?;
        let source = if !self.takes_source(i) {
            None
        } else if let Some(fixed) = self.fixed_source(&req.source_representations, i) {
            Some(self.broadcast_fixed(i, &fixed, batch * m)?)
        } else if let Some(rec) = source_site {
            let grid = loc.source_grid().expect("active link has a grid");
            Some(self.gather_source(i, rec, grid, batch, m)?)
        } else if self.needs_source(i) {
            return Err(Error::MissingSource(i));
        } else {
            None
        };
        Ok(Some(Prepared {
            spec: i,
            site: self.sites[i].key,
            unit: self.sites[i].unit,
            base,
            m,
            source,
            subspace: self.subspace(req, i),
        }))
    }

    fn forward_prepared(&self, input: &ModelInput, record: &[SiteKey], prepared: &[Prepared]) -> Result<(ForwardTrace, Vec<Collected>)> {
        let mut hook = EngineHook {
            engine: self,
            prepared,
            state: HookState::new(self),
        };
        let trace = self.model.forward_with_hook(input, record, &mut hook)?;
        Ok((trace, hook.state.collected()?))
    }

    fn run_parallel(&self, req: &Request) -> Result<(ForwardTrace, Vec<Collected>)> {
        let assignment = self.source_assignment(req)?;
        // One plain forward per distinct source input.
        let mut distinct: Vec<(usize, BTreeSet<SiteKey>)> = Vec::new();
        let mut trace_of: Vec<Option<usize>> = vec![None; assignment.len()];
        for (i, a) in assignment.iter().enumerate() {
            let Some(s) = *a else { continue };
            let slot = match distinct.iter().position(|(d, _)| req.sources[*d].same_as(&req.sources[s])) {
                Some(p) => p,
                None => {
                    distinct.push((s, BTreeSet::new()));
                    distinct.len() - 1
                }
            };
            distinct[slot].1.insert(self.sites[i].key);
            trace_of[i] = Some(slot);
        }
        let traces = distinct
            .iter()
            .map(|(s, sites)| {
                let sites: Vec<SiteKey> = sites.iter().copied().collect();
                self.model.forward(&req.sources[*s], &sites)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut prepared = Vec::new();
        for i in 0..self.config.len() {
            let rec = trace_of[i].map(|t| &traces[t].sites[&self.sites[i].key]);
            if let Some(p) = self.prepare(i, req, &req.base, rec)? {
                prepared.push(p);
            }
        }
        self.forward_prepared(&req.base, &req.record, &prepared)
    }

    fn run_serial(&self, req: &Request) -> Result<(ForwardTrace, Vec<Collected>)> {
        let n = self.config.len();
        let chain: Vec<&ModelInput> = req.sources.iter().chain(std::iter::once(&req.base)).collect();
        if req.sources.len() != n {
            return Err(Error::InvalidArgument(format!(
                "serial mode needs {n} sources (one per link), got {}",
                req.sources.len()
            )));
        }
        let mut collected = Vec::new();
        let mut trace = self.model.forward(chain[0], &[self.sites[0].key])?;
        for i in 0..n {
            let target = chain[i + 1];
            let record: Vec<SiteKey> = if i + 1 < n { vec![self.sites[i + 1].key] } else { req.record.clone() };
            let rec = if self.takes_source(i) {
                trace.sites.get(&self.sites[i].key)
            } else {
                None
            };
            let prepared: Vec<Prepared> = self.prepare(i, req, target, rec)?.into_iter().collect();
            let (next, c) = self.forward_prepared(target, &record, &prepared)?;
            collected.extend(c);
            trace = next;
        }
        Ok((trace, collected))
    }

    /// Greedy decoding with every spec applied at the last position of each
    /// selected step. Specs must not need a per-step source pass: sources
    /// come from `source_representations` or spec constants.
    pub fn generate(
        &self,
        prompt: &[usize],
        steps: usize,
        selector: &StepSelector,
        source_representations: &[Option<Tensor>],
    ) -> Result<Generation> {
        if steps == 0 {
            return Err(Error::InvalidArgument("generate needs at least one step".into()));
        }
        let n = self.config.len();
        let mut seq = prompt.to_vec();
        let mut tokens = Vec::with_capacity(steps);
        let mut step_logits = Vec::with_capacity(steps);
        for step in 0..steps {
            let input = ModelInput::single(&seq);
            let trace = if selector.contains(step) {
                let last = seq.len() - 1;
                let req = Request::new(input.clone(), Vec::new(), UnitLocations::at(last, n, 1))
                    .source_representations(source_representations.to_vec());
                let mut prepared = Vec::new();
                for i in 0..n {
                    if let Some(p) = self.prepare(i, &req, &input, None)? {
                        prepared.push(p);
                    }
                }
                self.forward_prepared(&input, &[], &prepared)?.0
            } else {
                self.model.forward(&input, &[])?
            };
            let logits = trace.last_logits()?;
            let v = logits.last_dim();
            let logits = logits.reshape(&[v])?;
            let next = logits.reshape(&[1, v])?.argmax_rows()[0];
            tokens.push(next);
            step_logits.push(logits);
            seq.push(next);
        }
        Ok(Generation { tokens, step_logits })
    }
}
