// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy architectures with named intervention sites.
//!
//! Every model maps token ids (or input embeddings) to logits over its vocab
//! through a weight-tied unembedding (`logits = hidden · Eᵀ`). During the
//! forward pass each registered site is offered to a [`SiteHook`], which may
//! return a replacement activation; downstream computation consumes whatever
//! the hook returns.

pub mod checkpoint;
mod gru;
mod mlp;
mod train;
mod transformer;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, ParamId, Tensor};

pub use train::{evaluate, greedy_decode, train_model, Example, TrainConfig, TrainReport};
pub use vocab::Vocab;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    Gru,
    Transformer,
}

/// Named activation location within a layer.
///
/// Declaration order is the order in which a transformer layer produces its
/// sites; it orders [`SiteKey`]s topologically within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    BlockInput,
    AttentionOutput,
    MlpActivation,
    MlpOutput,
    BlockOutput,
    CellOutput,
    LayerInput,
    LayerOutput,
}

impl Component {
    pub const TRANSFORMER: [Component; 5] = [
        Component::BlockInput,
        Component::AttentionOutput,
        Component::MlpActivation,
        Component::MlpOutput,
        Component::BlockOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::BlockInput => "block_input",
            Component::AttentionOutput => "attention_output",
            Component::MlpActivation => "mlp_activation",
            Component::MlpOutput => "mlp_output",
            Component::BlockOutput => "block_output",
            Component::CellOutput => "cell_output",
            Component::LayerInput => "layer_input",
            Component::LayerOutput => "layer_output",
        }
    }

    /// Parse a component name. `embedding_output` is an alias for layer-0
    /// `block_input` and is reported with `Some(0)` as a forced layer.
    pub fn parse(name: &str) -> Option<(Component, Option<usize>)> {
        let c = match name {
            "block_input" => Component::BlockInput,
            "attention_output" => Component::AttentionOutput,
            "mlp_activation" => Component::MlpActivation,
            "mlp_output" => Component::MlpOutput,
            "block_output" => Component::BlockOutput,
            "cell_output" => Component::CellOutput,
            "layer_input" => Component::LayerInput,
            "layer_output" => Component::LayerOutput,
            "embedding_output" => return Some((Component::BlockInput, Some(0))),
            _ => return None,
        };
        Some((c, None))
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis along which a site's locations are indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    #[default]
    Pos,
    T,
}

impl Unit {
    pub fn name(self) -> &'static str {
        match self {
            Unit::Pos => "pos",
            Unit::T => "t",
        }
    }

    pub fn parse(s: &str) -> Option<Unit> {
        match s {
            "pos" => Some(Unit::Pos),
            "t" => Some(Unit::T),
            _ => None,
        }
    }
}

/// A site address. Ordered by layer, then by position within the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteKey {
    pub layer: usize,
    pub component: Component,
}

impl SiteKey {
    pub fn new(component: Component, layer: usize) -> Self {
        Self { layer, component }
    }
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.component, self.layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteInfo {
    pub key: SiteKey,
    pub unit: Unit,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSchema {
    pub architecture: Architecture,
    pub num_layers: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl ModelSchema {
    /// 8 layers, width 64, 4 heads, 256 tokens, 32 positions.
    pub fn toy_transformer() -> Self {
        Self::transformer(8, 64, 4, 256, 32)
    }

    pub fn transformer(num_layers: usize, hidden_dim: usize, num_heads: usize, vocab_size: usize, max_positions: usize) -> Self {
        Self {
            architecture: Architecture::Transformer,
            num_layers,
            hidden_dim,
            num_heads,
            vocab_size,
            max_positions,
        }
    }

    pub fn gru(hidden_dim: usize, vocab_size: usize, max_positions: usize) -> Self {
        Self {
            architecture: Architecture::Gru,
            num_layers: 1,
            hidden_dim,
            num_heads: 0,
            vocab_size,
            max_positions,
        }
    }

    pub fn mlp(num_layers: usize, hidden_dim: usize, vocab_size: usize) -> Self {
        Self {
            architecture: Architecture::Mlp,
            num_layers,
            hidden_dim,
            num_heads: 0,
            vocab_size,
            max_positions: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::InvalidSchema(why));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return bad("layers, hidden_dim, vocab_size and max_positions must be positive".into());
        }
        if self.architecture == Architecture::Transformer {
            if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
                return bad(format!(
                    "hidden_dim {} not divisible by num_heads {}",
                    self.hidden_dim, self.num_heads
                ));
            }
        }
        Ok(())
    }

    pub fn components(&self) -> &'static [Component] {
        match self.architecture {
            Architecture::Transformer => &Component::TRANSFORMER,
            Architecture::Gru => &[Component::CellOutput],
            Architecture::Mlp => &[Component::LayerInput, Component::LayerOutput],
        }
    }

    pub fn unit(&self) -> Unit {
        match self.architecture {
            Architecture::Gru => Unit::T,
            _ => Unit::Pos,
        }
    }

    /// Every registered site in topological order.
    pub fn sites(&self) -> Vec<SiteInfo> {
        let mut out = Vec::new();
        for layer in 0..self.num_layers {
            for &component in self.components() {
                let key = SiteKey::new(component, layer);
                out.push(SiteInfo {
                    key,
                    unit: self.unit(),
                    dim: self.dim_of(component),
                });
            }
        }
        out
    }

    fn dim_of(&self, component: Component) -> usize {
        match component {
            Component::MlpActivation => 4 * self.hidden_dim,
            _ => self.hidden_dim,
        }
    }

    pub fn site(&self, key: SiteKey) -> Result<SiteInfo> {
        if key.layer >= self.num_layers || !self.components().contains(&key.component) {
            return Err(Error::UnknownSite {
                component: key.component.name().to_string(),
                layer: key.layer,
            });
        }
        Ok(SiteInfo {
            key,
            unit: self.unit(),
            dim: self.dim_of(key.component),
        })
    }

    /// 64-bit FNV-1a of the canonical JSON encoding, as hex.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        format!("{:016x}", crate::serialization::fnv1a64(&json))
    }
}

/// Input batch: token ids `[batch][seq]` or embeddings `[batch, seq, hidden]`.
#[derive(Debug, Clone)]
pub enum ModelInput {
    Tokens(Vec<Vec<usize>>),
    Embeds(Tensor),
}

impl ModelInput {
    pub fn single(ids: &[usize]) -> Self {
        ModelInput::Tokens(vec![ids.to_vec()])
    }

    pub fn batch_size(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.len(),
            ModelInput::Embeds(e) => e.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.first().map_or(0, Vec::len),
            ModelInput::Embeds(e) => e.shape().get(1).copied().unwrap_or(0),
        }
    }

    /// Value equality for token inputs; embedding inputs compare by value too.
    pub fn same_as(&self, other: &ModelInput) -> bool {
        match (self, other) {
            (ModelInput::Tokens(a), ModelInput::Tokens(b)) => a == b,
            (ModelInput::Embeds(a), ModelInput::Embeds(b)) => a.values_eq(b),
            _ => false,
        }
    }
}

/// Receives every site activation during a forward pass.
pub trait SiteHook {
    /// Called once per site per forward for position-indexed sites, and once
    /// per time step for recurrent sites. Returns the value to propagate.
    fn on_site(&mut self, site: SiteKey, value: Tensor) -> Result<Tensor>;
}

/// Hook that changes nothing.
pub struct NoHook;

impl SiteHook for NoHook {
    fn on_site(&mut self, _site: SiteKey, value: Tensor) -> Result<Tensor> {
        Ok(value)
    }
}

/// Activations recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[batch, seq|time, dim]` per requested site, as seen downstream.
    pub sites: BTreeMap<SiteKey, Tensor>,
    /// Final hidden states `[batch, seq, hidden]`.
    pub hidden: Tensor,
    /// `[batch, seq, vocab]`.
    pub logits: Tensor,
}

impl ForwardTrace {
    pub fn site(&self, key: SiteKey) -> Option<&Tensor> {
        self.sites.get(&key)
    }

    /// Logits at the last position, `[batch, vocab]`.
    pub fn last_logits(&self) -> Result<Tensor> {
        let s = self.logits.shape();
        let (b, t, v) = (s[0], s[1], s[2]);
        let rows: Vec<usize> = (0..b).map(|i| i * t + t - 1).collect();
        self.logits.reshape(&[b * t, v])?.index_rows(&rows)
    }
}

/// Per-forward bookkeeping shared by the architectures.
pub(crate) struct SiteVisitor<'a> {
    pub hook: &'a mut dyn SiteHook,
    pub record: &'a BTreeSet<SiteKey>,
    pub recorded: BTreeMap<SiteKey, Vec<Tensor>>,
}

impl<'a> SiteVisitor<'a> {
    pub fn new(hook: &'a mut dyn SiteHook, record: &'a BTreeSet<SiteKey>) -> Self {
        Self {
            hook,
            record,
            recorded: BTreeMap::new(),
        }
    }

    pub fn visit(&mut self, site: SiteKey, value: Tensor) -> Result<Tensor> {
        let out = self.hook.on_site(site, value)?;
        if self.record.contains(&site) {
            self.recorded.entry(site).or_default().push(out.clone());
        }
        Ok(out)
    }

    /// Position-indexed sites record one `[B, S, D]` tensor; recurrent sites
    /// record one `[B, D]` tensor per step and are stacked to `[B, T, D]`.
    pub fn finish(self) -> Result<BTreeMap<SiteKey, Tensor>> {
        let mut out = BTreeMap::new();
        for (site, mut values) in self.recorded {
            let t = if values.len() == 1 && values[0].rank() == 3 {
                values.pop().expect("one value")
            } else {
                let parts = values
                    .iter()
                    .map(|v| {
                        let s = v.shape();
                        v.reshape(&[s[0], 1, s[1]])
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tensor::concat(&parts, 1)?
            };
            out.insert(site, t);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    schema: ModelSchema,
    vocab: Vocab,
    params: BTreeMap<String, Tensor>,
    ids: BTreeMap<String, ParamId>,
    requires_grad: bool,
}

impl Model {
    /// Random initialisation (normal, std 0.02; biases zero; norm gains one)
    /// with a synthetic vocabulary of `schema.vocab_size` tokens.
    pub fn build(schema: ModelSchema, seed: u64) -> Result<Model> {
        let vocab = Vocab::synthetic(schema.vocab_size);
        Self::build_with_vocab(schema, vocab, seed)
    }

    pub fn build_with_vocab(schema: ModelSchema, vocab: Vocab, seed: u64) -> Result<Model> {
        schema.validate()?;
        if vocab.len() != schema.vocab_size {
            return Err(Error::InvalidSchema(format!(
                "vocab has {} tokens but schema says {}",
                vocab.len(),
                schema.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = match schema.architecture {
            Architecture::Transformer => transformer::param_shapes(&schema),
            Architecture::Gru => gru::param_shapes(&schema),
            Architecture::Mlp => mlp::param_shapes(&schema),
        };
        let mut params = BTreeMap::new();
        for (name, shape, init) in shapes {
            let t = match init {
                Init::Normal => Tensor::randn(&shape, INIT_STD, DType::F32, &mut rng),
                Init::Zeros => Tensor::zeros(&shape, DType::F32),
                Init::Ones => Tensor::ones(&shape, DType::F32),
            };
            params.insert(name, t);
        }
        Self::from_parts(schema, vocab, params)
    }

    /// Assemble a model from existing tensors; names and shapes must match the schema.
    pub fn from_parts(schema: ModelSchema, vocab: Vocab, params: BTreeMap<String, Tensor>) -> Result<Model> {
        schema.validate()?;
        let expected = match schema.architecture {
            Architecture::Transformer => transformer::param_shapes(&schema),
            Architecture::Gru => gru::param_shapes(&schema),
            Architecture::Mlp => mlp::param_shapes(&schema),
        };
        if expected.len() != params.len() {
            return Err(Error::InvalidSchema(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(Error::InvalidSchema(format!("parameter {name} missing or misshapen"))),
            }
        }
        let ids = params.keys().map(|k| (k.clone(), ParamId::fresh())).collect();
        let params = params.into_iter().map(|(k, v)| (k, v.detach())).collect();
        Ok(Model {
            schema,
            vocab,
            params,
            ids,
            requires_grad: false,
        })
    }

    pub fn schema(&self) -> &ModelSchema {
        &self.schema
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dtype(&self) -> DType {
        self.params.values().next().map_or(DType::F32, Tensor::dtype)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copy whose parameters are trainable leaves (or constants).
    pub fn with_grad(&self, requires_grad: bool) -> Model {
        let params = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.with_requires_grad(requires_grad, self.ids[k])))
            .collect();
        Model {
            params,
            requires_grad,
            ..self.clone()
        }
    }

    /// Copy with every parameter converted to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Model {
        let params = self
            .params
            .iter()
            .map(|(k, v)| {
                let c = v.detach().to_dtype(dtype);
                (k.clone(), c.with_requires_grad(self.requires_grad, self.ids[k]))
            })
            .collect();
        Model { params, ..self.clone() }
    }

    /// Mutable access for optimisers; parameters keep their identities.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value.detach().with_requires_grad(self.requires_grad, self.ids[name]);
        Ok(())
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.params["wte"]
    }

    /// Row of the token embedding for `token`.
    pub fn embedding_of(&self, token: usize) -> Result<Tensor> {
        let wte = self.token_embedding().detach();
        let d = wte.last_dim();
        wte.index_rows(&[token])?.reshape(&[d])
    }

    /// Standard deviation of all token-embedding entries.
    pub fn embedding_std(&self) -> f64 {
        let v = self.token_embedding().to_f64_vec();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let s = input.seq_len();
        if s > self.schema.max_positions && self.schema.architecture != Architecture::Gru {
            return Err(Error::SequenceTooLong {
                len: s,
                max: self.schema.max_positions,
            });
        }
        match input {
            ModelInput::Tokens(rows) => {
                if rows.is_empty() || rows.iter().any(|r| r.len() != s || r.is_empty()) {
                    return Err(Error::InvalidArgument("token batch must be non-empty and rectangular".into()));
                }
                if let Some(&bad) = rows.iter().flatten().find(|&&t| t >= self.schema.vocab_size) {
                    return Err(Error::UnknownToken(format!("id {bad}")));
                }
            }
            ModelInput::Embeds(e) => {
                if e.rank() != 3 || e.shape()[2] != self.schema.hidden_dim || e.numel() == 0 {
                    return Err(Error::ShapeMismatch {
                        op: "forward",
                        lhs: vec![0, 0, self.schema.hidden_dim],
                        rhs: e.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    /// `[batch, seq, hidden]` token embeddings, or the supplied embeddings.
    pub(crate) fn embed(&self, input: &ModelInput) -> Result<Tensor> {
        match input {
            ModelInput::Tokens(rows) => {
                let ids: Vec<usize> = rows.iter().flatten().copied().collect();
                self.params["wte"].embed_lookup(&ids, &[rows.len(), rows[0].len()])
            }
            ModelInput::Embeds(e) => Ok(e.to_dtype(self.dtype())),
        }
    }

    pub(crate) fn unembed(&self, hidden: &Tensor) -> Result<Tensor> {
        hidden.matmul(&self.params["wte"].transpose()?)
    }

    /// Plain forward pass recording `record` sites.
    pub fn forward(&self, input: &ModelInput, record: &[SiteKey]) -> Result<ForwardTrace> {
        self.forward_with_hook(input, record, &mut NoHook)
    }

    pub fn forward_with_hook(&self, input: &ModelInput, record: &[SiteKey], hook: &mut dyn SiteHook) -> Result<ForwardTrace> {
        self.check_input(input)?;
        for &site in record {
            self.schema.site(site)?;
        }
        let record: BTreeSet<SiteKey> = record.iter().copied().collect();
        let mut visitor = SiteVisitor::new(hook, &record);
        let hidden = match self.schema.architecture {
            Architecture::Transformer => transformer::forward(self, input, &mut visitor)?,
            Architecture::Gru => gru::forward(self, input, &mut visitor)?,
            Architecture::Mlp => mlp::forward(self, input, &mut visitor)?,
        };
        let logits = self.unembed(&hidden)?;
        Ok(ForwardTrace {
            sites: visitor.finish()?,
            hidden,
            logits,
        })
    }
}

pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
