// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls the engine's intervention code: splices are
//! recomputed element by element on plain vectors.

#![allow(dead_code)]

use intervene::engine::{IntervenableConfig, IntervenableModel, InterventionSpec, Locations, Request, UnitLocations};
use intervene::interventions::{self as iv, InterventionKind, Subspace};
use intervene::model::{Component, Model, ModelInput, ModelSchema, SiteHook, SiteInfo, SiteKey};
use intervene::tensor::{finite_diff_check, DType, Tape, Tensor};
use intervene::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bitwise equality of two tensors of the same dtype.
pub fn bits_eq(a: &Tensor, b: &Tensor) -> bool {
    if a.shape() != b.shape() || a.dtype() != b.dtype() {
        return false;
    }
    match a.dtype() {
        DType::F32 => a.to_f32_vec().iter().zip(b.to_f32_vec()).all(|(x, y)| x.to_bits() == y.to_bits()),
        DType::F64 => a.to_f64_vec().iter().zip(b.to_f64_vec()).all(|(x, y)| x.to_bits() == y.to_bits()),
    }
}

// ---------------------------------------------------------------- gradients

/// Every recorded primitive, by tape name.
pub const PRIMITIVE_OPS: [&str; 27] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "tanh",
    "sigmoid",
    "gelu",
    "softmax",
    "layernorm",
    "matmul",
    "batch_matmul",
    "transpose",
    "reshape",
    "permute",
    "embed_lookup",
    "concat",
    "slice",
    "index_rows",
    "set_rows",
    "mask_select",
    "select_cols",
    "cross_entropy",
    "sum",
    "mean",
    "inverse",
    "cast",
];

/// Gradient-check cases: one per primitive input slot.
pub const PRIMITIVE_CASES: [&str; 38] = [
    "add.lhs",
    "add.rhs",
    "sub.lhs",
    "sub.rhs",
    "mul.lhs",
    "mul.rhs",
    "scale",
    "add_scalar",
    "tanh",
    "sigmoid",
    "gelu",
    "softmax",
    "layernorm",
    "matmul.lhs",
    "matmul.rhs",
    "batch_matmul.lhs",
    "batch_matmul.rhs",
    "transpose",
    "reshape",
    "permute",
    "embed_lookup",
    "concat.first",
    "concat.second",
    "slice",
    "index_rows",
    "set_rows.base",
    "set_rows.values",
    "mask_select.off",
    "mask_select.on",
    "select_cols",
    "cross_entropy",
    "sum",
    "mean",
    "inverse",
    "cast",
    "to_f64_roundtrip",
    "softmax.wide",
    "layernorm.wide",
];

/// Trainable intervention parameters checked by finite differences.
pub const TRAINABLE_CASES: [&str; 4] = [
    "rotated.weight",
    "low_rank_rotated.rows",
    "boundless_rotated.weight",
    "boundless_rotated.boundary",
];

pub const FD_TOLERANCE: f64 = 1e-4;
const FD_EPS: f64 = 1e-6;

type Loss = Box<dyn Fn(&Tensor) -> Result<Tensor>>;

/// A point and a scalar function of it.
pub struct GradCase {
    pub x: Tensor,
    pub f: Loss,
    pub eps: f64,
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, DType::F64, r)
}

/// `sum(y * w)` for a fixed pseudo-random `w`, so no gradient cancels by symmetry.
fn weigh(y: &Tensor, seed: u64) -> Result<Tensor> {
    let w = Tensor::randn(y.shape(), 1.0, y.dtype(), &mut rng(seed ^ 0x9e37_79b9));
    Ok(y.mul(&w)?.sum())
}

fn case(x: Tensor, seed: u64, op: impl Fn(&Tensor) -> Result<Tensor> + 'static) -> GradCase {
    GradCase {
        x,
        f: Box::new(move |t| weigh(&op(t)?, seed)),
        eps: FD_EPS,
    }
}

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

pub fn primitive_case(name: &str, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let (a, b, c) = (dims(&mut r, 1, 4), dims(&mut r, 2, 5), dims(&mut r, 1, 4));
    match name {
        "add.lhs" | "sub.lhs" | "mul.lhs" => {
            let k = randn(&[b], &mut r);
            let op = name.split('.').next().unwrap().to_string();
            case(randn(&[a, b], &mut r), seed, move |t| binary(&op, t, &k))
        }
        "add.rhs" | "sub.rhs" | "mul.rhs" => {
            let k = randn(&[a, b], &mut r);
            let op = name.split('.').next().unwrap().to_string();
            case(randn(&[b], &mut r), seed, move |t| binary(&op, &k, t))
        }
        "scale" => {
            let s = r.random_range(-2.0..2.0);
            case(randn(&[a, b], &mut r), seed, move |t| Ok(t.scale(s)))
        }
        "add_scalar" => {
            let s = r.random_range(-2.0..2.0);
            case(randn(&[a, b], &mut r), seed, move |t| Ok(t.add_scalar(s)))
        }
        "tanh" => case(randn(&[a, b], &mut r), seed, |t| Ok(t.tanh())),
        "sigmoid" => case(randn(&[a, b], &mut r), seed, |t| Ok(t.sigmoid())),
        "gelu" => case(randn(&[a, b], &mut r), seed, |t| Ok(t.gelu())),
        "softmax" => case(randn(&[a, b], &mut r), seed, |t| Ok(t.softmax())),
        "softmax.wide" => case(randn(&[2, 16], &mut r).scale(3.0), seed, |t| Ok(t.softmax())),
        "layernorm" => case(randn(&[a, b + 1], &mut r), seed, |t| Ok(t.layer_norm(1e-5))),
        "layernorm.wide" => case(randn(&[2, 16], &mut r), seed, |t| Ok(t.layer_norm(1e-5))),
        "matmul.lhs" => {
            let k = randn(&[b, c], &mut r);
            case(randn(&[a, b], &mut r), seed, move |t| t.matmul(&k))
        }
        "matmul.rhs" => {
            let k = randn(&[a, b], &mut r);
            case(randn(&[b, c], &mut r), seed, move |t| k.matmul(t))
        }
        "batch_matmul.lhs" => {
            let k = randn(&[2, b, c], &mut r);
            case(randn(&[2, a, b], &mut r), seed, move |t| t.matmul(&k))
        }
        "batch_matmul.rhs" => {
            let k = randn(&[2, a, b], &mut r);
            case(randn(&[2, b, c], &mut r), seed, move |t| k.matmul(t))
        }
        "transpose" => case(randn(&[c, a, b], &mut r), seed, |t| t.transpose()),
        "reshape" => case(randn(&[a, b], &mut r), seed, move |t| t.reshape(&[b, a])),
        "permute" => {
            let mut axes = vec![0, 1, 2];
            axes.shuffle(&mut r);
            case(randn(&[a, b, c], &mut r), seed, move |t| t.permute(&axes))
        }
        "embed_lookup" => {
            let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..b)).collect();
            case(randn(&[b, c], &mut r), seed, move |t| t.embed_lookup(&ids, &[2, 3]))
        }
        "concat.first" | "concat.second" => {
            let axis = r.random_range(0..2);
            let mut shape = [a, b];
            shape[axis] = c;
            let k = randn(&shape, &mut r);
            let first = name == "concat.first";
            case(randn(&[a, b], &mut r), seed, move |t| {
                let parts = if first { [t.clone(), k.clone()] } else { [k.clone(), t.clone()] };
                Tensor::concat(&parts, axis)
            })
        }
        "slice" => {
            let axis = r.random_range(0..2);
            let n = [a, b][axis];
            let start = r.random_range(0..n);
            let end = r.random_range(start + 1..=n);
            case(randn(&[a, b], &mut r), seed, move |t| t.slice(axis, start, end))
        }
        "index_rows" => {
            let rows: Vec<usize> = (0..c + 2).map(|_| r.random_range(0..a)).collect();
            case(randn(&[a, b], &mut r), seed, move |t| t.index_rows(&rows))
        }
        "set_rows.base" | "set_rows.values" => {
            let rows: Vec<usize> = (0..c).map(|_| r.random_range(0..a + 1)).collect();
            if name == "set_rows.base" {
                let v = randn(&[c, b], &mut r);
                case(randn(&[a + 1, b], &mut r), seed, move |t| t.set_rows(&rows, &v))
            } else {
                let base = randn(&[a + 1, b], &mut r);
                case(randn(&[c, b], &mut r), seed, move |t| base.set_rows(&rows, t))
            }
        }
        "mask_select.off" | "mask_select.on" => {
            let mask: Vec<bool> = (0..b).map(|_| r.random_bool(0.5)).collect();
            let k = randn(&[a, b], &mut r);
            let on = name == "mask_select.on";
            case(randn(&[a, b], &mut r), seed, move |t| {
                if on {
                    Tensor::mask_select(&mask, &k, t)
                } else {
                    Tensor::mask_select(&mask, t, &k)
                }
            })
        }
        "select_cols" => {
            let cols: Vec<usize> = (0..c + 1).map(|_| r.random_range(0..b)).collect();
            case(randn(&[a, b], &mut r), seed, move |t| t.select_cols(&cols))
        }
        "cross_entropy" => {
            let targets: Vec<usize> = (0..a).map(|_| r.random_range(0..b)).collect();
            case(randn(&[a, b], &mut r), seed, move |t| t.cross_entropy(&targets))
        }
        "sum" => case(randn(&[a, b], &mut r), seed, |t| Ok(t.sum())),
        "mean" => case(randn(&[a, b], &mut r), seed, |t| Ok(t.mean())),
        "inverse" => {
            let n = b;
            let x = Tensor::eye(n, DType::F64).scale(2.0).add(&randn(&[n, n], &mut r).scale(0.3)).unwrap();
            case(x, seed, |t| t.inverse())
        }
        "cast" => {
            // Linear and exactly representable in f32: differences are exact.
            let v: Vec<f64> = (0..a * b).map(|_| r.random_range(-32i32..=32) as f64 / 8.0).collect();
            let w: Vec<f64> = (0..a * b).map(|_| r.random_range(-8i32..=8) as f64 / 4.0).collect();
            let w = Tensor::from_f64(&[a, b], &w, DType::F32).unwrap();
            GradCase {
                x: Tensor::from_f64(&[a, b], &v, DType::F64).unwrap(),
                f: Box::new(move |t| Ok(t.to_dtype(DType::F32).mul(&w)?.sum())),
                eps: 0.25,
            }
        }
        "to_f64_roundtrip" => {
            let v: Vec<f64> = (0..a * b).map(|_| r.random_range(-32i32..=32) as f64 / 8.0).collect();
            GradCase {
                x: Tensor::from_f64(&[a, b], &v, DType::F64).unwrap(),
                f: Box::new(move |t| Ok(t.to_dtype(DType::F32).to_dtype(DType::F64).scale(0.5).sum())),
                eps: 0.25,
            }
        }
        other => panic!("unknown primitive case {other}"),
    }
}

fn binary(op: &str, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    match op {
        "add" => x.add(y),
        "sub" => x.sub(y),
        "mul" => x.mul(y),
        _ => unreachable!(),
    }
}

fn random_subspace(r: &mut ChaCha8Rng, d: usize) -> Subspace {
    if r.random_bool(0.25) {
        return Subspace::all();
    }
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(r);
    idx.truncate(r.random_range(1..=d));
    Subspace::dims(idx)
}

/// A strict subset of the dimensions. A full-subspace rotation returns the
/// source for every orthogonal basis, so its weight gradient is zero and a
/// relative check would only measure rounding.
fn proper_subspace(r: &mut ChaCha8Rng, d: usize) -> Subspace {
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(r);
    idx.truncate(r.random_range(1..d));
    Subspace::dims(idx)
}

pub fn trainable_case(name: &str, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let d = dims(&mut r, 2, 6);
    let n = dims(&mut r, 1, 3);
    let base = randn(&[n, d], &mut r);
    let source = randn(&[n, d], &mut r);
    let w0 = randn(&[d, d], &mut r).scale(1.0 / (d as f64).sqrt());
    match name {
        "rotated.weight" => {
            let sub = proper_subspace(&mut r, d);
            case(w0, seed, move |w| iv::rotated(&base, &source, &sub, &iv::cayley(w)?))
        }
        "low_rank_rotated.rows" => {
            let k = r.random_range(1..=d);
            let sub = random_subspace(&mut r, k);
            let rows = iv::random_orthonormal_rows(k, d, &mut r).unwrap().detach();
            case(rows, seed, move |rows| iv::low_rank(&base, &source, &sub, rows))
        }
        "boundless_rotated.weight" => {
            let boundary = randn(&[d], &mut r);
            let temp = r.random_range(0.3..1.0);
            let sub = random_subspace(&mut r, d);
            case(w0, seed, move |w| iv::boundless(&base, &source, &sub, &iv::cayley(w)?, &boundary, temp))
        }
        "boundless_rotated.boundary" => {
            let boundary = randn(&[d], &mut r);
            let temp = r.random_range(0.3..1.0);
            let rot = iv::cayley(&w0).unwrap().detach();
            let sub = random_subspace(&mut r, d);
            case(boundary, seed, move |b| iv::boundless(&base, &source, &sub, &rot, b, temp))
        }
        other => panic!("unknown trainable case {other}"),
    }
}

pub fn check(c: &GradCase) -> Result<f64> {
    finite_diff_check(|t| (c.f)(t), &c.x, c.eps)
}

/// Tape op names produced by evaluating a case on a parameter.
pub fn ops_of(c: &GradCase) -> Result<Vec<&'static str>> {
    let p = c.x.into_parameter();
    Ok(Tape::record(&(c.f)(&p)?)?.op_names())
}

// ------------------------------------------------------------------ splices

pub const SPLICE_KINDS: [InterventionKind; 4] = [
    InterventionKind::Vanilla,
    InterventionKind::Zero,
    InterventionKind::Addition,
    InterventionKind::Collect,
];

/// One random single-intervention configuration on a position-indexed model.
#[derive(Debug, Clone)]
pub struct SpliceCase {
    pub site: SiteInfo,
    pub kind: InterventionKind,
    pub base_grid: Vec<Vec<usize>>,
    pub source_grid: Vec<Vec<usize>>,
    pub subspace: Subspace,
    pub base: ModelInput,
    pub source: ModelInput,
}

pub fn random_tokens(r: &mut ChaCha8Rng, batch: usize, len: usize, vocab: usize) -> ModelInput {
    ModelInput::Tokens((0..batch).map(|_| (0..len).map(|_| r.random_range(0..vocab)).collect()).collect())
}

fn random_units(r: &mut ChaCha8Rng, batch: usize, m: usize, len: usize, distinct: bool) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|_| {
            if distinct {
                let mut all: Vec<usize> = (0..len).collect();
                all.shuffle(r);
                all.truncate(m);
                all
            } else {
                (0..m).map(|_| r.random_range(0..len)).collect()
            }
        })
        .collect()
}

pub fn random_splice_case(schema: &ModelSchema, r: &mut ChaCha8Rng) -> SpliceCase {
    let sites = schema.sites();
    let site = sites[r.random_range(0..sites.len())];
    let kind = SPLICE_KINDS[r.random_range(0..SPLICE_KINDS.len())].clone();
    let batch = r.random_range(1..=2);
    let len = r.random_range(2..=8);
    let m = r.random_range(1..=len);
    let subspace = match r.random_range(0..4) {
        0 => Subspace::all(),
        1 => Subspace::none(),
        _ => random_subspace(r, site.dim),
    };
    SpliceCase {
        site,
        kind,
        base_grid: random_units(r, batch, m, len, true),
        source_grid: random_units(r, batch, m, len, false),
        subspace,
        base: random_tokens(r, batch, len, schema.vocab_size),
        source: random_tokens(r, batch, len, schema.vocab_size),
    }
}

pub struct SpliceResult {
    pub logits: Tensor,
    /// `[batch * m, |subspace|]` for collect.
    pub collected: Option<Tensor>,
    pub site_value: Tensor,
}

pub fn engine_splice(model: &Model, c: &SpliceCase) -> Result<SpliceResult> {
    let spec = InterventionSpec::new(c.site.key.layer, c.site.key.component.name(), c.kind.clone());
    let pv = IntervenableModel::wrap(model.clone(), IntervenableConfig::parallel(vec![spec]))?;
    let loc = Locations::link(Some(c.source_grid.clone()), Some(c.base_grid.clone()));
    let req = Request::new(c.base.clone(), vec![c.source.clone()], UnitLocations(vec![loc]))
        .subspaces(vec![c.subspace.clone()])
        .record(&[c.site.key]);
    let mut out = pv.run(&req)?;
    Ok(SpliceResult {
        site_value: out.intervened.sites[&c.site.key].clone(),
        logits: out.intervened.logits,
        collected: if out.collected.is_empty() { None } else { Some(out.collected.remove(0).value) },
    })
}

/// Overwrites one site with a precomputed f32 tensor.
struct Replace {
    site: SiteKey,
    value: Tensor,
}

impl SiteHook for Replace {
    fn on_site(&mut self, site: SiteKey, value: Tensor) -> Result<Tensor> {
        Ok(if site == self.site { self.value.clone() } else { value })
    }
}

/// Captures one site's value without changing it.
struct Capture {
    site: SiteKey,
    seen: Option<Tensor>,
}

impl SiteHook for Capture {
    fn on_site(&mut self, site: SiteKey, value: Tensor) -> Result<Tensor> {
        if site == self.site {
            self.seen = Some(value.clone());
        }
        Ok(value)
    }
}

/// The two-pass oracle: plain forwards, splice on raw f32 vectors, plain
/// forward with the spliced tensor substituted.
pub fn manual_splice(model: &Model, c: &SpliceCase) -> Result<SpliceResult> {
    let key = c.site.key;
    let d = c.site.dim;
    let src = model.forward(&c.source, &[key])?.sites[&key].to_f32_vec();
    let mut cap = Capture { site: key, seen: None };
    model.forward_with_hook(&c.base, &[], &mut cap)?;
    let base_t = cap.seen.expect("site visited");
    let shape = base_t.shape().to_vec();
    let len = shape[1];
    let base = base_t.to_f32_vec();
    let selected: Vec<usize> = match &c.subspace.0 {
        None => (0..d).collect(),
        Some(v) => v.clone(),
    };
    let mut out = base.clone();
    let mut collected = Vec::new();
    for (b, (units, src_units)) in c.base_grid.iter().zip(&c.source_grid).enumerate() {
        for (&u, &su) in units.iter().zip(src_units) {
            let row = (b * len + u) * d;
            let srow = (b * len + su) * d;
            match c.kind {
                InterventionKind::Collect => collected.extend(selected.iter().map(|&i| base[row + i])),
                _ => {
                    for &i in &selected {
                        out[row + i] = match c.kind {
                            InterventionKind::Vanilla => src[srow + i],
                            InterventionKind::Zero => 0.0,
                            InterventionKind::Addition => base[row + i] + src[srow + i],
                            _ => unreachable!(),
                        };
                    }
                }
            }
        }
    }
    let spliced = Tensor::from_f32(&shape, out)?;
    let logits = model
        .forward_with_hook(&c.base, &[], &mut Replace { site: key, value: spliced.clone() })?
        .logits;
    let collected = match c.kind {
        InterventionKind::Collect => {
            let rows = c.base_grid.iter().map(Vec::len).sum::<usize>();
            Some(Tensor::from_f32(&[rows, selected.len()], collected)?)
        }
        _ => None,
    };
    Ok(SpliceResult {
        logits,
        collected,
        site_value: spliced,
    })
}

// ------------------------------------------------------------------- chains

/// A random two-link serial chain and its inputs.
pub struct ChainCase {
    pub specs: Vec<InterventionSpec>,
    pub sites: [SiteKey; 2],
    pub locations: Vec<(Vec<Vec<usize>>, Vec<Vec<usize>>)>,
    pub source_0: ModelInput,
    pub source_1: ModelInput,
    pub base: ModelInput,
}

pub fn random_chain(schema: &ModelSchema, r: &mut ChaCha8Rng) -> ChainCase {
    let sites = schema.sites();
    let mut pick = [r.random_range(0..sites.len()), r.random_range(0..sites.len())];
    pick.sort_unstable();
    let keys = [sites[pick[0]].key, sites[pick[1]].key];
    let kinds = [InterventionKind::Vanilla, InterventionKind::Addition];
    let specs = keys
        .iter()
        .map(|k| InterventionSpec::new(k.layer, k.component.name(), kinds[r.random_range(0..2)].clone()))
        .collect();
    let batch = r.random_range(1..=2);
    let len = r.random_range(2..=8);
    let locations = (0..2)
        .map(|_| {
            let m = r.random_range(1..=len);
            (random_units(r, batch, m, len, false), random_units(r, batch, m, len, true))
        })
        .collect();
    ChainCase {
        specs,
        sites: keys,
        locations,
        source_0: random_tokens(r, batch, len, schema.vocab_size),
        source_1: random_tokens(r, batch, len, schema.vocab_size),
        base: random_tokens(r, batch, len, schema.vocab_size),
    }
}

pub fn serial_logits(model: &Model, c: &ChainCase) -> Result<Tensor> {
    let pv = IntervenableModel::wrap(model.clone(), IntervenableConfig::serial(c.specs.clone()))?;
    let locs = c
        .locations
        .iter()
        .map(|(s, b)| Locations::link(Some(s.clone()), Some(b.clone())))
        .collect();
    let req = Request::new(c.base.clone(), vec![c.source_0.clone(), c.source_1.clone()], UnitLocations(locs));
    Ok(pv.run(&req)?.intervened.logits)
}

/// Two parallel runs: link 0 rewrites `source_1`, whose activation at the
/// second site is gathered by hand and handed to link 1 as a fixed source.
pub fn chained_parallel_logits(model: &Model, c: &ChainCase) -> Result<Tensor> {
    let (s0, b0) = &c.locations[0];
    let (s1, b1) = &c.locations[1];
    let first = IntervenableModel::wrap(model.clone(), IntervenableConfig::parallel(vec![c.specs[0].clone()]))?;
    let req = Request::new(
        c.source_1.clone(),
        vec![c.source_0.clone()],
        UnitLocations(vec![Locations::link(Some(s0.clone()), Some(b0.clone()))]),
    )
    .record(&[c.sites[1]]);
    let mid = first.run(&req)?.intervened.sites[&c.sites[1]].clone();
    let s = mid.shape().to_vec();
    let (len, d) = (s[1], s[2]);
    let values = mid.to_f32_vec();
    let mut rows = Vec::new();
    for (b, units) in s1.iter().enumerate() {
        for &u in units {
            rows.extend_from_slice(&values[(b * len + u) * d..(b * len + u + 1) * d]);
        }
    }
    let m = s1.iter().map(Vec::len).sum::<usize>();
    let fixed = Tensor::from_f32(&[m, d], rows)?;
    let second = IntervenableModel::wrap(model.clone(), IntervenableConfig::parallel(vec![c.specs[1].clone()]))?;
    let req = Request::new(
        c.base.clone(),
        Vec::new(),
        UnitLocations(vec![Locations::link(None, Some(b1.clone()))]),
    )
    .source_representations(vec![Some(fixed)]);
    Ok(second.run(&req)?.intervened.logits)
}

// --------------------------------------------------------------- recurrence

pub fn gru_model(seed: u64) -> Model {
    Model::build(ModelSchema::gru(16, 20, 32), seed).expect("gru builds")
}

/// Cell outputs `[batch, T, d]` with an intervention of `kind` writing base
/// step `t` from source step `source_t`.
pub fn gru_intervened_cells(
    model: &Model,
    kind: InterventionKind,
    base: &ModelInput,
    source: &ModelInput,
    source_t: usize,
    t: usize,
) -> Result<Tensor> {
    let key = SiteKey::new(Component::CellOutput, 0);
    let spec = InterventionSpec::new(0, "cell_output", kind);
    let pv = IntervenableModel::wrap(model.clone(), IntervenableConfig::parallel(vec![spec]))?;
    let batch = base.batch_size();
    let loc = Locations::link(Some(vec![vec![source_t]; batch]), Some(vec![vec![t]; batch]));
    let req = Request::new(base.clone(), vec![source.clone()], UnitLocations(vec![loc])).record(&[key]);
    Ok(pv.run(&req)?.intervened.sites[&key].clone())
}

/// Rows `[b, step, :]` of a `[batch, T, d]` tensor.
pub fn step_rows(t: &Tensor, step: usize) -> Vec<f32> {
    let s = t.shape();
    let (batch, len, d) = (s[0], s[1], s[2]);
    let v = t.to_f32_vec();
    (0..batch).flat_map(|b| v[(b * len + step) * d..(b * len + step + 1) * d].to_vec()).collect()
}

pub fn f32_bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
