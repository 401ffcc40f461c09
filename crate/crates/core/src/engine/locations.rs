// SPDX-License-Identifier: MIT OR Apache-2.0

//! Unit locations: where each intervention reads its source and writes the base.
//!
//! Wire form is a JSON object keyed by link. `"base"` gives one set of
//! locations used on both sides. `"sources->base"` and the serial chain keys
//! `"source_i->source_j"` / `"source_i->base"` take either one side (used for
//! both) or a two-element array `[source_side, base_side]`. A side is `null`,
//! a scalar, a flat list of units, a `[batch][unit]` grid, or a
//! `[intervention][batch][unit]` array whose entries may be `null`.

use serde_json::Value;

use crate::error::{Error, Result};

/// `[batch][unit]` indices.
pub type Grid = Vec<Vec<usize>>;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Locations {
    /// Where to read the source. `None` for constant sources.
    pub source: Option<Grid>,
    /// Where to write the base. `None` reuses the source side.
    pub base: Option<Grid>,
}

impl Locations {
    pub fn both(grid: Grid) -> Self {
        Self {
            source: Some(grid.clone()),
            base: Some(grid),
        }
    }

    pub fn link(source: Option<Grid>, base: Option<Grid>) -> Self {
        Self { source, base }
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_none() && self.base.is_none()
    }

    /// Base-side grid, falling back to the source side.
    pub fn base_grid(&self) -> Option<&Grid> {
        self.base.as_ref().or(self.source.as_ref())
    }

    /// Source-side grid, falling back to the base side.
    pub fn source_grid(&self) -> Option<&Grid> {
        self.source.as_ref().or(self.base.as_ref())
    }
}

/// Per-intervention locations, indexed like the config's spec list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UnitLocations(pub Vec<Locations>);

fn shape_err(msg: impl Into<String>) -> Error {
    Error::IndexShapeMismatch(msg.into())
}

fn depth(v: &Value) -> Result<usize> {
    match v {
        Value::Null => Ok(0),
        Value::Number(_) => Ok(0),
        Value::Array(items) => {
            let mut d = 0;
            for x in items {
                d = d.max(depth(x)?);
            }
            Ok(d + 1)
        }
        _ => Err(shape_err(format!("unexpected value {v} in unit locations"))),
    }
}

fn index(v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| shape_err(format!("location {v} is not a non-negative integer")))
}

fn units(v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::Array(items) => items.iter().map(index).collect(),
        _ => Ok(vec![index(v)?]),
    }
}

/// Broadcast a `[batch][unit]` (or `[1][unit]`) array to `batch` rows.
fn grid(v: &Value, batch: usize) -> Result<Grid> {
    let rows = v.as_array().ok_or_else(|| shape_err("expected a [batch][unit] array"))?;
    let rows: Grid = rows.iter().map(units).collect::<Result<_>>()?;
    match rows.len() {
        n if n == batch => Ok(rows),
        1 => Ok(vec![rows[0].clone(); batch]),
        n => Err(shape_err(format!("locations cover {n} batch rows, batch is {batch}"))),
    }
}

/// One side normalised to `[intervention] -> Option<Grid>`.
fn side(v: &Value, n: usize, batch: usize) -> Result<Vec<Option<Grid>>> {
    match depth(v)? {
        0 if v.is_null() => Ok(vec![None; n]),
        0 => Ok(vec![Some(vec![vec![index(v)?]; batch]); n]),
        1 => Ok(vec![Some(vec![units(v)?; batch]); n]),
        2 => Ok(vec![Some(grid(v, batch)?); n]),
        3 => {
            let per: Vec<&Value> = v.as_array().expect("depth 3 is an array").iter().collect();
            let per = match per.len() {
                k if k == n => per,
                1 => vec![per[0]; n],
                k => return Err(shape_err(format!("locations for {k} interventions, config has {n}"))),
            };
            per.into_iter()
                .map(|x| if x.is_null() { Ok(None) } else { grid(x, batch).map(Some) })
                .collect()
        }
        d => Err(shape_err(format!("unit locations nested {d} deep"))),
    }
}

/// A link value: one side for both, or a `[source, base]` pair.
fn link(v: &Value, n: usize, batch: usize) -> Result<Vec<Locations>> {
    let (src, base) = match v.as_array() {
        Some(pair) if pair.len() == 2 => (side(&pair[0], n, batch)?, side(&pair[1], n, batch)?),
        _ => {
            let s = side(v, n, batch)?;
            (s.clone(), s)
        }
    };
    Ok(src.into_iter().zip(base).map(|(s, b)| Locations::link(s, b)).collect())
}

fn parse_chain_key(key: &str, n: usize) -> Result<usize> {
    let bad = || shape_err(format!("unrecognised link key {key:?}"));
    let (from, to) = key.split_once("->").ok_or_else(bad)?;
    let i: usize = from.strip_prefix("source_").ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let ok = if to == "base" {
        i + 1 == n
    } else {
        to.strip_prefix("source_").and_then(|j| j.parse::<usize>().ok()) == Some(i + 1)
    };
    if !ok || i >= n {
        return Err(bad());
    }
    Ok(i)
}

impl UnitLocations {
    /// The same locations on both sides for every intervention.
    pub fn uniform(grid: Grid, num_interventions: usize) -> Self {
        UnitLocations(vec![Locations::both(grid); num_interventions])
    }

    /// Position `pos` for every batch row and intervention.
    pub fn at(pos: usize, num_interventions: usize, batch: usize) -> Self {
        Self::uniform(vec![vec![pos]; batch], num_interventions)
    }

    pub fn get(&self, i: usize) -> Option<&Locations> {
        self.0.get(i)
    }

    /// Parse the wire form for a config with `num_interventions` specs and a
    /// base batch of `batch` rows.
    pub fn resolve(raw: &Value, num_interventions: usize, batch: usize) -> Result<Self> {
        let n = num_interventions;
        let obj = raw
            .as_object()
            .ok_or_else(|| shape_err("unit locations must be an object keyed by link"))?;
        let mut out = vec![Locations::default(); n];
        let mut whole = false;
        for (key, v) in obj {
            match key.as_str() {
                "base" | "sources->base" => {
                    if whole {
                        return Err(shape_err("both \"base\" and \"sources->base\" given"));
                    }
                    whole = true;
                    out = if key == "base" {
                        side(v, n, batch)?.into_iter().map(|g| Locations::link(g.clone(), g)).collect()
                    } else {
                        link(v, n, batch)?
                    };
                }
                k => {
                    let i = parse_chain_key(k, n)?;
                    out[i] = link(v, 1, batch)?.pop().expect("one link");
                }
            }
        }
        Ok(UnitLocations(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn scalar_broadcasts() {
        let u = UnitLocations::resolve(&json!({"base": 3}), 1, 1).unwrap();
        assert_eq!(u.0[0], Locations::both(vec![vec![3]]));
        let u = UnitLocations::resolve(&json!({"base": 3}), 2, 2).unwrap();
        assert_eq!(u.0[1].base, Some(vec![vec![3], vec![3]]));
    }

    #[test]
    fn per_intervention_tuple() {
        let raw = json!({"sources->base": [[[[1]], [[3]]], [[[1]], [[3]]]]});
        let u = UnitLocations::resolve(&raw, 2, 1).unwrap();
        assert_eq!(u.0[0], Locations::both(vec![vec![1]]));
        assert_eq!(u.0[1], Locations::both(vec![vec![3]]));
    }

    #[test]
    fn null_source_side() {
        let raw = json!({"sources->base": [null, [[[0, 1, 2, 3]]]]});
        let u = UnitLocations::resolve(&raw, 1, 1).unwrap();
        assert_eq!(u.0[0].source, None);
        assert_eq!(u.0[0].base, Some(vec![vec![0, 1, 2, 3]]));
    }

    #[test]
    fn time_link_pair_is_source_then_base() {
        let u = UnitLocations::resolve(&json!({"sources->base": [6, 3]}), 1, 1).unwrap();
        assert_eq!(u.0[0].source, Some(vec![vec![6]]));
        assert_eq!(u.0[0].base, Some(vec![vec![3]]));
    }

    #[test]
    fn chain_keys() {
        let raw = json!({"source_0->source_1": [[[1]], [[1]]], "source_1->base": 4});
        let u = UnitLocations::resolve(&raw, 2, 1).unwrap();
        assert_eq!(u.0[0], Locations::both(vec![vec![1]]));
        assert_eq!(u.0[1], Locations::both(vec![vec![4]]));
        assert!(UnitLocations::resolve(&json!({"source_0->base": 1}), 2, 1).is_err());
        assert!(UnitLocations::resolve(&json!({"source_1->source_3": 1}), 4, 1).is_err());
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(
            UnitLocations::resolve(&json!({"base": [[1], [2], [3]]}), 1, 2),
            Err(Error::IndexShapeMismatch(_))
        ));
        assert!(matches!(
            UnitLocations::resolve(&json!({"base": [[[1]], [[2]], [[3]]]}), 2, 1),
            Err(Error::IndexShapeMismatch(_))
        ));
        assert!(matches!(UnitLocations::resolve(&json!({"base": -1}), 1, 1), Err(Error::IndexShapeMismatch(_))));
        assert!(matches!(UnitLocations::resolve(&json!([1]), 1, 1), Err(Error::IndexShapeMismatch(_))));
    }

    #[test]
    fn batch_grid_is_kept() {
        let u = UnitLocations::resolve(&json!({"base": [[1, 2], [0, 4]]}), 1, 2).unwrap();
        assert_eq!(u.0[0].base, Some(vec![vec![1, 2], vec![0, 4]]));
    }
}
