// SPDX-License-Identifier: MIT OR Apache-2.0

//! Key-value configuration documents.
//!
//! A document is a single spec object, an array of spec objects, or an
//! object `{"interventions": [...], "mode": "serial"}`. Spec keys:
//! `layer`, `component`, `unit`, `intervention_type`, `low_rank_dimension`,
//! `constant_source`, plus the optional extras `noise` (`{"scale", "seed"}`)
//! and `temperature` for the kinds that use them. A `mode` key on a spec
//! object sets the mode of the whole config.

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::interventions::{InterventionKind, Registry};
use crate::model::Unit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Parallel,
    Serial,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Parallel => "parallel",
            Mode::Serial => "serial",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "parallel" => Ok(Mode::Parallel),
            "serial" => Ok(Mode::Serial),
            other => Err(Error::MalformedDocument(format!("unknown mode {other:?}"))),
        }
    }
}

/// A fixed source vector, inline or stored as a blob inside a bundle.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstantSource {
    Values(Vec<f64>),
    Blob(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseOptions {
    /// `None` means three times the standard deviation of the token embedding.
    pub scale: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec {
    pub layer: usize,
    /// Site name; checked against the model schema at wrap time.
    pub component: String,
    /// `None` resolves to the architecture's unit at wrap time.
    pub unit: Option<Unit>,
    pub kind: InterventionKind,
    pub low_rank_dimension: Option<usize>,
    pub constant_source: Option<ConstantSource>,
    pub noise: Option<NoiseOptions>,
    pub temperature: Option<f64>,
}

impl InterventionSpec {
    pub fn new(layer: usize, component: &str, kind: InterventionKind) -> Self {
        Self {
            layer,
            component: component.to_string(),
            unit: None,
            kind,
            low_rank_dimension: None,
            constant_source: None,
            noise: None,
            temperature: None,
        }
    }

    pub fn with_unit(mut self, unit: Unit) -> Self {
        self.unit = Some(unit);
        self
    }

    pub fn with_low_rank(mut self, k: usize) -> Self {
        self.low_rank_dimension = Some(k);
        self
    }

    pub fn with_constant(mut self, values: Vec<f64>) -> Self {
        self.constant_source = Some(ConstantSource::Values(values));
        self
    }

    pub fn with_noise(mut self, scale: Option<f64>, seed: u64) -> Self {
        self.noise = Some(NoiseOptions { scale, seed });
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = Some(t);
        self
    }

    fn to_value(&self) -> Value {
        let mut m = Map::new();
        m.insert("layer".into(), json!(self.layer));
        m.insert("component".into(), json!(self.component));
        if let Some(u) = self.unit {
            m.insert("unit".into(), json!(u.name()));
        }
        m.insert("intervention_type".into(), json!(self.kind.name()));
        if let Some(k) = self.low_rank_dimension {
            m.insert("low_rank_dimension".into(), json!(k));
        }
        match &self.constant_source {
            Some(ConstantSource::Values(v)) => {
                m.insert("constant_source".into(), json!(v));
            }
            Some(ConstantSource::Blob(name)) => {
                m.insert("constant_source".into(), json!({ "blob": name }));
            }
            None => {}
        }
        if let Some(n) = self.noise {
            let mut nm = Map::new();
            if let Some(s) = n.scale {
                nm.insert("scale".into(), json!(s));
            }
            nm.insert("seed".into(), json!(n.seed));
            m.insert("noise".into(), Value::Object(nm));
        }
        if let Some(t) = self.temperature {
            m.insert("temperature".into(), json!(t));
        }
        Value::Object(m)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IntervenableConfig {
    pub interventions: Vec<InterventionSpec>,
    pub mode: Mode,
}

const SPEC_KEYS: [&str; 9] = [
    "layer",
    "component",
    "unit",
    "intervention_type",
    "low_rank_dimension",
    "constant_source",
    "noise",
    "temperature",
    "mode",
];

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedDocument(msg.into())
}

fn get_usize(obj: &Map<String, Value>, key: &str) -> Result<Option<usize>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(|n| Some(n as usize))
            .ok_or_else(|| malformed(format!("{key} must be a non-negative integer"))),
    }
}

fn get_f64(obj: &Map<String, Value>, key: &str) -> Result<Option<f64>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| malformed(format!("{key} must be a number"))),
    }
}

fn get_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<Option<&'a str>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_str()
            .map(Some)
            .ok_or_else(|| malformed(format!("{key} must be a string"))),
    }
}

fn parse_constant(v: &Value) -> Result<ConstantSource> {
    match v {
        Value::Array(items) => items
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| malformed("constant_source entries must be numbers")))
            .collect::<Result<Vec<_>>>()
            .map(ConstantSource::Values),
        Value::Object(o) => match o.get("blob").and_then(Value::as_str) {
            Some(name) => Ok(ConstantSource::Blob(name.to_string())),
            None => Err(malformed("constant_source object needs a \"blob\" name")),
        },
        _ => Err(malformed("constant_source must be a number array or {\"blob\": name}")),
    }
}

fn parse_spec(obj: &Map<String, Value>, registry: &Registry) -> Result<(InterventionSpec, Option<Mode>)> {
    if let Some(key) = obj.keys().find(|k| !SPEC_KEYS.contains(&k.as_str())) {
        return Err(malformed(format!("unknown key {key:?}")));
    }
    let component = get_str(obj, "component")?
        .ok_or_else(|| malformed("spec needs a component"))?
        .to_string();
    let layer = get_usize(obj, "layer")?.unwrap_or(0);
    let unit = get_str(obj, "unit")?
        .map(|u| Unit::parse(u).ok_or_else(|| malformed(format!("unknown unit {u:?}"))))
        .transpose()?;
    let kind = registry.resolve(get_str(obj, "intervention_type")?.unwrap_or("vanilla"))?;
    let constant_source = obj
        .get("constant_source")
        .filter(|v| !v.is_null())
        .map(parse_constant)
        .transpose()?;
    let noise = match obj.get("noise") {
        None | Some(Value::Null) => None,
        Some(Value::Object(n)) => Some(NoiseOptions {
            scale: get_f64(n, "scale")?,
            seed: get_usize(n, "seed")?.unwrap_or(0) as u64,
        }),
        Some(_) => return Err(malformed("noise must be an object")),
    };
    let mode = get_str(obj, "mode")?.map(Mode::parse).transpose()?;
    let spec = InterventionSpec {
        layer,
        component,
        unit,
        kind,
        low_rank_dimension: get_usize(obj, "low_rank_dimension")?,
        constant_source,
        noise,
        temperature: get_f64(obj, "temperature")?,
    };
    Ok((spec, mode))
}

impl IntervenableConfig {
    pub fn new(interventions: Vec<InterventionSpec>, mode: Mode) -> Self {
        Self { interventions, mode }
    }

    pub fn parallel(interventions: Vec<InterventionSpec>) -> Self {
        Self::new(interventions, Mode::Parallel)
    }

    pub fn serial(interventions: Vec<InterventionSpec>) -> Self {
        Self::new(interventions, Mode::Serial)
    }

    pub fn len(&self) -> usize {
        self.interventions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interventions.is_empty()
    }

    /// Parse a document with the builtin kinds only.
    pub fn parse(doc: &Value) -> Result<Self> {
        Self::parse_with(doc, &Registry::new())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        Self::parse(&doc)
    }

    pub fn parse_with(doc: &Value, registry: &Registry) -> Result<Self> {
        let (items, mut mode) = match doc {
            Value::Object(o) if o.contains_key("interventions") => {
                if let Some(k) = o.keys().find(|k| *k != "interventions" && *k != "mode") {
                    return Err(malformed(format!("unknown key {k:?}")));
                }
                let items = o["interventions"]
                    .as_array()
                    .ok_or_else(|| malformed("interventions must be an array"))?;
                (items.iter().collect::<Vec<_>>(), get_str(o, "mode")?.map(Mode::parse).transpose()?)
            }
            Value::Object(_) => (vec![doc], None),
            Value::Array(items) => (items.iter().collect(), None),
            _ => return Err(malformed("config must be an object or an array of objects")),
        };
        if items.is_empty() {
            return Err(malformed("config has no interventions"));
        }
        let mut specs = Vec::with_capacity(items.len());
        for item in items {
            let obj = item.as_object().ok_or_else(|| malformed("each intervention must be an object"))?;
            let (spec, m) = parse_spec(obj, registry)?;
            match (mode, m) {
                (Some(a), Some(b)) if a != b => return Err(malformed("conflicting modes")),
                (None, Some(b)) => mode = Some(b),
                _ => {}
            }
            specs.push(spec);
        }
        Ok(Self {
            interventions: specs,
            mode: mode.unwrap_or_default(),
        })
    }

    /// Canonical document form; `parse(to_document())` returns an equal config.
    pub fn to_document(&self) -> Value {
        json!({
            "mode": self.mode.name(),
            "interventions": self.interventions.iter().map(InterventionSpec::to_value).collect::<Vec<_>>(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_object_defaults() {
        let cfg = IntervenableConfig::parse(&json!({"layer": 0, "component": "mlp_output", "intervention_type": "vanilla"})).unwrap();
        assert_eq!(cfg.mode, Mode::Parallel);
        assert_eq!(cfg.len(), 1);
        assert_eq!(cfg.interventions[0].kind, InterventionKind::Vanilla);
        assert_eq!(cfg.interventions[0].unit, None);
    }

    #[test]
    fn array_with_serial_mode() {
        let doc = json!([
            {"layer": 3, "component": "block_output", "mode": "serial"},
            {"layer": 6, "component": "block_output", "mode": "serial"}
        ]);
        let cfg = IntervenableConfig::parse(&doc).unwrap();
        assert_eq!(cfg.mode, Mode::Serial);
        assert_eq!(cfg.interventions[1].layer, 6);
    }

    #[test]
    fn unknown_component_is_accepted_until_wrap() {
        let cfg = IntervenableConfig::parse(&json!({"component": "nonexistent_site"})).unwrap();
        assert_eq!(cfg.interventions[0].component, "nonexistent_site");
    }

    #[test]
    fn errors() {
        assert!(matches!(
            IntervenableConfig::parse(&json!({"component": "mlp_output", "intervention_type": "warp"})),
            Err(Error::UnknownKind(_))
        ));
        assert!(matches!(IntervenableConfig::parse(&json!(3)), Err(Error::MalformedDocument(_))));
        assert!(matches!(
            IntervenableConfig::parse(&json!({"component": "mlp_output", "layr": 1})),
            Err(Error::MalformedDocument(_))
        ));
        assert!(matches!(
            IntervenableConfig::parse(&json!({"component": "mlp_output", "layer": -1})),
            Err(Error::MalformedDocument(_))
        ));
        assert!(matches!(IntervenableConfig::parse_str("{"), Err(Error::MalformedDocument(_))));
    }

    #[test]
    fn document_roundtrip() {
        let cfg = IntervenableConfig::serial(vec![
            InterventionSpec::new(1, "mlp_output", InterventionKind::LowRankRotated).with_low_rank(2),
            InterventionSpec::new(2, "block_output", InterventionKind::Noise)
                .with_noise(Some(0.5), 9)
                .with_unit(Unit::Pos),
            InterventionSpec::new(3, "block_output", InterventionKind::Vanilla).with_constant(vec![0.25, -1.0]),
            InterventionSpec::new(3, "block_output", InterventionKind::BoundlessRotated).with_temperature(0.1),
        ]);
        let back = IntervenableConfig::parse(&cfg.to_document()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn custom_kinds_need_registration() {
        let doc = json!({"component": "mlp_output", "intervention_type": "double"});
        assert!(IntervenableConfig::parse(&doc).is_err());
        let mut reg = Registry::new();
        reg.register_custom("double", |b, _, _| Ok(b.scale(2.0))).unwrap();
        let cfg = IntervenableConfig::parse_with(&doc, &reg).unwrap();
        assert_eq!(cfg.interventions[0].kind, InterventionKind::Custom("double".into()));
    }
}
