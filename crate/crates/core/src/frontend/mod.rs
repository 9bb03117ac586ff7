//! Serialized model ingestion: parsing, cleaning and quantizer absorption.

mod absorb;
mod clean;
pub mod eval;
mod export;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::real::{dyadic_exponent, parse_real, pow2, Real};
use crate::fxp::{FixedPointType, Overflow, Rounding, WeightFormat};
use crate::ir::tensor::numel;
use crate::ir::{IrError, QuantizerKind, Tensor};

pub use absorb::absorb_quant;
pub use clean::clean;
pub use export::export_model;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrontendError {
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("unsupported quantizer at '{node}': {reason}")]
    UnsupportedQuantizer { node: String, reason: String },
    #[error("unsupported op '{op}' at '{node}'")]
    UnsupportedOp { node: String, op: String },
    #[error("shape inference failed at '{node}': {reason}")]
    ShapeInferenceFailure { node: String, reason: String },
    #[error("conflicting quantizers on '{0}'")]
    ConflictingQuantizers(String),
    #[error(transparent)]
    Ir(#[from] IrError),
}

fn schema(path: impl Into<String>, reason: impl Into<String>) -> FrontendError {
    FrontendError::Schema { path: path.into(), reason: reason.into() }
}

/// Data layout of every rank ≥ 2 activation tensor in the raw model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    ChannelsLast,
    ChannelsFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawInput {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Initializer with exact decimal data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<String>,
}

impl RawTensor {
    pub fn from_tensor(t: &Tensor) -> Self {
        RawTensor { shape: t.shape.clone(), data: t.values.iter().map(crate::fxp::real::real_to_string).collect() }
    }

    pub fn to_tensor(&self) -> Result<Tensor, String> {
        if numel(&self.shape) != self.data.len() {
            return Err(format!("shape {:?} needs {} values, got {}", self.shape, numel(&self.shape), self.data.len()));
        }
        let values = self.data.iter().map(|s| parse_real(s).map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
        Ok(Tensor::new(self.shape.clone(), values))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawNode {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub op: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGraph {
    pub inputs: Vec<RawInput>,
    pub outputs: Vec<String>,
    pub nodes: Vec<RawNode>,
    #[serde(default)]
    pub initializers: BTreeMap<String, RawTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub schema: u32,
    #[serde(default)]
    pub layout: Layout,
    pub graph: RawGraph,
}

impl RawNode {
    pub fn new(op: &str, inputs: &[&str], output: &str) -> Self {
        RawNode {
            name: String::new(),
            op: op.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: vec![output.to_string()],
            attrs: BTreeMap::new(),
        }
    }

    pub fn attr(mut self, key: &str, v: serde_json::Value) -> Self {
        self.attrs.insert(key.to_string(), v);
        self
    }

    /// Display label for diagnostics: the node name or its output tensor.
    pub fn label(&self) -> &str {
        if self.name.is_empty() {
            self.outputs.first().map(String::as_str).unwrap_or("?")
        } else {
            &self.name
        }
    }

    pub fn is_quantizer(&self) -> bool {
        matches!(self.op.as_str(), "Quant" | "BipolarQuant" | "Trunc")
    }
}

pub(crate) fn attr_real(node: &RawNode, key: &str) -> Result<Option<Real>, FrontendError> {
    let bad = |why: String| schema(format!("{}.attrs.{key}", node.label()), why);
    match node.attrs.get(key) {
        None => Ok(None),
        Some(serde_json::Value::Number(n)) => parse_real(&n.to_string()).map(Some).map_err(|e| bad(e.to_string())),
        Some(serde_json::Value::String(s)) => parse_real(s).map(Some).map_err(|e| bad(e.to_string())),
        Some(v) => Err(bad(format!("expected a number, got {v}"))),
    }
}

pub(crate) fn attr_int(node: &RawNode, key: &str) -> Result<Option<i64>, FrontendError> {
    match node.attrs.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_i64()
            .map(Some)
            .ok_or_else(|| schema(format!("{}.attrs.{key}", node.label()), format!("expected an integer, got {v}"))),
    }
}

pub(crate) fn attr_ints(node: &RawNode, key: &str) -> Result<Option<Vec<i64>>, FrontendError> {
    match node.attrs.get(key) {
        None => Ok(None),
        Some(serde_json::Value::Array(a)) => a
            .iter()
            .map(|v| v.as_i64())
            .collect::<Option<Vec<_>>>()
            .map(Some)
            .ok_or_else(|| schema(format!("{}.attrs.{key}", node.label()), "expected an integer list")),
        Some(v) => Err(schema(format!("{}.attrs.{key}", node.label()), format!("expected an integer list, got {v}"))),
    }
}

fn attr_bool(node: &RawNode, key: &str, default: bool) -> Result<bool, FrontendError> {
    match node.attrs.get(key) {
        None => Ok(default),
        Some(serde_json::Value::Bool(b)) => Ok(*b),
        Some(serde_json::Value::Number(n)) if n.as_i64().is_some() => Ok(n.as_i64() != Some(0)),
        Some(v) => Err(schema(format!("{}.attrs.{key}", node.label()), format!("expected a boolean, got {v}"))),
    }
}

fn attr_str<'a>(node: &'a RawNode, key: &str, default: &'a str) -> Result<&'a str, FrontendError> {
    match node.attrs.get(key) {
        None => Ok(default),
        Some(serde_json::Value::String(s)) => Ok(s),
        Some(v) => Err(schema(format!("{}.attrs.{key}", node.label()), format!("expected a string, got {v}"))),
    }
}

/// Exponent `k` when `x = 2^k`.
fn pow2_exponent(x: &Real) -> Option<i32> {
    let e = dyadic_exponent(x)?;
    (x == &pow2(e)).then_some(e)
}

/// The weight format a quantizer node realizes.
pub fn quantizer_format(node: &RawNode) -> Result<(QuantizerKind, WeightFormat), FrontendError> {
    let unsupported = |reason: String| FrontendError::UnsupportedQuantizer { node: node.label().to_string(), reason };
    let scale = attr_real(node, "scale")?.unwrap_or_else(|| pow2(0));
    let k = pow2_exponent(&scale).ok_or_else(|| unsupported(format!("scale {} is not a power of two", crate::fxp::real::real_to_string(&scale))))?;
    let zp = attr_real(node, "zero_point")?.unwrap_or_default();
    if zp != Real::default() {
        return Err(unsupported(format!("zero point {} is not zero", crate::fxp::real::real_to_string(&zp))));
    }
    let bits = |key: &str| -> Result<u32, FrontendError> {
        let b = attr_int(node, key)?.ok_or_else(|| schema(format!("{}.attrs.{key}", node.label()), "missing"))?;
        u32::try_from(b).ok().filter(|b| *b >= 1).ok_or_else(|| unsupported(format!("{key} {b}")))
    };
    let fixed = |w: u32, i: i32, signed: bool, r: Rounding| {
        FixedPointType::new(w, i, signed).map(|t| t.with_modes(r, Overflow::Sat)).map_err(|e| unsupported(e.to_string()))
    };
    match node.op.as_str() {
        "Quant" => {
            let b = bits("bitwidth")?;
            if attr_int(node, "narrow")?.unwrap_or(0) != 0 {
                return Err(unsupported("narrow range".into()));
            }
            let signed = attr_bool(node, "signed", true)?;
            let r = match attr_str(node, "rounding", "ROUND")? {
                "ROUND" => Rounding::Rnd,
                "FLOOR" => Rounding::Trn,
                other => return Err(unsupported(format!("rounding mode {other}"))),
            };
            Ok((QuantizerKind::Quant, WeightFormat::Fixed(fixed(b, b as i32 + k, signed, r)?)))
        }
        "BipolarQuant" => {
            if k != 0 {
                return Err(unsupported("bipolar scale must be 1".into()));
            }
            Ok((QuantizerKind::BipolarQuant, WeightFormat::Binary))
        }
        "Trunc" => {
            let bin = bits("input_bitwidth")?;
            let bout = bits("output_bitwidth")?;
            if bout > bin {
                return Err(unsupported(format!("output width {bout} exceeds input width {bin}")));
            }
            if attr_str(node, "rounding", "FLOOR")? != "FLOOR" {
                return Err(unsupported("Trunc supports FLOOR rounding only".into()));
            }
            let signed = attr_bool(node, "signed", true)?;
            Ok((QuantizerKind::Trunc, WeightFormat::Fixed(fixed(bout, bin as i32 + k, signed, Rounding::Trn)?)))
        }
        _ => unreachable!("not a quantizer"),
    }
}

impl RawModel {
    /// Every tensor name the graph defines: inputs, initializers, node outputs.
    fn check(&self) -> Result<(), FrontendError> {
        if self.schema != 1 {
            return Err(schema("schema", format!("unsupported schema {}", self.schema)));
        }
        let g = &self.graph;
        let mut defined = BTreeSet::new();
        for (i, inp) in g.inputs.iter().enumerate() {
            if inp.shape.is_empty() || inp.shape.contains(&0) {
                return Err(schema(format!("graph.inputs[{i}].shape"), "shape must be non-empty and positive"));
            }
            if inp.shape.len() > 4 {
                return Err(schema(format!("graph.inputs[{i}].shape"), "rank above 4 is not supported"));
            }
            if !defined.insert(inp.name.clone()) {
                return Err(schema(format!("graph.inputs[{i}].name"), format!("duplicate tensor '{}'", inp.name)));
            }
        }
        for (name, t) in &g.initializers {
            t.to_tensor().map_err(|e| schema(format!("graph.initializers.{name}"), e))?;
            if !defined.insert(name.clone()) {
                return Err(schema(format!("graph.initializers.{name}"), "duplicate tensor"));
            }
        }
        let mut names = BTreeSet::new();
        for (i, n) in g.nodes.iter().enumerate() {
            if !n.name.is_empty() && !names.insert(n.name.clone()) {
                return Err(schema(format!("graph.nodes[{i}].name"), format!("duplicate node name '{}'", n.name)));
            }
            if n.outputs.len() != 1 {
                return Err(schema(format!("graph.nodes[{i}].outputs"), "exactly one output per node"));
            }
            if !defined.insert(n.outputs[0].clone()) {
                return Err(schema(format!("graph.nodes[{i}].outputs"), format!("duplicate tensor '{}'", n.outputs[0])));
            }
            if n.is_quantizer() {
                quantizer_format(n)?;
            }
        }
        for (i, n) in g.nodes.iter().enumerate() {
            for (j, inp) in n.inputs.iter().enumerate() {
                if !defined.contains(inp) {
                    return Err(schema(format!("graph.nodes[{i}].inputs[{j}]"), format!("unknown tensor '{inp}'")));
                }
            }
        }
        for (i, o) in g.outputs.iter().enumerate() {
            if !defined.contains(o) {
                return Err(schema(format!("graph.outputs[{i}]"), format!("unknown tensor '{o}'")));
            }
        }
        if g.outputs.is_empty() {
            return Err(schema("graph.outputs", "at least one output is required"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

/// Parses and validates a serialized model.
pub fn parse_model(bytes: &[u8]) -> Result<RawModel, FrontendError> {
    let text = std::str::from_utf8(bytes).map_err(|e| schema("$", format!("not UTF-8: {e}")))?;
    let m: RawModel = serde_json::from_str(text).map_err(|e| schema(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    m.check()?;
    Ok(m)
}

/// Parses a model and runs cleaning and quantizer absorption.
pub fn load_model(bytes: &[u8]) -> Result<crate::ir::ModelGraph, FrontendError> {
    absorb_quant(&clean(&parse_model(bytes)?)?)
}
