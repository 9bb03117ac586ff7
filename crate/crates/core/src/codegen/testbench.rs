//! Sample files: a JSON array with one object per sample, mapping tensor
//! names to flat row-major value lists. Values are exact decimal strings;
//! plain JSON numbers are accepted on input.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use crate::fxp::real::{parse_real, real_to_string, Real};
use crate::fxp::WeightFormat;
use crate::ir::tensor::numel;
use crate::ir::{ModelGraph, QTensor, Tensor};
use crate::kernels::value_type;

use super::CodegenError;

pub fn samples_to_json(samples: &[BTreeMap<String, QTensor>]) -> String {
    let arr: Vec<Value> = samples
        .iter()
        .map(|m| {
            let obj: Map<String, Value> =
                m.iter().map(|(k, q)| (k.clone(), Value::Array(q.reals().iter().map(|r| Value::String(real_to_string(r))).collect()))).collect();
            Value::Object(obj)
        })
        .collect();
    serde_json::to_string_pretty(&Value::Array(arr)).expect("samples serialize") + "\n"
}

fn bad(msg: impl Into<String>) -> CodegenError {
    CodegenError::BadSamples(msg.into())
}

fn value_real(v: &Value) -> Result<Real, CodegenError> {
    let s = match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        other => return Err(bad(format!("expected a number, got {other}"))),
    };
    parse_real(&s).map_err(|e| bad(e.to_string()))
}

/// Raw sample objects: name to exact values.
pub fn parse_values(text: &str) -> Result<Vec<BTreeMap<String, Vec<Real>>>, CodegenError> {
    let v: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let Value::Array(items) = v else { return Err(bad("top level must be an array of samples")) };
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let Value::Object(obj) = item else { return Err(bad(format!("sample {i} is not an object"))) };
        let mut m = BTreeMap::new();
        for (k, vals) in obj {
            let Value::Array(vals) = vals else { return Err(bad(format!("sample {i}, '{k}': expected an array"))) };
            m.insert(k.clone(), vals.iter().map(value_real).collect::<Result<_, _>>()?);
        }
        out.push(m);
    }
    Ok(out)
}

/// Input samples quantized onto each model input's type.
pub fn parse_samples(g: &ModelGraph, text: &str) -> Result<Vec<BTreeMap<String, QTensor>>, CodegenError> {
    let raw = parse_values(text)?;
    let mut out = Vec::new();
    for (i, m) in raw.into_iter().enumerate() {
        let mut s = BTreeMap::new();
        for name in g.inputs() {
            let vals = m.get(name).ok_or_else(|| bad(format!("sample {i} lacks input '{name}'")))?;
            let shape = g.shape(name).to_vec();
            if vals.len() != numel(&shape) {
                return Err(bad(format!("sample {i}, '{name}': {} values for shape {shape:?}", vals.len())));
            }
            let t = value_type(g, name).ok_or_else(|| CodegenError::UnresolvedPrecision(name.to_string()))?;
            s.insert(name.to_string(), Tensor::new(shape, vals.clone()).quantize(WeightFormat::Fixed(t)));
        }
        out.push(s);
    }
    Ok(out)
}

/// Checks emulated outputs against an expected sample file, exactly.
pub fn compare(expected: &str, got: &[BTreeMap<String, QTensor>]) -> Result<(), CodegenError> {
    let exp = parse_values(expected)?;
    if exp.len() != got.len() {
        return Err(bad(format!("{} expected samples, {} computed", exp.len(), got.len())));
    }
    for (i, (e, g)) in exp.iter().zip(got).enumerate() {
        for (name, ev) in e {
            let q = g.get(name).ok_or_else(|| bad(format!("no output '{name}'")))?;
            let gv = q.reals();
            if gv.len() != ev.len() {
                return Err(bad(format!("sample {i}, '{name}': {} expected values, {} computed", ev.len(), gv.len())));
            }
            if let Some(k) = (0..ev.len()).find(|&k| ev[k] != gv[k]) {
                return Err(CodegenError::Mismatch {
                    sample: i,
                    output: name.clone(),
                    index: k,
                    expected: real_to_string(&ev[k]),
                    got: real_to_string(&gv[k]),
                });
            }
        }
    }
    Ok(())
}
