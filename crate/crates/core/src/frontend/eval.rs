//! Binary64 evaluation of a raw model, before any cleaning.

use std::collections::BTreeMap;

use crate::fxp::real::real_to_f64;
use crate::ir::custom;
use crate::ir::tensor::permute;
use crate::ir::Tensor;
use crate::kernels::reference::{apply_format, concat_f64, conv_f64, pool_f64, softmax_f64, FTensor};

use super::clean::{
    activation_kind, bn_epsilon, broadcast_shape, broadcast_to, infer_raw, raw_order, reshape_target, split_channels,
    to_first_perm, to_last_perm, transpose_perm, window,
};
use super::{attr_int, attr_ints, quantizer_format, FrontendError, Layout, RawModel, RawNode};

fn to_last(x: &FTensor, layout: Layout) -> FTensor {
    if layout == Layout::ChannelsFirst && x.shape.len() >= 2 {
        let (v, s) = permute(&x.values, &x.shape, &to_last_perm(x.shape.len()));
        FTensor::new(s, v)
    } else {
        x.clone()
    }
}

fn from_last(x: FTensor, layout: Layout) -> FTensor {
    if layout == Layout::ChannelsFirst && x.shape.len() >= 2 {
        let (v, s) = permute(&x.values, &x.shape, &to_first_perm(x.shape.len()));
        FTensor::new(s, v)
    } else {
        x
    }
}

fn geo(n: &RawNode, reason: String) -> FrontendError {
    FrontendError::ShapeInferenceFailure { node: n.label().to_string(), reason }
}

fn eval_node(m: &RawModel, n: &RawNode, ins: &[&FTensor]) -> Result<FTensor, FrontendError> {
    let layout = m.layout;
    let x = ins[0];
    if let Some(kind) = activation_kind(n)? {
        return Ok(FTensor::new(x.shape.clone(), x.values.iter().map(|v| kind.eval_f64(*v)).collect()));
    }
    if n.is_quantizer() {
        let (_, f) = quantizer_format(n)?;
        let mut v = x.values.clone();
        apply_format(&f, &mut v);
        return Ok(FTensor::new(x.shape.clone(), v));
    }
    let binary = |f: fn(f64, f64) -> f64| -> Result<FTensor, FrontendError> {
        let y = ins[1];
        let to = broadcast_shape(&x.shape, &y.shape).ok_or_else(|| geo(n, "broadcast".into()))?;
        let a = broadcast_to(&x.values, &x.shape, &to);
        let b = broadcast_to(&y.values, &y.shape, &to);
        Ok(FTensor::new(to, a.iter().zip(&b).map(|(a, b)| f(*a, *b)).collect()))
    };
    Ok(match n.op.as_str() {
        "Identity" => x.clone(),
        "Add" => binary(|a, b| a + b)?,
        "Sub" => binary(|a, b| a - b)?,
        "Mul" => binary(|a, b| a * b)?,
        "MatMul" => {
            let w = ins[1];
            let (k, units) = (w.shape[0], w.shape[1]);
            let mut vals = Vec::with_capacity(x.values.len() / k * units);
            for row in x.values.chunks(k) {
                for j in 0..units {
                    vals.push(row.iter().enumerate().map(|(i, v)| v * w.values[i * units + j]).sum());
                }
            }
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = units;
            FTensor::new(shape, vals)
        }
        "Conv" => {
            let w = ins[1];
            let dims = x.shape.len() - 1;
            let (c, _) = split_channels(&x.shape, layout);
            let f = w.shape[0];
            let depthwise = attr_int(n, "group")?.unwrap_or(1) != 1;
            let win = window(n, dims, Some(w.shape[2..].to_vec()))?;
            let perm: Vec<usize> = (2..dims + 2).chain(if depthwise { [0, 1] } else { [1, 0] }).collect();
            let (k, _) = permute(&w.values, &w.shape, &perm);
            let b = ins.get(2).map(|b| b.values.as_slice());
            let y = conv_f64(&to_last(x, layout), &k, b, &win, if depthwise { c } else { f }, depthwise).map_err(|e| geo(n, e))?;
            from_last(y, layout)
        }
        "MaxPool" | "AveragePool" => {
            let win = window(n, x.shape.len() - 1, None)?;
            let y = pool_f64(&to_last(x, layout), &win, n.op == "MaxPool").map_err(|e| geo(n, e))?;
            from_last(y, layout)
        }
        "BatchNormalization" => {
            let eps = real_to_f64(&bn_epsilon(n)?);
            let xl = to_last(x, layout);
            let c = *xl.shape.last().unwrap();
            let (g, b, mu, var) = (&ins[1].values, &ins[2].values, &ins[3].values, &ins[4].values);
            let vals = xl
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let ch = i % c;
                    (v - mu[ch]) * g[ch] / (var[ch] + eps).sqrt() + b[ch]
                })
                .collect();
            from_last(FTensor::new(xl.shape.clone(), vals), layout)
        }
        "Softmax" => softmax_f64(x),
        "Concat" => {
            let r = x.shape.len() as i64;
            let a = attr_int(n, "axis")?.unwrap_or(0);
            concat_f64(ins, if a < 0 { (a + r) as usize } else { a as usize })
        }
        "Flatten" => FTensor::new(vec![x.values.len()], x.values.clone()),
        "Reshape" => {
            let spec = match attr_ints(n, "shape")? {
                Some(s) => s,
                None => ins[1].values.iter().map(|v| *v as i64).collect(),
            };
            FTensor::new(reshape_target(n, &spec, x.values.len())?, x.values.clone())
        }
        "Transpose" => {
            let (v, s) = permute(&x.values, &x.shape, &transpose_perm(n, x.shape.len())?);
            FTensor::new(s, v)
        }
        tag => {
            let def = custom::lookup(tag).ok_or_else(|| FrontendError::UnsupportedOp { node: n.label().into(), op: tag.into() })?;
            let ts: Vec<Tensor> = ins.iter().map(|t| Tensor::from_f64(t.shape.clone(), &t.values)).collect();
            let y = (def.emulation_fn)(&ts, &n.attrs).map_err(|e| geo(n, e))?;
            FTensor::new(y.shape.clone(), y.to_f64())
        }
    })
}

/// Evaluates a raw model in binary64, returning its outputs by name.
pub fn run_raw(m: &RawModel, inputs: &BTreeMap<String, FTensor>) -> Result<BTreeMap<String, FTensor>, FrontendError> {
    let mut vals: BTreeMap<String, FTensor> = BTreeMap::new();
    for (name, t) in &m.graph.initializers {
        let t = t.to_tensor().map_err(|reason| FrontendError::Schema { path: format!("graph.initializers.{name}"), reason })?;
        vals.insert(name.clone(), FTensor::new(t.shape.clone(), t.to_f64()));
    }
    for i in &m.graph.inputs {
        let x = inputs
            .get(&i.name)
            .ok_or_else(|| FrontendError::Schema { path: format!("inputs.{}", i.name), reason: "missing input".into() })?;
        if x.shape != i.shape {
            return Err(FrontendError::Schema { path: format!("inputs.{}", i.name), reason: format!("expected shape {:?}, got {:?}", i.shape, x.shape) });
        }
        vals.insert(i.name.clone(), x.clone());
    }
    let consts = BTreeMap::new();
    for idx in raw_order(m)? {
        let n = &m.graph.nodes[idx];
        let ins: Vec<&FTensor> = n.inputs.iter().map(|i| &vals[i]).collect();
        if n.op != "Reshape" {
            let shapes: Vec<Vec<usize>> = ins.iter().map(|t| t.shape.clone()).collect();
            infer_raw(n, &shapes, m.layout, &consts)?;
        }
        let y = eval_node(m, n, &ins)?;
        vals.insert(n.outputs[0].clone(), y);
    }
    Ok(m.graph.outputs.iter().map(|o| (o.clone(), vals[o].clone())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{absorb_quant, clean, parse_model};
    use crate::kernels::reference::run_float;
    use serde_json::json;

    fn close(a: &FTensor, b: &FTensor) -> bool {
        a.shape == b.shape && a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1.0))
    }

    fn check(v: serde_json::Value, inputs: Vec<(&str, FTensor)>) {
        let m = parse_model(v.to_string().as_bytes()).unwrap();
        let inputs: BTreeMap<String, FTensor> = inputs.into_iter().map(|(k, t)| (k.to_string(), t)).collect();
        let want = run_raw(&m, &inputs).unwrap();
        for g in [clean(&m).unwrap(), absorb_quant(&clean(&m).unwrap()).unwrap()] {
            let ir_inputs = g.inputs().iter().zip(m.graph.inputs.iter()).map(|(n, r)| (n.to_string(), inputs[&r.name].clone())).collect();
            let got = run_float(&g, &ir_inputs).unwrap();
            for (o, name) in m.graph.outputs.iter().zip(g.outputs()) {
                assert!(close(&want[o], &got[name]), "{o}: {:?} vs {:?}", want[o], got[name]);
            }
        }
    }

    fn ramp(shape: Vec<usize>) -> FTensor {
        let n = shape.iter().product::<usize>();
        FTensor::new(shape, (0..n).map(|i| ((i * 37 % 19) as f64 - 9.0) / 8.0).collect())
    }

    fn data(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{}", ((i * 13 % 11) as f64 - 5.0) / 4.0)).collect()
    }

    #[test]
    fn channels_first_cnn_matches() {
        let v = json!({
            "schema": 1,
            "layout": "channels_first",
            "graph": {
                "inputs": [{"name": "x", "shape": [2, 6, 6]}],
                "outputs": ["y"],
                "nodes": [
                    {"op": "Conv", "inputs": ["x", "W", "B"], "outputs": ["c"], "attrs": {"pads": [1, 1, 1, 1]}},
                    {"op": "BatchNormalization", "inputs": ["c", "g", "b", "mu", "var"], "outputs": ["n"]},
                    {"op": "Relu", "inputs": ["n"], "outputs": ["r"]},
                    {"op": "Quant", "inputs": ["r"], "outputs": ["rq"], "attrs": {"bitwidth": 8, "scale": 0.0625, "signed": false}},
                    {"op": "MaxPool", "inputs": ["rq"], "outputs": ["p"], "attrs": {"kernel_shape": [2, 2], "strides": [2, 2]}},
                    {"op": "Flatten", "inputs": ["p"], "outputs": ["f"]},
                    {"op": "MatMul", "inputs": ["f", "D"], "outputs": ["h"]},
                    {"op": "Add", "inputs": ["h", "e"], "outputs": ["s"]},
                    {"op": "Softmax", "inputs": ["s"], "outputs": ["y"]}
                ],
                "initializers": {
                    "W": {"shape": [3, 2, 3, 3], "data": data(54)},
                    "B": {"shape": [3], "data": ["0.5", "0", "-0.5"]},
                    "g": {"shape": [3], "data": ["1", "2", "0.5"]},
                    "b": {"shape": [3], "data": ["0", "0.25", "-1"]},
                    "mu": {"shape": [3], "data": ["0.1", "0", "-0.2"]},
                    "var": {"shape": [3], "data": ["1", "4", "0.25"]},
                    "D": {"shape": [27, 4], "data": data(108)},
                    "e": {"shape": [4], "data": ["1", "2", "3", "4"]}
                }
            }
        });
        check(v, vec![("x", ramp(vec![2, 6, 6]))]);
    }

    #[test]
    fn depthwise_pointwise_concat_match() {
        let v = json!({
            "schema": 1,
            "graph": {
                "inputs": [{"name": "x", "shape": [5, 3]}],
                "outputs": ["y", "z"],
                "nodes": [
                    {"op": "Conv", "inputs": ["x", "DW"], "outputs": ["d"], "attrs": {"group": 3, "pads": [1, 1]}},
                    {"op": "Conv", "inputs": ["d", "PW"], "outputs": ["p"]},
                    {"op": "Tanh", "inputs": ["p"], "outputs": ["t"]},
                    {"op": "AveragePool", "inputs": ["x"], "outputs": ["a"], "attrs": {"kernel_shape": [2], "pads": [1, 0]}},
                    {"op": "Sub", "inputs": ["a", "k"], "outputs": ["as"]},
                    {"op": "Concat", "inputs": ["t", "as"], "outputs": ["y"], "attrs": {"axis": -1}},
                    {"op": "Transpose", "inputs": ["x"], "outputs": ["z"], "attrs": {"perm": [1, 0]}}
                ],
                "initializers": {
                    "DW": {"shape": [3, 1, 3], "data": data(9)},
                    "PW": {"shape": [2, 3, 1], "data": data(6)},
                    "k": {"shape": [3], "data": ["1", "0.5", "-2"]}
                }
            }
        });
        check(v, vec![("x", ramp(vec![5, 3]))]);
    }
}
