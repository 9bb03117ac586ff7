use std::collections::BTreeMap;

use crate::fxp::WeightFormat;
use crate::ir::{LayerNode, ModelGraph, Op, Precision, Role};

use super::FrontendError;

fn rewire(nodes: &mut [LayerNode], outputs: &mut [String], old: &str, new: &str) {
    for n in nodes.iter_mut() {
        for i in n.inputs.iter_mut().chain(n.params.values_mut()) {
            if i == old {
                *i = new.to_string();
            }
        }
    }
    for o in outputs.iter_mut() {
        if o == old {
            *o = new.to_string();
        }
    }
}

fn quant_format(n: &LayerNode) -> Option<WeightFormat> {
    match n.op {
        Op::Quant { format, .. } => Some(format),
        _ => None,
    }
}

/// One absorption step, or `None` when nothing is left to absorb.
fn step(g: &ModelGraph) -> Result<Option<(Vec<LayerNode>, Vec<String>)>, FrontendError> {
    let by_name: BTreeMap<&str, &LayerNode> = g.nodes().map(|n| (n.name.as_str(), n)).collect();
    for q in g.nodes() {
        let Some(format) = quant_format(q) else { continue };
        let src = by_name[q.inputs[0].as_str()];
        let mut nodes = g.nodes_vec();
        let mut outputs = g.outputs().to_vec();

        if quant_format(src) == Some(format) || src.precision(Role::Result) == Precision::Quantized(format) {
            rewire(&mut nodes, &mut outputs, &q.name, &src.name);
            nodes.retain(|n| n.name != q.name);
            return Ok(Some((nodes, outputs)));
        }

        let consumers = g.consumers(&q.name);
        let is_output = g.outputs().contains(&q.name);
        let param_only = !consumers.is_empty()
            && !is_output
            && consumers.iter().all(|c| {
                let c = by_name[c];
                !c.inputs.contains(&q.name) && c.params.iter().all(|(k, v)| v != &q.name || k == "kernel" || k == "bias")
            });
        if matches!(src.op, Op::Constant) && param_only {
            for n in nodes.iter_mut() {
                let slots: Vec<String> = n.params.iter().filter(|(_, v)| **v == q.name).map(|(k, _)| k.clone()).collect();
                for slot in slots {
                    let role = if slot == "kernel" { Role::Weight } else { Role::Bias };
                    match n.precision(role) {
                        Precision::Quantized(f) if f != format => {
                            return Err(FrontendError::ConflictingQuantizers(format!("{}.{}", n.name, role.name())));
                        }
                        _ => n.set_precision(role, Precision::Quantized(format)),
                    }
                    n.params.insert(slot, src.name.clone());
                }
            }
            nodes.retain(|n| n.name != q.name);
            return Ok(Some((nodes, outputs)));
        }

        let src_sole = g.consumers(&src.name) == [q.name.as_str()] && !g.outputs().contains(&src.name);
        if let WeightFormat::Fixed(_) = format {
            if src_sole && src.precision(Role::Result).is_auto() && quant_format(src).is_none() {
                for n in nodes.iter_mut() {
                    if n.name == src.name {
                        n.set_precision(Role::Result, Precision::Quantized(format));
                    }
                }
                rewire(&mut nodes, &mut outputs, &q.name, &src.name);
                nodes.retain(|n| n.name != q.name);
                return Ok(Some((nodes, outputs)));
            }
        }
    }
    Ok(None)
}

/// Turns quantizer nodes into precision annotations where that is exact.
///
/// Quantizers on parameters become weight or bias formats; a fixed-point
/// quantizer that is the only reader of an activation becomes that
/// producer's result type. Anything else stays a `Quant` node.
pub fn absorb_quant(g: &ModelGraph) -> Result<ModelGraph, FrontendError> {
    let mut g = g.clone();
    while let Some((nodes, outputs)) = step(&g)? {
        g = g.rebuild(nodes, outputs)?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{clean, parse_model};
    use crate::fxp::FixedPointType;
    use crate::ir::Tensor;
    use serde_json::json;

    fn quant(input: &str, out: &str, bits: u32, scale: &str) -> serde_json::Value {
        json!({"op": "Quant", "inputs": [input], "outputs": [out], "attrs": {"bitwidth": bits, "scale": scale}})
    }

    fn load(nodes: Vec<serde_json::Value>, out: &str) -> Result<ModelGraph, FrontendError> {
        let v = json!({
            "schema": 1,
            "graph": {
                "inputs": [{"name": "x", "shape": [2]}],
                "outputs": [out],
                "nodes": nodes,
                "initializers": {
                    "W": {"shape": [2, 2], "data": ["0.3", "-0.6", "1", "-1"]},
                    "b": {"shape": [2], "data": ["0.5", "-0.25"]}
                }
            }
        });
        absorb_quant(&clean(&parse_model(v.to_string().as_bytes())?)?)
    }

    #[test]
    fn weight_quant_becomes_annotation() {
        let g = load(
            vec![quant("W", "Wq", 8, "0.015625"), json!({"op": "MatMul", "inputs": ["x", "Wq"], "outputs": ["y"]})],
            "y",
        )
        .unwrap();
        assert_eq!(g.topo_order(), ["constant0", "input0", "dense0"]);
        let d = g.node("dense0").unwrap();
        let t = FixedPointType::new(8, 2, true).unwrap().with_modes(crate::fxp::Rounding::Rnd, crate::fxp::Overflow::Sat);
        assert_eq!(d.precision(Role::Weight), Precision::Quantized(WeightFormat::Fixed(t)));
        assert_eq!(d.params["kernel"], "constant0");
    }

    #[test]
    fn fixed_8_2_grid_matches_quantizer_values() {
        let t = FixedPointType::new(8, 2, true).unwrap();
        let grid: Vec<f64> = (t.min_payload()..=t.max_payload()).map(|p| p as f64 / 64.0).collect();
        assert_eq!(grid.len(), 256);
        let expected: Vec<f64> = (-128..128).map(|k| k as f64 * 2f64.powi(-6)).collect();
        assert_eq!(grid, expected);
    }

    #[test]
    fn bipolar_weights_become_binary() {
        let g = load(
            vec![
                json!({"op": "BipolarQuant", "inputs": ["W"], "outputs": ["Wq"]}),
                json!({"op": "MatMul", "inputs": ["x", "Wq"], "outputs": ["y"]}),
            ],
            "y",
        )
        .unwrap();
        assert_eq!(g.node("dense0").unwrap().precision(Role::Weight), Precision::Quantized(WeightFormat::Binary));
        assert_eq!(g.weight("dense0", "kernel").unwrap().quantize(WeightFormat::Binary).to_tensor(), Tensor::from_ints(vec![2, 2], &[1, -1, 1, -1]));
    }

    #[test]
    fn identical_quantizers_collapse() {
        let g = load(
            vec![
                json!({"op": "MatMul", "inputs": ["x", "W"], "outputs": ["h"]}),
                quant("h", "q1", 6, "0.125"),
                quant("q1", "y", 6, "0.125"),
            ],
            "y",
        )
        .unwrap();
        assert_eq!(g.topo_order(), ["input0", "dense0"]);
        assert!(g.node("dense0").unwrap().precision(Role::Result).is_quantized());
        assert_eq!(g.outputs(), ["dense0"]);
    }

    #[test]
    fn shared_activation_keeps_quant_node() {
        let g = load(
            vec![
                json!({"op": "MatMul", "inputs": ["x", "W"], "outputs": ["h"]}),
                quant("h", "q", 6, "0.125"),
                json!({"op": "Add", "inputs": ["h", "q"], "outputs": ["y"]}),
            ],
            "y",
        )
        .unwrap();
        assert!(g.node("quant0").is_some());
    }

    #[test]
    fn conflicting_weight_quantizers() {
        let v = json!({
            "schema": 1,
            "graph": {
                "inputs": [{"name": "x", "shape": [2]}],
                "outputs": ["y"],
                "nodes": [
                    {"op": "MatMul", "inputs": ["x", "W"], "outputs": ["y"]}
                ],
                "initializers": {"W": {"shape": [2, 2], "data": ["1", "0", "0", "1"]}}
            }
        });
        let mut g = clean(&parse_model(v.to_string().as_bytes()).unwrap()).unwrap();
        let mut nodes = g.nodes_vec();
        let t = FixedPointType::new(4, 2, true).unwrap();
        let k = nodes[1].weights.remove("kernel").unwrap();
        nodes.push(LayerNode::new("c", Op::Constant, &[]).with_weight("value", k));
        nodes.push(LayerNode::new("q", Op::Quant { kind: crate::ir::QuantizerKind::Quant, format: WeightFormat::Fixed(t) }, &["c"]));
        nodes[1].params.insert("kernel".into(), "q".into());
        nodes[1].set_precision(Role::Weight, Precision::Quantized(WeightFormat::Binary));
        g = g.rebuild(nodes, vec![]).unwrap();
        assert!(matches!(absorb_quant(&g), Err(FrontendError::ConflictingQuantizers(ref e)) if e == "dense0.weight"));
    }
}
