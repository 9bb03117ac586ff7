use std::collections::BTreeSet;

use num_traits::Zero;

use crate::fxp::WeightFormat;
use crate::ir::tensor::{numel, permute};
use crate::ir::{ActivationKind, LayerNode, ModelGraph, Op, Precision, Role, Tensor};
use crate::kernels::batchnorm_affine;

use super::{Change, PassError};

type Rewrite = Result<(ModelGraph, Vec<Change>), PassError>;

fn has_quantized(n: &LayerNode) -> bool {
    n.precision.values().any(|p| p.is_quantized())
}

/// Points every reference to `old` at `new`.
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

/// Removes nodes nobody reads, except inputs and graph outputs.
fn prune(nodes: &mut Vec<LayerNode>, outputs: &[String], changes: &mut Vec<Change>) {
    loop {
        let used: BTreeSet<String> = nodes.iter().flat_map(|n| n.predecessors().cloned()).collect();
        let before = nodes.len();
        nodes.retain(|n| {
            let keep = matches!(n.op, Op::Input { .. }) || used.contains(&n.name) || outputs.contains(&n.name);
            if !keep {
                changes.push(Change::new(&n.name, "removed (unused)"));
            }
            keep
        });
        if nodes.len() == before {
            break;
        }
    }
}

/// Fuses a BatchNorm into the affine layer feeding it.
pub fn fuse_batchnorm(g: &ModelGraph) -> Rewrite {
    let mut nodes = g.nodes_vec();
    let mut outputs = g.outputs().to_vec();
    let mut changes = Vec::new();
    let candidates: Vec<(String, String)> = g
        .nodes()
        .filter(|bn| matches!(bn.op, Op::BatchNorm { .. }) && bn.inputs.len() == 1)
        .filter_map(|bn| {
            let a = g.node(&bn.inputs[0])?;
            let ok = a.op.is_cmvm()
                && !has_quantized(a)
                && !has_quantized(bn)
                && g.consumers(&a.name) == [bn.name.as_str()]
                && !g.outputs().contains(&a.name);
            ok.then(|| (a.name.clone(), bn.name.clone()))
        })
        .collect();
    for (a_name, bn_name) in candidates {
        let bn = g.node(&bn_name).unwrap();
        let Op::BatchNorm { epsilon } = &bn.op else { unreachable!() };
        let w = |n: &str| g.weight(&bn_name, n).expect("batchnorm parameter");
        let (scale, shift) = batchnorm_affine(&w("gamma"), &w("beta"), &w("mean"), &w("variance"), epsilon);
        let a = g.node(&a_name).unwrap();
        let kernel = g.weight(&a_name, "kernel").expect("kernel");
        let oc = scale.len();
        let fused_k: Vec<_> = kernel.values.iter().enumerate().map(|(i, v)| v * &scale[i % oc]).collect();
        let bias = g.weight(&a_name, "bias");
        let fused_b: Vec<_> = (0..oc)
            .map(|c| {
                let b = bias.as_ref().map(|b| b.values[c].clone()).unwrap_or_else(Zero::zero);
                b * &scale[c] + &shift[c]
            })
            .collect();
        let mut fused = a.clone();
        fused.params.remove("kernel");
        fused.params.remove("bias");
        fused.weights.insert("kernel".into(), Tensor::new(kernel.shape.clone(), fused_k));
        fused.weights.insert("bias".into(), Tensor::new(vec![oc], fused_b));
        if !bn.precision(Role::Result).is_auto() {
            fused.set_precision(Role::Result, bn.precision(Role::Result));
        }
        for n in nodes.iter_mut() {
            if n.name == a_name {
                *n = fused.clone();
            }
        }
        nodes.retain(|n| n.name != bn_name);
        rewire(&mut nodes, &mut outputs, &bn_name, &a_name);
        changes.push(Change::new(&a_name, format!("fused batchnorm {bn_name}")));
    }
    if changes.is_empty() {
        return Ok((g.clone(), changes));
    }
    prune(&mut nodes, &outputs, &mut changes);
    Ok((g.rebuild(nodes, outputs)?, changes))
}

fn cast_opt(t: Tensor, p: Precision) -> Tensor {
    match p.fixed() {
        Some(ty) => t.quantize(WeightFormat::Fixed(ty)).to_tensor(),
        None => t,
    }
}

fn foldable(op: &Op) -> bool {
    matches!(
        op,
        Op::Add
            | Op::Concat { .. }
            | Op::Reshape { .. }
            | Op::Transpose { .. }
            | Op::Quant { .. }
            | Op::Activation(ActivationKind::Linear | ActivationKind::Relu)
    )
}

fn fold_node(node: &LayerNode, ins: Vec<Tensor>) -> Tensor {
    let ins: Vec<Tensor> = ins.into_iter().map(|t| cast_opt(t, node.precision(Role::Input))).collect();
    let y = match &node.op {
        Op::Add => {
            let mut acc = ins[0].clone();
            for t in &ins[1..] {
                for (a, b) in acc.values.iter_mut().zip(&t.values) {
                    *a += b;
                }
            }
            cast_opt(acc, node.precision(Role::Accum))
        }
        Op::Concat { axis } => {
            let outer = numel(&ins[0].shape[..*axis]);
            let mut shape = ins[0].shape.clone();
            shape[*axis] = ins.iter().map(|t| t.shape[*axis]).sum();
            let mut vals = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for t in &ins {
                    let chunk = numel(&t.shape[*axis..]);
                    vals.extend_from_slice(&t.values[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, vals)
        }
        Op::Reshape { shape } => Tensor::new(shape.clone(), ins[0].values.clone()),
        Op::Transpose { perm } => {
            let (vals, shape) = permute(&ins[0].values, &ins[0].shape, perm);
            Tensor::new(shape, vals)
        }
        Op::Quant { format, .. } => ins[0].quantize(*format).to_tensor(),
        Op::Activation(ActivationKind::Relu) => {
            let vals = ins[0].values.iter().map(|v| if v < &Zero::zero() { Zero::zero() } else { v.clone() });
            Tensor::new(ins[0].shape.clone(), vals.collect())
        }
        _ => ins[0].clone(),
    };
    cast_opt(y, node.precision(Role::Result))
}

/// Evaluates nodes whose data inputs are all constants.
pub fn fold_constants(g: &ModelGraph) -> Rewrite {
    let mut nodes = g.nodes_vec();
    let outputs = g.outputs().to_vec();
    let mut changes = Vec::new();
    let is_const = |name: &str| matches!(g.node(name).map(|n| &n.op), Some(Op::Constant));
    for node in nodes.iter_mut() {
        if !foldable(&node.op) || node.inputs.is_empty() || !node.inputs.iter().all(|i| is_const(i)) {
            continue;
        }
        let ins: Vec<Tensor> = node
            .inputs
            .iter()
            .map(|i| {
                let c = g.node(i).unwrap();
                cast_opt(c.weights["value"].clone(), c.precision(Role::Result))
            })
            .collect();
        let value = fold_node(node, ins);
        let mut folded = LayerNode::new(node.name.clone(), Op::Constant, &[]).with_weight("value", value);
        if !node.precision(Role::Result).is_auto() {
            folded.set_precision(Role::Result, node.precision(Role::Result));
        } else if let Op::Quant { format, .. } = &node.op {
            folded.set_precision(Role::Result, Precision::Explicit(WeightFormat::Fixed(format.container())));
        }
        changes.push(Change::new(&node.name, format!("folded {} into a constant", node.op)));
        *node = folded;
    }
    if changes.is_empty() {
        return Ok((g.clone(), changes));
    }
    prune(&mut nodes, &outputs, &mut changes);
    Ok((g.rebuild(nodes, outputs)?, changes))
}

fn transparent(n: &LayerNode) -> bool {
    n.precision(Role::Result).is_auto() && n.precision(Role::Input).is_auto()
}

/// Removes identity transposes and mutually inverse transpose pairs.
pub fn eliminate_transposes(g: &ModelGraph) -> Rewrite {
    let mut nodes = g.nodes_vec();
    let mut outputs = g.outputs().to_vec();
    let mut changes = Vec::new();
    for name in g.topo_order() {
        let n = g.node(name).unwrap();
        let Op::Transpose { perm } = &n.op else { continue };
        if !transparent(n) {
            continue;
        }
        let identity = |p: &[usize]| p.iter().enumerate().all(|(i, v)| i == *v);
        let target = if identity(perm) {
            Some(n.inputs[0].clone())
        } else {
            match g.node(&n.inputs[0]) {
                Some(prev) if transparent(prev) => match &prev.op {
                    Op::Transpose { perm: p1 } => {
                        let composed: Vec<usize> = perm.iter().map(|&j| p1[j]).collect();
                        identity(&composed).then(|| prev.inputs[0].clone())
                    }
                    _ => None,
                },
                _ => None,
            }
        };
        if let Some(src) = target {
            if !nodes.iter().any(|m| &m.name == name) {
                continue;
            }
            nodes.retain(|m| &m.name != name);
            rewire(&mut nodes, &mut outputs, name, &src);
            changes.push(Change::new(name, format!("removed transpose, reads {src}")));
            break;
        }
    }
    if changes.is_empty() {
        return Ok((g.clone(), changes));
    }
    prune(&mut nodes, &outputs, &mut changes);
    Ok((g.rebuild(nodes, outputs)?, changes))
}

/// Copies parameter tensors from their constant sources into the layers.
pub fn inline_parameters(g: &ModelGraph) -> Rewrite {
    let mut nodes = g.nodes_vec();
    let outputs = g.outputs().to_vec();
    let mut changes = Vec::new();
    for n in nodes.iter_mut() {
        let params: Vec<(String, String)> = n.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (w, src) in params {
            if let Some(t) = g.constant_value(&src) {
                n.params.remove(&w);
                n.weights.insert(w.clone(), t);
                changes.push(Change::new(&n.name, format!("inlined {w} from {src}")));
            }
        }
    }
    if changes.is_empty() {
        return Ok((g.clone(), changes));
    }
    prune(&mut nodes, &outputs, &mut changes);
    Ok((g.rebuild(nodes, outputs)?, changes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::real::{parse_real, real_from_f64};
    use crate::ir::{build_graph, HwConfig};
    use crate::kernels::reference::{run_float, FTensor};
    use std::collections::BTreeMap;

    fn dense_bn(gamma: f64, beta: f64, mean: f64, var: f64, eps: &str) -> ModelGraph {
        let one = |v: f64| Tensor::from_f64(vec![1], &[v]);
        let nodes = vec![
            LayerNode::new("in", Op::Input { shape: vec![1] }, &[]),
            LayerNode::new("d", Op::Dense { units: 1 }, &["in"])
                .with_weight("kernel", Tensor::from_f64(vec![1, 1], &[2.0]))
                .with_weight("bias", one(1.0)),
            LayerNode::new("bn", Op::BatchNorm { epsilon: parse_real(eps).unwrap() }, &["d"])
                .with_weight("gamma", one(gamma))
                .with_weight("beta", one(beta))
                .with_weight("mean", one(mean))
                .with_weight("variance", one(var)),
        ];
        build_graph(nodes, vec![], HwConfig::default()).unwrap()
    }

    #[test]
    fn fuses_small_example() {
        let (g, changes) = fuse_batchnorm(&dense_bn(2.0, 3.0, 1.0, 4.0, "0")).unwrap();
        assert_eq!(changes.len(), 1);
        assert_eq!(g.len(), 2);
        assert_eq!(g.outputs(), ["d"]);
        assert_eq!(g.weight("d", "kernel").unwrap().to_f64(), vec![2.0]);
        assert_eq!(g.weight("d", "bias").unwrap().to_f64(), vec![3.0]);
    }

    #[test]
    fn identity_bn_keeps_weights() {
        let (g, _) = fuse_batchnorm(&dense_bn(1.0, 0.0, 0.0, 1.0, "0")).unwrap();
        assert_eq!(g.weight("d", "kernel").unwrap().values, vec![real_from_f64(2.0).unwrap()]);
        assert_eq!(g.weight("d", "bias").unwrap().to_f64(), vec![1.0]);
    }

    #[test]
    fn quantized_layer_is_not_fused() {
        let g = dense_bn(2.0, 3.0, 1.0, 4.0, "0");
        let mut nodes = g.nodes_vec();
        nodes[1].set_precision(Role::Weight, "qat:fixed<8,4,s>".parse().unwrap());
        let g = g.rebuild(nodes, vec![]).unwrap();
        let (g2, changes) = fuse_batchnorm(&g).unwrap();
        assert!(changes.is_empty());
        assert_eq!(g2, g);
    }

    #[test]
    fn fused_matches_sequential_float() {
        let g = dense_bn(0.7, -1.3, 0.4, 2.5, "0.001");
        let (f, _) = fuse_batchnorm(&g).unwrap();
        for x in [-8.0, -1.5, 0.0, 3.25, 8.0] {
            let ins = BTreeMap::from([("in".to_string(), FTensor::new(vec![1], vec![x]))]);
            let a = run_float(&g, &ins).unwrap()["bn"].values[0];
            let b = run_float(&f, &ins).unwrap()["d"].values[0];
            assert!((a - b).abs() <= 1e-5);
        }
    }

    fn consts(a: &[f64], b: &[f64]) -> ModelGraph {
        let nodes = vec![
            LayerNode::new("a", Op::Constant, &[]).with_weight("value", Tensor::from_f64(vec![a.len()], a)),
            LayerNode::new("b", Op::Constant, &[]).with_weight("value", Tensor::from_f64(vec![b.len()], b)),
            LayerNode::new("s", Op::Add, &["a", "b"]),
        ];
        build_graph(nodes, vec![], HwConfig::default()).unwrap()
    }

    #[test]
    fn constant_sum_folds() {
        let (g, changes) = fold_constants(&consts(&[1.0, 2.0], &[0.5, -4.0])).unwrap();
        assert_eq!(g.len(), 1);
        assert!(changes.len() >= 3);
        assert_eq!(g.constant_value("s").unwrap().to_f64(), vec![1.5, -2.0]);
    }

    #[test]
    fn fold_applies_quantizer() {
        let nodes = vec![
            LayerNode::new("a", Op::Constant, &[]).with_weight("value", Tensor::from_f64(vec![2], &[0.3, -0.7])),
            LayerNode::new(
                "q",
                Op::Quant { kind: crate::ir::QuantizerKind::Quant, format: WeightFormat::Fixed("fixed<4,1,s>".parse().unwrap()) },
                &["a"],
            ),
        ];
        let g = build_graph(nodes, vec![], HwConfig::default()).unwrap();
        let (g, _) = fold_constants(&g).unwrap();
        assert_eq!(g.constant_value("q").unwrap().to_f64(), vec![0.25, -0.75]);
    }

    #[test]
    fn no_constants_no_change() {
        let g = dense_bn(1.0, 0.0, 0.0, 1.0, "0");
        let (g2, changes) = fold_constants(&g).unwrap();
        assert!(changes.is_empty());
        assert_eq!(g, g2);
    }

    #[test]
    fn inverse_transposes_cancel() {
        let nodes = vec![
            LayerNode::new("in", Op::Input { shape: vec![2, 3, 4] }, &[]),
            LayerNode::new("t1", Op::Transpose { perm: vec![2, 0, 1] }, &["in"]),
            LayerNode::new("t2", Op::Transpose { perm: vec![1, 2, 0] }, &["t1"]),
            LayerNode::new("r", Op::Activation(ActivationKind::Relu), &["t2"]),
            LayerNode::new("v", Op::Input { shape: vec![5] }, &[]),
            LayerNode::new("t3", Op::Transpose { perm: vec![0] }, &["v"]),
        ];
        let g = build_graph(nodes, vec!["r".into(), "t3".into()], HwConfig::default()).unwrap();
        let mut cur = g;
        loop {
            let (next, ch) = eliminate_transposes(&cur).unwrap();
            if ch.is_empty() {
                break;
            }
            cur = next;
        }
        assert_eq!(cur.topo_order(), ["in", "r", "v"]);
        assert_eq!(cur.node("r").unwrap().inputs, ["in"]);
        assert_eq!(cur.outputs(), ["r", "v"]);
    }
}
