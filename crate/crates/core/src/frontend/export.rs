//! Serializes a layer graph back into the raw model format (channels-last).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde_json::json;

use crate::fxp::real::real_to_string;
use crate::fxp::{Overflow, Rounding, WeightFormat};
use crate::ir::tensor::invert_perm;
use crate::ir::{ActivationKind, LayerNode, ModelGraph, Op, Precision, QuantizerKind, Role, Tensor};

use super::{FrontendError, Layout, RawGraph, RawInput, RawModel, RawNode, RawTensor};

fn quantizer_node(kind: QuantizerKind, f: &WeightFormat, input: &str, out: &str) -> Result<RawNode, FrontendError> {
    let bad = || FrontendError::UnsupportedQuantizer { node: out.to_string(), reason: format!("format {f:?} has no quantizer form") };
    let t = match f {
        WeightFormat::Binary => return Ok(RawNode::new("BipolarQuant", &[input], out)),
        WeightFormat::Fixed(t) if t.overflow() == Overflow::Sat => *t,
        _ => return Err(bad()),
    };
    let scale = real_to_string(&crate::fxp::real::pow2(t.lsb_exp()));
    let w = t.width() as i32;
    let mut n = match (kind, t.rounding()) {
        (QuantizerKind::Trunc, Rounding::Trn) => {
            let k = (t.int_bits() - w).min(0);
            RawNode::new("Trunc", &[input], out)
                .attr("input_bitwidth", json!(t.int_bits() - k))
                .attr("output_bitwidth", json!(w))
                .attr("scale", json!(real_to_string(&crate::fxp::real::pow2(k))))
        }
        (_, r) => RawNode::new("Quant", &[input], out)
            .attr("bitwidth", json!(w))
            .attr("scale", json!(scale))
            .attr("rounding", json!(if r == Rounding::Rnd { "ROUND" } else { "FLOOR" })),
    };
    n.attrs.insert("signed".into(), json!(t.is_signed()));
    Ok(n)
}

struct Exporter<'a> {
    g: &'a ModelGraph,
    nodes: Vec<RawNode>,
    inits: BTreeMap<String, RawTensor>,
    /// Raw tensor holding each constant-like node, once emitted.
    emitted: HashMap<String, String>,
}

impl Exporter<'_> {
    fn emit(&mut self, mut n: RawNode, name: &str) -> String {
        n.name = name.to_string();
        let out = n.outputs[0].clone();
        self.nodes.push(n);
        out
    }

    /// Emits a constant or a quantizer chain over one, on first use.
    fn constant(&mut self, name: &str) -> Result<String, FrontendError> {
        if let Some(t) = self.emitted.get(name) {
            return Ok(t.clone());
        }
        let n = self.g.node(name).expect("node exists");
        let t = match &n.op {
            Op::Constant => {
                self.inits.insert(name.to_string(), RawTensor::from_tensor(&n.weights["value"]));
                let mut t = name.to_string();
                if let Precision::Quantized(f) = n.precision(Role::Result) {
                    t = self.emit(quantizer_node(QuantizerKind::Quant, &f, name, &format!("{name}.q"))?, &format!("{name}.q"));
                }
                t
            }
            Op::Quant { kind, format } => {
                let src = self.constant(&n.inputs[0])?;
                self.emit(quantizer_node(*kind, format, &src, name)?, name)
            }
            _ => unreachable!("not constant-like"),
        };
        self.emitted.insert(name.to_string(), t.clone());
        Ok(t)
    }

    fn is_constant_like(&self, name: &str) -> bool {
        let n = self.g.node(name).expect("node exists");
        match &n.op {
            Op::Constant => true,
            Op::Quant { .. } => self.is_constant_like(&n.inputs[0]),
            _ => false,
        }
    }

    fn input(&mut self, name: &str) -> Result<String, FrontendError> {
        if self.is_constant_like(name) {
            self.constant(name)
        } else {
            Ok(self.emitted.get(name).cloned().unwrap_or_else(|| name.to_string()))
        }
    }

    /// A weight operand in raw layout, quantized by the node's annotation.
    fn weight(&mut self, node: &LayerNode, w: &str, role: Role, to_raw: impl Fn(&Tensor) -> Tensor) -> Result<String, FrontendError> {
        let key = format!("{}.{w}", node.name);
        let value = match node.weights.get(w) {
            Some(t) => t.clone(),
            None => {
                let src = &node.params[w];
                let mut chain = Vec::new();
                let mut cur = src.as_str();
                loop {
                    let n = self.g.node(cur).expect("param source");
                    match &n.op {
                        Op::Quant { kind, format } => {
                            chain.push((*kind, *format));
                            cur = &n.inputs[0];
                        }
                        Op::Constant => break,
                        _ => return Err(FrontendError::UnsupportedOp { node: node.name.clone(), op: format!("{w} from '{src}'") }),
                    }
                }
                let base = &self.g.node(cur).unwrap().weights["value"];
                self.inits.insert(key.clone(), RawTensor::from_tensor(&to_raw(base)));
                let mut t = key.clone();
                let mut names: Vec<String> = Vec::new();
                let mut c = src.as_str();
                for _ in 0..chain.len() {
                    names.push(c.to_string());
                    c = &self.g.node(c).unwrap().inputs[0];
                }
                for ((kind, f), name) in chain.iter().rev().zip(names.iter().rev()) {
                    t = self.emit(quantizer_node(*kind, f, &t, name)?, name);
                }
                return self.annotate(node, role, t, &key);
            }
        };
        self.inits.insert(key.clone(), RawTensor::from_tensor(&to_raw(&value)));
        self.annotate(node, role, key.clone(), &key)
    }

    fn annotate(&mut self, node: &LayerNode, role: Role, t: String, key: &str) -> Result<String, FrontendError> {
        match node.precision(role) {
            Precision::Quantized(f) => {
                let q = format!("{key}.q");
                Ok(self.emit(quantizer_node(QuantizerKind::Quant, &f, &t, &q)?, &q))
            }
            _ => Ok(t),
        }
    }

    fn node(&mut self, n: &LayerNode) -> Result<(), FrontendError> {
        let name = n.name.as_str();
        let unsupported = |op: &str| FrontendError::UnsupportedOp { node: name.to_string(), op: op.to_string() };
        let mut ins = Vec::new();
        if !matches!(n.op, Op::Input { .. } | Op::Constant) {
            for i in &n.inputs {
                ins.push(self.input(i)?);
            }
        }
        let ins: Vec<&str> = ins.iter().map(String::as_str).collect();
        let out = match &n.op {
            Op::Input { .. } => name.to_string(),
            Op::Constant => return Ok(()),
            Op::Quant { .. } if self.is_constant_like(name) => return Ok(()),
            Op::Dense { .. } => {
                let w = self.weight(n, "kernel", Role::Weight, Tensor::clone)?;
                let b = self.weight(n, "bias", Role::Bias, Tensor::clone)?;
                let h = self.emit(RawNode::new("MatMul", &[ins[0], &w], &format!("{name}.matmul")), &format!("{name}.matmul"));
                self.emit(RawNode::new("Add", &[&h, &b], name), name)
            }
            Op::Pointwise { filters } => {
                let rank = self.g.input_shape(name, 0).len();
                if !(2..=3).contains(&rank) {
                    return Err(unsupported("Pointwise above two spatial axes"));
                }
                let f = *filters;
                let w = self.weight(n, "kernel", Role::Weight, |t| {
                    let tt = t.transpose(&[1, 0]);
                    let mut shape = vec![f, t.shape[0]];
                    shape.extend(std::iter::repeat_n(1, rank - 1));
                    Tensor::new(shape, tt.values)
                })?;
                let b = self.weight(n, "bias", Role::Bias, Tensor::clone)?;
                self.emit(RawNode::new("Conv", &[ins[0], &w, &b], name), name)
            }
            Op::Conv1D(a) | Op::Conv2D(a) | Op::DepthwiseConv(a) => {
                let dims = a.kernel.len();
                let depthwise = matches!(n.op, Op::DepthwiseConv(_));
                let tail = if depthwise { [0, 1] } else { [1, 0] };
                let perm: Vec<usize> = (2..dims + 2).chain(tail).collect();
                let back = invert_perm(&perm);
                let w = self.weight(n, "kernel", Role::Weight, |t| t.transpose(&back))?;
                let b = self.weight(n, "bias", Role::Bias, Tensor::clone)?;
                let mut r = RawNode::new("Conv", &[ins[0], &w, &b], name)
                    .attr("kernel_shape", json!(a.kernel))
                    .attr("strides", json!(a.stride))
                    .attr("pads", json!(flat_pads(&a.pad)));
                if depthwise {
                    let c = *self.g.input_shape(name, 0).last().unwrap();
                    r = r.attr("group", json!(c));
                }
                self.emit(r, name)
            }
            Op::MaxPool(p) | Op::AvgPool(p) => {
                let op = if matches!(n.op, Op::MaxPool(_)) { "MaxPool" } else { "AveragePool" };
                let r = RawNode::new(op, &[ins[0]], name)
                    .attr("kernel_shape", json!(p.pool))
                    .attr("strides", json!(p.stride))
                    .attr("pads", json!(flat_pads(&p.pad)));
                self.emit(r, name)
            }
            Op::BatchNorm { epsilon } => {
                let mut args = vec![ins[0].to_string()];
                for w in ["gamma", "beta", "mean", "variance"] {
                    let key = format!("{name}.{w}");
                    let t = self.g.weight(name, w).expect("batchnorm parameter");
                    self.inits.insert(key.clone(), RawTensor::from_tensor(&t));
                    args.push(key);
                }
                let refs: Vec<&str> = args.iter().map(String::as_str).collect();
                self.emit(RawNode::new("BatchNormalization", &refs, name).attr("epsilon", json!(real_to_string(epsilon))), name)
            }
            Op::Activation(kind) => {
                let r = match kind {
                    ActivationKind::Linear => RawNode::new("Identity", &[ins[0]], name),
                    ActivationKind::Relu => RawNode::new("Relu", &[ins[0]], name),
                    ActivationKind::LeakyRelu { alpha } => RawNode::new("LeakyRelu", &[ins[0]], name).attr("alpha", json!(real_to_string(alpha))),
                    ActivationKind::Tanh => RawNode::new("Tanh", &[ins[0]], name),
                    ActivationKind::Sigmoid => RawNode::new("Sigmoid", &[ins[0]], name),
                    ActivationKind::Softsign => RawNode::new("Softsign", &[ins[0]], name),
                };
                self.emit(r, name)
            }
            Op::Softmax => self.emit(RawNode::new("Softmax", &[ins[0]], name), name),
            Op::Add => {
                let mut acc = ins[0].to_string();
                for (k, x) in ins[1..].iter().enumerate() {
                    let out = if k + 2 == ins.len() { name.to_string() } else { format!("{name}.{k}") };
                    acc = self.emit(RawNode::new("Add", &[&acc, x], &out), &out);
                }
                acc
            }
            Op::Concat { axis } => self.emit(RawNode::new("Concat", &ins, name).attr("axis", json!(axis)), name),
            Op::Reshape { shape } => self.emit(RawNode::new("Reshape", &[ins[0]], name).attr("shape", json!(shape)), name),
            Op::Transpose { perm } => self.emit(RawNode::new("Transpose", &[ins[0]], name).attr("perm", json!(perm)), name),
            Op::Quant { kind, format } => self.emit(quantizer_node(*kind, format, ins[0], name)?, name),
            Op::Custom { tag, attrs } => {
                let mut r = RawNode::new(tag, &ins, name);
                r.attrs = attrs.clone();
                self.emit(r, name)
            }
        };
        if let Precision::Quantized(f) = n.precision(Role::Result) {
            let q = format!("{name}.q");
            let t = self.emit(quantizer_node(QuantizerKind::Quant, &f, &out, &q)?, &q);
            self.emitted.insert(name.to_string(), t);
        }
        Ok(())
    }
}

fn flat_pads(pad: &[[usize; 2]]) -> Vec<usize> {
    pad.iter().map(|p| p[0]).chain(pad.iter().map(|p| p[1])).collect()
}

/// Splits a `<stem><ordinal>` name.
fn ordinal(name: &str, stem: &str) -> Option<usize> {
    name.strip_prefix(stem)?.parse().ok()
}

/// Topological order that also keeps nodes of one stem in ordinal order,
/// so that re-cleaning assigns the same names.
fn export_order(g: &ModelGraph) -> Vec<String> {
    let names: Vec<&str> = g.topo_order().iter().map(String::as_str).collect();
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut preds: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); names.len()];
    let mut by_stem: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, n) in g.nodes_vec().iter().enumerate() {
        for p in n.predecessors() {
            preds[i].insert(index[p.as_str()]);
        }
        let stem = n.op.stem();
        if let Some(k) = ordinal(&n.name, &stem) {
            by_stem.entry(stem).or_default().push((k, i));
        }
    }
    for mut v in by_stem.into_values() {
        v.sort();
        for w in v.windows(2) {
            preds[w[1].1].insert(w[0].1);
        }
    }
    let mut done = vec![false; names.len()];
    let mut order = Vec::with_capacity(names.len());
    while order.len() < names.len() {
        let next = (0..names.len()).find(|&i| !done[i] && preds[i].iter().all(|p| done[*p]));
        let i = next.unwrap_or_else(|| (0..names.len()).find(|&i| !done[i]).unwrap());
        done[i] = true;
        order.push(names[i].to_string());
    }
    order
}

/// Serializes `g` as a channels-last raw model.
pub fn export_model(g: &ModelGraph) -> Result<RawModel, FrontendError> {
    let mut ex = Exporter { g, nodes: Vec::new(), inits: BTreeMap::new(), emitted: HashMap::new() };
    let mut inputs = Vec::new();
    for name in export_order(g) {
        let n = g.node(&name).unwrap();
        if let Op::Input { shape } = &n.op {
            inputs.push(RawInput { name: name.clone(), shape: shape.clone() });
        }
        ex.node(n)?;
    }
    let outputs = g.outputs().iter().map(|o| ex.input(o)).collect::<Result<Vec<_>, _>>()?;
    Ok(RawModel {
        schema: 1,
        layout: Layout::ChannelsLast,
        graph: RawGraph { inputs, outputs, nodes: ex.nodes, initializers: ex.inits },
    })
}

#[cfg(test)]
mod tests {
    use super::super::{clean, parse_model};
    use super::*;

    #[test]
    fn clean_is_idempotent_through_export() {
        let w: Vec<String> = (0..3 * 2 * 3 * 3).map(|i| ((i % 7) as i32 - 3).to_string()).collect();
        let v = json!({
            "schema": 1,
            "layout": "channels_first",
            "graph": {
                "inputs": [{"name": "x", "shape": [2, 5, 5]}],
                "outputs": ["y"],
                "nodes": [
                    {"op": "Quant", "inputs": ["W"], "outputs": ["Wq"], "attrs": {"bitwidth": 4, "scale": 1}},
                    {"op": "Conv", "inputs": ["x", "Wq"], "outputs": ["c"], "attrs": {"pads": [1, 1, 1, 1], "strides": [2, 2]}},
                    {"op": "Relu", "inputs": ["c"], "outputs": ["r"]},
                    {"op": "Quant", "inputs": ["r"], "outputs": ["rq"], "attrs": {"bitwidth": 6, "scale": 0.25, "signed": false}},
                    {"op": "Flatten", "inputs": ["rq"], "outputs": ["f"]},
                    {"op": "MatMul", "inputs": ["f", "D"], "outputs": ["h"]},
                    {"op": "Add", "inputs": ["h", "e"], "outputs": ["y"]}
                ],
                "initializers": {
                    "W": {"shape": [3, 2, 3, 3], "data": w},
                    "D": {"shape": [27, 2], "data": (0..54).map(|i| (i % 5).to_string()).collect::<Vec<_>>()},
                    "e": {"shape": [2], "data": ["1", "-1"]}
                }
            }
        });
        let g1 = clean(&parse_model(v.to_string().as_bytes()).unwrap()).unwrap();
        let raw = export_model(&g1).unwrap();
        let g2 = clean(&parse_model(raw.to_json().as_bytes()).unwrap()).unwrap();
        assert_eq!(g1.nodes_vec(), g2.nodes_vec());
        assert_eq!(g1.outputs(), g2.outputs());
    }
}
