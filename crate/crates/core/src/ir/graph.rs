use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::config::HwConfig;
use super::custom;
use super::op::{window_out, Op};
use super::tensor::{numel, Tensor};
use super::IrError;
use crate::fxp::{FixedPointType, FxpError, WeightFormat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Weight,
    Bias,
    Accum,
    Result,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Input, Role::Weight, Role::Bias, Role::Accum, Role::Result];

    pub fn name(&self) -> &'static str {
        match self {
            Role::Input => "input",
            Role::Weight => "weight",
            Role::Bias => "bias",
            Role::Accum => "accum",
            Role::Result => "result",
        }
    }
}

/// Precision annotation for one role of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    /// To be inferred by the precision passes.
    #[default]
    Auto,
    /// Set by the user or by an inference pass.
    Explicit(WeightFormat),
    /// Derived from a quantizer in the source model; user settings never override it.
    Quantized(WeightFormat),
}

impl Precision {
    pub fn format(&self) -> Option<WeightFormat> {
        match self {
            Precision::Auto => None,
            Precision::Explicit(f) | Precision::Quantized(f) => Some(*f),
        }
    }

    /// The fixed-point grid of an explicit annotation.
    pub fn fixed(&self) -> Option<FixedPointType> {
        self.format().map(|f| f.container())
    }

    pub fn is_auto(&self) -> bool {
        matches!(self, Precision::Auto)
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Precision::Quantized(_))
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Auto => f.write_str("auto"),
            Precision::Explicit(w) => w.fmt(f),
            Precision::Quantized(w) => write!(f, "qat:{w}"),
        }
    }
}

impl FromStr for Precision {
    type Err = FxpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "auto" {
            Ok(Precision::Auto)
        } else if let Some(rest) = s.strip_prefix("qat:") {
            Ok(Precision::Quantized(rest.parse()?))
        } else {
            Ok(Precision::Explicit(s.parse()?))
        }
    }
}

impl Serialize for Precision {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Precision {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub op: Op,
    #[serde(default)]
    pub inputs: Vec<String>,
    /// Weight tensors supplied by other (constant) nodes, by weight name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub weights: BTreeMap<String, Tensor>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub precision: BTreeMap<Role, Precision>,
}

impl LayerNode {
    pub fn new(name: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params: BTreeMap::new(),
            weights: BTreeMap::new(),
            precision: BTreeMap::new(),
        }
    }

    pub fn with_weight(mut self, name: &str, t: Tensor) -> Self {
        self.weights.insert(name.to_string(), t);
        self
    }

    pub fn with_precision(mut self, role: Role, p: Precision) -> Self {
        self.precision.insert(role, p);
        self
    }

    pub fn precision(&self, role: Role) -> Precision {
        self.precision.get(&role).copied().unwrap_or_default()
    }

    pub fn set_precision(&mut self, role: Role, p: Precision) {
        self.precision.insert(role, p);
    }

    /// Data inputs followed by parameter sources.
    pub fn predecessors(&self) -> impl Iterator<Item = &String> {
        self.inputs.iter().chain(self.params.values())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub flows_applied: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// The model graph: layer nodes, inferred edge shapes and hardware config.
///
/// Every node produces exactly one tensor, named after the node.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    nodes: BTreeMap<String, LayerNode>,
    order: Vec<String>,
    shapes: BTreeMap<String, Vec<usize>>,
    outputs: Vec<String>,
    pub config: HwConfig,
    pub metadata: Metadata,
}

/// Validates and builds a graph. `outputs` empty means "every sink".
pub fn build_graph(nodes: Vec<LayerNode>, outputs: Vec<String>, config: HwConfig) -> Result<ModelGraph, IrError> {
    ModelGraph::build(nodes, outputs, config, Metadata::default())
}

impl ModelGraph {
    pub fn build(
        nodes: Vec<LayerNode>,
        outputs: Vec<String>,
        config: HwConfig,
        metadata: Metadata,
    ) -> Result<ModelGraph, IrError> {
        let mut map = BTreeMap::new();
        for n in nodes {
            if map.contains_key(&n.name) {
                return Err(IrError::DuplicateName(n.name));
            }
            map.insert(n.name.clone(), n);
        }
        for n in map.values() {
            for p in n.predecessors() {
                if !map.contains_key(p) {
                    return Err(IrError::DanglingEdge { node: n.name.clone(), input: p.clone() });
                }
            }
        }
        let order = kahn_order(&map)?;
        let mut shapes = BTreeMap::new();
        for name in &order {
            let node = &map[name];
            let shape = infer_shape(node, &shapes)?;
            shapes.insert(name.clone(), shape);
        }
        let outputs = if outputs.is_empty() {
            let consumed: BTreeSet<&String> = map.values().flat_map(|n| n.predecessors()).collect();
            order.iter().filter(|n| !consumed.contains(n)).cloned().collect()
        } else {
            for o in &outputs {
                if !map.contains_key(o) {
                    return Err(IrError::DanglingEdge { node: "<outputs>".into(), input: o.clone() });
                }
            }
            outputs
        };
        Ok(ModelGraph { nodes: map, order, shapes, outputs, config, metadata })
    }

    /// Rebuilds from (possibly edited) nodes, keeping config and metadata.
    pub fn rebuild(&self, nodes: Vec<LayerNode>, outputs: Vec<String>) -> Result<ModelGraph, IrError> {
        ModelGraph::build(nodes, outputs, self.config.clone(), self.metadata.clone())
    }

    /// Clones all nodes in topological order.
    pub fn nodes_vec(&self) -> Vec<LayerNode> {
        self.order.iter().map(|n| self.nodes[n].clone()).collect()
    }

    pub fn node(&self, name: &str) -> Option<&LayerNode> {
        self.nodes.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Deterministic topological order (ties broken by name).
    pub fn topo_order(&self) -> &[String] {
        &self.order
    }

    pub fn nodes(&self) -> impl Iterator<Item = &LayerNode> {
        self.order.iter().map(|n| &self.nodes[n])
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn inputs(&self) -> Vec<&str> {
        self.nodes()
            .filter(|n| matches!(n.op, Op::Input { .. }))
            .map(|n| n.name.as_str())
            .collect()
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        &self.shapes[name]
    }

    /// Nodes reading `name` as a data input or a parameter, in topological order.
    pub fn consumers(&self, name: &str) -> Vec<&str> {
        self.nodes()
            .filter(|n| n.predecessors().any(|p| p == name))
            .map(|n| n.name.as_str())
            .collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.order.iter().position(|n| n == name)
    }

    /// The exact value of a constant-producing node, applying quantizers on the way.
    pub fn constant_value(&self, name: &str) -> Option<Tensor> {
        let node = self.nodes.get(name)?;
        match &node.op {
            Op::Constant => node.weights.get("value").cloned(),
            Op::Quant { format, .. } => {
                let src = self.constant_value(node.inputs.first()?)?;
                Some(src.quantize(*format).to_tensor())
            }
            Op::Reshape { shape } => {
                let src = self.constant_value(node.inputs.first()?)?;
                Some(Tensor::new(shape.clone(), src.values))
            }
            Op::Transpose { perm } => Some(self.constant_value(node.inputs.first()?)?.transpose(perm)),
            _ => None,
        }
    }

    /// A layer weight, either stored inline or read from its parameter source.
    pub fn weight(&self, node: &str, weight: &str) -> Option<Tensor> {
        let n = self.nodes.get(node)?;
        if let Some(t) = n.weights.get(weight) {
            return Some(t.clone());
        }
        self.constant_value(n.params.get(weight)?)
    }

    /// The type of the tensor entering `node` on data port `port`: the
    /// producer's result type, after the consumer's input cast when set.
    pub fn input_type(&self, node: &str, port: usize) -> Option<FixedPointType> {
        let n = self.nodes.get(node)?;
        if let Some(t) = n.precision(Role::Input).fixed() {
            return Some(t);
        }
        self.result_type(n.inputs.get(port)?)
    }

    pub fn result_type(&self, node: &str) -> Option<FixedPointType> {
        self.nodes.get(node)?.precision(Role::Result).fixed()
    }

    /// Shape of the tensor on data port `port` of `node`.
    pub fn input_shape(&self, node: &str, port: usize) -> &[usize] {
        &self.shapes[&self.nodes[node].inputs[port]]
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            schema: 1,
            nodes: self.nodes_vec(),
            outputs: self.outputs.clone(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<ModelGraph, IrError> {
        let doc: GraphDoc = serde_json::from_str(s).map_err(|e| IrError::Schema(e.to_string()))?;
        if doc.schema != 1 {
            return Err(IrError::Schema(format!("unsupported graph schema {}", doc.schema)));
        }
        ModelGraph::build(doc.nodes, doc.outputs, doc.config, doc.metadata)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    schema: u32,
    nodes: Vec<LayerNode>,
    outputs: Vec<String>,
    config: HwConfig,
    #[serde(default)]
    metadata: Metadata,
}

fn kahn_order(map: &BTreeMap<String, LayerNode>) -> Result<Vec<String>, IrError> {
    let mut indegree: BTreeMap<&str, usize> = map.keys().map(|k| (k.as_str(), 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in map.values() {
        let preds: BTreeSet<&String> = n.predecessors().collect();
        for p in preds {
            *indegree.get_mut(n.name.as_str()).unwrap() += 1;
            succ.entry(p.as_str()).or_default().push(n.name.as_str());
        }
    }
    for n in map.values() {
        let has_preds = n.predecessors().next().is_some();
        let is_source = matches!(n.op, Op::Input { .. } | Op::Constant);
        if is_source && has_preds {
            return Err(IrError::Arity { node: n.name.clone(), reason: "source nodes take no inputs".into() });
        }
        if !is_source && n.inputs.is_empty() {
            return Err(IrError::Arity { node: n.name.clone(), reason: "node has no data inputs".into() });
        }
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut order = Vec::with_capacity(map.len());
    while let Some(n) = ready.pop_first() {
        order.push(n.to_string());
        if let Some(ss) = succ.get(n) {
            for s in ss {
                let d = indegree.get_mut(s).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(s);
                }
            }
        }
    }
    if order.len() != map.len() {
        let stuck = indegree.iter().find(|(_, d)| **d > 0).map(|(k, _)| k.to_string()).unwrap_or_default();
        return Err(IrError::Cycle(stuck));
    }
    Ok(order)
}

fn mismatch(node: &str, expected: &[usize], got: &[usize]) -> IrError {
    IrError::ShapeMismatch { node: node.to_string(), expected: expected.to_vec(), got: got.to_vec() }
}

fn param_shape(node: &LayerNode, weight: &str, shapes: &BTreeMap<String, Vec<usize>>) -> Option<Vec<usize>> {
    if let Some(t) = node.weights.get(weight) {
        return Some(t.shape.clone());
    }
    node.params.get(weight).map(|src| shapes[src].clone())
}

fn check_weights(node: &LayerNode, expected: &[(&str, Vec<usize>)], shapes: &BTreeMap<String, Vec<usize>>) -> Result<(), IrError> {
    for (w, exp) in expected {
        let required = node.op.weight_names().iter().any(|(n, r)| n == w && *r);
        match param_shape(node, w, shapes) {
            Some(got) if &got != exp => return Err(mismatch(&node.name, exp, &got)),
            None if required => {
                return Err(IrError::MissingWeight { node: node.name.clone(), weight: w.to_string() })
            }
            _ => {}
        }
    }
    Ok(())
}

fn expect_arity(node: &LayerNode, n: usize) -> Result<(), IrError> {
    if node.inputs.len() != n {
        return Err(IrError::Arity {
            node: node.name.clone(),
            reason: format!("expected {n} data input(s), got {}", node.inputs.len()),
        });
    }
    Ok(())
}

fn spatial_out(
    node: &LayerNode,
    spatial: &[usize],
    kernel: &[usize],
    stride: &[usize],
    pad: &[[usize; 2]],
) -> Result<Vec<usize>, IrError> {
    if kernel.len() != spatial.len() || stride.len() != spatial.len() || pad.len() != spatial.len() {
        return Err(IrError::BadGeometry {
            node: node.name.clone(),
            reason: format!("window rank {} does not match {} spatial axes", kernel.len(), spatial.len()),
        });
    }
    spatial
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            window_out(d, kernel[i], stride[i], pad[i]).ok_or_else(|| IrError::BadGeometry {
                node: node.name.clone(),
                reason: format!("axis {i}: input {d}, kernel {}, stride {}, pad {:?}", kernel[i], stride[i], pad[i]),
            })
        })
        .collect()
}

pub(crate) fn infer_shape(node: &LayerNode, shapes: &BTreeMap<String, Vec<usize>>) -> Result<Vec<usize>, IrError> {
    let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|i| &shapes[i]).collect();
    let name = node.name.as_str();
    let first = || ins.first().map(|s| s.to_vec()).unwrap_or_default();
    match &node.op {
        Op::Input { shape } => {
            if shape.is_empty() || shape.contains(&0) {
                return Err(mismatch(name, &[1], shape));
            }
            Ok(shape.clone())
        }
        Op::Constant => node
            .weights
            .get("value")
            .map(|t| t.shape.clone())
            .ok_or_else(|| IrError::MissingWeight { node: name.into(), weight: "value".into() }),
        Op::Dense { units } => {
            expect_arity(node, 1)?;
            let x = first();
            let n = *x.last().unwrap();
            check_weights(node, &[("kernel", vec![n, *units]), ("bias", vec![*units])], shapes)?;
            let mut out = x;
            *out.last_mut().unwrap() = *units;
            Ok(out)
        }
        Op::Pointwise { filters } => {
            expect_arity(node, 1)?;
            let x = first();
            if x.len() < 2 {
                return Err(mismatch(name, &[0, 0], &x));
            }
            let c = *x.last().unwrap();
            check_weights(node, &[("kernel", vec![c, *filters]), ("bias", vec![*filters])], shapes)?;
            let mut out = x;
            *out.last_mut().unwrap() = *filters;
            Ok(out)
        }
        Op::Conv1D(a) | Op::Conv2D(a) => {
            expect_arity(node, 1)?;
            let x = first();
            let dims = if matches!(node.op, Op::Conv1D(_)) { 1 } else { 2 };
            if x.len() != dims + 1 {
                return Err(mismatch(name, &vec![0; dims + 1], &x));
            }
            let c = x[dims];
            let mut kshape = a.kernel.clone();
            kshape.extend([c, a.filters]);
            check_weights(node, &[("kernel", kshape), ("bias", vec![a.filters])], shapes)?;
            let mut out = spatial_out(node, &x[..dims], &a.kernel, &a.stride, &a.pad)?;
            out.push(a.filters);
            Ok(out)
        }
        Op::DepthwiseConv(a) => {
            expect_arity(node, 1)?;
            let x = first();
            let dims = a.kernel.len();
            if x.len() != dims + 1 {
                return Err(mismatch(name, &vec![0; dims + 1], &x));
            }
            let c = x[dims];
            let mut kshape = a.kernel.clone();
            kshape.extend([c, 1]);
            check_weights(node, &[("kernel", kshape), ("bias", vec![c])], shapes)?;
            let mut out = spatial_out(node, &x[..dims], &a.kernel, &a.stride, &a.pad)?;
            out.push(c);
            Ok(out)
        }
        Op::MaxPool(p) | Op::AvgPool(p) => {
            expect_arity(node, 1)?;
            let x = first();
            let dims = p.pool.len();
            if x.len() != dims + 1 {
                return Err(mismatch(name, &vec![0; dims + 1], &x));
            }
            let mut out = spatial_out(node, &x[..dims], &p.pool, &p.stride, &p.pad)?;
            out.push(x[dims]);
            Ok(out)
        }
        Op::BatchNorm { .. } => {
            expect_arity(node, 1)?;
            let x = first();
            let c = vec![*x.last().unwrap()];
            check_weights(
                node,
                &[("gamma", c.clone()), ("beta", c.clone()), ("mean", c.clone()), ("variance", c)],
                shapes,
            )?;
            Ok(x)
        }
        Op::Activation(_) | Op::Softmax | Op::Quant { .. } => {
            expect_arity(node, 1)?;
            Ok(first())
        }
        Op::Add => {
            if ins.len() < 2 {
                return Err(IrError::Arity { node: name.into(), reason: "Add needs at least two inputs".into() });
            }
            for s in &ins[1..] {
                if s != &ins[0] {
                    return Err(mismatch(name, ins[0], s));
                }
            }
            Ok(first())
        }
        Op::Concat { axis } => {
            if ins.len() < 2 {
                return Err(IrError::Arity { node: name.into(), reason: "Concat needs at least two inputs".into() });
            }
            let mut out = first();
            if *axis >= out.len() {
                return Err(IrError::BadGeometry { node: name.into(), reason: format!("axis {axis} out of range") });
            }
            for s in &ins[1..] {
                let mut a = (*s).clone();
                let mut b = out.clone();
                if a.len() != b.len() {
                    return Err(mismatch(name, &out, s));
                }
                a[*axis] = 0;
                b[*axis] = 0;
                if a != b {
                    return Err(mismatch(name, &out, s));
                }
                out[*axis] += s[*axis];
            }
            Ok(out)
        }
        Op::Reshape { shape } => {
            expect_arity(node, 1)?;
            let x = first();
            if numel(shape) != numel(&x) || shape.contains(&0) {
                return Err(mismatch(name, shape, &x));
            }
            Ok(shape.clone())
        }
        Op::Transpose { perm } => {
            expect_arity(node, 1)?;
            let x = first();
            if perm.len() != x.len() || !super::tensor::is_permutation(perm) {
                return Err(IrError::BadGeometry { node: name.into(), reason: format!("bad permutation {perm:?} for {x:?}") });
            }
            Ok(perm.iter().map(|&p| x[p]).collect())
        }
        Op::Custom { tag, attrs } => {
            let def = custom::lookup(tag).ok_or_else(|| IrError::UnsupportedOp { node: name.into(), op: tag.clone() })?;
            let in_shapes: Vec<Vec<usize>> = ins.iter().map(|s| (*s).clone()).collect();
            (def.shape_fn)(&in_shapes, attrs).map_err(|reason| IrError::BadGeometry { node: name.into(), reason })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::op::ActivationKind;

    fn dense(name: &str, input: &str, n_in: usize, units: usize) -> LayerNode {
        LayerNode::new(name, Op::Dense { units }, &[input])
            .with_weight("kernel", Tensor::zeros(vec![n_in, units]))
            .with_weight("bias", Tensor::zeros(vec![units]))
    }

    fn jet_chain() -> Vec<LayerNode> {
        vec![
            LayerNode::new("in", Op::Input { shape: vec![16] }, &[]),
            dense("d1", "in", 16, 64),
            LayerNode::new("r1", Op::Activation(ActivationKind::Relu), &["d1"]),
            dense("d2", "r1", 64, 5),
        ]
    }

    #[test]
    fn builds_mlp() {
        let g = build_graph(jet_chain(), vec![], HwConfig::default()).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.topo_order(), ["in", "d1", "r1", "d2"]);
        assert_eq!(g.shape("d2"), [5]);
        assert_eq!(g.outputs(), ["d2"]);
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let mut nodes = jet_chain();
        nodes[2].inputs = vec!["r1".into()];
        assert!(matches!(build_graph(nodes, vec![], HwConfig::default()), Err(IrError::Cycle(_))));
    }

    #[test]
    fn width_mismatch_detected() {
        let nodes = vec![
            LayerNode::new("in", Op::Input { shape: vec![8] }, &[]),
            dense("d1", "in", 16, 4),
        ];
        match build_graph(nodes, vec![], HwConfig::default()) {
            Err(IrError::ShapeMismatch { node, expected, got }) => {
                assert_eq!(node, "d1");
                assert_eq!(expected, vec![8, 4]);
                assert_eq!(got, vec![16, 4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_and_duplicate() {
        let mut nodes = jet_chain();
        nodes[1].inputs = vec!["nope".into()];
        assert!(matches!(build_graph(nodes, vec![], HwConfig::default()), Err(IrError::DanglingEdge { .. })));
        let mut nodes = jet_chain();
        nodes.push(nodes[0].clone());
        assert!(matches!(build_graph(nodes, vec![], HwConfig::default()), Err(IrError::DuplicateName(_))));
    }

    #[test]
    fn diamond_breaks_ties_by_name() {
        let relu = || Op::Activation(ActivationKind::Relu);
        let nodes = vec![
            LayerNode::new("d", Op::Add, &["c", "b"]),
            LayerNode::new("c", relu(), &["a"]),
            LayerNode::new("b", relu(), &["a"]),
            LayerNode::new("a", Op::Input { shape: vec![3] }, &[]),
        ];
        let g = build_graph(nodes, vec![], HwConfig::default()).unwrap();
        assert_eq!(g.topo_order(), ["a", "b", "c", "d"]);
    }

    #[test]
    fn conv_output_shape_formula() {
        let mut a = crate::ir::op::ConvAttrs::new(2, vec![3, 3]);
        a.stride = vec![2, 1];
        a.pad = vec![[1, 1], [0, 0]];
        let nodes = vec![
            LayerNode::new("x", Op::Input { shape: vec![7, 5, 3] }, &[]),
            LayerNode::new("c", Op::Conv2D(a), &["x"]).with_weight("kernel", Tensor::zeros(vec![3, 3, 3, 2])),
        ];
        let g = build_graph(nodes, vec![], HwConfig::default()).unwrap();
        // (7+2-3)/2+1 = 4, (5-3)/1+1 = 3
        assert_eq!(g.shape("c"), [4, 3, 2]);
    }

    #[test]
    fn json_round_trip() {
        let mut nodes = jet_chain();
        nodes[1].set_precision(Role::Weight, "qat:fixed<8,2,s,RND,SAT>".parse().unwrap());
        nodes[1].weights.insert("bias".into(), Tensor::from_f64(vec![64], &[0.125; 64]));
        let g = build_graph(nodes, vec![], HwConfig::default()).unwrap();
        let back = ModelGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json(), g.to_json());
    }
}
