//! Cleaning: constant folding, shape inference, lowering to layer nodes,
//! renaming and conversion to channels-last.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::fxp::real::{parse_real, Real};
use crate::ir::custom;
use crate::ir::tensor::{is_permutation, numel, strides};
use crate::ir::{
    ActivationKind, ConvAttrs, HwConfig, LayerNode, Metadata, ModelGraph, Op, PoolAttrs, Tensor,
};
use crate::kernels::conv::Window;

use super::{attr_int, attr_ints, attr_real, quantizer_format, FrontendError, Layout, RawModel, RawNode};

fn shape_err(n: &RawNode, reason: impl Into<String>) -> FrontendError {
    FrontendError::ShapeInferenceFailure { node: n.label().to_string(), reason: reason.into() }
}

fn unsupported(n: &RawNode, op: impl Into<String>) -> FrontendError {
    FrontendError::UnsupportedOp { node: n.label().to_string(), op: op.into() }
}

/// Numpy-style broadcast of two shapes.
pub(super) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let at = |s: &[usize], i: usize| if i + s.len() >= r { s[i + s.len() - r] } else { 1 };
    (0..r)
        .map(|i| match (at(a, i), at(b, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Expands `vals` of `shape` to the broadcast shape `to`.
pub(super) fn broadcast_to<T: Clone>(vals: &[T], shape: &[usize], to: &[usize]) -> Vec<T> {
    let off = to.len() - shape.len();
    let src_strides = strides(shape);
    let dst_strides = strides(to);
    (0..numel(to))
        .map(|flat| {
            let mut src = 0;
            for (i, &d) in shape.iter().enumerate() {
                let coord = (flat / dst_strides[off + i]) % to[off + i];
                if d != 1 {
                    src += coord * src_strides[i];
                }
            }
            vals[src].clone()
        })
        .collect()
}

pub(super) fn concat_values<T: Clone>(parts: &[(&[T], &[usize])], axis: usize) -> (Vec<T>, Vec<usize>) {
    let mut shape = parts[0].1.to_vec();
    shape[axis] = parts.iter().map(|p| p.1[axis]).sum();
    let outer = numel(&shape[..axis]);
    let mut vals = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for (v, s) in parts {
            let chunk = numel(&s[axis..]);
            vals.extend_from_slice(&v[o * chunk..(o + 1) * chunk]);
        }
    }
    (vals, shape)
}

fn norm_axis(n: &RawNode, axis: i64, rank: usize) -> Result<usize, FrontendError> {
    let a = if axis < 0 { axis + rank as i64 } else { axis };
    if a < 0 || a >= rank as i64 {
        return Err(shape_err(n, format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

/// Resolves a reshape request, allowing one `-1`.
pub(super) fn reshape_target(n: &RawNode, spec: &[i64], count: usize) -> Result<Vec<usize>, FrontendError> {
    let known: i64 = spec.iter().filter(|d| **d != -1).product();
    let wild = spec.iter().filter(|d| **d == -1).count();
    if spec.is_empty() || wild > 1 || spec.iter().any(|d| *d == 0 || *d < -1) || known <= 0 {
        return Err(shape_err(n, format!("bad reshape target {spec:?}")));
    }
    let out: Vec<usize> = spec
        .iter()
        .map(|&d| if d == -1 { count / known as usize } else { d as usize })
        .collect();
    if numel(&out) != count {
        return Err(shape_err(n, format!("cannot reshape {count} elements to {spec:?}")));
    }
    Ok(out)
}

pub(super) fn transpose_perm(n: &RawNode, rank: usize) -> Result<Vec<usize>, FrontendError> {
    let perm: Vec<usize> = match attr_ints(n, "perm")? {
        Some(p) => p.iter().map(|&v| norm_axis(n, v, rank)).collect::<Result<_, _>>()?,
        None => (0..rank).rev().collect(),
    };
    if perm.len() != rank || !is_permutation(&perm) {
        return Err(shape_err(n, format!("bad permutation {perm:?} for rank {rank}")));
    }
    Ok(perm)
}

/// Channel count and spatial extent of an activation in the raw layout.
pub(super) fn split_channels(shape: &[usize], layout: Layout) -> (usize, Vec<usize>) {
    match layout {
        Layout::ChannelsFirst => (shape[0], shape[1..].to_vec()),
        Layout::ChannelsLast => (shape[shape.len() - 1], shape[..shape.len() - 1].to_vec()),
    }
}

pub(super) fn join_channels(c: usize, spatial: &[usize], layout: Layout) -> Vec<usize> {
    match layout {
        Layout::ChannelsFirst => std::iter::once(c).chain(spatial.iter().copied()).collect(),
        Layout::ChannelsLast => spatial.iter().copied().chain(std::iter::once(c)).collect(),
    }
}

pub(super) fn to_last_perm(rank: usize) -> Vec<usize> {
    (1..rank).chain(std::iter::once(0)).collect()
}

pub(super) fn to_first_perm(rank: usize) -> Vec<usize> {
    std::iter::once(rank - 1).chain(0..rank - 1).collect()
}

/// Sliding-window geometry of Conv and pooling nodes.
pub(super) fn window(n: &RawNode, dims: usize, kernel: Option<Vec<usize>>) -> Result<Window, FrontendError> {
    let ints = |key: &str| -> Result<Option<Vec<usize>>, FrontendError> {
        match attr_ints(n, key)? {
            None => Ok(None),
            Some(v) if v.iter().all(|x| *x >= 0) => Ok(Some(v.into_iter().map(|x| x as usize).collect())),
            Some(v) => Err(shape_err(n, format!("negative {key} {v:?}"))),
        }
    };
    let kernel = match (ints("kernel_shape")?, kernel) {
        (Some(k), Some(w)) if k != w => return Err(shape_err(n, format!("kernel_shape {k:?} disagrees with weights {w:?}"))),
        (Some(k), _) | (None, Some(k)) => k,
        (None, None) => return Err(shape_err(n, "kernel_shape is required")),
    };
    if kernel.len() != dims || kernel.contains(&0) {
        return Err(shape_err(n, format!("kernel {kernel:?} for {dims} spatial axes")));
    }
    let stride = ints("strides")?.unwrap_or_else(|| vec![1; dims]);
    if stride.len() != dims || stride.contains(&0) {
        return Err(shape_err(n, format!("bad strides {stride:?}")));
    }
    let pads = ints("pads")?.unwrap_or_else(|| vec![0; 2 * dims]);
    if pads.len() != 2 * dims {
        return Err(shape_err(n, format!("pads needs {} values, got {}", 2 * dims, pads.len())));
    }
    if let Some(d) = ints("dilations")? {
        if d.iter().any(|x| *x != 1) {
            return Err(unsupported(n, format!("{} with dilations {d:?}", n.op)));
        }
    }
    if let Some(a) = n.attrs.get("auto_pad") {
        if a.as_str() != Some("NOTSET") {
            return Err(unsupported(n, format!("{} with auto_pad {a}", n.op)));
        }
    }
    if attr_int(n, "ceil_mode")?.unwrap_or(0) != 0 {
        return Err(unsupported(n, format!("{} with ceil_mode", n.op)));
    }
    let pad = (0..dims).map(|i| [pads[i], pads[dims + i]]).collect();
    Ok(Window { kernel, stride, pad })
}

pub(super) fn activation_kind(n: &RawNode) -> Result<Option<ActivationKind>, FrontendError> {
    Ok(Some(match n.op.as_str() {
        "Relu" => ActivationKind::Relu,
        "LeakyRelu" => ActivationKind::LeakyRelu {
            alpha: attr_real(n, "alpha")?.unwrap_or_else(|| parse_real("0.01").expect("literal")),
        },
        "Tanh" => ActivationKind::Tanh,
        "Sigmoid" => ActivationKind::Sigmoid,
        "Softsign" => ActivationKind::Softsign,
        _ => return Ok(None),
    }))
}

pub(super) fn bn_epsilon(n: &RawNode) -> Result<Real, FrontendError> {
    Ok(attr_real(n, "epsilon")?.unwrap_or_else(|| parse_real("0.00001").expect("literal")))
}

/// Raw nodes in topological order, ties broken by list position.
pub(super) fn raw_order(m: &RawModel) -> Result<Vec<usize>, FrontendError> {
    let g = &m.graph;
    let producer: HashMap<&str, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.outputs[0].as_str(), i)).collect();
    let mut pending: Vec<usize> = g
        .nodes
        .iter()
        .map(|n| n.inputs.iter().filter(|i| producer.contains_key(i.as_str())).count())
        .collect();
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); g.nodes.len()];
    for (i, n) in g.nodes.iter().enumerate() {
        for inp in &n.inputs {
            if let Some(&p) = producer.get(inp.as_str()) {
                users[p].push(i);
            }
        }
    }
    let mut ready: BTreeSet<usize> = (0..g.nodes.len()).filter(|i| pending[*i] == 0).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &u in &users[i] {
            pending[u] -= 1;
            if pending[u] == 0 {
                ready.insert(u);
            }
        }
    }
    if order.len() != g.nodes.len() {
        let stuck = (0..g.nodes.len()).find(|i| pending[*i] > 0).unwrap();
        return Err(FrontendError::Schema { path: "graph.nodes".into(), reason: format!("cycle through '{}'", g.nodes[stuck].label()) });
    }
    Ok(order)
}

const FOLDABLE: &[&str] = &["Add", "Sub", "Mul", "Reshape", "Flatten", "Transpose", "Identity", "Concat"];

fn reshape_spec(n: &RawNode, consts: &BTreeMap<String, Tensor>) -> Result<Vec<i64>, FrontendError> {
    if let Some(s) = attr_ints(n, "shape")? {
        return Ok(s);
    }
    let t = n
        .inputs
        .get(1)
        .and_then(|s| consts.get(s))
        .ok_or_else(|| shape_err(n, "Reshape needs a constant target shape"))?;
    t.values
        .iter()
        .map(|v| if v.is_integer() { i64::try_from(v.to_integer()).ok() } else { None })
        .collect::<Option<_>>()
        .ok_or_else(|| shape_err(n, "non-integer reshape target"))
}

fn fold_node(n: &RawNode, consts: &BTreeMap<String, Tensor>) -> Result<Tensor, FrontendError> {
    let x = &consts[&n.inputs[0]];
    let binary = |f: fn(&Real, &Real) -> Real| -> Result<Tensor, FrontendError> {
        if n.inputs.len() != 2 {
            return Err(shape_err(n, format!("{} needs two inputs", n.op)));
        }
        let y = &consts[&n.inputs[1]];
        let to = broadcast_shape(&x.shape, &y.shape)
            .ok_or_else(|| shape_err(n, format!("cannot broadcast {:?} with {:?}", x.shape, y.shape)))?;
        let a = broadcast_to(&x.values, &x.shape, &to);
        let b = broadcast_to(&y.values, &y.shape, &to);
        Ok(Tensor::new(to, a.iter().zip(&b).map(|(a, b)| f(a, b)).collect()))
    };
    match n.op.as_str() {
        "Add" => binary(|a, b| a + b),
        "Sub" => binary(|a, b| a - b),
        "Mul" => binary(|a, b| a * b),
        "Identity" => Ok(x.clone()),
        "Flatten" => Ok(Tensor::new(vec![x.len()], x.values.clone())),
        "Reshape" => Ok(Tensor::new(reshape_target(n, &reshape_spec(n, consts)?, x.len())?, x.values.clone())),
        "Transpose" => Ok(x.transpose(&transpose_perm(n, x.shape.len())?)),
        "Concat" => {
            let axis = norm_axis(n, attr_int(n, "axis")?.ok_or_else(|| shape_err(n, "Concat needs an axis"))?, x.shape.len())?;
            let parts: Vec<&Tensor> = n.inputs.iter().map(|i| &consts[i]).collect();
            concat_check(n, &parts.iter().map(|t| t.shape.clone()).collect::<Vec<_>>(), axis)?;
            let views: Vec<(&[Real], &[usize])> = parts.iter().map(|t| (t.values.as_slice(), t.shape.as_slice())).collect();
            let (vals, shape) = concat_values(&views, axis);
            Ok(Tensor::new(shape, vals))
        }
        _ => unreachable!("not foldable"),
    }
}

fn concat_check(n: &RawNode, shapes: &[Vec<usize>], axis: usize) -> Result<Vec<usize>, FrontendError> {
    let mut out = shapes[0].clone();
    for s in &shapes[1..] {
        let same = s.len() == out.len() && s.iter().zip(&out).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(shape_err(n, format!("cannot concatenate {:?} with {:?} on axis {axis}", shapes[0], s)));
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

/// Folds every foldable node whose inputs are all constant.
fn fold(m: &RawModel, order: &[usize]) -> Result<(BTreeMap<String, Tensor>, HashSet<usize>), FrontendError> {
    let mut consts = BTreeMap::new();
    for (name, t) in &m.graph.initializers {
        let t = t.to_tensor().map_err(|e| FrontendError::Schema { path: format!("graph.initializers.{name}"), reason: e })?;
        consts.insert(name.clone(), t);
    }
    let mut folded = HashSet::new();
    for &i in order {
        let n = &m.graph.nodes[i];
        if FOLDABLE.contains(&n.op.as_str()) && !n.inputs.is_empty() && n.inputs.iter().all(|x| consts.contains_key(x)) {
            let t = fold_node(n, &consts)?;
            consts.insert(n.outputs[0].clone(), t);
            folded.insert(i);
        }
    }
    Ok((consts, folded))
}

/// Shape of a raw node's output in the raw layout.
pub(super) fn infer_raw(
    n: &RawNode,
    ins: &[Vec<usize>],
    layout: Layout,
    consts: &BTreeMap<String, Tensor>,
) -> Result<Vec<usize>, FrontendError> {
    let arity = |k: usize| {
        if ins.len() == k {
            Ok(())
        } else {
            Err(shape_err(n, format!("{} takes {k} inputs, got {}", n.op, ins.len())))
        }
    };
    let op = n.op.as_str();
    if activation_kind(n)?.is_some() || n.is_quantizer() || op == "Identity" {
        arity(1)?;
        return Ok(ins[0].clone());
    }
    match op {
        "MatMul" => {
            arity(2)?;
            let (a, b) = (&ins[0], &ins[1]);
            if b.len() != 2 || a.last() != Some(&b[0]) {
                return Err(shape_err(n, format!("cannot multiply {a:?} by {b:?}")));
            }
            let mut out = a.clone();
            *out.last_mut().unwrap() = b[1];
            Ok(out)
        }
        "Add" | "Sub" | "Mul" => {
            arity(2)?;
            broadcast_shape(&ins[0], &ins[1]).ok_or_else(|| shape_err(n, format!("cannot broadcast {:?} with {:?}", ins[0], ins[1])))
        }
        "Conv" => {
            if ins.len() != 2 && ins.len() != 3 {
                return Err(shape_err(n, format!("Conv takes 2 or 3 inputs, got {}", ins.len())));
            }
            let (x, w) = (&ins[0], &ins[1]);
            if x.len() != 2 && x.len() != 3 {
                return Err(shape_err(n, format!("Conv input must have 1 or 2 spatial axes, got {x:?}")));
            }
            let dims = x.len() - 1;
            if w.len() != dims + 2 {
                return Err(shape_err(n, format!("weight shape {w:?} for {dims} spatial axes")));
            }
            let group = attr_int(n, "group")?.unwrap_or(1);
            let (c, spatial) = split_channels(x, layout);
            if group < 1 || c % group as usize != 0 || w[1] * group as usize != c || w[0] % group as usize != 0 {
                return Err(shape_err(n, format!("weight {w:?} with group {group} for {c} channels")));
            }
            if let Some(b) = ins.get(2) {
                if b != &vec![w[0]] {
                    return Err(shape_err(n, format!("bias shape {b:?} for {} filters", w[0])));
                }
            }
            let win = window(n, dims, Some(w[2..].to_vec()))?;
            let out = win.out_spatial(&spatial).map_err(|e| shape_err(n, e))?;
            Ok(join_channels(w[0], &out, layout))
        }
        "MaxPool" | "AveragePool" => {
            arity(1)?;
            let x = &ins[0];
            if x.len() < 2 {
                return Err(shape_err(n, format!("pooling needs a spatial input, got {x:?}")));
            }
            let (c, spatial) = split_channels(x, layout);
            let win = window(n, spatial.len(), None)?;
            let out = win.out_spatial(&spatial).map_err(|e| shape_err(n, e))?;
            Ok(join_channels(c, &out, layout))
        }
        "BatchNormalization" => {
            arity(5)?;
            let c = split_channels(&ins[0], layout).0;
            if let Some(p) = ins[1..].iter().find(|p| **p != vec![c]) {
                return Err(shape_err(n, format!("parameter shape {p:?} for {c} channels")));
            }
            Ok(ins[0].clone())
        }
        "Softmax" => {
            arity(1)?;
            let r = ins[0].len();
            let axis = norm_axis(n, attr_int(n, "axis")?.unwrap_or(-1), r)?;
            if axis != r - 1 {
                return Err(unsupported(n, format!("Softmax over axis {axis} of rank {r}")));
            }
            Ok(ins[0].clone())
        }
        "Concat" => {
            if ins.is_empty() {
                return Err(shape_err(n, "Concat needs inputs"));
            }
            let axis = norm_axis(n, attr_int(n, "axis")?.ok_or_else(|| shape_err(n, "Concat needs an axis"))?, ins[0].len())?;
            concat_check(n, ins, axis)
        }
        "Reshape" => {
            if ins.is_empty() || ins.len() > 2 {
                return Err(shape_err(n, "Reshape takes one or two inputs"));
            }
            let out = reshape_target(n, &reshape_spec(n, consts)?, numel(&ins[0]))?;
            if out.len() > 4 {
                return Err(shape_err(n, "rank above 4 is not supported"));
            }
            Ok(out)
        }
        "Flatten" => {
            arity(1)?;
            Ok(vec![numel(&ins[0])])
        }
        "Transpose" => {
            arity(1)?;
            let perm = transpose_perm(n, ins[0].len())?;
            Ok(perm.iter().map(|&p| ins[0][p]).collect())
        }
        tag => {
            let def = custom::lookup(tag).ok_or_else(|| unsupported(n, tag))?;
            (def.shape_fn)(ins, &n.attrs).map_err(|e| shape_err(n, e))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Lay {
    Raw,
    Last,
}

#[derive(Clone, Debug)]
enum Src {
    Act { node: String, lay: Lay },
    /// An initializer seen through a chain of quantizer nodes.
    Const { init: String, quants: Vec<usize> },
}

enum Slot {
    Inline(Tensor),
    Param(String),
}

struct Lower<'a> {
    m: &'a RawModel,
    consts: &'a BTreeMap<String, Tensor>,
    shapes: &'a BTreeMap<String, Vec<usize>>,
    nodes: Vec<LayerNode>,
    src: HashMap<String, Src>,
    cache: HashMap<(String, Lay), String>,
}

impl Lower<'_> {
    fn permutes(&self, rank: usize) -> bool {
        self.m.layout == Layout::ChannelsFirst && rank >= 2
    }

    fn push(&mut self, op: Op, inputs: &[String], slots: Vec<(&str, Slot)>) -> String {
        let name = format!("t{}", self.nodes.len());
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let mut node = LayerNode::new(name.clone(), op, &refs);
        for (w, s) in slots {
            match s {
                Slot::Inline(t) => {
                    node.weights.insert(w.to_string(), t);
                }
                Slot::Param(p) => {
                    node.params.insert(w.to_string(), p);
                }
            }
        }
        self.nodes.push(node);
        name
    }

    /// Materializes a constant value followed by its quantizers.
    fn const_chain(&mut self, value: Tensor, quants: &[usize]) -> Result<String, FrontendError> {
        let mut last = self.push(Op::Constant, &[], vec![("value", Slot::Inline(value))]);
        for &q in quants {
            let (kind, format) = quantizer_format(&self.m.graph.nodes[q])?;
            last = self.push(Op::Quant { kind, format }, &[last], vec![]);
        }
        Ok(last)
    }

    /// Weight operand: inlined when plain, a parameter chain when quantized.
    fn slot(&mut self, t: &str, transform: impl Fn(&Tensor) -> Tensor) -> Result<Option<Slot>, FrontendError> {
        let Some(Src::Const { init, quants }) = self.src.get(t).cloned() else { return Ok(None) };
        let value = transform(&self.consts[&init]);
        Ok(Some(if quants.is_empty() { Slot::Inline(value) } else { Slot::Param(self.const_chain(value, &quants)?) }))
    }

    /// Exact value of a constant operand after its quantizers.
    fn const_value(&self, t: &str) -> Option<Tensor> {
        let Some(Src::Const { init, quants }) = self.src.get(t) else { return None };
        let mut v = self.consts[init].clone();
        for &q in quants {
            let (_, f) = quantizer_format(&self.m.graph.nodes[q]).ok()?;
            v = v.quantize(f).to_tensor();
        }
        Some(v)
    }

    fn lay_of(&self, t: &str) -> Option<Lay> {
        match self.src.get(t)? {
            Src::Act { lay, .. } => Some(*lay),
            Src::Const { .. } => None,
        }
    }

    /// The node holding raw tensor `t` in layout `want`, broadcast to `to`
    /// when it is a constant.
    fn act_as(&mut self, t: &str, want: Lay, to: &[usize]) -> Result<String, FrontendError> {
        let key = (format!("{t}@{to:?}"), want);
        if let Some(n) = self.cache.get(&key) {
            return Ok(n.clone());
        }
        let name = match self.src[t].clone() {
            Src::Const { init, quants } => {
                let c = &self.consts[&init];
                let mut v = Tensor::new(to.to_vec(), broadcast_to(&c.values, &c.shape, to));
                if want == Lay::Last && self.permutes(to.len()) {
                    v = v.transpose(&to_last_perm(to.len()));
                }
                self.const_chain(v, &quants)?
            }
            Src::Act { node, lay } => {
                let rank = to.len();
                if lay == want || !self.permutes(rank) {
                    return Ok(node);
                }
                let perm = if want == Lay::Last { to_last_perm(rank) } else { to_first_perm(rank) };
                self.push(Op::Transpose { perm }, &[node], vec![])
            }
        };
        self.cache.insert(key, name.clone());
        Ok(name)
    }

    fn act(&mut self, t: &str, want: Lay) -> Result<String, FrontendError> {
        let shape = self.shapes[t].clone();
        self.act_as(t, want, &shape)
    }

    fn set(&mut self, t: &str, node: String, lay: Lay) {
        let lay = if self.permutes(self.shapes[t].len()) { lay } else { Lay::Raw };
        self.src.insert(t.to_string(), Src::Act { node, lay });
    }

    /// Layout shared by a multi-input op: that of the first activation.
    fn common_lay(&self, ins: &[String]) -> Lay {
        ins.iter().find_map(|i| self.lay_of(i)).unwrap_or(Lay::Raw)
    }

    fn lower(&mut self, idx: usize, fused: &mut HashSet<usize>, users: &HashMap<&str, Vec<usize>>, outputs: &HashSet<&str>) -> Result<(), FrontendError> {
        let n = &self.m.graph.nodes[idx];
        let out = n.outputs[0].as_str();
        let op = n.op.as_str();
        if let Some(kind) = activation_kind(n)? {
            let lay = self.lay_of(&n.inputs[0]).unwrap_or(Lay::Raw);
            let x = self.act(&n.inputs[0], lay)?;
            let y = self.push(Op::Activation(kind), &[x], vec![]);
            self.set(out, y, lay);
            return Ok(());
        }
        if n.is_quantizer() {
            match self.src[&n.inputs[0]].clone() {
                Src::Const { init, mut quants } => {
                    quants.push(idx);
                    self.src.insert(out.to_string(), Src::Const { init, quants });
                }
                Src::Act { node, lay } => {
                    let (kind, format) = quantizer_format(n)?;
                    let y = self.push(Op::Quant { kind, format }, &[node], vec![]);
                    self.set(out, y, lay);
                }
            }
            return Ok(());
        }
        match op {
            "Identity" => {
                let s = self.src[&n.inputs[0]].clone();
                self.src.insert(out.to_string(), s);
            }
            "MatMul" => {
                let w_shape = self.shapes[&n.inputs[1]].clone();
                let kernel = self.slot(&n.inputs[1], Tensor::clone)?.ok_or_else(|| unsupported(n, "MatMul with a non-constant right operand"))?;
                if matches!(self.src[&n.inputs[0]], Src::Const { .. }) {
                    return Err(unsupported(n, "MatMul with a quantized constant left operand"));
                }
                let units = w_shape[1];
                let x = self.act(&n.inputs[0], Lay::Raw)?;
                let mut target = out.to_string();
                let mut bias = None;
                let sole = users.get(out).filter(|u| u.len() == 1 && !outputs.contains(out)).map(|u| u[0]);
                if let Some(j) = sole {
                    let add = &self.m.graph.nodes[j];
                    if add.op == "Add" && add.inputs.len() == 2 {
                        let other = if add.inputs[0] == out { &add.inputs[1] } else { &add.inputs[0] };
                        if self.shapes[other] == vec![units] && matches!(self.src.get(other), Some(Src::Const { .. })) {
                            bias = self.slot(other, Tensor::clone)?;
                            fused.insert(j);
                            target = add.outputs[0].clone();
                        }
                    }
                }
                let bias = bias.unwrap_or_else(|| Slot::Inline(Tensor::zeros(vec![units])));
                let y = self.push(Op::Dense { units }, &[x], vec![("kernel", kernel), ("bias", bias)]);
                self.set(&target, y, Lay::Raw);
            }
            "Conv" => self.lower_conv(n)?,
            "MaxPool" | "AveragePool" => {
                if op == "AveragePool" && attr_int(n, "count_include_pad")?.unwrap_or(0) != 0 {
                    return Err(unsupported(n, "AveragePool with count_include_pad"));
                }
                let dims = self.shapes[&n.inputs[0]].len() - 1;
                let w = window(n, dims, None)?;
                let attrs = PoolAttrs { pool: w.kernel, stride: w.stride, pad: w.pad };
                let x = self.act(&n.inputs[0], Lay::Last)?;
                let y = self.push(if op == "MaxPool" { Op::MaxPool(attrs) } else { Op::AvgPool(attrs) }, &[x], vec![]);
                self.set(out, y, Lay::Last);
            }
            "BatchNormalization" => {
                let mut slots = Vec::new();
                for (k, w) in ["gamma", "beta", "mean", "variance"].into_iter().enumerate() {
                    let v = self.const_value(&n.inputs[k + 1]).ok_or_else(|| unsupported(n, "BatchNormalization with non-constant parameters"))?;
                    slots.push((w, Slot::Inline(v)));
                }
                let x = self.act(&n.inputs[0], Lay::Last)?;
                let y = self.push(Op::BatchNorm { epsilon: bn_epsilon(n)? }, &[x], slots);
                self.set(out, y, Lay::Last);
            }
            "Softmax" => {
                let x = self.act(&n.inputs[0], Lay::Raw)?;
                let y = self.push(Op::Softmax, &[x], vec![]);
                self.set(out, y, Lay::Raw);
            }
            "Add" | "Sub" | "Mul" => {
                let (a, b) = (&n.inputs[0], &n.inputs[1]);
                let to = self.shapes[out].clone();
                let act_a = self.lay_of(a).is_some();
                let act_b = self.lay_of(b).is_some();
                if op == "Mul" {
                    return Err(unsupported(n, "Mul on activations"));
                }
                if act_a && act_b && (self.shapes[a] != to || self.shapes[b] != to) {
                    return Err(shape_err(n, "broadcasting between activations is not supported"));
                }
                if (act_a && self.shapes[a] != to) || (act_b && self.shapes[b] != to) {
                    return Err(shape_err(n, "constant operand is larger than the activation"));
                }
                let lay = self.common_lay(&n.inputs);
                let x = self.act_as(a, lay, &to)?;
                let y = if op == "Sub" {
                    let neg = match (act_b, self.src[b].clone()) {
                        (false, Src::Const { init, quants }) if quants.is_empty() => {
                            let c = &self.consts[&init];
                            Tensor::new(c.shape.clone(), c.values.iter().map(|v| -v).collect())
                        }
                        _ => return Err(unsupported(n, "Sub with a non-constant or quantized subtrahend")),
                    };
                    if !act_a {
                        return Err(unsupported(n, "Sub of an activation from a constant"));
                    }
                    let mut v = Tensor::new(to.clone(), broadcast_to(&neg.values, &neg.shape, &to));
                    if lay == Lay::Last && self.permutes(to.len()) {
                        v = v.transpose(&to_last_perm(to.len()));
                    }
                    self.const_chain(v, &[])?
                } else {
                    self.act_as(b, lay, &to)?
                };
                let z = self.push(Op::Add, &[x, y], vec![]);
                self.set(out, z, lay);
            }
            "Concat" => {
                let lay = self.common_lay(&n.inputs);
                let rank = self.shapes[out].len();
                let raw_axis = norm_axis(n, attr_int(n, "axis")?.unwrap_or(0), rank)?;
                let axis = if lay == Lay::Last && self.permutes(rank) {
                    if raw_axis == 0 { rank - 1 } else { raw_axis - 1 }
                } else {
                    raw_axis
                };
                let xs = n.inputs.iter().map(|i| self.act(i, lay)).collect::<Result<Vec<_>, _>>()?;
                let y = self.push(Op::Concat { axis }, &xs, vec![]);
                self.set(out, y, lay);
            }
            "Reshape" | "Flatten" => {
                let x = self.act(&n.inputs[0], Lay::Raw)?;
                let y = self.push(Op::Reshape { shape: self.shapes[out].clone() }, &[x], vec![]);
                self.set(out, y, Lay::Raw);
            }
            "Transpose" => {
                let perm = transpose_perm(n, self.shapes[&n.inputs[0]].len())?;
                let x = self.act(&n.inputs[0], Lay::Raw)?;
                let y = self.push(Op::Transpose { perm }, &[x], vec![]);
                self.set(out, y, Lay::Raw);
            }
            tag => {
                let xs = n.inputs.iter().map(|i| self.act(i, Lay::Raw)).collect::<Result<Vec<_>, _>>()?;
                let y = self.push(Op::Custom { tag: tag.to_string(), attrs: n.attrs.clone() }, &xs, vec![]);
                self.set(out, y, Lay::Raw);
            }
        }
        Ok(())
    }

    fn lower_conv(&mut self, n: &RawNode) -> Result<(), FrontendError> {
        let x_shape = &self.shapes[&n.inputs[0]];
        let w_shape = self.shapes[&n.inputs[1]].clone();
        let dims = x_shape.len() - 1;
        let (c, _) = split_channels(x_shape, self.m.layout);
        let f = w_shape[0];
        let group = attr_int(n, "group")?.unwrap_or(1) as usize;
        let w = window(n, dims, Some(w_shape[2..].to_vec()))?;
        let spatial_perm: Vec<usize> = (2..dims + 2).collect();
        let (op, perm): (Op, Option<Vec<usize>>) = if group == 1 {
            let pointwise = w.kernel.iter().all(|k| *k == 1) && w.stride.iter().all(|s| *s == 1) && w.pad.iter().all(|p| *p == [0, 0]);
            if pointwise {
                (Op::Pointwise { filters: f }, None)
            } else {
                let attrs = ConvAttrs { filters: f, kernel: w.kernel.clone(), stride: w.stride.clone(), pad: w.pad.clone() };
                let op = if dims == 1 { Op::Conv1D(attrs) } else { Op::Conv2D(attrs) };
                (op, Some(spatial_perm.iter().copied().chain([1, 0]).collect()))
            }
        } else if group == c && f == c {
            let attrs = ConvAttrs { filters: c, kernel: w.kernel.clone(), stride: w.stride.clone(), pad: w.pad.clone() };
            (Op::DepthwiseConv(attrs), Some(spatial_perm.iter().copied().chain([0, 1]).collect()))
        } else {
            return Err(unsupported(n, format!("Conv with group {group} on {c} channels and {f} filters")));
        };
        let transform = |t: &Tensor| match &perm {
            Some(p) => t.transpose(p),
            None => Tensor::new(vec![t.shape[0], t.shape[1]], t.values.clone()).transpose(&[1, 0]),
        };
        let kernel = self.slot(&n.inputs[1], transform)?.ok_or_else(|| unsupported(n, "Conv with non-constant weights"))?;
        let bias = match n.inputs.get(2) {
            Some(b) => self.slot(b, Tensor::clone)?.ok_or_else(|| unsupported(n, "Conv with a non-constant bias"))?,
            None => Slot::Inline(Tensor::zeros(vec![f])),
        };
        let x = self.act(&n.inputs[0], Lay::Last)?;
        let y = self.push(op, &[x], vec![("kernel", kernel), ("bias", bias)]);
        self.set(&n.outputs[0], y, Lay::Last);
        Ok(())
    }
}

/// Drops nodes that no output depends on. Inputs are always kept.
fn prune(nodes: Vec<LayerNode>, outputs: &[String]) -> Vec<LayerNode> {
    let by_name: HashMap<&str, &LayerNode> = nodes.iter().map(|n| (n.name.as_str(), n)).collect();
    let mut live: HashSet<String> = HashSet::new();
    let mut stack: Vec<&str> = outputs.iter().map(String::as_str).collect();
    while let Some(s) = stack.pop() {
        if live.insert(s.to_string()) {
            stack.extend(by_name[s].predecessors().map(String::as_str));
        }
    }
    nodes.into_iter().filter(|n| live.contains(&n.name) || matches!(n.op, Op::Input { .. })).collect()
}

/// Renames nodes `<stem><ordinal>` in topological order, ties broken by
/// creation order, and returns them in that order.
fn rename(nodes: Vec<LayerNode>, outputs: &mut [String]) -> Vec<LayerNode> {
    let index: HashMap<String, usize> = nodes.iter().enumerate().map(|(i, n)| (n.name.clone(), i)).collect();
    let mut pending: Vec<usize> = nodes.iter().map(|n| n.predecessors().count()).collect();
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for p in n.predecessors() {
            users[index[p]].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..nodes.len()).filter(|i| pending[*i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &u in &users[i] {
            pending[u] -= 1;
            if pending[u] == 0 {
                ready.insert(u);
            }
        }
    }
    let mut counters: BTreeMap<String, usize> = BTreeMap::new();
    let mut names: HashMap<String, String> = HashMap::new();
    for &i in &order {
        let stem = nodes[i].op.stem();
        let k = counters.entry(stem.clone()).or_default();
        names.insert(nodes[i].name.clone(), format!("{stem}{k}"));
        *k += 1;
    }
    let mut slots: Vec<Option<LayerNode>> = nodes.into_iter().map(Some).collect();
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let mut n = slots[i].take().unwrap();
        n.name = names[&n.name].clone();
        for x in n.inputs.iter_mut() {
            *x = names[x.as_str()].clone();
        }
        for p in n.params.values_mut() {
            *p = names[p.as_str()].clone();
        }
        out.push(n);
    }
    for o in outputs.iter_mut() {
        *o = names[o.as_str()].clone();
    }
    out
}

/// Cleans a parsed model into a channels-last layer graph.
pub fn clean(m: &RawModel) -> Result<ModelGraph, FrontendError> {
    let order = raw_order(m)?;
    let (consts, folded) = fold(m, &order)?;
    let g = &m.graph;

    let mut shapes: BTreeMap<String, Vec<usize>> = consts.iter().map(|(k, t)| (k.clone(), t.shape.clone())).collect();
    for i in &g.inputs {
        shapes.insert(i.name.clone(), i.shape.clone());
    }
    for &i in &order {
        if folded.contains(&i) {
            continue;
        }
        let n = &g.nodes[i];
        let ins: Vec<Vec<usize>> = n.inputs.iter().map(|x| shapes[x].clone()).collect();
        let s = infer_raw(n, &ins, m.layout, &consts)?;
        if s.len() > 4 {
            return Err(shape_err(n, "rank above 4 is not supported"));
        }
        shapes.insert(n.outputs[0].clone(), s);
    }

    let mut users: HashMap<&str, Vec<usize>> = HashMap::new();
    for &i in &order {
        if !folded.contains(&i) {
            for x in &g.nodes[i].inputs {
                users.entry(x.as_str()).or_default().push(i);
            }
        }
    }
    let outputs: HashSet<&str> = g.outputs.iter().map(String::as_str).collect();

    let mut lw = Lower { m, consts: &consts, shapes: &shapes, nodes: Vec::new(), src: HashMap::new(), cache: HashMap::new() };
    for inp in &g.inputs {
        let y = lw.push(Op::Input { shape: inp.shape.clone() }, &[], vec![]);
        lw.src.insert(inp.name.clone(), Src::Act { node: y, lay: Lay::Raw });
    }
    for name in consts.keys() {
        lw.src.insert(name.clone(), Src::Const { init: name.clone(), quants: vec![] });
    }
    let mut fused = HashSet::new();
    for &i in &order {
        if folded.contains(&i) || fused.contains(&i) {
            continue;
        }
        lw.lower(i, &mut fused, &users, &outputs)?;
    }
    let mut outs = g.outputs.iter().map(|o| lw.act(o, Lay::Raw)).collect::<Result<Vec<_>, _>>()?;
    let nodes = prune(std::mem::take(&mut lw.nodes), &outs);
    let nodes = rename(nodes, &mut outs);
    let metadata = Metadata { source: "model".into(), ..Default::default() };
    Ok(ModelGraph::build(nodes, outs, HwConfig::default(), metadata)?)
}

#[cfg(test)]
mod tests {
    use super::super::{parse_model, RawGraph, RawInput, RawTensor};
    use super::*;
    use serde_json::json;

    fn model(layout: Layout, inputs: Vec<(&str, Vec<usize>)>, nodes: Vec<RawNode>, inits: Vec<(&str, Vec<usize>, &[&str])>, outputs: &[&str]) -> RawModel {
        RawModel {
            schema: 1,
            layout,
            graph: RawGraph {
                inputs: inputs.into_iter().map(|(n, s)| RawInput { name: n.into(), shape: s }).collect(),
                outputs: outputs.iter().map(|s| s.to_string()).collect(),
                nodes,
                initializers: inits
                    .into_iter()
                    .map(|(n, s, d)| (n.to_string(), RawTensor { shape: s, data: d.iter().map(|x| x.to_string()).collect() }))
                    .collect(),
            },
        }
    }

    #[test]
    fn matmul_add_becomes_dense() {
        let m = parse_model(super::super::tests::one_dense().to_string().as_bytes()).unwrap();
        let g = clean(&m).unwrap();
        assert_eq!(g.topo_order(), ["input0", "dense0"]);
        let d = g.node("dense0").unwrap();
        assert_eq!(d.op, Op::Dense { units: 3 });
        assert_eq!(d.weights["bias"], Tensor::from_ints(vec![3], &[0, 1, -1]));
        assert_eq!(g.outputs(), ["dense0"]);
    }

    #[test]
    fn bare_matmul_gets_zero_bias() {
        let m = model(
            Layout::ChannelsLast,
            vec![("x", vec![2])],
            vec![RawNode::new("MatMul", &["x", "W"], "y")],
            vec![("W", vec![2, 1], &["1", "2"])],
            &["y"],
        );
        let g = clean(&m).unwrap();
        assert_eq!(g.node("dense0").unwrap().weights["bias"], Tensor::zeros(vec![1]));
    }

    #[test]
    fn constant_subgraph_folds() {
        let m = model(
            Layout::ChannelsLast,
            vec![("x", vec![2])],
            vec![
                RawNode::new("Add", &["a", "b"], "c"),
                RawNode::new("Mul", &["c", "two"], "d"),
                RawNode::new("Add", &["x", "d"], "y"),
            ],
            vec![("a", vec![2], &["1", "2"]), ("b", vec![2], &["0.5", "0.25"]), ("two", vec![1], &["2"])],
            &["y"],
        );
        let g = clean(&m).unwrap();
        assert_eq!(g.topo_order(), ["constant0", "input0", "add0"]);
        let c = g.constant_value("constant0").unwrap();
        assert_eq!(c, Tensor::from_f64(vec![2], &[3.0, 4.5]));
    }

    #[test]
    fn channels_first_conv_gets_transposes() {
        let w: Vec<String> = (0..2 * 3 * 3 * 3).map(|i| (i % 5).to_string()).collect();
        let w: Vec<&str> = w.iter().map(String::as_str).collect();
        let m = model(
            Layout::ChannelsFirst,
            vec![("x", vec![3, 8, 8])],
            vec![
                RawNode::new("Conv", &["x", "W"], "h").attr("kernel_shape", json!([3, 3])),
                RawNode::new("Relu", &["h"], "y"),
            ],
            vec![("W", vec![2, 3, 3, 3], &w)],
            &["y"],
        );
        let g = clean(&m).unwrap();
        assert_eq!(g.topo_order(), ["input0", "transpose0", "conv2d0", "relu0", "transpose1"]);
        assert_eq!(g.shape("transpose0"), [8, 8, 3]);
        assert_eq!(g.shape("conv2d0"), [6, 6, 2]);
        assert_eq!(g.shape("relu0"), [6, 6, 2]);
        assert_eq!(g.shape("transpose1"), [2, 6, 6]);
        assert_eq!(g.node("conv2d0").unwrap().weights["kernel"].shape, [3, 3, 3, 2]);
    }

    #[test]
    fn channels_first_concat_axis_maps() {
        let m = model(
            Layout::ChannelsFirst,
            vec![("a", vec![2, 4]), ("b", vec![3, 4])],
            vec![
                RawNode::new("MaxPool", &["a"], "pa").attr("kernel_shape", json!([2])).attr("strides", json!([2])),
                RawNode::new("MaxPool", &["b"], "pb").attr("kernel_shape", json!([2])).attr("strides", json!([2])),
                RawNode::new("Concat", &["pa", "pb"], "y").attr("axis", json!(0)),
            ],
            vec![],
            &["y"],
        );
        let g = clean(&m).unwrap();
        assert_eq!(g.node("concat0").unwrap().op, Op::Concat { axis: 1 });
        assert_eq!(g.shape("concat0"), [2, 5]);
        assert_eq!(g.shape(&g.outputs()[0]), [5, 2]);
    }

    #[test]
    fn unregistered_op_rejected() {
        let m = model(Layout::ChannelsLast, vec![("x", vec![2])], vec![RawNode::new("Frobnicate", &["x"], "y")], vec![], &["y"]);
        assert!(matches!(clean(&m), Err(FrontendError::UnsupportedOp { ref op, .. }) if op == "Frobnicate"));
    }

    #[test]
    fn shape_failure_names_the_node() {
        let m = model(
            Layout::ChannelsLast,
            vec![("x", vec![3])],
            vec![RawNode::new("MatMul", &["x", "W"], "y")],
            vec![("W", vec![2, 1], &["1", "2"])],
            &["y"],
        );
        assert!(matches!(clean(&m), Err(FrontendError::ShapeInferenceFailure { ref node, .. }) if node == "y"));
    }

    #[test]
    fn quantized_weights_become_parameter_chains() {
        let m = model(
            Layout::ChannelsLast,
            vec![("x", vec![2])],
            vec![
                RawNode::new("Quant", &["W"], "Wq").attr("bitwidth", json!(4)).attr("scale", json!(0.25)),
                RawNode::new("MatMul", &["x", "Wq"], "y"),
            ],
            vec![("W", vec![2, 2], &["0.3", "-0.6", "1", "0.1"])],
            &["y"],
        );
        let g = clean(&m).unwrap();
        assert_eq!(g.topo_order(), ["constant0", "input0", "quant0", "dense0"]);
        assert_eq!(g.node("dense0").unwrap().params["kernel"], "quant0");
        assert_eq!(g.weight("dense0", "kernel").unwrap(), Tensor::from_f64(vec![2, 2], &[0.25, -0.5, 1.0, 0.0]));
    }
}
