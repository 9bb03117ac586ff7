//! Bit-exact emulation of every supported layer.

pub mod conv;
pub mod reference;
pub mod table;

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::cmvm::{self, CmvmError, CmvmPlan};
use crate::fxp::real::{real_from_f64, real_from_scaled, real_to_f64, Real};
use crate::fxp::{cast_payload, quantize, FixedPointType, WeightFormat};
use crate::ir::custom::{self, CustomOpDef};
use crate::ir::tensor::{numel, permute};
use crate::ir::{ActivationKind, Attrs, ModelGraph, Op, QTensor, Role, Tensor};

pub use conv::{conv_forward, im2col, pool_forward, PoolKind, Window};
pub use table::{build_activation_table, ActivationTable, TableFn};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("unresolved precision at '{0}'")]
    UnresolvedPrecision(String),
    #[error("bad geometry at '{node}': {reason}")]
    BadGeometry { node: String, reason: String },
    #[error("parallelization factor {pf} does not divide {positions} positions at '{node}'")]
    IndivisiblePF { node: String, positions: usize, pf: usize },
    #[error("'{node}': {source}")]
    Cmvm { node: String, source: CmvmError },
    #[error("missing input '{0}'")]
    MissingInput(String),
    #[error("input '{input}' has shape {got:?}, expected {expected:?}")]
    InputShape { input: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("custom op at '{node}': {reason}")]
    Custom { node: String, reason: String },
    #[error("unsupported op {op} at '{node}'")]
    Unsupported { node: String, op: String },
}

/// Exponent of the internal softmax exp and reciprocal tables.
pub fn softmax_table_type() -> FixedPointType {
    "fixed<18,1,u,RND,SAT>".parse().expect("static type")
}

/// A planned CMVM layer: `y = cast(cast(W x + b, accum), result)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CmvmLayer {
    pub name: String,
    /// `[M, N]`.
    pub matrix: QTensor,
    pub bias: Option<QTensor>,
    pub plan: CmvmPlan,
    pub input_type: FixedPointType,
    pub accum: FixedPointType,
    pub result: FixedPointType,
    pub pf: usize,
    /// Number of CMVM applications per sample.
    pub positions: usize,
}

impl CmvmLayer {
    /// One CMVM on a column of input payloads of type `x_type`; returns
    /// result payloads.
    pub fn apply(&self, col: &[i128], x_type: FixedPointType) -> Result<Vec<i128>, KernelError> {
        let col: Vec<i128> = if x_type.same_grid(&self.input_type) {
            col.to_vec()
        } else {
            col.iter().map(|p| cast_payload(*p, x_type.lsb_exp(), self.input_type)).collect()
        };
        let y = cmvm::eval_plan_payloads(&self.plan, &self.matrix, &col)
            .map_err(|source| KernelError::Cmvm { node: self.name.clone(), source })?;
        let ey = self.input_type.lsb_exp() + self.matrix.ty().lsb_exp();
        let eb = self.bias.as_ref().map_or(ey, |b| b.ty().lsb_exp());
        let e = ey.min(eb);
        Ok(y
            .iter()
            .enumerate()
            .map(|(m, v)| {
                let mut s = shl(*v, ey - e);
                if let Some(b) = &self.bias {
                    s += shl(b.payloads[m], eb - e);
                }
                let acc = cast_payload(s, e, self.accum);
                cast_payload(acc, self.accum.lsb_exp(), self.result)
            })
            .collect())
    }

    /// Structural initiation interval: `positions / PF × plan.ii`.
    pub fn ii(&self) -> usize {
        self.positions / self.pf * self.plan.ii
    }
}

fn shl(v: i128, k: i32) -> i128 {
    debug_assert!(k >= 0);
    let r = v.checked_shl(k as u32).expect("alignment overflow");
    assert_eq!(r >> k, v, "alignment overflow");
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxKernel {
    pub exp: ActivationTable,
    pub recip: ActivationTable,
    pub sum_type: FixedPointType,
    pub result: FixedPointType,
}

/// Prepared per-node computation.
#[derive(Clone)]
pub enum Kernel {
    Input { shape: Vec<usize>, result: FixedPointType },
    Constant(QTensor),
    Cmvm { layer: CmvmLayer, window: Option<Window>, depthwise: bool },
    BatchNorm { scale: QTensor, shift: QTensor, accum: FixedPointType, result: FixedPointType },
    Select { kind: ActivationKind, result: FixedPointType },
    Table(ActivationTable),
    Softmax(SoftmaxKernel),
    Pool { kind: PoolKind, window: Window, accum: FixedPointType, result: FixedPointType },
    Add { accum: Option<FixedPointType>, result: FixedPointType },
    Concat { axis: usize, result: FixedPointType },
    Reshape { shape: Vec<usize>, result: FixedPointType },
    Transpose { perm: Vec<usize>, result: FixedPointType },
    Quant { format: WeightFormat, result: FixedPointType },
    Custom { def: std::sync::Arc<CustomOpDef>, attrs: Attrs, result: FixedPointType },
}

impl std::fmt::Debug for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Kernel::Input { .. } => "Input",
            Kernel::Constant(_) => "Constant",
            Kernel::Cmvm { .. } => "Cmvm",
            Kernel::BatchNorm { .. } => "BatchNorm",
            Kernel::Select { .. } => "Select",
            Kernel::Table(_) => "Table",
            Kernel::Softmax(_) => "Softmax",
            Kernel::Pool { .. } => "Pool",
            Kernel::Add { .. } => "Add",
            Kernel::Concat { .. } => "Concat",
            Kernel::Reshape { .. } => "Reshape",
            Kernel::Transpose { .. } => "Transpose",
            Kernel::Quant { .. } => "Quant",
            Kernel::Custom { .. } => "Custom",
        };
        f.write_str(name)
    }
}

struct Step {
    name: String,
    inputs: Vec<String>,
    input_cast: Option<FixedPointType>,
    kernel: Kernel,
}

/// A graph compiled into kernels, ready for repeated emulation.
pub struct Program {
    steps: Vec<Step>,
    outputs: Vec<String>,
    inputs: Vec<String>,
}

fn fixed_of(g: &ModelGraph, node: &str, role: Role) -> Result<FixedPointType, KernelError> {
    g.node(node)
        .and_then(|n| n.precision(role).fixed())
        .ok_or_else(|| KernelError::UnresolvedPrecision(node.to_string()))
}

/// Type of the value a node produces.
pub fn value_type(g: &ModelGraph, node: &str) -> Option<FixedPointType> {
    let n = g.node(node)?;
    if let Some(t) = n.precision(Role::Result).fixed() {
        return Some(t);
    }
    match &n.op {
        Op::Quant { format, .. } => Some(format.container()),
        _ => None,
    }
}

/// Type entering data port `port` of `node`.
pub fn input_value_type(g: &ModelGraph, node: &str, port: usize) -> Result<FixedPointType, KernelError> {
    let n = g.node(node).expect("node exists");
    if let Some(t) = n.precision(Role::Input).fixed() {
        return Ok(t);
    }
    let src = &n.inputs[port];
    value_type(g, src).ok_or_else(|| KernelError::UnresolvedPrecision(src.clone()))
}

fn weight_q(g: &ModelGraph, node: &str, weight: &str, role: Role) -> Result<Option<QTensor>, KernelError> {
    let Some(t) = g.weight(node, weight) else { return Ok(None) };
    let format = g
        .node(node)
        .and_then(|n| n.precision(role).format())
        .ok_or_else(|| KernelError::UnresolvedPrecision(node.to_string()))?;
    Ok(Some(t.quantize(format)))
}

/// `γ/√(σ²+ε)` in binary64 and `β − μ·scale`, both as exact reals.
pub fn batchnorm_affine(gamma: &Tensor, beta: &Tensor, mean: &Tensor, var: &Tensor, eps: &Real) -> (Vec<Real>, Vec<Real>) {
    let eps = real_to_f64(eps);
    let mut scale = Vec::with_capacity(gamma.len());
    let mut shift = Vec::with_capacity(gamma.len());
    for i in 0..gamma.len() {
        let s = real_to_f64(&gamma.values[i]) / (real_to_f64(&var.values[i]) + eps).sqrt();
        let s = real_from_f64(s).expect("finite batchnorm scale");
        shift.push(&beta.values[i] - &mean.values[i] * &s);
        scale.push(s);
    }
    (scale, shift)
}

/// The CMVM layer a node compiles to, if any.
pub fn cmvm_layer(g: &ModelGraph, name: &str) -> Result<Option<CmvmLayer>, KernelError> {
    let node = g.node(name).expect("node exists");
    if !node.op.is_cmvm() {
        return Ok(None);
    }
    let kernel = weight_q(g, name, "kernel", Role::Weight)?
        .ok_or_else(|| KernelError::UnresolvedPrecision(name.to_string()))?;
    let bias = weight_q(g, name, "bias", Role::Bias)?;
    let input_type = input_value_type(g, name, 0)?;
    let accum = fixed_of(g, name, Role::Accum)?;
    let result = fixed_of(g, name, Role::Result)?;
    let cfg = g.config.layer(name);
    let in_shape = g.input_shape(name, 0);
    let out_shape = g.shape(name);
    let (matrix, positions) = match &node.op {
        Op::Dense { .. } | Op::Pointwise { .. } => {
            let (n, m) = (kernel.shape[0], kernel.shape[1]);
            let t = kernel.transpose(&[1, 0]);
            (QTensor::new(vec![m, n], t.payloads, t.format), numel(&in_shape[..in_shape.len() - 1]))
        }
        Op::Conv1D(_) | Op::Conv2D(_) => (conv::conv_matrix(&kernel), numel(&out_shape[..out_shape.len() - 1])),
        Op::DepthwiseConv(_) => (conv::depthwise_matrix(&kernel), numel(&out_shape[..out_shape.len() - 1])),
        _ => unreachable!(),
    };
    let pf = if node.op.is_conv_like() { cfg.parallelization_factor } else { 1 };
    if positions % pf != 0 {
        return Err(KernelError::IndivisiblePF { node: name.to_string(), positions, pf });
    }
    let plan = cmvm::plan(&matrix, cfg.strategy, cfg.reuse_factor, input_type)
        .map_err(|source| KernelError::Cmvm { node: name.to_string(), source })?;
    let bias = bias.map(|b| QTensor::new(vec![b.len()], b.payloads, b.format));
    Ok(Some(CmvmLayer { name: name.to_string(), matrix, bias, plan, input_type, accum, result, pf, positions }))
}

fn ceil_log2(n: usize) -> u32 {
    usize::BITS - (n.max(1) - 1).leading_zeros()
}

pub fn softmax_kernel(in_type: FixedPointType, n: usize, table_size: usize, result: FixedPointType) -> SoftmaxKernel {
    let diff = FixedPointType::new(in_type.width() + 1, in_type.int_bits() + 1, true).expect("difference type");
    let tt = softmax_table_type();
    let exp = build_activation_table(TableFn::Exp, diff, table_size, tt);
    let k = ceil_log2(n);
    let sum_type = FixedPointType::new(tt.width() + k, tt.int_bits() + k as i32, false).expect("sum type");
    let recip = build_activation_table(TableFn::Reciprocal, sum_type, table_size, tt);
    SoftmaxKernel { exp, recip, sum_type, result }
}

impl SoftmaxKernel {
    /// Softmax over one vector of payloads on `in_type`'s grid.
    pub fn apply(&self, x: &[i128]) -> Vec<i128> {
        let max = x.iter().copied().max().unwrap_or(0);
        let e: Vec<i128> = x.iter().map(|p| self.exp.lookup_payload(p - max)).collect();
        let sum: i128 = e.iter().sum();
        let sum = cast_payload(sum, self.exp.out_type.lsb_exp(), self.sum_type);
        let r = self.recip.lookup_payload(sum);
        let ey = self.exp.out_type.lsb_exp() + self.recip.out_type.lsb_exp();
        e.iter().map(|v| cast_payload(v * r, ey, self.result)).collect()
    }
}

fn window_of(kernel: &[usize], stride: &[usize], pad: &[[usize; 2]]) -> Window {
    Window { kernel: kernel.to_vec(), stride: stride.to_vec(), pad: pad.to_vec() }
}

fn prepare_node(g: &ModelGraph, name: &str) -> Result<Kernel, KernelError> {
    let node = g.node(name).expect("node exists");
    let result = || fixed_of(g, name, Role::Result);
    let cfg = g.config.layer(name);
    Ok(match &node.op {
        Op::Input { shape } => Kernel::Input { shape: shape.clone(), result: result()? },
        Op::Constant => {
            let t = node.weights.get("value").expect("constant value");
            let ty = match node.precision(Role::Result).fixed() {
                Some(t) => t,
                None => exact_type(t).ok_or_else(|| KernelError::UnresolvedPrecision(name.to_string()))?,
            };
            Kernel::Constant(t.quantize(WeightFormat::Fixed(ty)))
        }
        Op::Dense { .. } | Op::Pointwise { .. } | Op::Conv1D(_) | Op::Conv2D(_) | Op::DepthwiseConv(_) => {
            let layer = cmvm_layer(g, name)?.expect("cmvm op");
            let window = match &node.op {
                Op::Conv1D(a) | Op::Conv2D(a) | Op::DepthwiseConv(a) => Some(window_of(&a.kernel, &a.stride, &a.pad)),
                _ => None,
            };
            Kernel::Cmvm { layer, window, depthwise: matches!(node.op, Op::DepthwiseConv(_)) }
        }
        Op::BatchNorm { epsilon } => {
            let w = |n: &str| g.weight(name, n).expect("batchnorm parameter");
            let (scale, shift) = batchnorm_affine(&w("gamma"), &w("beta"), &w("mean"), &w("variance"), epsilon);
            let c = scale.len();
            let wf = node.precision(Role::Weight).format().ok_or_else(|| KernelError::UnresolvedPrecision(name.into()))?;
            let bf = node.precision(Role::Bias).format().ok_or_else(|| KernelError::UnresolvedPrecision(name.into()))?;
            Kernel::BatchNorm {
                scale: Tensor::new(vec![c], scale).quantize(wf),
                shift: Tensor::new(vec![c], shift).quantize(bf),
                accum: fixed_of(g, name, Role::Accum)?,
                result: result()?,
            }
        }
        Op::Activation(kind) if kind.is_piecewise_linear() => Kernel::Select { kind: kind.clone(), result: result()? },
        Op::Activation(kind) => Kernel::Table(build_activation_table(
            TableFn::Activation(kind.clone()),
            input_value_type(g, name, 0)?,
            cfg.table_size,
            result()?,
        )),
        Op::Softmax => {
            let shape = g.input_shape(name, 0);
            Kernel::Softmax(softmax_kernel(input_value_type(g, name, 0)?, *shape.last().unwrap(), cfg.table_size, result()?))
        }
        Op::MaxPool(p) | Op::AvgPool(p) => {
            let kind = if matches!(node.op, Op::MaxPool(_)) { PoolKind::Max } else { PoolKind::Avg };
            let accum = match kind {
                PoolKind::Max => result()?,
                PoolKind::Avg => fixed_of(g, name, Role::Accum)?,
            };
            Kernel::Pool { kind, window: window_of(&p.pool, &p.stride, &p.pad), accum, result: result()? }
        }
        Op::Add => Kernel::Add { accum: node.precision(Role::Accum).fixed(), result: result()? },
        Op::Concat { axis } => Kernel::Concat { axis: *axis, result: result()? },
        Op::Reshape { shape } => Kernel::Reshape { shape: shape.clone(), result: result()? },
        Op::Transpose { perm } => Kernel::Transpose { perm: perm.clone(), result: result()? },
        Op::Quant { format, .. } => {
            Kernel::Quant { format: *format, result: value_type(g, name).expect("quant has a value type") }
        }
        Op::Custom { tag, attrs } => {
            let def = custom::lookup(tag).ok_or_else(|| KernelError::Unsupported { node: name.into(), op: tag.clone() })?;
            Kernel::Custom { def, attrs: attrs.clone(), result: result()? }
        }
    })
}

/// Smallest exact type for a dyadic tensor.
pub fn exact_type(t: &Tensor) -> Option<FixedPointType> {
    use crate::fxp::real::{dyadic_exponent, scale_pow2};
    use crate::fxp::{min_type_for, Interval};
    use num_traits::ToPrimitive;
    let mut exp = 0;
    for v in t.values.iter().filter(|v| !num_traits::Zero::is_zero(*v)) {
        exp = exp.min(dyadic_exponent(v)?);
    }
    let mut iv = Interval::point(0, exp);
    for v in &t.values {
        let p = scale_pow2(v, -exp).to_integer().to_i128()?;
        iv = iv.hull(&Interval::point(p, exp));
    }
    Some(min_type_for(&iv, exp))
}

impl Program {
    pub fn new(g: &ModelGraph) -> Result<Program, KernelError> {
        let mut steps = Vec::with_capacity(g.len());
        for name in g.topo_order() {
            let node = g.node(name).unwrap();
            let input_cast = if matches!(node.op, Op::Input { .. }) { None } else { node.precision(Role::Input).fixed() };
            steps.push(Step {
                name: name.clone(),
                inputs: node.inputs.clone(),
                input_cast,
                kernel: prepare_node(g, name)?,
            });
        }
        Ok(Program {
            steps,
            outputs: g.outputs().to_vec(),
            inputs: g.inputs().into_iter().map(String::from).collect(),
        })
    }

    pub fn kernel(&self, name: &str) -> Option<&Kernel> {
        self.steps.iter().find(|s| s.name == name).map(|s| &s.kernel)
    }

    /// Every lookup table, keyed `<node>` or `<node>.exp` / `<node>.recip`.
    pub fn tables(&self) -> Vec<(String, &ActivationTable)> {
        let mut out = Vec::new();
        for s in &self.steps {
            match &s.kernel {
                Kernel::Table(t) => out.push((s.name.clone(), t)),
                Kernel::Softmax(k) => {
                    out.push((format!("{}.exp", s.name), &k.exp));
                    out.push((format!("{}.recip", s.name), &k.recip));
                }
                _ => {}
            }
        }
        out
    }

    /// Runs one sample and returns every node's value.
    pub fn run_all(&self, inputs: &BTreeMap<String, QTensor>) -> Result<BTreeMap<String, QTensor>, KernelError> {
        let mut vals: BTreeMap<String, QTensor> = BTreeMap::new();
        for s in &self.steps {
            let mut ins: Vec<QTensor> = s.inputs.iter().map(|i| vals[i].clone()).collect();
            if let Some(t) = s.input_cast {
                ins = ins.iter().map(|x| x.cast(t)).collect();
            }
            let y = match &s.kernel {
                Kernel::Input { shape, result } => {
                    let x = inputs.get(&s.name).ok_or_else(|| KernelError::MissingInput(s.name.clone()))?;
                    if &x.shape != shape {
                        return Err(KernelError::InputShape { input: s.name.clone(), expected: shape.clone(), got: x.shape.clone() });
                    }
                    x.cast(*result)
                }
                _ => run_kernel(&s.name, &s.kernel, &ins)?,
            };
            vals.insert(s.name.clone(), y);
        }
        Ok(vals)
    }

    pub fn run(&self, inputs: &BTreeMap<String, QTensor>) -> Result<BTreeMap<String, QTensor>, KernelError> {
        let mut all = self.run_all(inputs)?;
        Ok(self.outputs.iter().map(|o| (o.clone(), all.remove(o).expect("output computed"))).collect())
    }

    pub fn run_batch(&self, batch: &[BTreeMap<String, QTensor>]) -> Result<Vec<BTreeMap<String, QTensor>>, KernelError> {
        batch.par_iter().map(|x| self.run(x)).collect()
    }

    pub fn input_names(&self) -> &[String] {
        &self.inputs
    }

    pub fn output_names(&self) -> &[String] {
        &self.outputs
    }
}

fn run_kernel(name: &str, kernel: &Kernel, ins: &[QTensor]) -> Result<QTensor, KernelError> {
    let x = ins.first();
    Ok(match kernel {
        Kernel::Input { .. } => unreachable!(),
        Kernel::Constant(v) => v.clone(),
        Kernel::Cmvm { layer, window, .. } => {
            let x = x.unwrap();
            match window {
                Some(w) => conv_forward(x, w, layer)?,
                None => {
                    let n = *x.shape.last().unwrap();
                    let mut out = Vec::with_capacity(x.len() / n.max(1) * layer.plan.m);
                    for row in x.payloads.chunks(n) {
                        out.extend(layer.apply(row, x.ty())?);
                    }
                    let mut shape = x.shape.clone();
                    *shape.last_mut().unwrap() = layer.plan.m;
                    QTensor::fixed(shape, out, layer.result)
                }
            }
        }
        Kernel::BatchNorm { scale, shift, accum, result } => {
            let x = x.unwrap();
            let c = scale.len();
            let (ex, es, eb) = (x.ty().lsb_exp(), scale.ty().lsb_exp(), shift.ty().lsb_exp());
            let ep = ex + es;
            let e = ep.min(eb);
            let out = x
                .payloads
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let ch = i % c;
                    let v = shl(p * scale.payloads[ch], ep - e) + shl(shift.payloads[ch], eb - e);
                    cast_payload(cast_payload(v, e, *accum), accum.lsb_exp(), *result)
                })
                .collect();
            QTensor::fixed(x.shape.clone(), out, *result)
        }
        Kernel::Select { kind, result } => {
            let x = x.unwrap();
            let e = x.ty().lsb_exp();
            let out = x
                .payloads
                .iter()
                .map(|&p| match kind {
                    ActivationKind::Relu => cast_payload(p.max(0), e, *result),
                    ActivationKind::LeakyRelu { alpha } if p < 0 => {
                        quantize(&(alpha * real_from_scaled(p, e)), *result).payload()
                    }
                    _ => cast_payload(p, e, *result),
                })
                .collect();
            QTensor::fixed(x.shape.clone(), out, *result)
        }
        Kernel::Table(t) => {
            let x = x.unwrap().cast(t.in_type);
            let out = x.payloads.iter().map(|p| t.lookup_payload(*p)).collect();
            QTensor::fixed(x.shape.clone(), out, t.out_type)
        }
        Kernel::Softmax(k) => {
            let x = x.unwrap();
            let diff = k.exp.in_type;
            // x - max is formed on the input grid; the exp table's input
            // type shares that grid.
            let x = if x.ty().lsb_exp() == diff.lsb_exp() { x.clone() } else { x.cast(FixedPointType::new(diff.width() - 1, diff.int_bits() - 1, true).unwrap()) };
            let n = *x.shape.last().unwrap();
            let out = x.payloads.chunks(n).flat_map(|row| k.apply(row)).collect();
            QTensor::fixed(x.shape.clone(), out, k.result)
        }
        Kernel::Pool { kind, window, accum, result } => {
            pool_forward(x.unwrap(), *kind, window, *accum, *result).map_err(|reason| KernelError::BadGeometry { node: name.into(), reason })?
        }
        Kernel::Add { accum, result } => {
            let e = ins.iter().map(|t| t.ty().lsb_exp()).min().unwrap();
            let n = ins[0].len();
            let out = (0..n)
                .map(|i| {
                    let s: i128 = ins.iter().map(|t| shl(t.payloads[i], t.ty().lsb_exp() - e)).sum();
                    match accum {
                        Some(a) => cast_payload(cast_payload(s, e, *a), a.lsb_exp(), *result),
                        None => cast_payload(s, e, *result),
                    }
                })
                .collect();
            QTensor::fixed(ins[0].shape.clone(), out, *result)
        }
        Kernel::Concat { axis, result } => {
            let parts: Vec<QTensor> = ins.iter().map(|t| t.cast(*result)).collect();
            let outer = numel(&parts[0].shape[..*axis]);
            let mut shape = parts[0].shape.clone();
            shape[*axis] = parts.iter().map(|p| p.shape[*axis]).sum();
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in &parts {
                    let chunk = numel(&p.shape[*axis..]);
                    out.extend_from_slice(&p.payloads[o * chunk..(o + 1) * chunk]);
                }
            }
            QTensor::fixed(shape, out, *result)
        }
        Kernel::Reshape { shape, result } => x.unwrap().cast(*result).reshape(shape.clone()),
        Kernel::Transpose { perm, result } => {
            let x = x.unwrap().cast(*result);
            let (payloads, shape) = permute(&x.payloads, &x.shape, perm);
            QTensor::fixed(shape, payloads, *result)
        }
        Kernel::Quant { format, result } => {
            let x = x.unwrap();
            let q = match format {
                WeightFormat::Fixed(t) => x.cast(*t),
                f => QTensor::new(x.shape.clone(), x.reals().iter().map(|r| f.quantize(r)).collect(), *f),
            };
            QTensor::fixed(q.shape.clone(), q.payloads.clone(), q.ty()).cast(*result)
        }
        Kernel::Custom { def, attrs, result } => {
            let tensors: Vec<Tensor> = ins.iter().map(|t| t.to_tensor()).collect();
            let y = (def.emulation_fn)(&tensors, attrs).map_err(|reason| KernelError::Custom { node: name.into(), reason })?;
            y.quantize(WeightFormat::Fixed(*result))
        }
    })
}

/// Bit-exact emulation of `g` on a batch; samples run in parallel.
pub fn emulate(g: &ModelGraph, batch: &[BTreeMap<String, QTensor>]) -> Result<Vec<BTreeMap<String, QTensor>>, KernelError> {
    Program::new(g)?.run_batch(batch)
}

/// Per-layer structural initiation interval.
pub fn layer_ii(g: &ModelGraph, name: &str) -> Result<usize, KernelError> {
    Ok(match cmvm_layer(g, name)? {
        Some(l) => l.ii(),
        None => 1,
    })
}

#[cfg(test)]
mod tests {
    use super::reference::{run_float, FTensor};
    use super::*;
    use crate::ir::{build_graph, HwConfig, LayerNode, Precision, Strategy};

    fn p(s: &str) -> Precision {
        s.parse().unwrap()
    }

    fn t(s: &str) -> FixedPointType {
        s.parse().unwrap()
    }

    fn typed(node: LayerNode, roles: &[(Role, &str)]) -> LayerNode {
        roles.iter().fold(node, |n, (r, s)| n.with_precision(*r, p(s)))
    }

    fn small_dense(strategy: Strategy, rf: usize) -> ModelGraph {
        let nodes = vec![
            typed(LayerNode::new("in", Op::Input { shape: vec![4] }, &[]), &[(Role::Result, "fixed<6,3,s>")]),
            typed(
                LayerNode::new("d", Op::Dense { units: 2 }, &["in"])
                    .with_weight("kernel", Tensor::from_f64(vec![4, 2], &[0.5, -1.25, 0.75, 2.0, -0.5, 0.25, 1.0, -1.0]))
                    .with_weight("bias", Tensor::from_f64(vec![2], &[0.125, -0.5])),
                &[
                    (Role::Weight, "fixed<6,3,s>"),
                    (Role::Bias, "fixed<6,3,s>"),
                    (Role::Accum, "fixed<16,8,s>"),
                    (Role::Result, "fixed<8,4,s,RND,SAT>"),
                ],
            ),
            typed(LayerNode::new("a", Op::Activation(ActivationKind::Relu), &["d"]), &[(Role::Result, "fixed<8,4,u>")]),
        ];
        let mut cfg = HwConfig::default();
        cfg.defaults.strategy = strategy;
        cfg.defaults.reuse_factor = rf;
        build_graph(nodes, vec![], cfg).unwrap()
    }

    fn sample(vals: &[f64]) -> BTreeMap<String, QTensor> {
        let x = Tensor::from_f64(vec![vals.len()], vals).quantize(WeightFormat::Fixed(t("fixed<6,3,s>")));
        BTreeMap::from([("in".to_string(), x)])
    }

    #[test]
    fn dense_matches_hand_computation() {
        let g = small_dense(Strategy::Latency, 1);
        let y = &Program::new(&g).unwrap().run_all(&sample(&[1.0, -2.0, 0.5, 3.0])).unwrap()["d"];
        // 0.5 - 1.5 - 0.25 + 3 + 0.125 = 1.875 ; -1.25 - 4 + 0.125 - 3 - 0.5 = -8.625 -> sat -8
        assert_eq!(y.to_f64(), vec![1.875, -8.0]);
    }

    #[test]
    fn strategies_are_bit_identical() {
        let x = sample(&[1.0, -2.0, 0.5, 3.0]);
        let base = emulate(&small_dense(Strategy::Latency, 1), std::slice::from_ref(&x)).unwrap();
        for (s, rf) in [(Strategy::Latency, 2), (Strategy::Resource, 4), (Strategy::Resource, 8), (Strategy::Da, 1)] {
            assert_eq!(emulate(&small_dense(s, rf), std::slice::from_ref(&x)).unwrap(), base, "{s} rf={rf}");
        }
        assert_eq!(layer_ii(&small_dense(Strategy::Resource, 4), "d").unwrap(), 4);
    }

    #[test]
    fn missing_input_and_bad_shape() {
        let prog = Program::new(&small_dense(Strategy::Latency, 1)).unwrap();
        assert_eq!(prog.run(&BTreeMap::new()), Err(KernelError::MissingInput("in".into())));
        assert!(matches!(prog.run(&sample(&[1.0])), Err(KernelError::InputShape { .. })));
    }

    #[test]
    fn auto_precision_is_rejected() {
        let nodes = vec![LayerNode::new("in", Op::Input { shape: vec![2] }, &[])];
        let g = build_graph(nodes, vec![], HwConfig::default()).unwrap();
        assert_eq!(Program::new(&g).err(), Some(KernelError::UnresolvedPrecision("in".into())));
    }

    #[test]
    fn softmax_close_to_float() {
        let k = softmax_kernel(t("fixed<16,6,s>"), 5, 2048, t("fixed<16,1,u,RND,SAT>"));
        let xs = [1.5, -0.25, 3.0, 0.0, 2.75];
        let payloads: Vec<i128> = xs.iter().map(|v| (v * 1024.0) as i128).collect();
        let y = k.apply(&payloads);
        let m = xs.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = xs.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for (i, yi) in y.iter().enumerate() {
            let got = *yi as f64 / 32768.0;
            assert!((got - e[i] / s).abs() < 0.02, "{got} vs {}", e[i] / s);
        }
        assert_eq!(k.sum_type, t("fixed<21,4,u>"));
    }

    #[test]
    fn batchnorm_affine_values() {
        let one = |v: f64| Tensor::from_f64(vec![1], &[v]);
        let (s, b) = batchnorm_affine(&one(2.0), &one(1.0), &one(0.5), &one(3.0), &real_from_f64(1.0).unwrap());
        assert_eq!(real_to_f64(&s[0]), 1.0);
        assert_eq!(real_to_f64(&b[0]), 0.5);
    }

    #[test]
    fn exact_type_of_dyadic_tensor() {
        let ty = exact_type(&Tensor::from_f64(vec![3], &[0.75, -2.0, 0.0])).unwrap();
        assert_eq!(ty.lsb_exp(), -2);
        assert!(ty.contains_payload(-8) && ty.contains_payload(3));
        assert!(!ty.contains_payload(-9));
        let tenth = crate::fxp::real::parse_real("0.1").unwrap();
        assert!(exact_type(&Tensor::new(vec![1], vec![tenth])).is_none());
        assert_eq!(exact_type(&Tensor::zeros(vec![2])).map(|t| t.lsb_exp()), Some(0));
    }

    #[test]
    fn reference_tracks_emulation() {
        let g = small_dense(Strategy::Latency, 1);
        let xf = [0.5, 0.25, -1.0, 1.5];
        let q = Program::new(&g).unwrap().run(&sample(&xf)).unwrap();
        let f = run_float(&g, &BTreeMap::from([("in".to_string(), FTensor::new(vec![4], xf.to_vec()))])).unwrap();
        for (a, b) in q["a"].to_f64().iter().zip(&f["a"].values) {
            assert!((a - b).abs() <= 1.0 / 16.0, "{a} vs {b}");
        }
    }

    #[test]
    fn tables_are_listed() {
        let nodes = vec![
            typed(LayerNode::new("in", Op::Input { shape: vec![3] }, &[]), &[(Role::Result, "fixed<8,3,s>")]),
            typed(LayerNode::new("sm", Op::Softmax, &["in"]), &[(Role::Result, "fixed<16,1,u>")]),
            typed(LayerNode::new("th", Op::Activation(ActivationKind::Tanh), &["in"]), &[(Role::Result, "fixed<8,1,s>")]),
        ];
        let g = build_graph(nodes, vec![], HwConfig::default()).unwrap();
        let prog = Program::new(&g).unwrap();
        let names: Vec<String> = prog.tables().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["sm.exp", "sm.recip", "th"]);
    }
}
