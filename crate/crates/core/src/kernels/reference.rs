//! Floating-point reference evaluator.
//!
//! Runs the graph in binary64, applying only quantizers that are part of
//! the model itself: `Quant` nodes and `Quantized` annotations.

use std::collections::BTreeMap;

use crate::fxp::real::{real_from_f64, real_to_f64};
use crate::fxp::WeightFormat;
use crate::ir::custom;
use crate::ir::tensor::{numel, permute};
use crate::ir::{ActivationKind, ModelGraph, Op, Precision, Role, Tensor};

use super::conv::Window;
use super::{batchnorm_affine, KernelError};

/// Float tensor: shape plus row-major values.
#[derive(Clone, Debug, PartialEq)]
pub struct FTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl FTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(numel(&shape), values.len());
        FTensor { shape, values }
    }
}

fn qformat(g: &ModelGraph, node: &str, role: Role) -> Option<WeightFormat> {
    match g.node(node)?.precision(role) {
        Precision::Quantized(f) => Some(f),
        _ => None,
    }
}

pub(crate) fn apply_format(f: &WeightFormat, xs: &mut [f64]) {
    let c = f.container();
    for x in xs.iter_mut() {
        let r = real_from_f64(*x).unwrap_or_default();
        *x = real_to_f64(&crate::fxp::real::real_from_scaled(f.quantize(&r), c.lsb_exp()));
    }
}

fn weight(g: &ModelGraph, node: &str, w: &str, role: Role) -> Option<Vec<f64>> {
    let t = g.weight(node, w)?;
    let mut v = t.to_f64();
    if let Some(f) = qformat(g, node, role) {
        apply_format(&f, &mut v);
    }
    Some(v)
}

fn dense(x: &[f64], k: &[f64], n: usize, m: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() / n * m);
    for row in x.chunks(n) {
        for j in 0..m {
            let mut s = bias.map_or(0.0, |b| b[j]);
            for (i, xi) in row.iter().enumerate() {
                s += xi * k[i * m + j];
            }
            out.push(s);
        }
    }
    out
}

fn windowed(x: &FTensor, w: &Window) -> Result<(Vec<Vec<Option<usize>>>, Vec<usize>), String> {
    let spatial = &x.shape[..x.shape.len() - 1];
    Ok((w.taps(spatial)?, w.out_spatial(spatial)?))
}

/// Convolution over a channels-last tensor with a `[k.., C, F]` kernel
/// (`[k.., C, 1]` when depthwise).
pub(crate) fn conv_f64(x: &FTensor, k: &[f64], b: Option<&[f64]>, w: &Window, f: usize, depthwise: bool) -> Result<FTensor, String> {
    let c = *x.shape.last().unwrap();
    let (taps, out) = windowed(x, w)?;
    let mut vals = Vec::with_capacity(taps.len() * f);
    for pos in &taps {
        for fi in 0..f {
            let mut s = b.map_or(0.0, |b| b[fi]);
            for (t, src) in pos.iter().enumerate() {
                let Some(src) = src else { continue };
                if depthwise {
                    s += x.values[src * c + fi] * k[t * c + fi];
                } else {
                    for ci in 0..c {
                        s += x.values[src * c + ci] * k[(t * c + ci) * f + fi];
                    }
                }
            }
            vals.push(s);
        }
    }
    let mut shape = out;
    shape.push(f);
    Ok(FTensor::new(shape, vals))
}

/// Pooling over a channels-last tensor; padding taps are skipped.
pub(crate) fn pool_f64(x: &FTensor, w: &Window, max: bool) -> Result<FTensor, String> {
    let c = *x.shape.last().unwrap();
    let (taps, out) = windowed(x, w)?;
    let mut vals = Vec::with_capacity(taps.len() * c);
    for pos in taps {
        let live: Vec<usize> = pos.into_iter().flatten().collect();
        for ch in 0..c {
            let it = live.iter().map(|s| x.values[s * c + ch]);
            vals.push(if max {
                it.fold(f64::NEG_INFINITY, f64::max)
            } else {
                it.sum::<f64>() / live.len().max(1) as f64
            });
        }
    }
    let mut shape = out;
    shape.push(c);
    Ok(FTensor::new(shape, vals))
}

/// Softmax over the last axis.
pub(crate) fn softmax_f64(x: &FTensor) -> FTensor {
    let n = *x.shape.last().unwrap();
    let mut vals = Vec::with_capacity(x.values.len());
    for row in x.values.chunks(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        vals.extend(e.iter().map(|v| v / s));
    }
    FTensor::new(x.shape.clone(), vals)
}

pub(crate) fn concat_f64(ins: &[&FTensor], axis: usize) -> FTensor {
    let outer = numel(&ins[0].shape[..axis]);
    let mut shape = ins[0].shape.clone();
    shape[axis] = ins.iter().map(|p| p.shape[axis]).sum();
    let mut vals = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in ins {
            let chunk = numel(&p.shape[axis..]);
            vals.extend_from_slice(&p.values[o * chunk..(o + 1) * chunk]);
        }
    }
    FTensor::new(shape, vals)
}

fn eval_node(g: &ModelGraph, name: &str, ins: &[&FTensor]) -> Result<FTensor, KernelError> {
    let node = g.node(name).expect("node exists");
    let geo = |reason: String| KernelError::BadGeometry { node: name.into(), reason };
    let x = ins.first().copied();
    let out = match &node.op {
        Op::Input { .. } => unreachable!(),
        Op::Constant => {
            let t = g.weight(name, "value").expect("constant value");
            FTensor::new(t.shape.clone(), t.to_f64())
        }
        Op::Dense { units } | Op::Pointwise { filters: units } => {
            let x = x.unwrap();
            let n = *x.shape.last().unwrap();
            let k = weight(g, name, "kernel", Role::Weight).expect("kernel");
            let b = weight(g, name, "bias", Role::Bias);
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = *units;
            FTensor::new(shape, dense(&x.values, &k, n, *units, b.as_deref()))
        }
        Op::Conv1D(a) | Op::Conv2D(a) | Op::DepthwiseConv(a) => {
            let x = x.unwrap();
            let depthwise = matches!(node.op, Op::DepthwiseConv(_));
            let f = if depthwise { *x.shape.last().unwrap() } else { a.filters };
            let k = weight(g, name, "kernel", Role::Weight).expect("kernel");
            let b = weight(g, name, "bias", Role::Bias);
            let w = Window { kernel: a.kernel.clone(), stride: a.stride.clone(), pad: a.pad.clone() };
            conv_f64(x, &k, b.as_deref(), &w, f, depthwise).map_err(geo)?
        }
        Op::BatchNorm { epsilon } => {
            let x = x.unwrap();
            let w = |n: &str| g.weight(name, n).expect("batchnorm parameter");
            let (scale, shift) = batchnorm_affine(&w("gamma"), &w("beta"), &w("mean"), &w("variance"), epsilon);
            let mut s: Vec<f64> = scale.iter().map(real_to_f64).collect();
            let mut b: Vec<f64> = shift.iter().map(real_to_f64).collect();
            if let Some(f) = qformat(g, name, Role::Weight) {
                apply_format(&f, &mut s);
            }
            if let Some(f) = qformat(g, name, Role::Bias) {
                apply_format(&f, &mut b);
            }
            let c = s.len();
            let vals = x.values.iter().enumerate().map(|(i, v)| v * s[i % c] + b[i % c]).collect();
            FTensor::new(x.shape.clone(), vals)
        }
        Op::Activation(kind) => {
            let x = x.unwrap();
            let vals = x.values.iter().map(|v| match kind {
                ActivationKind::Linear => *v,
                k => k.eval_f64(*v),
            });
            FTensor::new(x.shape.clone(), vals.collect())
        }
        Op::Softmax => softmax_f64(x.unwrap()),
        Op::MaxPool(p) | Op::AvgPool(p) => {
            let w = Window { kernel: p.pool.clone(), stride: p.stride.clone(), pad: p.pad.clone() };
            pool_f64(x.unwrap(), &w, matches!(node.op, Op::MaxPool(_))).map_err(geo)?
        }
        Op::Add => {
            let mut vals = ins[0].values.clone();
            for t in &ins[1..] {
                for (a, b) in vals.iter_mut().zip(&t.values) {
                    *a += b;
                }
            }
            FTensor::new(ins[0].shape.clone(), vals)
        }
        Op::Concat { axis } => concat_f64(ins, *axis),
        Op::Reshape { shape } => FTensor::new(shape.clone(), x.unwrap().values.clone()),
        Op::Transpose { perm } => {
            let x = x.unwrap();
            let (vals, shape) = permute(&x.values, &x.shape, perm);
            FTensor::new(shape, vals)
        }
        Op::Quant { format, .. } => {
            let mut vals = x.unwrap().values.clone();
            apply_format(format, &mut vals);
            FTensor::new(x.unwrap().shape.clone(), vals)
        }
        Op::Custom { tag, attrs } => {
            let def = custom::lookup(tag).ok_or_else(|| KernelError::Unsupported { node: name.into(), op: tag.clone() })?;
            let ts: Vec<Tensor> = ins.iter().map(|t| Tensor::from_f64(t.shape.clone(), &t.values)).collect();
            let y = (def.emulation_fn)(&ts, attrs).map_err(|reason| KernelError::Custom { node: name.into(), reason })?;
            FTensor::new(y.shape.clone(), y.to_f64())
        }
    };
    Ok(out)
}

/// Evaluates every node of `g` in binary64.
pub fn run_float_all(g: &ModelGraph, inputs: &BTreeMap<String, FTensor>) -> Result<BTreeMap<String, FTensor>, KernelError> {
    let mut vals: BTreeMap<String, FTensor> = BTreeMap::new();
    for name in g.topo_order() {
        let node = g.node(name).unwrap();
        let mut y = if let Op::Input { shape } = &node.op {
            let x = inputs.get(name).ok_or_else(|| KernelError::MissingInput(name.clone()))?;
            if &x.shape != shape {
                return Err(KernelError::InputShape { input: name.clone(), expected: shape.clone(), got: x.shape.clone() });
            }
            x.clone()
        } else {
            let ins: Vec<&FTensor> = node.inputs.iter().map(|i| &vals[i]).collect();
            eval_node(g, name, &ins)?
        };
        if let Some(f) = qformat(g, name, Role::Result) {
            apply_format(&f, &mut y.values);
        }
        vals.insert(name.clone(), y);
    }
    Ok(vals)
}

pub fn run_float(g: &ModelGraph, inputs: &BTreeMap<String, FTensor>) -> Result<BTreeMap<String, FTensor>, KernelError> {
    let mut all = run_float_all(g, inputs)?;
    Ok(g.outputs().iter().map(|o| (o.clone(), all.remove(o).expect("output computed"))).collect())
}
