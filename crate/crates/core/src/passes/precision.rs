use std::collections::BTreeMap;

use crate::fxp::real::{dyadic_exponent, Real};
use crate::fxp::{min_type_for, FixedPointType, Interval, WeightFormat};
use crate::ir::tensor::numel;
use crate::ir::{ActivationKind, LayerNode, ModelGraph, Op, Precision, Role, Tensor};
use crate::kernels::{batchnorm_affine, exact_type};

use super::{Change, PassError};

/// Widest weight type inferred from exact dyadic values; wider weights
/// fall back to the default precision.
pub const MAX_EXACT_WEIGHT_WIDTH: u32 = 32;

struct Ctx<'a> {
    g: &'a ModelGraph,
    nodes: BTreeMap<String, LayerNode>,
    changes: Vec<Change>,
}

impl Ctx<'_> {
    fn new(g: &ModelGraph) -> Ctx<'_> {
        Ctx { g, nodes: g.nodes().map(|n| (n.name.clone(), n.clone())).collect(), changes: Vec::new() }
    }

    fn value_type(&self, name: &str) -> Option<FixedPointType> {
        let n = &self.nodes[name];
        if let Some(t) = n.precision(Role::Result).fixed() {
            return Some(t);
        }
        match &n.op {
            Op::Quant { format, .. } => Some(format.container()),
            _ => None,
        }
    }

    fn in_type(&self, name: &str, port: usize) -> Option<FixedPointType> {
        let n = &self.nodes[name];
        n.precision(Role::Input).fixed().or_else(|| self.value_type(&n.inputs[port]))
    }

    fn in_types(&self, name: &str) -> Result<Vec<FixedPointType>, PassError> {
        (0..self.nodes[name].inputs.len())
            .map(|p| self.in_type(name, p).ok_or_else(|| PassError::UnboundedInput(name.to_string())))
            .collect()
    }

    fn set(&mut self, name: &str, role: Role, p: Precision) {
        let n = self.nodes.get_mut(name).unwrap();
        if n.precision(role) != p {
            self.changes.push(Change::new(name, format!("{} {} -> {}", role.name(), n.precision(role), p)));
            n.set_precision(role, p);
        }
    }

    fn default(&self) -> FixedPointType {
        self.g.config.default_precision
    }

    fn finish(self) -> Result<(ModelGraph, Vec<Change>), PassError> {
        let g = self.g.rebuild(self.nodes.into_values().collect(), self.g.outputs().to_vec())?;
        Ok((g, self.changes))
    }
}

fn exact_weight_type(t: &Tensor) -> Option<FixedPointType> {
    exact_type(t).filter(|ty| ty.width() <= MAX_EXACT_WEIGHT_WIDTH)
}

fn range_of(t: &FixedPointType) -> Interval {
    t.range()
}

/// Output channel count of a CMVM kernel and the channel of flat weight `i`.
fn out_channels(op: &Op, kernel_shape: &[usize]) -> usize {
    let r = kernel_shape.len();
    match op {
        Op::DepthwiseConv(_) => kernel_shape[r - 2],
        _ => kernel_shape[r - 1],
    }
}

fn dyadic_alpha(alpha: &Real) -> bool {
    use num_traits::Zero;
    alpha.is_zero() || dyadic_exponent(alpha).is_some()
}

/// Exact interval of a layer's accumulator, or `None` when the op has none.
fn accum_interval(ctx: &Ctx, name: &str) -> Result<Option<Interval>, PassError> {
    let node = &ctx.nodes[name];
    let g = ctx.g;
    let unresolved = || PassError::UnboundedInput(name.to_string());
    let iv = match &node.op {
        op if op.is_cmvm() => {
            let x = ctx.in_types(name)?[0];
            let wf = node.precision(Role::Weight).format().ok_or_else(unresolved)?;
            let k = g.weight(name, "kernel").expect("kernel").quantize(wf);
            let oc = out_channels(op, &k.shape);
            let (xlo, xhi, ex) = (x.min_payload(), x.max_payload(), x.lsb_exp());
            let ew = k.ty().lsb_exp();
            let mut lo = vec![0i128; oc];
            let mut hi = vec![0i128; oc];
            for (i, p) in k.payloads.iter().enumerate() {
                let (a, b) = (p * xlo, p * xhi);
                lo[i % oc] += a.min(b);
                hi[i % oc] += a.max(b);
            }
            let bias = match g.weight(name, "bias") {
                Some(b) => {
                    let bf = node.precision(Role::Bias).format().ok_or_else(unresolved)?;
                    Some(b.quantize(bf))
                }
                None => None,
            };
            let mut acc: Option<Interval> = None;
            for c in 0..oc {
                let mut row = Interval::new(lo[c], hi[c], ex + ew);
                if let Some(b) = &bias {
                    row = row.add(&Interval::point(b.payloads[c], b.ty().lsb_exp()));
                }
                acc = Some(acc.map_or(row, |a| a.hull(&row)));
            }
            acc.expect("at least one output channel")
        }
        Op::BatchNorm { epsilon } => {
            let x = ctx.in_types(name)?[0];
            let w = |n: &str| g.weight(name, n).expect("batchnorm parameter");
            let (scale, shift) = batchnorm_affine(&w("gamma"), &w("beta"), &w("mean"), &w("variance"), epsilon);
            let wf = node.precision(Role::Weight).format().ok_or_else(unresolved)?;
            let bf = node.precision(Role::Bias).format().ok_or_else(unresolved)?;
            let s = Tensor::new(vec![scale.len()], scale).quantize(wf);
            let b = Tensor::new(vec![shift.len()], shift).quantize(bf);
            let xr = range_of(&x);
            let mut acc: Option<Interval> = None;
            for c in 0..s.len() {
                let row = xr
                    .mul(&Interval::point(s.payloads[c], s.ty().lsb_exp()))
                    .add(&Interval::point(b.payloads[c], b.ty().lsb_exp()));
                acc = Some(acc.map_or(row, |a| a.hull(&row)));
            }
            acc.expect("at least one channel")
        }
        Op::Add => {
            let ts = ctx.in_types(name)?;
            ts.iter().skip(1).fold(range_of(&ts[0]), |a, t| a.add(&range_of(t)))
        }
        Op::AvgPool(p) => {
            let x = range_of(&ctx.in_types(name)?[0]);
            let n = numel(&p.pool);
            (1..n).fold(x, |a, _| a.add(&x))
        }
        _ => return Ok(None),
    };
    Ok(Some(iv))
}

fn accumulates(op: &Op) -> bool {
    op.has_accumulator() || matches!(op, Op::Add)
}

fn interval_type(iv: &Interval) -> FixedPointType {
    min_type_for(iv, iv.exp())
}

fn resolve_weights(ctx: &mut Ctx, name: &str) {
    let node = ctx.nodes[name].clone();
    let pairs: &[(&str, Role)] = match node.op {
        ref op if op.is_cmvm() => &[("kernel", Role::Weight), ("bias", Role::Bias)],
        Op::BatchNorm { .. } => &[("gamma", Role::Weight), ("beta", Role::Bias)],
        _ => &[],
    };
    for (w, role) in pairs {
        if !node.precision(*role).is_auto() {
            continue;
        }
        let t = match (&node.op, *w) {
            (Op::BatchNorm { epsilon }, _) => {
                let g = ctx.g;
                let p = |n: &str| g.weight(name, n).expect("batchnorm parameter");
                let (s, b) = batchnorm_affine(&p("gamma"), &p("beta"), &p("mean"), &p("variance"), epsilon);
                let v = if *role == Role::Weight { s } else { b };
                Some(Tensor::new(vec![v.len()], v))
            }
            _ => ctx.g.weight(name, w),
        };
        let Some(t) = t else { continue };
        let ty = exact_weight_type(&t).unwrap_or(ctx.default());
        ctx.set(name, *role, Precision::Explicit(WeightFormat::Fixed(ty)));
    }
}

fn set_accum(ctx: &mut Ctx, name: &str) -> Result<Option<FixedPointType>, PassError> {
    let node = &ctx.nodes[name];
    if let Some(t) = node.precision(Role::Accum).fixed() {
        return Ok(Some(t));
    }
    let Some(iv) = accum_interval(ctx, name)? else { return Ok(None) };
    let ty = interval_type(&iv);
    ctx.set(name, Role::Accum, Precision::Explicit(WeightFormat::Fixed(ty)));
    Ok(Some(ty))
}

/// Exact result type under propagation, or `None` for lossy ops.
fn exact_result(ctx: &Ctx, name: &str, accum: Option<FixedPointType>) -> Result<Option<FixedPointType>, PassError> {
    let node = &ctx.nodes[name];
    Ok(match &node.op {
        op if op.is_cmvm() => accum,
        Op::BatchNorm { .. } | Op::Add => accum,
        Op::Activation(ActivationKind::Linear) | Op::MaxPool(_) | Op::Reshape { .. } | Op::Transpose { .. } => {
            Some(ctx.in_types(name)?[0])
        }
        Op::Activation(ActivationKind::Relu) => Some(interval_type(&range_of(&ctx.in_types(name)?[0]).relu())),
        Op::Activation(ActivationKind::LeakyRelu { alpha }) if dyadic_alpha(alpha) => {
            let x = range_of(&ctx.in_types(name)?[0]);
            let (a, ea) = match dyadic_exponent(alpha) {
                Some(e) => {
                    let scaled = crate::fxp::real::scale_pow2(alpha, -e);
                    (num_traits::ToPrimitive::to_i128(&scaled.to_integer()).expect("alpha fits"), e)
                }
                None => (0, 0),
            };
            let neg = Interval::new(x.lo().min(0), 0, x.exp()).mul(&Interval::point(a, ea));
            Some(interval_type(&x.relu().hull(&neg)))
        }
        Op::AvgPool(p) => {
            let n = numel(&p.pool);
            let padded = p.pad.iter().any(|[a, b]| a + b > 0);
            match accum {
                Some(acc) if n.is_power_of_two() && !padded => {
                    let k = n.trailing_zeros() as i32;
                    Some(FixedPointType::new(acc.width(), acc.int_bits() - k, acc.is_signed()).expect("shifted type"))
                }
                _ => None,
            }
        }
        Op::Concat { .. } => {
            let ts = ctx.in_types(name)?;
            let iv = ts.iter().skip(1).fold(range_of(&ts[0]), |a, t| a.hull(&range_of(t)));
            Some(interval_type(&iv))
        }
        Op::Quant { format, .. } => Some(format.container()),
        Op::Constant => node.weights.get("value").and_then(exact_type),
        _ => None,
    })
}

/// Default-mode result type for an AUTO result.
fn default_result(ctx: &Ctx, name: &str) -> Result<FixedPointType, PassError> {
    let node = &ctx.nodes[name];
    Ok(match &node.op {
        Op::Activation(ActivationKind::Linear | ActivationKind::Relu)
        | Op::MaxPool(_)
        | Op::Reshape { .. }
        | Op::Transpose { .. } => ctx.in_types(name)?[0],
        Op::Concat { .. } => exact_result(ctx, name, None)?.expect("concat hull"),
        Op::Quant { format, .. } => format.container(),
        Op::Constant => node.weights.get("value").and_then(exact_weight_type).unwrap_or(ctx.default()),
        _ => ctx.default(),
    })
}

/// Replaces every AUTO accumulator with the minimal exact type.
///
/// Input types of every accumulating layer must already be resolved.
pub fn infer_accumulator(g: &ModelGraph) -> Result<(ModelGraph, Vec<Change>), PassError> {
    let mut ctx = Ctx::new(g);
    for name in g.topo_order() {
        let node = &ctx.nodes[name];
        if accumulates(&node.op) && node.precision(Role::Accum).is_auto() {
            set_accum(&mut ctx, name)?;
        }
    }
    ctx.finish()
}

/// Resolves every remaining AUTO precision without propagation.
pub fn resolve_auto_precision(g: &ModelGraph) -> Result<(ModelGraph, Vec<Change>), PassError> {
    let mut ctx = Ctx::new(g);
    for name in g.topo_order() {
        resolve_weights(&mut ctx, name);
        if accumulates(&ctx.nodes[name].op) {
            set_accum(&mut ctx, name)?;
        }
        if ctx.nodes[name].precision(Role::Result).is_auto() {
            let ty = default_result(&ctx, name)?;
            ctx.set(name, Role::Result, Precision::Explicit(WeightFormat::Fixed(ty)));
        }
    }
    ctx.finish()
}

/// Nodes and roles that lack a quantizer-derived precision.
pub fn unquantized_roles(g: &ModelGraph) -> Vec<String> {
    let mut out = Vec::new();
    for n in g.nodes() {
        let mut need = |role: Role| {
            if !n.precision(role).is_quantized() {
                out.push(format!("{}.{}", n.name, role.name()));
            }
        };
        match &n.op {
            Op::Input { .. } => need(Role::Result),
            op if op.is_cmvm() => {
                need(Role::Weight);
                let zero = |b: &Tensor| b.values.iter().all(num_traits::Zero::is_zero);
                if g.weight(&n.name, "bias").is_some_and(|b| !zero(&b)) {
                    need(Role::Bias);
                }
            }
            Op::BatchNorm { .. } => {
                need(Role::Weight);
                need(Role::Bias);
            }
            _ => {}
        }
    }
    out
}

/// Assigns every intermediate edge the minimal lossless type between the
/// model's own quantizers. User-set precisions on those edges are dropped.
pub fn propagate_precision(g: &ModelGraph) -> Result<(ModelGraph, Vec<Change>), PassError> {
    let missing = unquantized_roles(g);
    if !missing.is_empty() {
        return Err(PassError::NotFullyQuantized(missing));
    }
    let mut ctx = Ctx::new(g);
    let mut warnings = Vec::new();
    for name in g.topo_order() {
        if matches!(ctx.nodes[name].op, Op::Input { .. }) {
            continue;
        }
        let user_input = matches!(ctx.nodes[name].precision(Role::Input), Precision::Explicit(_));
        if user_input {
            warnings.push(format!("{name}: input precision ignored under precision propagation"));
            ctx.set(name, Role::Input, Precision::Auto);
        }
        let user_accum = matches!(ctx.nodes[name].precision(Role::Accum), Precision::Explicit(_));
        if user_accum {
            warnings.push(format!("{name}: accum precision ignored under precision propagation"));
            ctx.set(name, Role::Accum, Precision::Auto);
        }
        resolve_weights(&mut ctx, name);
        let accum = if accumulates(&ctx.nodes[name].op) { set_accum(&mut ctx, name)? } else { None };
        let result = ctx.nodes[name].precision(Role::Result);
        if result.is_quantized() {
            continue;
        }
        match exact_result(&ctx, name, accum)? {
            Some(ty) => {
                if matches!(result, Precision::Explicit(_)) {
                    warnings.push(format!("{name}: result precision ignored under precision propagation"));
                }
                ctx.set(name, Role::Result, Precision::Explicit(WeightFormat::Fixed(ty)));
            }
            None if result.is_auto() => {
                let ty = ctx.default();
                ctx.set(name, Role::Result, Precision::Explicit(WeightFormat::Fixed(ty)));
            }
            None => {}
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let (mut g2, changes) = ctx.finish()?;
    g2.metadata.warnings.extend(warnings);
    Ok((g2, changes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_graph, HwConfig};
    use crate::kernels::Program;

    fn p(s: &str) -> Precision {
        s.parse().unwrap()
    }

    fn one_neuron(input: &str, weights: &[i64]) -> ModelGraph {
        let n = weights.len();
        let nodes = vec![
            LayerNode::new("in", Op::Input { shape: vec![n] }, &[]).with_precision(Role::Result, p(input)),
            LayerNode::new("d", Op::Dense { units: 1 }, &["in"]).with_weight("kernel", Tensor::from_ints(vec![n, 1], weights)),
        ];
        build_graph(nodes, vec![], HwConfig::default()).unwrap()
    }

    fn accum(g: &ModelGraph) -> FixedPointType {
        let (g, _) = infer_accumulator(&resolve_weights_only(g)).unwrap();
        g.node("d").unwrap().precision(Role::Accum).fixed().unwrap()
    }

    fn resolve_weights_only(g: &ModelGraph) -> ModelGraph {
        let mut ctx = Ctx::new(g);
        resolve_weights(&mut ctx, "d");
        ctx.finish().unwrap().0
    }

    #[test]
    fn accumulator_for_two_and_minus_three() {
        let g = one_neuron("fixed<4,4,u>", &[2, -3]);
        assert_eq!(accum(&g), "fixed<7,7,s>".parse().unwrap());
    }

    #[test]
    fn zero_weights_give_one_bit() {
        let g = one_neuron("fixed<4,4,u>", &[0, 0]);
        assert_eq!(accum(&g), "fixed<1,1,u>".parse().unwrap());
    }

    #[test]
    fn unresolved_input_is_unbounded() {
        let g = one_neuron("auto", &[1]);
        assert_eq!(
            infer_accumulator(&resolve_weights_only(&g)).err(),
            Some(PassError::UnboundedInput("d".into()))
        );
    }

    #[test]
    fn widening_input_never_narrows_accumulator() {
        let types = ["fixed<3,3,u>", "fixed<4,4,u>", "fixed<4,4,s>", "fixed<6,4,s>", "fixed<8,5,s>"];
        let mut last: Option<FixedPointType> = None;
        for t in types {
            let a = accum(&one_neuron(t, &[5, -7, 3]));
            if let Some(prev) = last {
                assert!(a.covers(&prev), "{a} does not cover {prev}");
            }
            last = Some(a);
        }
    }

    #[test]
    fn relu_drops_sign_under_propagation() {
        let nodes = vec![
            LayerNode::new("in", Op::Input { shape: vec![2] }, &[]).with_precision(Role::Result, p("qat:fixed<4,4,s>")),
            LayerNode::new("d", Op::Dense { units: 1 }, &["in"])
                .with_weight("kernel", Tensor::from_ints(vec![2, 1], &[1, -2]))
                .with_precision(Role::Weight, p("qat:fixed<4,4,s>")),
            LayerNode::new("r", Op::Activation(ActivationKind::Relu), &["d"]).with_precision(Role::Result, p("fixed<3,1,s>")),
        ];
        let g = build_graph(nodes, vec![], HwConfig::default()).unwrap();
        let (g, _) = propagate_precision(&g).unwrap();
        let d = g.result_type("d").unwrap();
        assert_eq!(d, g.node("d").unwrap().precision(Role::Accum).fixed().unwrap());
        // [-8,7]·1 + [-8,7]·-2 = [-22, 23]
        assert_eq!(d, "fixed<6,6,s>".parse().unwrap());
        assert_eq!(g.result_type("r").unwrap(), "fixed<5,5,u>".parse().unwrap());
        assert_eq!(g.metadata.warnings.len(), 1);
    }

    #[test]
    fn partial_quantization_is_rejected() {
        let g = one_neuron("qat:fixed<4,4,u>", &[1]);
        assert_eq!(propagate_precision(&g).err(), Some(PassError::NotFullyQuantized(vec!["d.weight".into()])));
    }

    #[test]
    fn auto_resolution_makes_graph_emulable() {
        let g = one_neuron("fixed<4,4,u>", &[2, -3]);
        let (g, changes) = resolve_auto_precision(&g).unwrap();
        assert!(!changes.is_empty());
        assert_eq!(g.result_type("d").unwrap(), HwConfig::default().default_precision);
        Program::new(&g).unwrap();
    }
}
