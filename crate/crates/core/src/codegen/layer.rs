use std::collections::BTreeMap;

use crate::cmvm::{AdderGraph, AdderNode};
use crate::fxp::real::{real_from_scaled, real_to_string};
use crate::fxp::{FixedPointType, Overflow, Rounding};
use crate::ir::tensor::numel;
use crate::ir::{ActivationKind, ModelGraph, Op, QTensor, Role, Strategy};
use crate::kernels::{input_value_type, Kernel, PoolKind, Program};
use crate::perf::bram_count;

use super::{render_template, CodegenError, Directive, LayerPlan, TablePlan};

/// HLS-style C type for a fixed-point type.
pub fn c_type(t: FixedPointType) -> String {
    format!(
        "ap_{}fixed<{},{},{},{}>",
        if t.is_signed() { "" } else { "u" },
        t.width(),
        t.int_bits(),
        match t.rounding() {
            Rounding::Trn => "AP_TRN",
            Rounding::Rnd => "AP_RND",
        },
        match t.overflow() {
            Overflow::Wrap => "AP_WRAP",
            Overflow::Sat => "AP_SAT",
        }
    )
}

/// Identifier-safe form of a node name.
pub fn ident(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect()
}

fn values(q: &QTensor) -> String {
    q.reals().iter().map(real_to_string).collect::<Vec<_>>().join(", ")
}

fn payload_values(p: &[i128], t: FixedPointType) -> String {
    p.iter().map(|v| real_to_string(&real_from_scaled(*v, t.lsb_exp()))).collect::<Vec<_>>().join(", ")
}

fn shape_text(s: &[usize]) -> String {
    format!("{s:?}")
}

fn shifted(id: usize, shift: u32) -> String {
    if shift == 0 {
        format!("t{id}")
    } else {
        format!("(t{id} << {shift})")
    }
}

/// Shift-and-add statements for a DA adder graph; no multiplications.
pub fn netlist(ag: &AdderGraph, x: impl Fn(usize) -> String, indent: &str) -> String {
    let exp = ag.input_type().lsb_exp() + ag.weight_exp();
    let mut out = String::new();
    for (i, n) in ag.nodes().iter().enumerate() {
        let w = ag.width(i);
        let line = match n {
            AdderNode::Input { index } => format!("ap_int<{w}> t{i} = raw({});", x(*index)),
            AdderNode::Shift { src, shift } => format!("ap_int<{w}> t{i} = t{src} << {shift};"),
            AdderNode::AddSub { lhs, rhs, subtract } => format!(
                "ap_int<{w}> t{i} = {} {} {};",
                shifted(lhs.src, lhs.shift),
                if *subtract { '-' } else { '+' },
                shifted(rhs.src, rhs.shift)
            ),
            AdderNode::Output { row, src: None, .. } => format!("v[{row}] = 0;"),
            AdderNode::Output { row, src: Some(s), negate } => {
                format!("v[{row}] = from_raw({}t{s}, {exp});", if *negate { "-" } else { "" })
            }
        };
        out.push_str(indent);
        out.push_str(&line);
        out.push('\n');
    }
    out.trim_end_matches('\n').to_string()
}

/// A rendered layer: source text plus its plan entry.
pub struct Rendered {
    pub source: String,
    pub plan: LayerPlan,
}

pub fn render_layer(g: &ModelGraph, program: &Program, name: &str, path: &str) -> Result<Rendered, CodegenError> {
    let node = g.node(name).expect("node exists");
    let kernel = program.kernel(name).expect("every node has a kernel");
    let id = ident(name);
    let cfg = g.config.layer(name);
    let out_shape = g.shape(name).to_vec();
    let mut b: BTreeMap<&str, String> = BTreeMap::new();
    let prec = |r: Role| node.precision(r).to_string();
    b.insert("name", id.clone());
    b.insert("op", node.op.type_name().to_string());
    b.insert("out_shape", shape_text(&out_shape));
    b.insert("n_out", numel(&out_shape).to_string());
    b.insert("out_prec", prec(Role::Result));
    b.insert("in_prec", prec(Role::Input));
    b.insert("accum_prec", prec(Role::Accum));
    b.insert("weight_prec", prec(Role::Weight));
    b.insert("bias_prec", prec(Role::Bias));
    if let Some(t) = crate::kernels::value_type(g, name) {
        b.insert("out_type", c_type(t));
    }
    if !node.inputs.is_empty() {
        let in_shape = g.input_shape(name, 0).to_vec();
        b.insert("in_shape", shape_text(&in_shape));
        b.insert("n_in", numel(&in_shape).to_string());
        b.insert("in_type", c_type(input_value_type(g, name, 0)?));
        let mut params = Vec::new();
        let mut args = Vec::new();
        let mut terms = Vec::new();
        for k in 0..node.inputs.len() {
            let t = input_value_type(g, name, k)?;
            params.push(format!("const {} x{k}[{}]", c_type(t), numel(g.input_shape(name, k))));
            args.push(format!("x{k}"));
            terms.push(format!("x{k}[i]"));
        }
        b.insert("params", params.join(", "));
        b.insert("args", args.join(", "));
        b.insert("sum", terms.join(" + "));
        b.insert("arity", node.inputs.len().to_string());
    }
    let ii = crate::kernels::layer_ii(g, name)?;
    b.insert("ii", ii.to_string());
    let anchor_pipeline = format!("{name}:pipeline");
    let anchor_partition = format!("{name}:partition");
    b.insert("anchor_pipeline", anchor_pipeline.clone());
    b.insert("anchor_partition", anchor_partition.clone());

    let mut directives = Vec::new();
    let mut tables = Vec::new();
    let mut strategy = None;
    let mut key_op = node.op.type_name();
    let dir = |kind: &str, value: String, anchor: &str| Directive { kind: kind.into(), value, anchor: anchor.into(), file: path.into() };
    if !matches!(kernel, Kernel::Input { .. } | Kernel::Constant(_)) {
        directives.push(dir("pipeline", format!("II={ii}"), &anchor_pipeline));
    }
    match kernel {
        Kernel::Input { .. } | Kernel::Constant(_) => {
            if let Kernel::Constant(q) = kernel {
                b.insert("values", values(q));
            }
        }
        Kernel::Cmvm { layer, window, depthwise } => {
            let plan = &layer.plan;
            strategy = Some(plan.strategy);
            b.insert("m", plan.m.to_string());
            b.insert("n", plan.n.to_string());
            b.insert("rf", plan.rf.to_string());
            b.insert("pf", layer.pf.to_string());
            b.insert("positions", layer.positions.to_string());
            b.insert("n_mult", plan.n_mult.to_string());
            b.insert("weight_type", c_type(layer.matrix.ty()));
            b.insert("accum_type", c_type(layer.accum));
            b.insert("in_type", c_type(layer.input_type));
            b.insert("weights", values(&layer.matrix));
            let (bias_type, biases) = match &layer.bias {
                Some(q) => (c_type(q.ty()), values(q)),
                None => (c_type(layer.accum), vec!["0"; plan.m].join(", ")),
            };
            b.insert("bias_type", bias_type);
            b.insert("biases", biases);
            if let Some(w) = window {
                b.insert("kernel", shape_text(&w.kernel));
                b.insert("stride", shape_text(&w.stride));
                b.insert("pad", format!("{:?}", w.pad));
                b.insert("depthwise", depthwise.to_string());
            }
            match plan.strategy {
                Strategy::Da => {
                    let ag = plan.graph.as_ref().expect("DA plans carry a graph");
                    let cost = ag.cost();
                    b.insert("adders", cost.adders.to_string());
                    b.insert("adder_cost", cost.weighted.to_string());
                    let nl = if window.is_some() {
                        netlist(ag, |j| format!("col[{j}]"), "        ")
                    } else {
                        netlist(ag, |j| format!("x[xo + {j}]"), "        ")
                    };
                    b.insert("netlist", nl);
                }
                Strategy::Resource => {
                    directives.push(dir("array_partition", format!("block factor={}", plan.rf), &anchor_partition));
                }
                Strategy::Latency => {
                    directives.push(dir("array_partition", "complete".into(), &anchor_partition));
                }
            }
        }
        Kernel::BatchNorm { scale, shift, accum, .. } => {
            b.insert("channels", scale.len().to_string());
            b.insert("scale_type", c_type(scale.ty()));
            b.insert("shift_type", c_type(shift.ty()));
            b.insert("scale", values(scale));
            b.insert("shift", values(shift));
            b.insert("accum_type", c_type(*accum));
        }
        Kernel::Select { kind, .. } => {
            b.insert("function", kind.name().to_string());
            let e = match kind {
                ActivationKind::Relu => "(x[i] > 0 ? x[i] : 0)".to_string(),
                ActivationKind::LeakyRelu { alpha } => format!("(x[i] > 0 ? x[i] : leaky(x[i], {}))", real_to_string(alpha)),
                _ => "x[i]".to_string(),
            };
            b.insert("expression", e);
        }
        Kernel::Table(t) => {
            key_op = "Table";
            b.insert("function", t.func.name().to_string());
            b.insert("table_size", t.entries.len().to_string());
            b.insert("table_type", c_type(t.out_type));
            b.insert("drop", t.drop.to_string());
            b.insert("table", payload_values(&t.entries, t.out_type));
            tables.push(TablePlan { name: name.to_string(), entries: t.entries.len(), width: t.out_type.width(), brams: bram_count(t.entries.len(), t.out_type.width()) });
        }
        Kernel::Softmax(k) => {
            b.insert("sum_type", c_type(k.sum_type));
            for (prefix, t) in [("exp", &k.exp), ("recip", &k.recip)] {
                let size: &'static str = if prefix == "exp" { "exp_size" } else { "recip_size" };
                let ty: &'static str = if prefix == "exp" { "exp_type" } else { "recip_type" };
                let tab: &'static str = if prefix == "exp" { "exp_table" } else { "recip_table" };
                b.insert(size, t.entries.len().to_string());
                b.insert(ty, c_type(t.out_type));
                b.insert(tab, payload_values(&t.entries, t.out_type));
                tables.push(TablePlan {
                    name: format!("{name}.{prefix}"),
                    entries: t.entries.len(),
                    width: t.out_type.width(),
                    brams: bram_count(t.entries.len(), t.out_type.width()),
                });
            }
        }
        Kernel::Pool { kind, window, accum, .. } => {
            b.insert("pool", shape_text(&window.kernel));
            b.insert("stride", shape_text(&window.stride));
            b.insert("pad", format!("{:?}", window.pad));
            b.insert("taps", window.kernel.iter().product::<usize>().to_string());
            b.insert("kind", if *kind == PoolKind::Max { "max" } else { "avg" }.to_string());
            b.insert("accum_type", c_type(*accum));
        }
        Kernel::Add { accum, .. } => {
            if let Some(a) = accum {
                b.insert("accum_prec", a.to_string());
            }
        }
        Kernel::Concat { axis, .. } => {
            b.insert("axis", axis.to_string());
        }
        Kernel::Reshape { .. } => {
            b.insert("detail", String::new());
            b.insert("index", "i".into());
        }
        Kernel::Transpose { perm, .. } => {
            b.insert("detail", format!("perm {perm:?}"));
            b.insert("index", format!("perm_index_{id}(i)"));
        }
        Kernel::Quant { format, .. } => {
            b.insert("format", format.to_string());
        }
        Kernel::Custom { def, attrs, .. } => {
            b.insert("tag", ident(&def.tag));
            b.insert("attrs", serde_json::to_string(attrs).expect("attrs serialize"));
        }
    }
    if matches!(node.op, Op::Custom { .. }) && !b.contains_key("params") {
        b.insert("params", "void".into());
        b.insert("args", String::new());
    }
    let source = render_template(key_op, strategy, &b)?;
    let precisions = node.precision.iter().map(|(r, p)| (r.name().to_string(), p.to_string())).collect();
    let plan = LayerPlan {
        name: name.to_string(),
        op: node.op.type_name().to_string(),
        inputs: node.inputs.clone(),
        strategy: strategy.map(|s| s.to_string()),
        reuse_factor: strategy.map(|_| cfg.reuse_factor),
        parallelization_factor: strategy.map(|_| cfg.parallelization_factor),
        ii,
        precisions,
        tables,
        fifo_depths: BTreeMap::new(),
        directives,
        source: path.to_string(),
    };
    Ok(Rendered { source, plan })
}
