//! Structural resource and latency estimates, the stream simulator and FIFO
//! depth calibration.

mod sim;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::cmvm::{AdderGraph, AdderNode};
use crate::ir::tensor::numel;
use crate::ir::{custom, IoType, ModelGraph, Op, Strategy};
use crate::kernels::{cmvm_layer, value_type, CmvmLayer, KernelError, Program};

pub use sim::{DataflowTrace, Fifo, FifoTrace, Pipeline, Stage, StallCounts};

#[derive(Debug, Error)]
pub enum PerfError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("deadlock detected at cycle {0}")]
    DeadlockDetected(u64),
    #[error("no FIFOs: the model uses io_parallel")]
    NoFifos,
    #[error("bad pipeline: {0}")]
    BadPipeline(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub op: String,
    pub multipliers: usize,
    pub adder_weighted_cost: u64,
    pub table_brams: usize,
    pub fifo_bits: u64,
    pub ii_cycles: usize,
    pub latency_cycles_estimate: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub multipliers: usize,
    pub adder_weighted_cost: u64,
    pub table_brams: usize,
    pub fifo_bits: u64,
    /// Largest layer II.
    pub ii_cycles: usize,
    /// `latency_estimate` of the whole model.
    pub latency_cycles_estimate: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ResourceReport {
    pub io_type: String,
    pub layers: Vec<LayerReport>,
    pub total: Totals,
}

impl ResourceReport {
    pub fn layer(&self, name: &str) -> Option<&LayerReport> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![["layer", "op", "mult", "adder_cost", "bram", "fifo_bits", "ii", "latency"].map(String::from).to_vec()];
        for l in &self.layers {
            rows.push(vec![
                l.name.clone(),
                l.op.clone(),
                l.multipliers.to_string(),
                l.adder_weighted_cost.to_string(),
                l.table_brams.to_string(),
                l.fifo_bits.to_string(),
                l.ii_cycles.to_string(),
                l.latency_cycles_estimate.to_string(),
            ]);
        }
        let t = &self.total;
        rows.push(vec![
            "total".into(),
            String::new(),
            t.multipliers.to_string(),
            t.adder_weighted_cost.to_string(),
            t.table_brams.to_string(),
            t.fifo_bits.to_string(),
            t.ii_cycles.to_string(),
            t.latency_cycles_estimate.to_string(),
        ]);
        render_rows(&rows)
    }
}

pub(crate) fn render_rows(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = widths[c])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Block RAMs for one table: 1024 entries of up to 18 bits per block.
pub fn bram_count(entries: usize, width: u32) -> usize {
    entries.div_ceil(1024) * if width > 18 { 2 } else { 1 }
}

fn ceil_log2(n: usize) -> usize {
    (usize::BITS - (n.max(1) - 1).leading_zeros()) as usize
}

/// Longest chain of adders from any input to any output.
pub fn adder_depth(g: &AdderGraph) -> usize {
    let nodes = g.nodes();
    let mut d = vec![0usize; nodes.len()];
    let mut max = 0;
    for (i, n) in nodes.iter().enumerate() {
        d[i] = match n {
            AdderNode::Input { .. } => 0,
            AdderNode::Shift { src, .. } => d[*src],
            AdderNode::AddSub { lhs, rhs, .. } => 1 + d[lhs.src].max(d[rhs.src]),
            AdderNode::Output { src, .. } => src.map_or(0, |s| d[s]),
        };
        max = max.max(d[i]);
    }
    max
}

fn custom_cost(g: &ModelGraph, name: &str, tag: &str) -> (usize, usize) {
    g.config.layer(name).custom_cost.or_else(|| custom::lookup(tag).map(|d| d.cost)).unwrap_or((0, 1))
}

/// Per-layer facts shared by the estimators.
struct Layer {
    name: String,
    op: String,
    ii: usize,
    depth: usize,
    cmvm: Option<CmvmLayer>,
}

impl Layer {
    /// Cycles from the first input to the last output of one sample.
    fn latency(&self) -> usize {
        if self.depth == 0 {
            0
        } else {
            self.depth + self.ii - 1
        }
    }
}

/// Pipeline depth of one kernel:
///
/// | kernel | cycles |
/// |---|---|
/// | Input | 0 |
/// | CMVM, Latency or Resource | 2 + ceil(log2 N) |
/// | CMVM, DA | 1 + adder depth |
/// | BatchNorm | 2 |
/// | piecewise-linear activation | 1 |
/// | table activation | 2 |
/// | Softmax over n | 5 + ceil(log2 n) |
/// | pooling over k taps | 1 + ceil(log2 k) |
/// | Add over k inputs | max(1, ceil(log2 k)) |
/// | Concat, Reshape, Transpose, Quant | 1 |
/// | custom | registered latency, at least 1 |
fn kernel_depth(g: &ModelGraph, name: &str, cmvm: Option<&CmvmLayer>) -> usize {
    let node = g.node(name).expect("node exists");
    if let Some(l) = cmvm {
        return match (&l.plan.strategy, &l.plan.graph) {
            (Strategy::Da, Some(ag)) => 1 + adder_depth(ag),
            _ => 2 + ceil_log2(l.plan.n),
        };
    }
    match &node.op {
        Op::Input { .. } | Op::Constant => 0,
        Op::BatchNorm { .. } => 2,
        Op::Activation(k) if k.is_piecewise_linear() => 1,
        Op::Activation(_) => 2,
        Op::Softmax => 5 + ceil_log2(*g.shape(name).last().unwrap_or(&1)),
        Op::MaxPool(p) | Op::AvgPool(p) => 1 + ceil_log2(p.pool.iter().product()),
        Op::Add => ceil_log2(node.inputs.len()).max(1),
        Op::Custom { tag, .. } => custom_cost(g, name, tag).1.max(1),
        _ => 1,
    }
}

fn layers(g: &ModelGraph) -> Result<Vec<Layer>, PerfError> {
    let mut out = Vec::new();
    for name in g.topo_order() {
        let node = g.node(name).expect("node exists");
        if matches!(node.op, Op::Constant) {
            continue;
        }
        let cmvm = cmvm_layer(g, name)?;
        let ii = cmvm.as_ref().map_or(1, |l| l.ii());
        let depth = kernel_depth(g, name, cmvm.as_ref());
        out.push(Layer { name: name.clone(), op: node.op.type_name().to_string(), ii, depth, cmvm });
    }
    Ok(out)
}

/// Per-layer initiation interval in cycles per sample.
pub fn layer_ii(g: &ModelGraph, name: &str) -> Result<usize, PerfError> {
    Ok(crate::kernels::layer_ii(g, name)?)
}

/// Stream items in a tensor: one per position, each carrying the last axis.
fn items(shape: &[usize]) -> usize {
    if shape.len() <= 1 {
        1
    } else {
        numel(&shape[..shape.len() - 1])
    }
}

fn data_sources<'a>(g: &'a ModelGraph, name: &str) -> Vec<&'a str> {
    let node = g.node(name).expect("node exists");
    let mut out: Vec<&str> = Vec::new();
    for i in &node.inputs {
        let src = g.node(i).expect("input exists");
        if !matches!(src.op, Op::Constant) && !out.contains(&src.name.as_str()) {
            out.push(src.name.as_str());
        }
    }
    out
}

fn build(g: &ModelGraph, ls: &[Layer]) -> Pipeline {
    let mut p = Pipeline::default();
    let mut index = BTreeMap::new();
    for l in ls {
        let srcs = data_sources(g, &l.name);
        let firings = srcs.iter().map(|s| items(g.shape(s))).chain([items(g.shape(&l.name))]).max().unwrap_or(1);
        let ii = l.ii.div_ceil(firings);
        let latency = if l.depth == 0 { 1 } else { l.depth + ii - 1 };
        let id = p.add_stage(&l.name, ii, latency, firings);
        index.insert(l.name.as_str(), id);
        for s in srcs {
            let shape = g.shape(s);
            let default = numel(shape).max(1);
            let fd = &g.config.fifo_depths;
            let depth = fd.get(&format!("{s}->{}", l.name)).or_else(|| fd.get(s)).copied().unwrap_or(default);
            let k = p.connect(index[s], id, items(shape), depth);
            let width = value_type(g, s).map_or(0, |t| t.width() as u64);
            p.fifos[k].default_depth = default;
            p.fifos[k].item_bits = width * (numel(shape) / items(shape)) as u64;
        }
    }
    p
}

/// The stream pipeline of `g`, with depths from the config or the default
/// of one upstream tensor per FIFO.
pub fn pipeline(g: &ModelGraph) -> Result<Pipeline, PerfError> {
    Ok(build(g, &layers(g)?))
}

fn parallel_trace(ls: &[Layer], n_samples: usize) -> DataflowTrace {
    let latency: usize = ls.iter().map(Layer::latency).sum();
    let ii = ls.iter().map(|l| l.ii).max().unwrap_or(1);
    let makespan = if n_samples == 0 { 0 } else { latency + (n_samples - 1) * ii };
    let stalls = ls.iter().map(|l| (l.name.clone(), StallCounts::default())).collect();
    DataflowTrace { n_samples, makespan: makespan as u64, fifos: Vec::new(), stalls }
}

/// Simulates `n_samples` samples. io_parallel models run as one pipeline
/// whose latency is the sum of layer latencies and whose II is the largest
/// layer II.
pub fn simulate(g: &ModelGraph, n_samples: usize) -> Result<DataflowTrace, PerfError> {
    let ls = layers(g)?;
    match g.config.io_type {
        IoType::IoParallel => Ok(parallel_trace(&ls, n_samples)),
        IoType::IoStream => build(g, &ls).simulate(n_samples),
    }
}

/// FIFO depths that hold the peak occupancy seen over `n_samples`.
pub fn optimize_fifo_depths(g: &ModelGraph, n_samples: usize) -> Result<BTreeMap<String, usize>, PerfError> {
    if g.config.io_type == IoType::IoParallel {
        return Err(PerfError::NoFifos);
    }
    pipeline(g)?.optimize_depths(n_samples.max(1))
}

/// Cycles for one sample.
pub fn latency_estimate(g: &ModelGraph) -> Result<u64, PerfError> {
    Ok(simulate(g, 1)?.makespan)
}

pub fn estimate(g: &ModelGraph) -> Result<ResourceReport, PerfError> {
    let ls = layers(g)?;
    let program = Program::new(g)?;
    let mut brams: BTreeMap<&str, usize> = BTreeMap::new();
    let tables = program.tables();
    for (key, t) in &tables {
        let owner = key.split('.').next().unwrap_or(key);
        *brams.entry(owner).or_default() += bram_count(t.entries.len(), t.out_type.width());
    }
    let mut fifo_bits: BTreeMap<String, u64> = BTreeMap::new();
    if g.config.io_type == IoType::IoStream {
        let p = build(g, &ls);
        for f in &p.fifos {
            *fifo_bits.entry(p.stages[f.from].name.clone()).or_default() += f.depth as u64 * f.item_bits;
        }
    }
    let mut layers_out = Vec::new();
    for l in &ls {
        let node = g.node(&l.name).expect("node exists");
        let (multipliers, adder) = match (&l.cmvm, &node.op) {
            (Some(c), _) => (c.plan.multipliers() * c.pf, c.plan.graph.as_ref().map_or(0, |ag| ag.cost().weighted) * c.pf as u64),
            (None, Op::Custom { tag, .. }) => (custom_cost(g, &l.name, tag).0, 0),
            _ => (0, 0),
        };
        layers_out.push(LayerReport {
            name: l.name.clone(),
            op: l.op.clone(),
            multipliers,
            adder_weighted_cost: adder,
            table_brams: brams.get(l.name.as_str()).copied().unwrap_or(0),
            fifo_bits: fifo_bits.get(&l.name).copied().unwrap_or(0),
            ii_cycles: l.ii,
            latency_cycles_estimate: l.latency(),
        });
    }
    let latency = match g.config.io_type {
        IoType::IoParallel => parallel_trace(&ls, 1).makespan,
        IoType::IoStream => build(g, &ls).simulate(1)?.makespan,
    };
    let total = Totals {
        multipliers: layers_out.iter().map(|l| l.multipliers).sum(),
        adder_weighted_cost: layers_out.iter().map(|l| l.adder_weighted_cost).sum(),
        table_brams: layers_out.iter().map(|l| l.table_brams).sum(),
        fifo_bits: layers_out.iter().map(|l| l.fifo_bits).sum(),
        ii_cycles: layers_out.iter().map(|l| l.ii_cycles).max().unwrap_or(0),
        latency_cycles_estimate: latency,
    };
    Ok(ResourceReport { io_type: g.config.io_type.to_string(), layers: layers_out, total })
}
