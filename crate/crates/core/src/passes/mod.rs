//! Optimizer flows: named, ordered pass lists with prerequisites.

mod precision;
mod rewrite;

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::ir::{IrError, ModelGraph};

pub use precision::{infer_accumulator, propagate_precision, resolve_auto_precision, unquantized_roles, MAX_EXACT_WEIGHT_WIDTH};
pub use rewrite::{eliminate_transposes, fold_constants, fuse_batchnorm, inline_parameters};

/// Iteration cap for passes run to a fixpoint.
pub const FIXPOINT_CAP: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PassError {
    #[error("unknown flow '{0}'")]
    UnknownFlow(String),
    #[error("pass {pass} failed at '{node}': {reason}")]
    PassFailure { pass: String, node: String, reason: String },
    #[error("pass {0} did not reach a fixpoint within {FIXPOINT_CAP} iterations")]
    NoFixpoint(String),
    #[error("input precision of '{0}' is unresolved")]
    UnboundedInput(String),
    #[error("model is not fully quantized: {}", .0.join(", "))]
    NotFullyQuantized(Vec<String>),
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// One structural change made by a pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Change {
    pub node: String,
    pub change: String,
}

impl Change {
    pub fn new(node: &str, change: impl Into<String>) -> Self {
        Change { node: node.to_string(), change: change.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LogEntry {
    pub flow: String,
    pub pass: String,
    pub iteration: usize,
    pub node: String,
    pub change: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PassLog {
    pub entries: Vec<LogEntry>,
}

impl PassLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub type PassFn = fn(&ModelGraph) -> Result<(ModelGraph, Vec<Change>), PassError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Once,
    Fixpoint,
}

#[derive(Clone, Copy)]
pub struct Pass {
    pub name: &'static str,
    pub mode: Mode,
    pub run: PassFn,
}

pub struct Flow {
    pub name: &'static str,
    pub passes: Vec<Pass>,
    pub requires: Vec<&'static str>,
}

/// Propagates precision when the model is fully quantized and the config
/// allows it; otherwise leaves the graph for per-layer inference.
fn propagate_if_quantized(g: &ModelGraph) -> Result<(ModelGraph, Vec<Change>), PassError> {
    if !g.config.propagate_precision || !unquantized_roles(g).is_empty() {
        return Ok((g.clone(), Vec::new()));
    }
    propagate_precision(g)
}

pub fn builtin_flows() -> Vec<Flow> {
    let p = |name, mode, run| Pass { name, mode, run };
    vec![
        Flow {
            name: "convert",
            passes: vec![p("inline_parameters", Mode::Once, inline_parameters), p("fold_constants", Mode::Fixpoint, fold_constants)],
            requires: vec![],
        },
        Flow {
            name: "optimize",
            passes: vec![
                p("fuse_batchnorm", Mode::Fixpoint, fuse_batchnorm),
                p("eliminate_transposes", Mode::Fixpoint, eliminate_transposes),
                p("fold_constants", Mode::Fixpoint, fold_constants),
            ],
            requires: vec!["convert"],
        },
        Flow {
            name: "quantize",
            passes: vec![
                p("propagate_precision", Mode::Once, propagate_if_quantized),
                p("resolve_auto_precision", Mode::Once, resolve_auto_precision),
            ],
            requires: vec!["optimize"],
        },
    ]
}

pub fn flow_names() -> Vec<&'static str> {
    builtin_flows().iter().map(|f| f.name).collect()
}

/// Runs one pass, to a fixpoint when its mode asks for it.
pub fn run_pass(g: &ModelGraph, flow: &str, pass: &Pass, log: &mut PassLog) -> Result<ModelGraph, PassError> {
    let mut cur = g.clone();
    let rounds = if pass.mode == Mode::Fixpoint { FIXPOINT_CAP } else { 1 };
    for iteration in 0..rounds {
        let (next, changes) = (pass.run)(&cur)?;
        let done = changes.is_empty();
        for c in changes {
            log.entries.push(LogEntry {
                flow: flow.to_string(),
                pass: pass.name.to_string(),
                iteration,
                node: c.node,
                change: c.change,
            });
        }
        cur = next;
        if done || pass.mode == Mode::Once {
            return Ok(cur);
        }
    }
    Err(PassError::NoFixpoint(pass.name.to_string()))
}

fn run_flows(g: ModelGraph, flows: &[Flow], name: &str, log: &mut PassLog, visiting: &mut BTreeSet<String>) -> Result<ModelGraph, PassError> {
    if g.metadata.flows_applied.iter().any(|f| f == name) {
        return Ok(g);
    }
    let flow = flows.iter().find(|f| f.name == name).ok_or_else(|| PassError::UnknownFlow(name.to_string()))?;
    if !visiting.insert(name.to_string()) {
        return Err(PassError::UnknownFlow(format!("{name} (cyclic prerequisite)")));
    }
    let mut g = g;
    for req in &flow.requires {
        g = run_flows(g, flows, req, log, visiting)?;
    }
    for pass in &flow.passes {
        g = run_pass(&g, name, pass, log)?;
    }
    g.metadata.flows_applied.push(name.to_string());
    Ok(g)
}

/// Runs a built-in flow and its prerequisites. Completed flows are skipped.
pub fn run_flow(g: &ModelGraph, flow: &str) -> Result<(ModelGraph, PassLog), PassError> {
    run_custom_flow(g, &builtin_flows(), flow)
}

pub fn run_custom_flow(g: &ModelGraph, flows: &[Flow], flow: &str) -> Result<(ModelGraph, PassLog), PassError> {
    let mut log = PassLog::default();
    let out = run_flows(g.clone(), flows, flow, &mut log, &mut BTreeSet::new())?;
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_graph, HwConfig, LayerNode, Op, Tensor};

    fn tiny() -> ModelGraph {
        let nodes = vec![
            LayerNode::new("in", Op::Input { shape: vec![2] }, &[]),
            LayerNode::new("d", Op::Dense { units: 1 }, &["in"]).with_weight("kernel", Tensor::from_ints(vec![2, 1], &[1, 2])),
        ];
        build_graph(nodes, vec![], HwConfig::default()).unwrap()
    }

    #[test]
    fn empty_flow_is_identity() {
        let flows = [Flow { name: "nothing", passes: vec![], requires: vec![] }];
        let (g, log) = run_custom_flow(&tiny(), &flows, "nothing").unwrap();
        assert!(log.is_empty());
        assert_eq!(g.nodes_vec(), tiny().nodes_vec());
        assert_eq!(g.metadata.flows_applied, ["nothing"]);
    }

    #[test]
    fn prerequisites_run_in_order_once() {
        let (g, log) = run_flow(&tiny(), "quantize").unwrap();
        assert_eq!(g.metadata.flows_applied, ["convert", "optimize", "quantize"]);
        assert!(log.entries.iter().all(|e| e.flow == "quantize"));
        let (g2, log2) = run_flow(&g, "quantize").unwrap();
        assert!(log2.is_empty());
        assert_eq!(g2, g);
    }

    #[test]
    fn unknown_flow() {
        assert_eq!(run_flow(&tiny(), "bogus").err(), Some(PassError::UnknownFlow("bogus".into())));
    }

    fn flip(g: &ModelGraph) -> Result<(ModelGraph, Vec<Change>), PassError> {
        Ok((g.clone(), vec![Change::new("d", "flip")]))
    }

    #[test]
    fn oscillating_pass_hits_cap() {
        let flows = [Flow { name: "osc", passes: vec![Pass { name: "flip", mode: Mode::Fixpoint, run: flip }], requires: vec![] }];
        assert_eq!(run_custom_flow(&tiny(), &flows, "osc").err(), Some(PassError::NoFixpoint("flip".into())));
    }

    #[test]
    fn deterministic_output_and_jsonl_log() {
        let (a, la) = run_flow(&tiny(), "quantize").unwrap();
        let (b, lb) = run_flow(&tiny(), "quantize").unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(la.to_jsonl(), lb.to_jsonl());
        for line in la.to_jsonl().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["pass"].is_string());
        }
    }
}
