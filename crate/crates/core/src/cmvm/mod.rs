//! Constant matrix-vector multiplication: strategy planning, evaluation and
//! the distributed-arithmetic adder graph.

pub mod adder;
pub mod csd;

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use serde::Serialize;
use thiserror::Error;

pub use adder::{
    adder_cost, build_adder_graph, build_adder_graph_with, eval_adder_graph, AdderCost, AdderGraph, AdderNode,
    AdderOptions, Operand,
};
pub use csd::{csd, CsdDigits};

use crate::fxp::{min_type_for, FixedPointType, FixedValue, Interval, WeightFormat};
use crate::ir::{QTensor, Strategy};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CmvmError {
    #[error("reuse factor {rf} does not divide {size} weights")]
    IndivisibleRF { size: usize, rf: usize },
    #[error("distributed arithmetic does not support reuse factor {0}")]
    DAWithReuse(usize),
    #[error("expected {expected} inputs, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("weight matrix must be rank 2, got shape {0:?}")]
    NotAMatrix(Vec<usize>),
    #[error("bad netlist line: {0}")]
    BadNetlist(String),
}

/// How a single weight multiplication is realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MultKind {
    General,
    /// Power-of-two weights: a shifter.
    Shift,
    /// Binary weights: conditional negate.
    Binary,
    /// Ternary weights: conditional negate or zero.
    Ternary,
}

impl MultKind {
    pub fn of(format: &WeightFormat) -> MultKind {
        match format {
            WeightFormat::Fixed(_) => MultKind::General,
            WeightFormat::PowerOfTwo { .. } => MultKind::Shift,
            WeightFormat::Binary => MultKind::Binary,
            WeightFormat::Ternary => MultKind::Ternary,
        }
    }

    /// Whether the multiplication maps onto a hardened multiplier.
    pub fn uses_multiplier(&self) -> bool {
        matches!(self, MultKind::General)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CmvmPlan {
    pub strategy: Strategy,
    /// Outputs.
    pub m: usize,
    /// Inputs.
    pub n: usize,
    pub rf: usize,
    pub n_mult: usize,
    pub ii: usize,
    /// Resource only: `rf` blocks of `(row, col)` weight references.
    pub partitions: Vec<Vec<(usize, usize)>>,
    /// DA only.
    pub graph: Option<AdderGraph>,
    pub mult_kind: MultKind,
}

impl CmvmPlan {
    /// Hardened multipliers this plan instantiates.
    pub fn multipliers(&self) -> usize {
        match self.strategy {
            Strategy::Da => 0,
            _ if self.mult_kind.uses_multiplier() => self.n_mult,
            _ => 0,
        }
    }
}

fn matrix_dims(w: &QTensor) -> Result<(usize, usize), CmvmError> {
    match w.shape[..] {
        [m, n] => Ok((m, n)),
        _ => Err(CmvmError::NotAMatrix(w.shape.clone())),
    }
}

type GraphKey = (Vec<Vec<i128>>, FixedPointType, i32);

/// Adder graphs are pure functions of the weights and input type, and CSE on
/// a large matrix is slow, so every plan of the same matrix shares one build.
fn cached_adder_graph(rows: Vec<Vec<i128>>, input_type: FixedPointType, weight_exp: i32) -> AdderGraph {
    static CACHE: OnceLock<Mutex<HashMap<GraphKey, AdderGraph>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (rows, input_type, weight_exp);
    if let Some(g) = cache.lock().expect("graph cache").get(&key) {
        return g.clone();
    }
    let g = build_adder_graph_with(&key.0, input_type, weight_exp, AdderOptions::default());
    cache.lock().expect("graph cache").insert(key, g.clone());
    g
}

/// Plans `y = W x` for `W` of shape `[M, N]` and inputs of `input_type`.
pub fn plan(w: &QTensor, strategy: Strategy, rf: usize, input_type: FixedPointType) -> Result<CmvmPlan, CmvmError> {
    let (m, n) = matrix_dims(w)?;
    let size = m * n;
    let mult_kind = MultKind::of(&w.format);
    let base = CmvmPlan { strategy, m, n, rf, n_mult: 0, ii: 1, partitions: Vec::new(), graph: None, mult_kind };
    match strategy {
        Strategy::Da => {
            if rf != 1 {
                return Err(CmvmError::DAWithReuse(rf));
            }
            let rows: Vec<Vec<i128>> = w.payloads.chunks(n.max(1)).take(m).map(|r| r.to_vec()).collect();
            let graph = cached_adder_graph(rows, input_type, w.ty().lsb_exp());
            Ok(CmvmPlan { n_mult: 0, ii: 1, graph: Some(graph), ..base })
        }
        Strategy::Latency | Strategy::Resource => {
            if rf == 0 || (size > 0 && size % rf != 0) || (size == 0 && rf != 1) {
                return Err(CmvmError::IndivisibleRF { size, rf });
            }
            let n_mult = size / rf;
            let partitions = if strategy == Strategy::Resource {
                let mut blocks = vec![Vec::with_capacity(n_mult); rf];
                for k in 0..size {
                    blocks[k % rf].push((k / n, k % n));
                }
                blocks
            } else {
                Vec::new()
            };
            Ok(CmvmPlan { n_mult, ii: rf, partitions, ..base })
        }
    }
}

fn mul(kind: MultKind, w: i128, x: i128) -> i128 {
    match (kind, w) {
        (MultKind::Binary | MultKind::Ternary, 1) => x,
        (MultKind::Binary | MultKind::Ternary, -1) => -x,
        (MultKind::Binary | MultKind::Ternary, _) => 0,
        _ => w.checked_mul(x).expect("product overflow"),
    }
}

/// Exact row sums as payloads at exponent `input_exp + weight_exp`.
pub fn eval_plan_payloads(plan: &CmvmPlan, w: &QTensor, x: &[i128]) -> Result<Vec<i128>, CmvmError> {
    if x.len() != plan.n {
        return Err(CmvmError::ArityMismatch { expected: plan.n, got: x.len() });
    }
    let n = plan.n;
    let mut y = vec![0i128; plan.m];
    match plan.strategy {
        Strategy::Latency => {
            for (r, out) in y.iter_mut().enumerate() {
                for c in 0..n {
                    *out += mul(plan.mult_kind, w.payloads[r * n + c], x[c]);
                }
            }
        }
        Strategy::Resource => {
            // one block of n_mult weights per cycle
            for block in &plan.partitions {
                for &(r, c) in block {
                    y[r] += mul(plan.mult_kind, w.payloads[r * n + c], x[c]);
                }
            }
        }
        Strategy::Da => {
            y = plan.graph.as_ref().expect("DA plan carries its adder graph").eval_payloads(x);
        }
    }
    Ok(y)
}

/// Exact type of each output row over all inputs of `input_type`.
pub fn row_types(w: &QTensor, input_type: FixedPointType) -> Vec<FixedPointType> {
    let (m, n) = (w.shape[0], w.shape.get(1).copied().unwrap_or(0));
    let x = input_type.range();
    let exp = input_type.lsb_exp() + w.ty().lsb_exp();
    (0..m)
        .map(|r| {
            let mut acc = Interval::point(0, exp);
            for c in 0..n {
                let wi = Interval::point(w.payloads[r * n + c], w.ty().lsb_exp());
                acc = acc.add(&wi.mul(&x));
            }
            min_type_for(&acc, exp)
        })
        .collect()
}

/// Evaluates the plan; every strategy returns the exact product, so results
/// are bit-identical. `x` must share one type.
pub fn eval_plan(plan: &CmvmPlan, w: &QTensor, x: &[FixedValue]) -> Result<(Vec<FixedValue>, usize), CmvmError> {
    if x.len() != plan.n {
        return Err(CmvmError::ArityMismatch { expected: plan.n, got: x.len() });
    }
    let t = x.first().map(|v| v.ty()).unwrap_or_else(|| FixedPointType::signed(1, 1).expect("static type"));
    let xs: Vec<i128> = x.iter().map(|v| crate::fxp::cast(v, t).payload()).collect();
    let y = eval_plan_payloads(plan, w, &xs)?;
    let types = row_types(w, t);
    let out = y
        .into_iter()
        .zip(types)
        .map(|(p, ty)| FixedValue::new(p, ty).expect("exact row type covers its sum"))
        .collect();
    Ok((out, plan.ii))
}
