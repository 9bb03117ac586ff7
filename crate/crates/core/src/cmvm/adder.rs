use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::str::FromStr;

use log::debug;
use rustc_hash::FxHashMap as HashMap;

use super::csd::csd;
use super::CmvmError;
use crate::fxp::{min_type_for, FixedPointType, FixedValue, Interval};

pub type NodeId = usize;

/// A node reference shifted left by `shift` bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Operand {
    pub src: NodeId,
    pub shift: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AdderNode {
    Input { index: usize },
    Shift { src: NodeId, shift: u32 },
    /// `lhs + rhs` or `lhs - rhs`.
    AddSub { lhs: Operand, rhs: Operand, subtract: bool },
    /// Output row `row`; `None` is the constant zero.
    Output { row: usize, src: Option<NodeId>, negate: bool },
}

/// Shift-and-add network computing `y = W x` on integer payloads.
///
/// Inputs are payloads of `input_type`; outputs are payloads at exponent
/// `input_type.lsb_exp() + weight_exp`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdderGraph {
    nodes: Vec<AdderNode>,
    n_inputs: usize,
    n_outputs: usize,
    input_type: FixedPointType,
    weight_exp: i32,
    /// Per node: the integer coefficient of each input.
    coeffs: Vec<Vec<i128>>,
    intervals: Vec<Interval>,
    widths: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdderOptions {
    pub cse: bool,
    /// CSE is skipped when the pair table would exceed this many entries.
    pub max_pairs: usize,
}

impl Default for AdderOptions {
    fn default() -> Self {
        Self { cse: true, max_pairs: 20_000_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct AdderCost {
    pub adders: usize,
    pub weighted: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Term {
    src: NodeId,
    shift: u32,
    neg: bool,
}

/// `(a.src, b.src, b.shift - a.shift, signs differ)` with `a < b` by (src, shift).
type Key = (NodeId, NodeId, i64, bool);

fn pair_key(t1: &Term, t2: &Term) -> Key {
    let (a, b) = if (t1.src, t1.shift) <= (t2.src, t2.shift) { (t1, t2) } else { (t2, t1) };
    (a.src, b.src, b.shift as i64 - a.shift as i64, a.neg != b.neg)
}

/// Multiplier-free graph for `W` (rows are outputs) with greedy pair CSE.
pub fn build_adder_graph(w: &[Vec<i128>], input_type: FixedPointType) -> AdderGraph {
    build_adder_graph_with(w, input_type, 0, AdderOptions::default())
}

pub fn build_adder_graph_with(
    w: &[Vec<i128>],
    input_type: FixedPointType,
    weight_exp: i32,
    opts: AdderOptions,
) -> AdderGraph {
    let m = w.len();
    let n = w.first().map_or(0, |r| r.len());
    assert!(w.iter().all(|r| r.len() == n), "ragged weight matrix");
    let mut b = Builder::new(n, input_type);

    let mut rows: Vec<Vec<Term>> = w
        .iter()
        .map(|row| {
            let mut terms = Vec::new();
            for (j, &v) in row.iter().enumerate() {
                for (shift, sign) in csd(v).terms() {
                    terms.push(Term { src: j, shift, neg: sign < 0 });
                }
            }
            terms.sort();
            terms
        })
        .collect();

    let pair_total: usize = rows.iter().map(|r| r.len() * r.len().saturating_sub(1) / 2).sum();
    if opts.cse && pair_total <= opts.max_pairs {
        cse(&mut b, &mut rows);
    } else if opts.cse {
        debug!("skipping CSE: {pair_total} candidate pairs");
    }

    let mut shifts: BTreeMap<Operand, NodeId> = BTreeMap::new();
    for (row, terms) in rows.iter().enumerate() {
        let out = b.sum_terms(terms, &mut shifts);
        let (src, negate) = match out {
            None => (None, false),
            Some((id, neg)) => (Some(id), neg),
        };
        b.push(AdderNode::Output { row, src, negate });
    }
    b.finish(m, weight_exp)
}

struct Builder {
    nodes: Vec<AdderNode>,
    coeffs: Vec<Vec<i128>>,
    n_inputs: usize,
    input_type: FixedPointType,
}

impl Builder {
    fn new(n: usize, input_type: FixedPointType) -> Self {
        let mut b = Builder { nodes: Vec::new(), coeffs: Vec::new(), n_inputs: n, input_type };
        for index in 0..n {
            b.push(AdderNode::Input { index });
        }
        b
    }

    fn push(&mut self, node: AdderNode) -> NodeId {
        let c = node_coeffs(&node, &self.coeffs, self.n_inputs);
        self.nodes.push(node);
        self.coeffs.push(c);
        self.nodes.len() - 1
    }

    /// Adds `terms` with a balanced tree of AddSub nodes. Returns the node
    /// holding the (possibly negated) sum.
    fn sum_terms(&mut self, terms: &[Term], shifts: &mut BTreeMap<Operand, NodeId>) -> Option<(NodeId, bool)> {
        let mut level: Vec<(Operand, bool)> = terms.iter().map(|t| (Operand { src: t.src, shift: t.shift }, t.neg)).collect();
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len().div_ceil(2));
            for pair in level.chunks(2) {
                let node = match *pair {
                    [(a, na), (b, nb)] if na == nb || !na => (AdderNode::AddSub { lhs: a, rhs: b, subtract: na != nb }, na),
                    [(a, _), (b, _)] => (AdderNode::AddSub { lhs: b, rhs: a, subtract: true }, false),
                    [single] => {
                        next.push(single);
                        continue;
                    }
                    _ => unreachable!(),
                };
                next.push((Operand { src: self.push(node.0), shift: 0 }, node.1));
            }
            level = next;
        }
        let (acc, negate) = *level.first()?;
        if acc.shift == 0 {
            return Some((acc.src, negate));
        }
        let id = match shifts.get(&acc) {
            Some(id) => *id,
            None => {
                let id = self.push(AdderNode::Shift { src: acc.src, shift: acc.shift });
                shifts.insert(acc, id);
                id
            }
        };
        Some((id, negate))
    }

    fn finish(self, n_outputs: usize, weight_exp: i32) -> AdderGraph {
        AdderGraph::assemble(self.nodes, self.coeffs, self.n_inputs, n_outputs, self.input_type, weight_exp)
    }
}

fn node_coeffs(node: &AdderNode, coeffs: &[Vec<i128>], n: usize) -> Vec<i128> {
    let shifted = |op: &Operand| -> Vec<i128> {
        coeffs[op.src].iter().map(|c| c.checked_shl(op.shift).filter(|v| v >> op.shift == *c).expect("coefficient overflow")).collect()
    };
    match node {
        AdderNode::Input { index } => {
            let mut c = vec![0; n];
            c[*index] = 1;
            c
        }
        AdderNode::Shift { src, shift } => shifted(&Operand { src: *src, shift: *shift }),
        AdderNode::AddSub { lhs, rhs, subtract } => {
            let l = shifted(lhs);
            let r = shifted(rhs);
            l.iter().zip(&r).map(|(a, b)| if *subtract { a - b } else { a + b }).collect()
        }
        AdderNode::Output { src, negate, .. } => match src {
            None => vec![0; n],
            Some(s) => coeffs[*s].iter().map(|c| if *negate { -c } else { *c }).collect(),
        },
    }
}

fn row_pairs(row: &[Term]) -> HashMap<Key, u32> {
    let mut out = HashMap::default();
    for i in 0..row.len() {
        for j in i + 1..row.len() {
            *out.entry(pair_key(&row[i], &row[j])).or_insert(0) += 1;
        }
    }
    out
}

/// Change in pair counts from `old` to `new`, both sorted. Only pairs with a
/// removed or added term can differ.
fn pair_delta(old: &[Term], new: &[Term]) -> HashMap<Key, i64> {
    let (mut i, mut j) = (0, 0);
    let (mut common, mut gone, mut added) = (Vec::new(), Vec::new(), Vec::new());
    while i < old.len() || j < new.len() {
        match (old.get(i), new.get(j)) {
            (Some(a), Some(b)) if a == b => {
                common.push(*a);
                i += 1;
                j += 1;
            }
            (Some(a), Some(b)) if a < b => {
                gone.push(*a);
                i += 1;
            }
            (Some(a), None) => {
                gone.push(*a);
                i += 1;
            }
            (_, Some(b)) => {
                added.push(*b);
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    let mut out: HashMap<Key, i64> = HashMap::default();
    for (terms, sign) in [(&gone, -1), (&added, 1)] {
        for (x, t) in terms.iter().enumerate() {
            for c in common.iter().chain(&terms[x + 1..]) {
                *out.entry(pair_key(t, c)).or_insert(0) += sign;
            }
        }
    }
    out.retain(|_, d| *d != 0);
    out
}

/// Non-overlapping occurrences of `key` in the sorted `row`, as (low index, high index) pairs.
fn matches(row: &[Term], key: &Key) -> Vec<(usize, usize)> {
    let (a_src, b_src, d, rel) = *key;
    let mut used = vec![false; row.len()];
    let mut out = Vec::new();
    for (i, t) in row.iter().enumerate() {
        if t.src != a_src || used[i] {
            continue;
        }
        let bs = t.shift as i64 + d;
        if bs < 0 {
            continue;
        }
        if let Ok(j) = row.binary_search_by(|u| (u.src, u.shift).cmp(&(b_src, bs as u32))) {
            if !used[j] && i != j && (row[j].neg != t.neg) == rel {
                used[i] = true;
                used[j] = true;
                out.push((i, j));
            }
        }
    }
    out
}

/// Merges duplicate (src, shift) terms: `x + x = x<<1`, `x - x = 0`.
fn normalize(row: &mut Vec<Term>) {
    loop {
        row.sort();
        let mut changed = false;
        let mut i = 0;
        while i + 1 < row.len() {
            if row[i].src == row[i + 1].src && row[i].shift == row[i + 1].shift {
                if row[i].neg == row[i + 1].neg {
                    row[i].shift += 1;
                    row.remove(i + 1);
                } else {
                    row.drain(i..i + 2);
                }
                changed = true;
                break;
            }
            i += 1;
        }
        if !changed {
            break;
        }
    }
}

fn cse(b: &mut Builder, rows: &mut [Vec<Term>]) {
    let mut row_keys: Vec<HashMap<Key, u32>> = rows.iter().map(|r| row_pairs(r)).collect();
    let mut count: HashMap<Key, u32> = HashMap::default();
    let mut rows_of: HashMap<Key, BTreeSet<usize>> = HashMap::default();
    for (r, keys) in row_keys.iter().enumerate() {
        for (k, c) in keys {
            *count.entry(*k).or_insert(0) += c;
            rows_of.entry(*k).or_default().insert(r);
        }
    }
    let mut heap: BinaryHeap<(u32, Reverse<Key>)> = count.iter().filter(|(_, c)| **c >= 2).map(|(k, c)| (*c, Reverse(*k))).collect();
    let mut blocked: BTreeSet<Key> = BTreeSet::new();

    while let Some((c, Reverse(key))) = heap.pop() {
        if blocked.contains(&key) {
            continue;
        }
        let now = count.get(&key).copied().unwrap_or(0);
        if now != c {
            // counts that dropped are re-queued lazily
            if now >= 2 && now < c {
                heap.push((now, Reverse(key)));
            }
            continue;
        }
        let touched: Vec<usize> = rows_of.get(&key).map(|s| s.iter().copied().collect()).unwrap_or_default();
        let found: Vec<(usize, Vec<(usize, usize)>)> =
            touched.iter().map(|&r| (r, matches(&rows[r], &key))).filter(|(_, m)| !m.is_empty()).collect();
        let real: usize = found.iter().map(|(_, m)| m.len()).sum();
        if real < 2 {
            blocked.insert(key);
            continue;
        }

        let (a_src, b_src, d, rel) = key;
        let (lo_shift, hi_shift) = if d >= 0 { (0u32, d as u32) } else { ((-d) as u32, 0u32) };
        // the term with the larger shift leads; on a tie the larger source does
        let (lead, trail) = if d >= 0 {
            (Operand { src: b_src, shift: hi_shift }, Operand { src: a_src, shift: lo_shift })
        } else {
            (Operand { src: a_src, shift: lo_shift }, Operand { src: b_src, shift: hi_shift })
        };
        let id = b.push(AdderNode::AddSub { lhs: lead, rhs: trail, subtract: rel });

        let mut changed: BTreeSet<Key> = BTreeSet::new();
        for (r, pairs) in found {
            let row = &rows[r];
            let mut remove = BTreeSet::new();
            let mut added = Vec::new();
            for (i, j) in pairs {
                let (ti, tj) = (row[i], row[j]);
                // tj is the b side: (src, shift) order puts a first
                let (ta, tb) = if (ti.src, ti.shift) <= (tj.src, tj.shift) { (ti, tj) } else { (tj, ti) };
                let lead_term = if d >= 0 { tb } else { ta };
                let base = ta.shift.min(tb.shift);
                added.push(Term { src: id, shift: base, neg: lead_term.neg });
                remove.insert(i);
                remove.insert(j);
            }
            let mut new_row: Vec<Term> =
                row.iter().enumerate().filter(|(i, _)| !remove.contains(i)).map(|(_, t)| *t).collect();
            new_row.extend(added);
            normalize(&mut new_row);

            for (k, d) in pair_delta(&rows[r], &new_row) {
                let in_row = row_keys[r].entry(k).or_insert(0);
                *in_row = (*in_row as i64 + d) as u32;
                let total = count.entry(k).or_insert(0);
                *total = (*total as i64 + d) as u32;
                if *in_row == 0 {
                    row_keys[r].remove(&k);
                    if let Some(s) = rows_of.get_mut(&k) {
                        s.remove(&r);
                    }
                } else {
                    rows_of.entry(k).or_default().insert(r);
                }
                if d > 0 {
                    changed.insert(k);
                }
            }
            rows[r] = new_row;
        }
        for k in changed {
            let c = count[&k];
            if c >= 2 && !blocked.contains(&k) {
                heap.push((c, Reverse(k)));
            }
        }
    }
}

impl AdderGraph {
    fn assemble(
        nodes: Vec<AdderNode>,
        coeffs: Vec<Vec<i128>>,
        n_inputs: usize,
        n_outputs: usize,
        input_type: FixedPointType,
        weight_exp: i32,
    ) -> AdderGraph {
        let (lo, hi) = (input_type.min_payload(), input_type.max_payload());
        let exp = input_type.lsb_exp() + weight_exp;
        let mut intervals = Vec::with_capacity(nodes.len());
        let mut widths = Vec::with_capacity(nodes.len());
        for c in &coeffs {
            let mut a = 0i128;
            let mut z = 0i128;
            for &k in c {
                let (p, q) = if k >= 0 { (k * lo, k * hi) } else { (k * hi, k * lo) };
                a = a.checked_add(p).expect("interval overflow");
                z = z.checked_add(q).expect("interval overflow");
            }
            let iv = Interval::new(a, z, exp);
            widths.push(min_type_for(&iv, exp).width());
            intervals.push(iv);
        }
        AdderGraph { nodes, n_inputs, n_outputs, input_type, weight_exp, coeffs, intervals, widths }
    }

    pub fn nodes(&self) -> &[AdderNode] {
        &self.nodes
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn input_type(&self) -> FixedPointType {
        self.input_type
    }

    pub fn weight_exp(&self) -> i32 {
        self.weight_exp
    }

    /// Exact value interval of a node over all inputs of `input_type`.
    pub fn interval(&self, id: NodeId) -> &Interval {
        &self.intervals[id]
    }

    pub fn width(&self, id: NodeId) -> u32 {
        self.widths[id]
    }

    /// The linear form a node computes, as input coefficients.
    pub fn coefficients(&self, id: NodeId) -> &[i128] {
        &self.coeffs[id]
    }

    /// Output node ids, ordered by row.
    pub fn outputs(&self) -> Vec<NodeId> {
        let mut out: Vec<(usize, NodeId)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n {
                AdderNode::Output { row, .. } => Some((*row, i)),
                _ => None,
            })
            .collect();
        out.sort();
        out.into_iter().map(|(_, i)| i).collect()
    }

    pub fn eval_payloads(&self, x: &[i128]) -> Vec<i128> {
        assert_eq!(x.len(), self.n_inputs);
        let mut v = vec![0i128; self.nodes.len()];
        let mut y = vec![0i128; self.n_outputs];
        let sh = |val: i128, k: u32| -> i128 {
            let r = val.checked_shl(k).expect("shift overflow");
            assert_eq!(r >> k, val, "shift overflow");
            r
        };
        for (i, node) in self.nodes.iter().enumerate() {
            v[i] = match node {
                AdderNode::Input { index } => x[*index],
                AdderNode::Shift { src, shift } => sh(v[*src], *shift),
                AdderNode::AddSub { lhs, rhs, subtract } => {
                    let l = sh(v[lhs.src], lhs.shift);
                    let r = sh(v[rhs.src], rhs.shift);
                    if *subtract {
                        l.checked_sub(r).expect("adder overflow")
                    } else {
                        l.checked_add(r).expect("adder overflow")
                    }
                }
                AdderNode::Output { row, src, negate } => {
                    let s = src.map_or(0, |s| v[s]);
                    let s = if *negate { -s } else { s };
                    y[*row] = s;
                    s
                }
            };
        }
        y
    }

    pub fn cost(&self) -> AdderCost {
        let mut adders = 0;
        let mut weighted = 0u64;
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n, AdderNode::AddSub { .. }) {
                adders += 1;
                weighted += self.widths[i] as u64;
            }
        }
        AdderCost { adders, weighted }
    }
}

/// Evaluates the graph on fixed-point inputs; outputs are exact.
pub fn eval_adder_graph(g: &AdderGraph, x: &[FixedValue]) -> Result<Vec<FixedValue>, CmvmError> {
    if x.len() != g.n_inputs {
        return Err(CmvmError::ArityMismatch { expected: g.n_inputs, got: x.len() });
    }
    let e = x.iter().map(|v| v.ty().lsb_exp()).min().unwrap_or(g.input_type.lsb_exp());
    let payloads: Vec<i128> = x
        .iter()
        .map(|v| {
            let k = (v.ty().lsb_exp() - e) as u32;
            v.payload().checked_shl(k).expect("alignment overflow")
        })
        .collect();
    let exp = e + g.weight_exp;
    let y = g.eval_payloads(&payloads);
    let outs = g.outputs();
    Ok(y
        .into_iter()
        .zip(outs)
        .map(|(p, id)| {
            let iv = &g.intervals[id];
            let t = if iv.exp() == exp && iv.lo() <= p && p <= iv.hi() {
                min_type_for(iv, exp)
            } else {
                min_type_for(&Interval::point(p, exp), exp)
            };
            FixedValue::new(p, t).expect("payload fits its exact type")
        })
        .collect())
}

pub fn adder_cost(g: &AdderGraph) -> AdderCost {
    g.cost()
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.shift == 0 {
            write!(f, "n{}", self.src)
        } else {
            write!(f, "shl(n{}, {})", self.src, self.shift)
        }
    }
}

impl fmt::Display for AdderGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# inputs={} outputs={} input={} weight_exp={}",
            self.n_inputs, self.n_outputs, self.input_type, self.weight_exp
        )?;
        for (i, n) in self.nodes.iter().enumerate() {
            match n {
                AdderNode::Input { index } => writeln!(f, "n{i} = input {index}")?,
                AdderNode::Shift { src, shift } => writeln!(f, "n{i} = shl(n{src}, {shift})")?,
                AdderNode::AddSub { lhs, rhs, subtract } => {
                    writeln!(f, "n{i} = {} {lhs}, {rhs}", if *subtract { "sub" } else { "add" })?
                }
                AdderNode::Output { row, src, negate } => match src {
                    None => writeln!(f, "n{i} = out {row}, 0")?,
                    Some(s) => writeln!(f, "n{i} = out {row}, {}n{s}", if *negate { "-" } else { "" })?,
                },
            }
        }
        Ok(())
    }
}

fn parse_node_ref(s: &str) -> Option<NodeId> {
    s.trim().strip_prefix('n')?.parse().ok()
}

fn parse_operand(s: &str) -> Option<Operand> {
    let s = s.trim();
    if let Some(body) = s.strip_prefix("shl(").and_then(|r| r.strip_suffix(')')) {
        let (src, k) = body.split_once(',')?;
        return Some(Operand { src: parse_node_ref(src)?, shift: k.trim().parse().ok()? });
    }
    Some(Operand { src: parse_node_ref(s)?, shift: 0 })
}

/// Splits `a, b` at the top-level comma.
fn split_operands(s: &str) -> Option<(&str, &str)> {
    let mut depth = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => return Some((&s[..i], &s[i + 1..])),
            _ => {}
        }
    }
    None
}

impl FromStr for AdderGraph {
    type Err = CmvmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |line: &str| CmvmError::BadNetlist(line.to_string());
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("<empty>"))?;
        let mut fields = BTreeMap::new();
        for part in header.trim_start_matches('#').split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| bad(header))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(header));
        let n_inputs: usize = get("inputs")?.parse().map_err(|_| bad(header))?;
        let n_outputs: usize = get("outputs")?.parse().map_err(|_| bad(header))?;
        let input_type: FixedPointType = get("input")?.parse().map_err(|_| bad(header))?;
        let weight_exp: i32 = get("weight_exp")?.parse().map_err(|_| bad(header))?;

        let mut b = Builder { nodes: Vec::new(), coeffs: Vec::new(), n_inputs, input_type };
        for line in lines {
            let (lhs, rhs) = line.split_once('=').ok_or_else(|| bad(line))?;
            let id = parse_node_ref(lhs).ok_or_else(|| bad(line))?;
            if id != b.nodes.len() {
                return Err(bad(line));
            }
            let rhs = rhs.trim();
            let check = |r: NodeId| if r < id { Ok(r) } else { Err(bad(line)) };
            let node = if let Some(rest) = rhs.strip_prefix("input ") {
                let index: usize = rest.trim().parse().map_err(|_| bad(line))?;
                if index >= n_inputs {
                    return Err(bad(line));
                }
                AdderNode::Input { index }
            } else if let Some(rest) = rhs.strip_prefix("out ") {
                let (row, src) = rest.split_once(',').ok_or_else(|| bad(line))?;
                let row: usize = row.trim().parse().map_err(|_| bad(line))?;
                let src = src.trim();
                if src == "0" {
                    AdderNode::Output { row, src: None, negate: false }
                } else {
                    let (negate, r) = match src.strip_prefix('-') {
                        Some(r) => (true, r),
                        None => (false, src),
                    };
                    AdderNode::Output { row, src: Some(check(parse_node_ref(r).ok_or_else(|| bad(line))?)?), negate }
                }
            } else if rhs.starts_with("add ") || rhs.starts_with("sub ") {
                let subtract = rhs.starts_with("sub");
                let (l, r) = split_operands(&rhs[4..]).ok_or_else(|| bad(line))?;
                let lhs = parse_operand(l).ok_or_else(|| bad(line))?;
                let rhs = parse_operand(r).ok_or_else(|| bad(line))?;
                check(lhs.src)?;
                check(rhs.src)?;
                AdderNode::AddSub { lhs, rhs, subtract }
            } else if rhs.starts_with("shl(") {
                let op = parse_operand(rhs).ok_or_else(|| bad(line))?;
                AdderNode::Shift { src: check(op.src)?, shift: op.shift }
            } else {
                return Err(bad(line));
            };
            b.push(node);
        }
        Ok(b.finish(n_outputs, weight_exp))
    }
}

/// Bits needed to hold every node of the graph (largest node width).
pub fn max_width(g: &AdderGraph) -> u32 {
    g.widths.iter().copied().max().unwrap_or(0)
}
