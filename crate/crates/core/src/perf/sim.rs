use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use super::PerfError;

/// One pipeline stage. A stage with no input FIFOs is a source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub name: String,
    /// Cycles between consecutive firings.
    pub ii: usize,
    /// Cycles from a firing to its emission, counting the firing cycle.
    pub latency: usize,
    /// Firings per sample.
    pub firings: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Fifo {
    pub name: String,
    pub from: usize,
    pub to: usize,
    /// Items per sample.
    pub items: usize,
    pub depth: usize,
    /// Depth used for calibration runs.
    pub default_depth: usize,
    pub item_bits: u64,
}

/// Stages in topological order joined by FIFOs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Pipeline {
    pub stages: Vec<Stage>,
    pub fifos: Vec<Fifo>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StallCounts {
    /// Ready to fire but an input FIFO was short.
    pub starved: u64,
    /// An emission was due but an output FIFO was full.
    pub blocked: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FifoTrace {
    pub name: String,
    pub depth: usize,
    pub produced: u64,
    pub consumed: u64,
    pub max_occupancy: usize,
    /// Occupancy at the end of each cycle.
    pub occupancy: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DataflowTrace {
    pub n_samples: usize,
    pub makespan: u64,
    pub fifos: Vec<FifoTrace>,
    pub stalls: BTreeMap<String, StallCounts>,
}

impl DataflowTrace {
    pub fn fifo(&self, name: &str) -> Option<&FifoTrace> {
        self.fifos.iter().find(|f| f.name == name)
    }

    pub fn total_blocked(&self) -> u64 {
        self.stalls.values().map(|s| s.blocked).sum()
    }

    /// One row per cycle, one column per FIFO.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cycle");
        for f in &self.fifos {
            out.push(',');
            out.push_str(&f.name);
        }
        out.push('\n');
        let cycles = self.fifos.iter().map(|f| f.occupancy.len()).max().unwrap_or(0);
        for t in 0..cycles {
            out.push_str(&t.to_string());
            for f in &self.fifos {
                out.push(',');
                out.push_str(&f.occupancy.get(t).copied().unwrap_or(0).to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Items taken from a FIFO of `items` per sample at firing `f` of `firings`.
/// Inputs are drawn as early as possible.
fn take(items: usize, firings: usize, f: usize) -> usize {
    ((f + 1) * items).div_ceil(firings) - (f * items).div_ceil(firings)
}

/// Items emitted at firing `f`. Outputs appear as late as possible.
fn give(items: usize, firings: usize, f: usize) -> usize {
    (f + 1) * items / firings - f * items / firings
}

struct StageState {
    fired: usize,
    emitted: usize,
    next_ready: u64,
    pending: VecDeque<(u64, usize)>,
    cap: usize,
}

impl Pipeline {
    pub fn add_stage(&mut self, name: &str, ii: usize, latency: usize, firings: usize) -> usize {
        self.stages.push(Stage { name: name.to_string(), ii, latency, firings });
        self.stages.len() - 1
    }

    pub fn connect(&mut self, from: usize, to: usize, items: usize, depth: usize) -> usize {
        let name = format!("{}->{}", self.stages[from].name, self.stages[to].name);
        self.fifos.push(Fifo { name, from, to, items, depth, default_depth: depth, item_bits: 0 });
        self.fifos.len() - 1
    }

    pub fn depths(&self) -> BTreeMap<String, usize> {
        self.fifos.iter().map(|f| (f.name.clone(), f.depth)).collect()
    }

    /// Overrides depths by FIFO name; unknown names are ignored.
    pub fn with_depths(mut self, depths: &BTreeMap<String, usize>) -> Self {
        for f in &mut self.fifos {
            if let Some(d) = depths.get(&f.name) {
                f.depth = *d;
            }
        }
        self
    }

    fn check(&self) -> Result<(), PerfError> {
        for s in &self.stages {
            if s.ii == 0 || s.latency == 0 || s.firings == 0 {
                return Err(PerfError::BadPipeline(format!("stage '{}' needs ii, latency and firings >= 1", s.name)));
            }
        }
        for f in &self.fifos {
            if f.depth == 0 {
                return Err(PerfError::BadPipeline(format!("FIFO '{}' has depth 0", f.name)));
            }
            if f.from >= f.to || f.to >= self.stages.len() {
                return Err(PerfError::BadPipeline(format!("FIFO '{}' does not point downstream", f.name)));
            }
        }
        Ok(())
    }

    /// Discrete-cycle simulation of `n_samples` samples.
    ///
    /// Each cycle, stages fire downstream first (so a slot freed this cycle
    /// can be refilled in the same cycle), then due emissions are pushed.
    /// Items pushed in cycle `t` are visible from cycle `t + 1`. The
    /// makespan is the cycle of the last emission.
    pub fn simulate(&self, n_samples: usize) -> Result<DataflowTrace, PerfError> {
        self.check()?;
        let ns = self.stages.len();
        let mut ins: Vec<Vec<usize>> = vec![Vec::new(); ns];
        let mut outs: Vec<Vec<usize>> = vec![Vec::new(); ns];
        for (i, f) in self.fifos.iter().enumerate() {
            ins[f.to].push(i);
            outs[f.from].push(i);
        }
        let mut st: Vec<StageState> = self
            .stages
            .iter()
            .map(|s| StageState { fired: 0, emitted: 0, next_ready: 0, pending: VecDeque::new(), cap: s.latency.div_ceil(s.ii) })
            .collect();
        let mut count = vec![0usize; self.fifos.len()];
        let mut produced = vec![0u64; self.fifos.len()];
        let mut consumed = vec![0u64; self.fifos.len()];
        let mut occupancy: Vec<Vec<usize>> = vec![Vec::new(); self.fifos.len()];
        let mut stalls = vec![StallCounts::default(); ns];
        let total: Vec<usize> = self.stages.iter().map(|s| s.firings * n_samples).collect();
        let mut makespan = 0u64;
        let mut t = 0u64;
        while (0..ns).any(|i| st[i].emitted < total[i]) {
            let mut progress = false;
            for i in (0..ns).rev() {
                let s = &self.stages[i];
                let state = &mut st[i];
                if state.fired >= total[i] || t < state.next_ready || state.pending.len() >= state.cap {
                    continue;
                }
                let f = state.fired % s.firings;
                let ready = ins[i].iter().all(|&k| count[k] >= take(self.fifos[k].items, s.firings, f));
                if !ready {
                    stalls[i].starved += 1;
                    continue;
                }
                for &k in &ins[i] {
                    let n = take(self.fifos[k].items, s.firings, f);
                    count[k] -= n;
                    consumed[k] += n as u64;
                }
                state.pending.push_back((t + s.latency as u64 - 1, f));
                state.fired += 1;
                state.next_ready = t + s.ii as u64;
                progress = true;
            }
            for i in 0..ns {
                let s = &self.stages[i];
                while let Some(&(due, f)) = st[i].pending.front() {
                    if due > t {
                        break;
                    }
                    let room = outs[i].iter().all(|&k| count[k] + give(self.fifos[k].items, s.firings, f) <= self.fifos[k].depth);
                    if !room {
                        stalls[i].blocked += 1;
                        break;
                    }
                    for &k in &outs[i] {
                        let n = give(self.fifos[k].items, s.firings, f);
                        count[k] += n;
                        produced[k] += n as u64;
                    }
                    st[i].pending.pop_front();
                    st[i].emitted += 1;
                    makespan = t;
                    progress = true;
                }
            }
            for (k, c) in count.iter().enumerate() {
                occupancy[k].push(*c);
            }
            if !progress {
                let waiting = st.iter().enumerate().any(|(i, s)| {
                    s.pending.front().is_some_and(|&(due, _)| due > t) || (s.fired < total[i] && s.next_ready > t)
                });
                if !waiting {
                    return Err(PerfError::DeadlockDetected(t));
                }
            }
            t += 1;
        }
        let fifos = self
            .fifos
            .iter()
            .enumerate()
            .map(|(k, f)| FifoTrace {
                name: f.name.clone(),
                depth: f.depth,
                produced: produced[k],
                consumed: consumed[k],
                max_occupancy: occupancy[k].iter().copied().max().unwrap_or(0),
                occupancy: std::mem::take(&mut occupancy[k]),
            })
            .collect();
        let stalls = self.stages.iter().zip(stalls).map(|(s, c)| (s.name.clone(), c)).collect();
        Ok(DataflowTrace { n_samples, makespan, fifos, stalls })
    }

    /// Calibrates under the default depths and returns max occupancy + 1
    /// per FIFO, never above the default.
    pub fn optimize_depths(&self, n_samples: usize) -> Result<BTreeMap<String, usize>, PerfError> {
        let mut calib = self.clone();
        for f in &mut calib.fifos {
            f.depth = f.default_depth;
        }
        let trace = calib.simulate(n_samples)?;
        Ok(calib
            .fifos
            .iter()
            .zip(&trace.fifos)
            .map(|(f, tr)| (f.name.clone(), (tr.max_occupancy + 1).min(f.default_depth)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(producer_items: usize, consumer_ii: usize, depth: usize) -> Pipeline {
        let mut p = Pipeline::default();
        let a = p.add_stage("a", 1, 1, producer_items);
        let b = p.add_stage("b", consumer_ii, 1, producer_items);
        p.connect(a, b, producer_items, depth);
        p
    }

    /// Event-by-event model of one producer feeding one consumer, written
    /// independently of the stage machinery: the producer pushes at the end
    /// of cycles 0..n, the consumer pops visible items every `ii` cycles.
    fn two_stage_oracle(n: usize, ii: usize) -> usize {
        let mut occ = 0usize;
        let mut peak = 0;
        let mut next_pop = 0usize;
        let mut popped = 0;
        for t in 0.. {
            if popped == n {
                break;
            }
            if t >= next_pop && occ > 0 {
                occ -= 1;
                popped += 1;
                next_pop = t + ii;
            }
            if t < n {
                occ += 1;
            }
            peak = peak.max(occ);
        }
        peak
    }

    #[test]
    fn bursty_producer_peaks_at_four() {
        let tr = pair(8, 2, 64).simulate(1).unwrap();
        assert_eq!(tr.fifos[0].max_occupancy, 4);
        assert_eq!(two_stage_oracle(8, 2), 4);
        assert_eq!(pair(8, 2, 64).optimize_depths(1).unwrap()["a->b"], 5);
    }

    #[test]
    fn oracle_agrees_on_rates() {
        for n in 1..12 {
            for ii in 1..5 {
                assert_eq!(pair(n, ii, 64).simulate(1).unwrap().fifos[0].max_occupancy, two_stage_oracle(n, ii), "n={n} ii={ii}");
            }
        }
    }

    #[test]
    fn matched_rates_need_depth_two() {
        let mut p = Pipeline::default();
        let a = p.add_stage("a", 1, 1, 6);
        let b = p.add_stage("b", 1, 3, 6);
        let c = p.add_stage("c", 1, 2, 6);
        p.connect(a, b, 6, 6);
        p.connect(b, c, 6, 6);
        let d = p.optimize_depths(1).unwrap();
        assert!(d.values().all(|&v| v == 2), "{d:?}");
        let tr = p.with_depths(&d).simulate(1).unwrap();
        assert_eq!(tr.total_blocked(), 0);
        assert!(tr.stalls.values().all(|s| s.starved == 0 || s.blocked == 0));
    }

    #[test]
    fn shallow_fifo_stalls_producer() {
        let deep = pair(8, 2, 8).simulate(1).unwrap();
        let shallow = pair(8, 2, 1).simulate(1).unwrap();
        assert_eq!(deep.stalls["a"].blocked, 0);
        assert!(shallow.stalls["a"].blocked > 0);
        assert!(shallow.fifos[0].occupancy.iter().all(|&o| o <= 1));
        assert_eq!(deep.makespan, shallow.makespan);
    }

    #[test]
    fn burst_larger_than_depth_deadlocks() {
        let mut p = Pipeline::default();
        let a = p.add_stage("a", 1, 1, 1);
        let b = p.add_stage("b", 1, 1, 4);
        p.connect(a, b, 4, 2);
        assert!(matches!(p.simulate(1), Err(PerfError::DeadlockDetected(_))));
    }

    #[test]
    fn rate_conversion_conserves_items() {
        let mut p = Pipeline::default();
        let a = p.add_stage("a", 1, 1, 9);
        let b = p.add_stage("b", 1, 2, 9);
        let c = p.add_stage("c", 2, 1, 4);
        p.connect(a, b, 9, 9);
        p.connect(b, c, 4, 4);
        let tr = p.simulate(3).unwrap();
        for f in &tr.fifos {
            assert_eq!(f.produced, f.consumed);
        }
        assert_eq!(tr.fifos[1].produced, 12);
    }

    #[test]
    fn schedules_sum_to_items() {
        for items in 1..10 {
            for firings in 1..10 {
                let t: usize = (0..firings).map(|f| take(items, firings, f)).sum();
                let g: usize = (0..firings).map(|f| give(items, firings, f)).sum();
                assert_eq!((t, g), (items, items));
                for f in 0..firings {
                    let took: usize = (0..=f).map(|k| take(items, firings, k)).sum();
                    let gave: usize = (0..=f).map(|k| give(items, firings, k)).sum();
                    assert!(took >= gave);
                }
            }
        }
    }

    #[test]
    fn csv_has_a_column_per_fifo() {
        let csv = pair(3, 1, 4).simulate(1).unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("cycle,a->b"));
        assert_eq!(lines.next(), Some("0,1"));
    }
}
