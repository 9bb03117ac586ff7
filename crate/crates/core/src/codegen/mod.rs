//! Firmware project emission: a machine-readable plan plus per-layer source
//! text rendered from checked-in templates.

mod layer;
mod template;
pub mod testbench;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ir::tensor::numel;
use crate::ir::{IoType, ModelGraph, Op, QTensor};
use crate::kernels::{value_type, KernelError, Program};
use crate::perf::{self, PerfError};

pub use layer::{c_type, ident, netlist};
pub use template::{render_template, render_text, template_key, template_names, template_text};

pub const PLAN_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("unresolved precision at '{0}'")]
    UnresolvedPrecision(String),
    #[error("op {op} at '{node}' is not supported by the backend")]
    UnsupportedOpForBackend { node: String, op: String },
    #[error("no template for {op} with strategy {strategy}")]
    MissingTemplate { op: String, strategy: String },
    #[error("unbound placeholder '{{{{{0}}}}}'")]
    UnboundPlaceholder(String),
    #[error(transparent)]
    Kernel(KernelError),
    #[error(transparent)]
    Perf(PerfError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad sample file: {0}")]
    BadSamples(String),
    #[error("mismatch in sample {sample}, output '{output}', index {index}: expected {expected}, got {got}")]
    Mismatch { sample: usize, output: String, index: usize, expected: String, got: String },
}

impl From<KernelError> for CodegenError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::UnresolvedPrecision(n) => CodegenError::UnresolvedPrecision(n),
            KernelError::Unsupported { node, op } => CodegenError::UnsupportedOpForBackend { node, op },
            e => CodegenError::Kernel(e),
        }
    }
}

impl From<PerfError> for CodegenError {
    fn from(e: PerfError) -> Self {
        match e {
            PerfError::Kernel(k) => k.into(),
            e => CodegenError::Perf(e),
        }
    }
}

/// A hardware decision and the anchor comment marking where it is emitted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directive {
    pub kind: String,
    pub value: String,
    pub anchor: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TablePlan {
    pub name: String,
    pub entries: usize,
    pub width: u32,
    pub brams: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub op: String,
    pub inputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reuse_factor: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallelization_factor: Option<usize>,
    pub ii: usize,
    pub precisions: BTreeMap<String, String>,
    pub tables: Vec<TablePlan>,
    /// Outgoing FIFOs (io_stream only).
    pub fifo_depths: BTreeMap<String, usize>,
    pub directives: Vec<Directive>,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirmwarePlan {
    pub schema: u32,
    pub model: String,
    pub io_type: String,
    pub clock_period_ns: f64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub layers: Vec<LayerPlan>,
    pub fifos: BTreeMap<String, usize>,
    /// Top-level directives (dataflow region, stream depths).
    pub directives: Vec<Directive>,
    pub files: Vec<FileEntry>,
}

impl FirmwarePlan {
    pub fn layer(&self, name: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn all_directives(&self) -> impl Iterator<Item = &Directive> {
        self.layers.iter().flat_map(|l| &l.directives).chain(&self.directives)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes") + "\n"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmitOptions {
    /// Testbench samples.
    pub samples: usize,
    pub seed: u64,
}

impl Default for EmitOptions {
    fn default() -> Self {
        EmitOptions { samples: 8, seed: 0 }
    }
}

/// An emitted project held in memory, keyed by relative path.
#[derive(Clone, Debug)]
pub struct Project {
    pub plan: FirmwarePlan,
    pub files: BTreeMap<String, String>,
}

impl Project {
    pub fn write(&self, out_dir: &Path) -> Result<(), CodegenError> {
        for (rel, text) in &self.files {
            let path = out_dir.join(rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|source| CodegenError::Io { path: dir.to_path_buf(), source })?;
            }
            std::fs::write(&path, text).map_err(|source| CodegenError::Io { path, source })?;
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn model_name(g: &ModelGraph) -> String {
    let s = ident(&g.metadata.source);
    if s.is_empty() || s.starts_with(|c: char| c.is_ascii_digit()) {
        format!("model{s}")
    } else {
        s
    }
}

/// Random input samples on each input's grid.
pub fn random_inputs(g: &ModelGraph, samples: usize, seed: u64) -> Result<Vec<BTreeMap<String, QTensor>>, CodegenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<&str> = g.inputs();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut m = BTreeMap::new();
        for name in &inputs {
            let t = value_type(g, name).ok_or_else(|| CodegenError::UnresolvedPrecision(name.to_string()))?;
            let shape = g.shape(name).to_vec();
            let p: Vec<i128> = (0..numel(&shape)).map(|_| rng.gen_range(t.min_payload()..=t.max_payload())).collect();
            m.insert(name.to_string(), QTensor::fixed(shape, p, t));
        }
        out.push(m);
    }
    Ok(out)
}

fn var(g: &ModelGraph, name: &str) -> String {
    match g.node(name).map(|n| &n.op) {
        Some(Op::Input { .. }) | Some(Op::Constant) => ident(name),
        _ => format!("{}_out", ident(name)),
    }
}

fn top_ports(g: &ModelGraph) -> Result<String, CodegenError> {
    let mut ports = Vec::new();
    for i in g.inputs() {
        ports.push(format!("const {}_t {}[{}]", ident(i), ident(i), numel(g.shape(i))));
    }
    for o in g.outputs() {
        let t = value_type(g, o).ok_or_else(|| CodegenError::UnresolvedPrecision(o.clone()))?;
        ports.push(format!("{} {}_port[{}]", c_type(t), ident(o), numel(g.shape(o))));
    }
    Ok(ports.join(", "))
}

fn render_top(g: &ModelGraph, fifos: &[perf::Fifo], stages: &[perf::Stage], directives: &mut Vec<Directive>) -> Result<String, CodegenError> {
    let path = "src/top.tpl.out";
    let mut b: BTreeMap<&str, String> = BTreeMap::new();
    let model = model_name(g);
    b.insert("model", model);
    b.insert("ports", top_ports(g)?);
    let compute: Vec<&String> = g.topo_order().iter().filter(|n| !matches!(g.node(n).expect("node").op, Op::Input { .. } | Op::Constant)).collect();
    b.insert("n_layers", compute.len().to_string());
    let mut body = Vec::new();
    let stream = g.config.io_type == IoType::IoStream;
    if stream {
        let mut streams = Vec::new();
        for f in fifos {
            let src = &stages[f.from].name;
            let t = value_type(g, src).ok_or_else(|| CodegenError::UnresolvedPrecision(src.clone()))?;
            let v = format!("fifo_{}_{}", ident(src), ident(&stages[f.to].name));
            let anchor = format!("{}:stream", f.name);
            streams.push(format!("    hls::stream<{}> {v};", c_type(t)));
            streams.push(format!("    // @{anchor}"));
            streams.push(format!("    #pragma HLS STREAM variable={v} depth={}", f.depth));
            directives.push(Directive { kind: "stream".into(), value: format!("{v} depth={}", f.depth), anchor, file: path.into() });
        }
        b.insert("streams", streams.join("\n"));
        b.insert("n_fifos", fifos.len().to_string());
    }
    if stream {
        for i in g.inputs() {
            let outs: Vec<String> = g.consumers(i).iter().map(|c| format!("fifo_{}_{}", ident(i), ident(c))).collect();
            body.push(format!("    feed({}, {});", ident(i), outs.join(", ")));
        }
    }
    for name in compute {
        let node = g.node(name).expect("node");
        let mut args: Vec<String> = node.inputs.iter().map(|i| var(g, i)).collect();
        if stream {
            args = node
                .inputs
                .iter()
                .map(|i| match g.node(i).map(|n| &n.op) {
                    Some(Op::Constant) => ident(i),
                    _ => format!("fifo_{}_{}", ident(i), ident(name)),
                })
                .collect();
            let outs: Vec<String> = g.consumers(name).iter().filter(|c| !matches!(g.node(c).expect("node").op, Op::Constant)).map(|c| format!("fifo_{}_{}", ident(name), ident(c))).collect();
            let anchor = format!("{name}:dataflow");
            body.push(format!("    // @{anchor}"));
            directives.push(Directive { kind: "dataflow".into(), value: "member".into(), anchor, file: path.into() });
            let mut all = args;
            all.extend(outs);
            if g.outputs().contains(name) {
                all.push(format!("{}_port", ident(name)));
            }
            body.push(format!("    {}({});", ident(name), all.join(", ")));
        } else {
            let t = value_type(g, name).ok_or_else(|| CodegenError::UnresolvedPrecision(name.clone()))?;
            body.push(format!("    {} {}[{}];", c_type(t), var(g, name), numel(g.shape(name))));
            args.push(var(g, name));
            body.push(format!("    {}({});", ident(name), args.join(", ")));
        }
    }
    if !stream {
        for o in g.outputs() {
            body.push(format!("    copy({}, {}_port, {});", var(g, o), ident(o), numel(g.shape(o))));
        }
    }
    b.insert("body", body.join("\n"));
    let key = if stream { "top_io_stream" } else { "top_io_parallel" };
    render_text(template_text(key).expect("top template"), &b)
}

fn render_tcl(g: &ModelGraph, sources: &[String]) -> Result<String, CodegenError> {
    let mut b: BTreeMap<&str, String> = BTreeMap::new();
    b.insert("model", model_name(g));
    b.insert("sources", sources.iter().map(|s| format!("add_files {s}")).collect::<Vec<_>>().join("\n"));
    b.insert("clock_period_ns", format!("{}", g.config.clock_period_ns));
    render_text(template_text("build_tcl").expect("tcl template"), &b)
}

/// Builds every project file in memory. Deterministic for a given graph,
/// config and options.
pub fn build_project(g: &ModelGraph, opts: EmitOptions) -> Result<Project, CodegenError> {
    let program = Program::new(g)?;
    let names: Vec<String> = g.topo_order().to_vec();
    let rendered: Vec<layer::Rendered> = names
        .par_iter()
        .map(|n| layer::render_layer(g, &program, n, &format!("src/{}.tpl.out", ident(n))))
        .collect::<Result<_, _>>()?;

    let (fifos, stages) = if g.config.io_type == IoType::IoStream {
        let p = perf::pipeline(g)?;
        (p.fifos, p.stages)
    } else {
        (Vec::new(), Vec::new())
    };
    let mut files = BTreeMap::new();
    let mut layers = Vec::new();
    let mut sources = Vec::new();
    for r in rendered {
        let mut plan = r.plan;
        for f in fifos.iter().filter(|f| stages[f.from].name == plan.name) {
            plan.fifo_depths.insert(f.name.clone(), f.depth);
        }
        sources.push(plan.source.clone());
        files.insert(plan.source.clone(), r.source);
        layers.push(plan);
    }
    let mut top_directives = Vec::new();
    files.insert("src/top.tpl.out".to_string(), render_top(g, &fifos, &stages, &mut top_directives)?);
    sources.push("src/top.tpl.out".to_string());
    files.insert("scripts/build.tcl".to_string(), render_tcl(g, &sources)?);

    let inputs = random_inputs(g, opts.samples, opts.seed)?;
    let outputs = program.run_batch(&inputs)?;
    let outputs: Vec<BTreeMap<String, QTensor>> =
        outputs.into_iter().map(|m| m.into_iter().filter(|(k, _)| g.outputs().contains(k)).collect()).collect();
    files.insert("tb/inputs.json".to_string(), testbench::samples_to_json(&inputs));
    files.insert("tb/expected.json".to_string(), testbench::samples_to_json(&outputs));

    let manifest = files.iter().map(|(p, t)| FileEntry { path: p.clone(), bytes: t.len(), sha256: sha256_hex(t.as_bytes()) }).collect();
    let plan = FirmwarePlan {
        schema: PLAN_SCHEMA,
        model: model_name(g),
        io_type: g.config.io_type.to_string(),
        clock_period_ns: g.config.clock_period_ns,
        inputs: g.inputs().into_iter().map(String::from).collect(),
        outputs: g.outputs().to_vec(),
        layers,
        fifos: fifos.iter().map(|f| (f.name.clone(), f.depth)).collect(),
        directives: top_directives,
        files: manifest,
    };
    files.insert("plan.json".to_string(), plan.to_json());
    Ok(Project { plan, files })
}

/// Writes `plan.json`, `src/`, `tb/` and `scripts/` under `out_dir`.
pub fn emit_project(g: &ModelGraph, out_dir: &Path, opts: EmitOptions) -> Result<FirmwarePlan, CodegenError> {
    let project = build_project(g, opts)?;
    project.write(out_dir)?;
    Ok(project.plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_graph, HwConfig, LayerNode, Precision, Role, Strategy, Tensor};

    fn p(s: &str) -> Precision {
        s.parse().unwrap()
    }

    fn one_dense(strategy: Strategy, rf: usize, io: IoType) -> ModelGraph {
        let mut cfg = HwConfig { io_type: io, ..HwConfig::default() };
        cfg.defaults.strategy = strategy;
        cfg.defaults.reuse_factor = rf;
        let nodes = vec![
            LayerNode::new("input0", Op::Input { shape: vec![4] }, &[]).with_precision(Role::Result, p("fixed<6,3,s>")),
            LayerNode::new("dense0", Op::Dense { units: 4 }, &["input0"])
                .with_weight("kernel", Tensor::from_ints(vec![4, 4], &[3, -1, 0, 5, 7, 2, -6, 1, 0, 0, 4, -3, 1, 1, 1, -7]))
                .with_weight("bias", Tensor::from_ints(vec![4], &[1, 0, -1, 2]))
                .with_precision(Role::Weight, p("fixed<4,4,s>"))
                .with_precision(Role::Bias, p("fixed<3,3,s>"))
                .with_precision(Role::Accum, p("fixed<16,10,s>"))
                .with_precision(Role::Result, p("fixed<12,8,s>")),
        ];
        build_graph(nodes, vec![], cfg).unwrap()
    }

    #[test]
    fn one_dense_project_layout() {
        let pr = build_project(&one_dense(Strategy::Latency, 1, IoType::IoParallel), EmitOptions::default()).unwrap();
        let paths: Vec<&str> = pr.files.keys().map(String::as_str).collect();
        assert_eq!(
            paths,
            ["plan.json", "scripts/build.tcl", "src/dense0.tpl.out", "src/input0.tpl.out", "src/top.tpl.out", "tb/expected.json", "tb/inputs.json"]
        );
        for f in &pr.plan.files {
            assert_eq!(f.sha256, sha256_hex(pr.files[&f.path].as_bytes()));
        }
        let again = build_project(&one_dense(Strategy::Latency, 1, IoType::IoParallel), EmitOptions::default()).unwrap();
        assert_eq!(pr.files, again.files);
    }

    #[test]
    fn resource_directives() {
        let pr = build_project(&one_dense(Strategy::Resource, 4, IoType::IoParallel), EmitOptions::default()).unwrap();
        let l = pr.plan.layer("dense0").unwrap();
        let kinds: Vec<(&str, &str)> = l.directives.iter().map(|d| (d.kind.as_str(), d.value.as_str())).collect();
        assert!(kinds.contains(&("pipeline", "II=4")));
        assert!(kinds.contains(&("array_partition", "block factor=4")));
        let src = &pr.files["src/dense0.tpl.out"];
        assert!(src.contains("#pragma HLS PIPELINE II=4"));
        assert!(src.contains("block factor=4"));
    }

    #[test]
    fn da_source_has_no_multiplication() {
        let pr = build_project(&one_dense(Strategy::Da, 1, IoType::IoParallel), EmitOptions::default()).unwrap();
        let src = &pr.files["src/dense0.tpl.out"];
        assert!(!src.contains('*'), "{src}");
        assert!(src.contains("<<") || src.contains(" + "));
    }

    #[test]
    fn anchors_cover_every_directive() {
        for io in [IoType::IoParallel, IoType::IoStream] {
            let pr = build_project(&one_dense(Strategy::Resource, 2, io), EmitOptions::default()).unwrap();
            let mut n = 0;
            for d in pr.plan.all_directives() {
                assert!(pr.files[&d.file].contains(&format!("// @{}", d.anchor)), "{d:?}");
                n += 1;
            }
            assert!(n >= 2);
        }
    }

    #[test]
    fn stream_top_declares_fifos() {
        let pr = build_project(&one_dense(Strategy::Latency, 1, IoType::IoStream), EmitOptions::default()).unwrap();
        let top = &pr.files["src/top.tpl.out"];
        assert!(top.contains("#pragma HLS DATAFLOW"));
        assert!(top.contains("hls::stream<ap_fixed<6,3,AP_TRN,AP_WRAP>> fifo_input0_dense0;"));
        assert_eq!(pr.plan.fifos["input0->dense0"], 4);
    }

    #[test]
    fn testbench_matches_emulation() {
        let g = one_dense(Strategy::Latency, 1, IoType::IoParallel);
        let pr = build_project(&g, EmitOptions { samples: 5, seed: 3 }).unwrap();
        let inputs = testbench::parse_samples(&g, &pr.files["tb/inputs.json"]).unwrap();
        assert_eq!(inputs.len(), 5);
        let got = crate::kernels::emulate(&g, &inputs).unwrap();
        testbench::compare(&pr.files["tb/expected.json"], &got).unwrap();
    }

    #[test]
    fn unresolved_precision_is_reported() {
        let g = one_dense(Strategy::Latency, 1, IoType::IoParallel);
        let mut nodes = g.nodes_vec();
        nodes[1].set_precision(Role::Accum, Precision::Auto);
        let g = g.rebuild(nodes, vec![]).unwrap();
        assert!(matches!(build_project(&g, EmitOptions::default()), Err(CodegenError::UnresolvedPrecision(ref n)) if n == "dense0"));
    }
}
