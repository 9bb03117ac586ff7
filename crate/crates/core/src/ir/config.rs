use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use super::graph::{ModelGraph, Precision, Role};
use super::IrError;
use crate::fxp::FixedPointType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IoType {
    #[default]
    IoParallel,
    IoStream,
}

impl fmt::Display for IoType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IoType::IoParallel => "io_parallel",
            IoType::IoStream => "io_stream",
        })
    }
}

impl FromStr for IoType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "io_parallel" => Ok(IoType::IoParallel),
            "io_stream" => Ok(IoType::IoStream),
            _ => Err(format!("unknown io type '{s}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Strategy {
    #[default]
    Latency,
    Resource,
    #[serde(rename = "DA")]
    Da,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Latency => "Latency",
            Strategy::Resource => "Resource",
            Strategy::Da => "DA",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "latency" => Ok(Strategy::Latency),
            "resource" => Ok(Strategy::Resource),
            "da" | "distributed_arithmetic" => Ok(Strategy::Da),
            _ => Err(format!("unknown strategy '{s}'")),
        }
    }
}

/// Fully resolved per-layer hardware settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub strategy: Strategy,
    pub reuse_factor: usize,
    pub parallelization_factor: usize,
    pub table_size: usize,
    /// Opaque cost for custom ops: (multipliers, latency cycles).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_cost: Option<(usize, usize)>,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Latency, reuse_factor: 1, parallelization_factor: 1, table_size: 2048, custom_cost: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HwConfig {
    pub io_type: IoType,
    pub clock_period_ns: f64,
    /// Type that `auto` falls back to when no exact type can be inferred.
    pub default_precision: FixedPointType,
    pub defaults: LayerConfig,
    #[serde(default)]
    pub layers: BTreeMap<String, LayerConfig>,
    #[serde(default)]
    pub fifo_depths: BTreeMap<String, usize>,
    #[serde(default)]
    pub split_after: Vec<String>,
    #[serde(default = "yes")]
    pub propagate_precision: bool,
}

fn yes() -> bool {
    true
}

impl Default for HwConfig {
    fn default() -> Self {
        Self {
            io_type: IoType::IoParallel,
            clock_period_ns: 5.0,
            default_precision: "fixed<16,6,s>".parse().expect("static type"),
            defaults: LayerConfig::default(),
            layers: BTreeMap::new(),
            fifo_depths: BTreeMap::new(),
            split_after: Vec::new(),
            propagate_precision: true,
        }
    }
}

impl HwConfig {
    pub fn layer(&self, name: &str) -> &LayerConfig {
        self.layers.get(name).unwrap_or(&self.defaults)
    }

    pub fn layer_mut(&mut self, name: &str) -> &mut LayerConfig {
        let d = self.defaults.clone();
        self.layers.entry(name.to_string()).or_insert(d)
    }
}

/// Partial settings at one level of the precedence chain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSettings {
    #[serde(default)]
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub reuse_factor: Option<usize>,
    #[serde(default)]
    pub parallelization_factor: Option<usize>,
    #[serde(default)]
    pub table_size: Option<usize>,
    #[serde(default)]
    pub precision: BTreeMap<Role, Precision>,
    #[serde(default)]
    pub custom_cost: Option<(usize, usize)>,
}

impl LayerSettings {
    fn apply(&self, cfg: &mut LayerConfig, precision: &mut BTreeMap<Role, Precision>) {
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        if let Some(r) = self.reuse_factor {
            cfg.reuse_factor = r;
        }
        if let Some(p) = self.parallelization_factor {
            cfg.parallelization_factor = p;
        }
        if let Some(t) = self.table_size {
            cfg.table_size = t;
        }
        if self.custom_cost.is_some() {
            cfg.custom_cost = self.custom_cost;
        }
        for (r, p) in &self.precision {
            precision.insert(*r, *p);
        }
    }
}

/// User-facing configuration document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    pub schema: u32,
    #[serde(default)]
    pub io_type: Option<IoType>,
    #[serde(default)]
    pub clock_period_ns: Option<f64>,
    #[serde(default)]
    pub default_precision: Option<FixedPointType>,
    #[serde(default)]
    pub model: LayerSettings,
    #[serde(default)]
    pub op_types: BTreeMap<String, LayerSettings>,
    #[serde(default)]
    pub layers: BTreeMap<String, LayerSettings>,
    #[serde(default)]
    pub fifo_depths: BTreeMap<String, usize>,
    #[serde(default)]
    pub split_after: Vec<String>,
    #[serde(default)]
    pub propagate_precision: Option<bool>,
}

impl UserConfig {
    pub fn new() -> Self {
        Self { schema: 1, ..Default::default() }
    }

    pub fn from_json(s: &str) -> Result<Self, IrError> {
        let c: UserConfig = serde_json::from_str(s).map_err(|e| IrError::InvalidConfig(e.to_string()))?;
        if c.schema != 1 {
            return Err(IrError::InvalidConfig(format!("unsupported config schema {}", c.schema)));
        }
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

const OP_TYPES: [&str; 18] = [
    "Input", "Dense", "Conv1D", "Conv2D", "DepthwiseConv", "Pointwise", "MaxPool", "AvgPool", "BatchNorm",
    "Activation", "Softmax", "Add", "Concat", "Reshape", "Transpose", "Quant", "Constant", "Custom",
];

/// Applies a user configuration: per-layer > per-op-type > global. Quantizer
/// derived precisions win over user precisions, with a recorded warning.
pub fn resolve_config(g: &ModelGraph, user: &UserConfig) -> Result<ModelGraph, IrError> {
    if user.schema != 1 {
        return Err(IrError::InvalidConfig(format!("unsupported config schema {}", user.schema)));
    }
    for name in user.layers.keys() {
        if !g.contains(name) {
            return Err(IrError::UnknownLayerName(name.clone()));
        }
    }
    for t in user.op_types.keys() {
        if !OP_TYPES.contains(&t.as_str()) {
            return Err(IrError::InvalidConfig(format!("unknown op type '{t}'")));
        }
    }
    for n in &user.split_after {
        if !g.contains(n) {
            return Err(IrError::UnknownLayerName(n.clone()));
        }
    }
    for n in user.fifo_depths.keys() {
        // a producer name, or `producer->consumer`
        for part in n.split("->") {
            if !g.contains(part) {
                return Err(IrError::UnknownLayerName(part.to_string()));
            }
        }
    }
    if let Some(c) = user.clock_period_ns {
        if !(c.is_finite() && c > 0.0) {
            return Err(IrError::InvalidConfig(format!("clock period {c} must be positive")));
        }
    }

    let mut config = g.config.clone();
    if let Some(io) = user.io_type {
        config.io_type = io;
    }
    if let Some(c) = user.clock_period_ns {
        config.clock_period_ns = c;
    }
    if let Some(p) = user.default_precision {
        config.default_precision = p;
    }
    if let Some(p) = user.propagate_precision {
        config.propagate_precision = p;
    }
    let mut base_prec = BTreeMap::new();
    user.model.apply(&mut config.defaults, &mut base_prec);
    config.fifo_depths.extend(user.fifo_depths.clone());
    if !user.split_after.is_empty() {
        config.split_after = user.split_after.clone();
    }

    let mut warnings = Vec::new();
    let mut nodes = g.nodes_vec();
    for node in &mut nodes {
        let type_name = node.op.type_name();
        let mut cfg = config.layer(&node.name).clone();
        let mut prec = base_prec.clone();
        let explicit_type = user.op_types.get(type_name);
        let explicit_layer = user.layers.get(&node.name);
        if let Some(s) = explicit_type {
            s.apply(&mut cfg, &mut prec);
        }
        if let Some(s) = explicit_layer {
            s.apply(&mut cfg, &mut prec);
        }
        let requested_da = explicit_layer.and_then(|s| s.strategy) == Some(Strategy::Da)
            || explicit_type.and_then(|s| s.strategy) == Some(Strategy::Da);
        if cfg.strategy == Strategy::Da && !node.op.is_cmvm() {
            if requested_da {
                return Err(IrError::InvalidStrategyForOp {
                    node: node.name.clone(),
                    op: type_name.to_string(),
                    strategy: Strategy::Da.to_string(),
                });
            }
            // a global DA setting only applies where it can
            cfg.strategy = Strategy::Latency;
        }
        validate_layer(&node.name, &cfg)?;
        config.layers.insert(node.name.clone(), cfg);

        for (role, p) in prec {
            if !role_applies(node, role) {
                continue;
            }
            let current = node.precision(role);
            if current.is_quantized() {
                if p != current {
                    let msg = format!(
                        "{}: {} precision {} ignored; quantizer-derived {} is enforced",
                        node.name,
                        role.name(),
                        p,
                        current
                    );
                    warn!("{msg}");
                    warnings.push(msg);
                }
                continue;
            }
            node.set_precision(role, p);
        }
    }
    let mut out = ModelGraph::build(nodes, g.outputs().to_vec(), config, g.metadata.clone())?;
    out.metadata.warnings.extend(warnings);
    Ok(out)
}

fn role_applies(node: &super::graph::LayerNode, role: Role) -> bool {
    use super::op::Op;
    match role {
        Role::Weight | Role::Bias => node.op.is_cmvm() || matches!(node.op, Op::BatchNorm { .. }),
        Role::Accum => node.op.has_accumulator() || matches!(node.op, Op::Add | Op::Softmax),
        Role::Input => !matches!(node.op, Op::Input { .. } | Op::Constant),
        Role::Result => !matches!(node.op, Op::Constant),
    }
}

pub(crate) fn validate_layer(name: &str, cfg: &LayerConfig) -> Result<(), IrError> {
    let bad = |reason: String| IrError::InvalidConfig(format!("{name}: {reason}"));
    if cfg.reuse_factor == 0 {
        return Err(bad("reuse_factor must be at least 1".into()));
    }
    if cfg.parallelization_factor == 0 {
        return Err(bad("parallelization_factor must be at least 1".into()));
    }
    if !cfg.table_size.is_power_of_two() {
        return Err(bad(format!("table_size {} is not a power of two", cfg.table_size)));
    }
    if cfg.strategy == Strategy::Da && cfg.reuse_factor > 1 {
        return Err(bad(format!("DA does not support reuse_factor {}", cfg.reuse_factor)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::graph::{build_graph, LayerNode};
    use crate::ir::op::{ActivationKind, Op};
    use crate::ir::tensor::Tensor;

    fn chain() -> ModelGraph {
        let d = |n: &str, i: &str, a: usize, b: usize| {
            LayerNode::new(n, Op::Dense { units: b }, &[i]).with_weight("kernel", Tensor::zeros(vec![a, b]))
        };
        build_graph(
            vec![
                LayerNode::new("input1", Op::Input { shape: vec![4] }, &[]),
                d("dense1", "input1", 4, 4),
                LayerNode::new("softmax1", Op::Softmax, &["dense2"]),
                d("dense2", "dense1", 4, 4)
                    .with_precision(Role::Weight, "qat:fixed<4,1,s>".parse().unwrap()),
                LayerNode::new("relu1", Op::Activation(ActivationKind::Relu), &["softmax1"]),
            ],
            vec![],
            HwConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn per_layer_beats_global() {
        let mut u = UserConfig::new();
        u.model.strategy = Some(Strategy::Latency);
        u.layers.insert(
            "dense2".into(),
            LayerSettings { strategy: Some(Strategy::Resource), reuse_factor: Some(4), ..Default::default() },
        );
        let g = resolve_config(&chain(), &u).unwrap();
        assert_eq!(g.config.layer("dense2").strategy, Strategy::Resource);
        assert_eq!(g.config.layer("dense2").reuse_factor, 4);
        assert_eq!(g.config.layer("dense1").strategy, Strategy::Latency);
        assert_eq!(g.config.layer("dense1").reuse_factor, 1);
    }

    #[test]
    fn op_type_sits_between() {
        let mut u = UserConfig::new();
        u.model.reuse_factor = Some(2);
        u.op_types.insert("Dense".into(), LayerSettings { reuse_factor: Some(4), ..Default::default() });
        u.layers.insert("dense1".into(), LayerSettings { reuse_factor: Some(8), ..Default::default() });
        let g = resolve_config(&chain(), &u).unwrap();
        assert_eq!(g.config.layer("dense1").reuse_factor, 8);
        assert_eq!(g.config.layer("dense2").reuse_factor, 4);
        assert_eq!(g.config.layer("softmax1").reuse_factor, 2);
    }

    #[test]
    fn quantizer_precision_wins_with_warning() {
        let mut u = UserConfig::new();
        let mut s = LayerSettings::default();
        s.precision.insert(Role::Weight, "fixed<12,4,s>".parse().unwrap());
        u.layers.insert("dense2".into(), s.clone());
        u.layers.insert("dense1".into(), s);
        let g = resolve_config(&chain(), &u).unwrap();
        assert_eq!(g.node("dense2").unwrap().precision(Role::Weight).to_string(), "qat:fixed<4,1,s,TRN,WRAP>");
        assert_eq!(g.node("dense1").unwrap().precision(Role::Weight).to_string(), "fixed<12,4,s,TRN,WRAP>");
        assert_eq!(g.metadata.warnings.len(), 1);
        assert!(g.metadata.warnings[0].starts_with("dense2"));
    }

    #[test]
    fn validation_errors() {
        let mut u = UserConfig::new();
        u.model.reuse_factor = Some(0);
        assert!(matches!(resolve_config(&chain(), &u), Err(IrError::InvalidConfig(_))));

        let mut u = UserConfig::new();
        u.layers.insert("nope".into(), LayerSettings::default());
        assert!(matches!(resolve_config(&chain(), &u), Err(IrError::UnknownLayerName(n)) if n == "nope"));

        let mut u = UserConfig::new();
        u.layers.insert("softmax1".into(), LayerSettings { strategy: Some(Strategy::Da), ..Default::default() });
        assert!(matches!(resolve_config(&chain(), &u), Err(IrError::InvalidStrategyForOp { .. })));

        let mut u = UserConfig::new();
        u.layers.insert(
            "dense1".into(),
            LayerSettings { strategy: Some(Strategy::Da), reuse_factor: Some(2), ..Default::default() },
        );
        assert!(matches!(resolve_config(&chain(), &u), Err(IrError::InvalidConfig(_))));

        let mut u = UserConfig::new();
        u.model.table_size = Some(1000);
        assert!(resolve_config(&chain(), &u).is_err());
    }

    #[test]
    fn global_da_skips_non_cmvm() {
        let mut u = UserConfig::new();
        u.model.strategy = Some(Strategy::Da);
        let g = resolve_config(&chain(), &u).unwrap();
        assert_eq!(g.config.layer("dense1").strategy, Strategy::Da);
        assert_eq!(g.config.layer("softmax1").strategy, Strategy::Latency);
    }

    #[test]
    fn config_json_parses() {
        let text = r#"{
            "schema": 1,
            "io_type": "io_stream",
            "model": {"strategy": "Resource", "reuse_factor": 2, "precision": {"result": "fixed<10,4,s>", "accum": "auto"}},
            "layers": {"dense1": {"strategy": "DA", "reuse_factor": 1}}
        }"#;
        let u = UserConfig::from_json(text).unwrap();
        assert_eq!(u.io_type, Some(IoType::IoStream));
        assert_eq!(u.layers["dense1"].strategy, Some(Strategy::Da));
        assert_eq!(u.model.precision[&Role::Accum], Precision::Auto);
        assert!(UserConfig::from_json(r#"{"schema":2}"#).is_err());
        assert!(UserConfig::from_json(r#"{"schema":1,"bogus":3}"#).is_err());
    }
}
