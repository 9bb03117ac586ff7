//! Sample models with deterministic pseudo-random quantized weights.
//!
//! Every model quantizes its input, weights, biases and hidden activations
//! with power-of-two `Quant` nodes, so the quantize flow needs no defaults.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::frontend::{parse_model, RawModel};
use crate::ir::{IoType, Strategy, UserConfig};

pub struct ZooModel {
    pub name: &'static str,
    pub model: RawModel,
    pub config: UserConfig,
}

struct Builder {
    rng: ChaCha8Rng,
    nodes: Vec<Value>,
    init: serde_json::Map<String, Value>,
    next: usize,
}

/// Multiples of 2^-frac with `bits` signed bits, as exact decimals.
fn dyadic(rng: &mut ChaCha8Rng, n: usize, bits: u32, frac: u32) -> Vec<String> {
    let lim = 1i64 << (bits - 1);
    (0..n)
        .map(|_| {
            let k = rng.gen_range(-lim..lim);
            (k as f64 / (1u64 << frac) as f64).to_string()
        })
        .collect()
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder { rng: ChaCha8Rng::seed_from_u64(seed), nodes: Vec::new(), init: Default::default(), next: 0 }
    }

    fn fresh(&mut self, stem: &str) -> String {
        self.next += 1;
        format!("{stem}{}", self.next)
    }

    fn quant(&mut self, x: &str, bits: u32, frac: u32, signed: bool) -> String {
        let y = self.fresh("q");
        let scale = 1.0 / (1u64 << frac) as f64;
        self.nodes.push(json!({
            "op": "Quant", "inputs": [x], "outputs": [y],
            "attrs": {"bitwidth": bits, "scale": scale.to_string(), "signed": signed, "rounding": "FLOOR"}
        }));
        y
    }

    fn param(&mut self, shape: Vec<usize>, bits: u32, frac: u32) -> String {
        let name = self.fresh("p");
        let data = dyadic(&mut self.rng, shape.iter().product(), bits, frac);
        self.init.insert(name.clone(), json!({"shape": shape, "data": data}));
        let q = self.fresh("q");
        let scale = 1.0 / (1u64 << frac) as f64;
        self.nodes.push(json!({"op": "Quant", "inputs": [name], "outputs": [q], "attrs": {"bitwidth": bits, "scale": scale.to_string()}}));
        q
    }

    fn op(&mut self, op: &str, inputs: &[&str], attrs: Value) -> String {
        let y = self.fresh("t");
        let mut n = json!({"op": op, "inputs": inputs, "outputs": [y]});
        if attrs != Value::Null {
            n["attrs"] = attrs;
        }
        self.nodes.push(n);
        y
    }

    /// Dense + ReLU + activation quantizer, or a bare dense when `last`.
    fn dense(&mut self, x: &str, n_in: usize, n_out: usize, last: bool) -> String {
        let w = self.param(vec![n_in, n_out], 6, 5);
        let b = self.param(vec![n_out], 6, 4);
        let h = self.op("MatMul", &[x, &w], Value::Null);
        let h = self.op("Add", &[&h, &b], Value::Null);
        if last {
            return h;
        }
        let r = self.op("Relu", &[&h], Value::Null);
        self.quant(&r, 8, 4, false)
    }

    fn conv(&mut self, x: &str, c: usize, f: usize, k: usize) -> String {
        let w = self.param(vec![f, c, k, k], 6, 5);
        let b = self.param(vec![f], 6, 4);
        let h = self.op("Conv", &[x, &w, &b], json!({"kernel_shape": [k, k]}));
        let r = self.op("Relu", &[&h], Value::Null);
        self.quant(&r, 8, 4, false)
    }

    fn pool(&mut self, x: &str) -> String {
        self.op("MaxPool", &[x], json!({"kernel_shape": [2, 2], "strides": [2, 2]}))
    }

    fn finish(self, input: Vec<usize>, out: &str) -> RawModel {
        let v = json!({
            "schema": 1,
            "graph": {
                "inputs": [{"name": "x", "shape": input}],
                "outputs": [out],
                "nodes": self.nodes,
                "initializers": self.init,
            }
        });
        parse_model(v.to_string().as_bytes()).expect("zoo models are valid")
    }
}

fn mlp(seed: u64, widths: &[usize]) -> RawModel {
    let mut b = Builder::new(seed);
    let mut h = b.quant("x", 8, 4, true);
    for (i, w) in widths.windows(2).enumerate() {
        h = b.dense(&h, w[0], w[1], i + 2 == widths.len());
    }
    b.finish(vec![widths[0]], &h)
}

/// Jet-tagger shaped MLP, 16→64→32→32→5, compiled with distributed arithmetic.
pub fn jet_tagger() -> ZooModel {
    let mut config = UserConfig::new();
    config.model.strategy = Some(Strategy::Da);
    ZooModel { name: "jet_tagger", model: mlp(16, &[16, 64, 32, 32, 5]), config }
}

/// Three conv/pool stages and two dense layers on a 20×20×3 image, streamed.
pub fn small_cnn() -> ZooModel {
    let mut b = Builder::new(20);
    let x = b.quant("x", 8, 4, true);
    let h = b.conv(&x, 3, 8, 3);
    let h = b.pool(&h);
    let h = b.conv(&h, 8, 8, 3);
    let h = b.pool(&h);
    let h = b.conv(&h, 8, 8, 2);
    let h = b.pool(&h);
    let h = b.op("Flatten", &[&h], Value::Null);
    let h = b.dense(&h, 8, 16, false);
    let y = b.dense(&h, 16, 10, true);
    let mut config = UserConfig::new();
    config.io_type = Some(IoType::IoStream);
    ZooModel { name: "small_cnn", model: b.finish(vec![20, 20, 3], &y), config }
}

/// Single hidden layer MLP, 784→128→10, Resource strategy with RF 8.
pub fn mnist_mlp() -> ZooModel {
    let mut config = UserConfig::new();
    config.model.strategy = Some(Strategy::Resource);
    config.model.reuse_factor = Some(8);
    ZooModel { name: "mnist_mlp", model: mlp(784, &[784, 128, 10]), config }
}

pub fn corpus() -> Vec<ZooModel> {
    vec![jet_tagger(), small_cnn(), mnist_mlp()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{resolve_config, Op};

    #[test]
    fn corpus_compiles() {
        for z in corpus() {
            let g = crate::frontend::load_model(z.model.to_json().as_bytes()).unwrap();
            let g = resolve_config(&g, &z.config).unwrap();
            let (g, _) = crate::passes::run_flow(&g, "quantize").unwrap();
            let cmvm = g.topo_order().iter().filter(|n| g.node(n).unwrap().op.is_cmvm()).count();
            let expect = match z.name {
                "jet_tagger" => 4,
                "small_cnn" => 5,
                _ => 2,
            };
            assert_eq!(cmvm, expect, "{}", z.name);
            if z.name == "small_cnn" {
                assert!(g.topo_order().iter().any(|n| matches!(g.node(n).unwrap().op, Op::MaxPool(_))));
            }
        }
    }

    #[test]
    fn weights_are_deterministic() {
        assert_eq!(jet_tagger().model, jet_tagger().model);
    }
}
