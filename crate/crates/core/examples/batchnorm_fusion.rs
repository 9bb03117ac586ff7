//! Folds a BatchNorm into the preceding Dense and compares float outputs.

use std::collections::BTreeMap;

use fxflow::fxp::real::pow2;
use fxflow::ir::{build_graph, HwConfig, LayerNode, Op, Tensor};
use fxflow::kernels::reference::{run_float, FTensor};
use fxflow::passes::fuse_batchnorm;

fn t(v: &[f64]) -> Tensor {
    Tensor::from_f64(vec![v.len()], v)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = build_graph(
        vec![
            LayerNode::new("input0", Op::Input { shape: vec![2] }, &[]),
            LayerNode::new("dense0", Op::Dense { units: 3 }, &["input0"])
                .with_weight("kernel", Tensor::from_f64(vec![2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]))
                .with_weight("bias", t(&[0.1, 0.2, -0.3])),
            LayerNode::new("bn0", Op::BatchNorm { epsilon: pow2(-10) }, &["dense0"])
                .with_weight("gamma", t(&[1.5, 0.5, 2.0]))
                .with_weight("beta", t(&[0.0, -1.0, 0.25]))
                .with_weight("mean", t(&[0.3, -0.2, 1.0]))
                .with_weight("variance", t(&[2.0, 0.5, 1.0])),
        ],
        vec![],
        HwConfig::default(),
    )?;
    let (fused, changes) = fuse_batchnorm(&g)?;
    for c in &changes {
        println!("{c:?}");
    }
    let x: BTreeMap<_, _> = [("input0".to_string(), FTensor::new(vec![2], vec![1.25, -3.0]))].into();
    println!("before {:?}", run_float(&g, &x)?.values().next().map(|t| &t.values));
    println!("after  {:?}", run_float(&fused, &x)?.values().next().map(|t| &t.values));
    Ok(())
}
