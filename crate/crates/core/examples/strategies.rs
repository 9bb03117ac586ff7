//! One Dense layer under each CMVM strategy: the plans differ, the outputs
//! do not.

use std::collections::BTreeMap;

use fxflow::fxp::FixedPointType;
use fxflow::ir::{build_graph, HwConfig, LayerNode, Op, Precision, QTensor, Role, Strategy, Tensor};
use fxflow::fxp::WeightFormat;
use fxflow::kernels::emulate;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x_t = FixedPointType::signed(8, 4)?;
    let w_t = FixedPointType::signed(6, 1)?;
    let kernel = Tensor::from_f64(vec![4, 3], &[0.5, -0.25, 0.75, 0.125, 0.0, -0.5, -0.875, 0.375, 0.25, 0.625, -0.125, 0.5]);
    let sample: BTreeMap<_, _> = [("input0".to_string(), QTensor::fixed(vec![4], vec![17, -40, 3, 99], x_t))].into();

    for (strategy, rf) in [(Strategy::Latency, 1), (Strategy::Resource, 4), (Strategy::Resource, 12), (Strategy::Da, 1)] {
        let mut cfg = HwConfig::default();
        cfg.defaults.strategy = strategy;
        cfg.defaults.reuse_factor = rf;
        let g = build_graph(
            vec![
                LayerNode::new("input0", Op::Input { shape: vec![4] }, &[])
                    .with_precision(Role::Result, Precision::Explicit(WeightFormat::Fixed(x_t))),
                LayerNode::new("dense0", Op::Dense { units: 3 }, &["input0"])
                    .with_weight("kernel", kernel.clone())
                    .with_weight("bias", Tensor::zeros(vec![3]))
                    .with_precision(Role::Weight, Precision::Explicit(WeightFormat::Fixed(w_t))),
            ],
            vec![],
            cfg,
        )?;
        let g = fxflow::passes::run_flow(&g, "quantize")?.0;
        let layer = fxflow::kernels::cmvm_layer(&g, "dense0")?.expect("dense is a cmvm layer");
        let y = emulate(&g, std::slice::from_ref(&sample))?;
        let vals: Vec<String> = y[0]["dense0"].reals().iter().map(fxflow::fxp::real::real_to_string).collect();
        println!("{strategy:<9} rf={rf:<2} mults={:<2} ii={:<2} y={vals:?}", layer.plan.n_mult, layer.plan.ii);
    }
    Ok(())
}
