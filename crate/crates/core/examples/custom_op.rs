//! Registers an elementwise square op and runs a model that uses it.

use fxflow::ir::{custom, register_custom_op, resolve_config, Attrs, Tensor, UserConfig};
use serde_json::json;

fn square(ins: &[Tensor], _: &Attrs) -> Result<Tensor, String> {
    let x = &ins[0];
    Ok(Tensor::new(x.shape.clone(), x.values.iter().map(|v| v * v).collect()))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    register_custom_op("Square", custom::same_shape, square)?;
    let model = json!({
        "schema": 1,
        "graph": {
            "inputs": [{"name": "x", "shape": [3]}],
            "outputs": ["y"],
            "nodes": [
                {"op": "Quant", "inputs": ["x"], "outputs": ["xq"], "attrs": {"bitwidth": 6, "scale": "0.25"}},
                {"op": "Square", "inputs": ["xq"], "outputs": ["s"]},
                {"op": "Quant", "inputs": ["s"], "outputs": ["y"], "attrs": {"bitwidth": 10, "scale": "0.0625", "signed": false}}
            ],
            "initializers": {}
        }
    });
    let g = fxflow::frontend::load_model(model.to_string().as_bytes())?;
    let g = fxflow::passes::run_flow(&resolve_config(&g, &UserConfig::new())?, "quantize")?.0;
    let inputs = fxflow::codegen::testbench::parse_samples(&g, r#"[{"input0": ["-2.5", "1.75", "7.75"]}]"#)?;
    let y = fxflow::kernels::emulate(&g, &inputs)?;
    print!("{}", fxflow::codegen::testbench::samples_to_json(&y));
    Ok(())
}
