//! Cuts the sample MLP into two subgraphs and checks that chaining them
//! reproduces the whole model.

use fxflow::ir::{resolve_config, split_graph};
use fxflow::kernels::{emulate, Program};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let z = fxflow::zoo::jet_tagger();
    let g = fxflow::frontend::load_model(z.model.to_json().as_bytes())?;
    let g = fxflow::passes::run_flow(&resolve_config(&g, &z.config)?, "quantize")?.0;
    let parts = split_graph(&g, &["relu1".to_string()])?;
    for (i, p) in parts.iter().enumerate() {
        println!("part {i}: {:?} -> {:?}", p.inputs(), p.outputs());
    }

    let batch = fxflow::codegen::random_inputs(&g, 4, 1)?;
    let whole = emulate(&g, &batch)?;
    for (x, want) in batch.iter().zip(&whole) {
        let mid = Program::new(&parts[0])?.run(x)?;
        let (_, t) = mid.into_iter().next().expect("one boundary value");
        let y = Program::new(&parts[1])?.run(&[(parts[1].inputs()[0].to_string(), t)].into())?;
        assert_eq!(y.values().next(), want.values().next());
    }
    println!("{} samples agree", batch.len());
    Ok(())
}
