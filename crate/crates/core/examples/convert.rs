//! Compiles the jet-tagger sample model and emits a firmware project.
//!
//!     cargo run --example convert -- /tmp/jet_prj

use std::path::PathBuf;

use fxflow::codegen::{emit_project, EmitOptions};
use fxflow::ir::resolve_config;
use fxflow::passes::run_flow;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "jet_prj".into()));
    let z = fxflow::zoo::jet_tagger();
    let g = fxflow::frontend::load_model(z.model.to_json().as_bytes())?;
    let g = resolve_config(&g, &z.config)?;
    let (g, log) = run_flow(&g, "quantize")?;
    println!("{} pass changes", log.entries.len());

    let plan = emit_project(&g, &out, EmitOptions::default())?;
    for l in &plan.layers {
        println!("{:<10} {:<10} ii={:<3} {}", l.name, l.op, l.ii, l.strategy.as_deref().unwrap_or("-"));
    }
    for f in &plan.files {
        println!("{:>8}  {}  {}", f.bytes, &f.sha256[..12], f.path);
    }
    Ok(())
}
