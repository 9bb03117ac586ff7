//! Sizes the stream FIFOs of the sample CNN from a simulated run.

use fxflow::ir::resolve_config;
use fxflow::perf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let z = fxflow::zoo::small_cnn();
    let g = fxflow::frontend::load_model(z.model.to_json().as_bytes())?;
    let g = fxflow::passes::run_flow(&resolve_config(&g, &z.config)?, "quantize")?.0;

    let before = perf::simulate(&g, 2)?;
    let depths = perf::optimize_fifo_depths(&g, 2)?;
    println!("{:<24} {:>8} {:>8} {:>8}", "fifo", "default", "max occ", "tuned");
    for f in &before.fifos {
        println!("{:<24} {:>8} {:>8} {:>8}", f.name, f.depth, f.max_occupancy, depths[&f.name]);
    }

    let mut cfg = z.config.clone();
    cfg.fifo_depths = depths;
    let tuned = fxflow::passes::run_flow(&resolve_config(&fxflow::frontend::load_model(z.model.to_json().as_bytes())?, &cfg)?, "quantize")?.0;
    let after = perf::simulate(&tuned, 2)?;
    println!("makespan {} -> {} cycles", before.makespan, after.makespan);
    Ok(())
}
