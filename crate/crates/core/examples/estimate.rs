//! Resource and latency estimates for the sample models.

use fxflow::ir::resolve_config;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for z in fxflow::zoo::corpus() {
        let g = fxflow::frontend::load_model(z.model.to_json().as_bytes())?;
        let g = fxflow::passes::run_flow(&resolve_config(&g, &z.config)?, "quantize")?.0;
        let report = fxflow::perf::estimate(&g)?;
        println!("== {} ({})", z.name, report.io_type);
        print!("{}", report.to_table());
        println!();
    }
    Ok(())
}
