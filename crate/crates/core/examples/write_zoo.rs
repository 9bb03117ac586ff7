//! Writes the sample models and their configs to a directory.
//!
//!     cargo run --example write_zoo -- /tmp/zoo

use std::path::PathBuf;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "zoo".into()));
    std::fs::create_dir_all(&dir)?;
    for z in fxflow::zoo::corpus() {
        std::fs::write(dir.join(format!("{}.json", z.name)), z.model.to_json() + "\n")?;
        std::fs::write(dir.join(format!("{}.config.json", z.name)), z.config.to_json() + "\n")?;
        println!("{}", z.name);
    }
    Ok(())
}
