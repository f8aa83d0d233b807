//! Regenerates the scenario files shipped in `scenarios/`.
//!
//! `cargo run -p mmc --example write_scenarios -- scenarios`

use std::path::PathBuf;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "scenarios".into()),
    );
    std::fs::create_dir_all(&dir)?;
    for spec in mmc::scenario::shipped() {
        let path = dir.join(format!("{}.toml", spec.name()));
        std::fs::write(&path, spec.to_toml())?;
        println!("{}", path.display());
    }
    Ok(())
}
