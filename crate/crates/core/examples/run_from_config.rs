//! Drives the generate, simulate and verify commands from a TOML string.
//!
//! cargo run --release --example run_from_config

use voxsim::cli::{cmd_generate, cmd_simulate, cmd_verify};
use voxsim::config::RunConfig;

const CONFIG: &str = r#"
seed = 3
steps = 500
stats_window = 400
workers = 2

[network]
scale = { per_voxel = 300 }

[network.connectome]
kind = "two_block"
voxels = 4

[partition]
method = "greedy"
"#;

fn main() -> voxsim::Result<()> {
    let mut cfg = RunConfig::parse(CONFIG, std::path::Path::new("inline.toml"))?;
    cfg.out = std::env::temp_dir().join("voxsim-config-example");
    cfg.validate()?;
    let m = cmd_generate(&cfg)?;
    println!("manifest: {} tables, config hash {}", m.tables.len(), &m.config_sha256[..12]);
    let out = cmd_simulate(&cfg)?;
    println!("{} spikes written to {}", out.raster.len(), cfg.out.display());
    let v = cmd_verify(&cfg, &[1, 2], &[])?;
    println!("verified {} runs agree", v.runs.len());
    Ok(())
}
