//! Recovers known AMPA conductance offsets from synthetic BOLD.
//!
//! cargo run --release --example twin_assimilation

use voxsim::assim::{twin_experiment, AssimConfig, TwinConfig};
use voxsim::engine::EngineConfig;
use voxsim::hemo::BoldConfig;
use voxsim::netgen::{generate, ConnectomeSource, NetworkConfig, NeuronScale, Region, RegionTable};

fn main() -> voxsim::Result<()> {
    let net = generate(
        &NetworkConfig {
            connectome: ConnectomeSource::Ring {
                voxels: 2,
                region: Region::Subcortex,
            },
            scale: NeuronScale::PerVoxel(1000),
            regions: RegionTable::default().with_in_degree(100),
            ..Default::default()
        },
        11,
    )?;
    let cfg = AssimConfig {
        members: 6,
        windows: 20,
        bold: BoldConfig {
            window_steps: 800,
            ..Default::default()
        },
        ..Default::default()
    };
    let twin = twin_experiment(&net, EngineConfig::default(), &cfg, &TwinConfig::default(), 5)?;
    for (g, (t, e)) in twin.truth.iter().zip(&twin.result.offsets).enumerate() {
        println!("voxel {g}: true factor {:.3}, estimate {:.3}", t.exp(), e.exp());
    }
    println!("max relative error {:.3}", twin.max_relative_error());
    if let Some(c) = twin.result.final_correlation() {
        println!("final BOLD correlation {c:.4}");
    }
    Ok(())
}
