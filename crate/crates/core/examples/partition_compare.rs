//! Greedy, sequential and exhaustive placement of one small network.
//!
//! cargo run --release --example partition_compare

use voxsim::netgen::{generate, ConnectomeSource, NetworkConfig, NeuronScale, Region, RegionTable};
use voxsim::partition::{
    estimate_traffic, format_partition, off_diagonal, partition_exact, partition_greedy, partition_sequential,
    std_dev, Capacity,
};

fn main() -> voxsim::Result<()> {
    let cfg = NetworkConfig {
        connectome: ConnectomeSource::UniformRandom {
            voxels: 5,
            region: Region::Subcortex,
            sparsity: 0.4,
        },
        scale: NeuronScale::PerVoxel(400),
        regions: RegionTable::default().with_in_degree(50),
        ..Default::default()
    };
    let net = generate(&cfg, 3)?;
    let g = estimate_traffic(&net, &vec![7.0; net.populations.len()], 1.0)?;
    let cap = Capacity {
        slack: 1.3,
        ..Default::default()
    };
    let runs = [
        ("greedy", partition_greedy(&g, 3, &cap)?),
        ("sequential", partition_sequential(&g, 3, &cap)?),
        ("exact", partition_exact(&g, 3, &cap)?),
    ];
    for (name, p) in &runs {
        let spread = std_dev(&off_diagonal(&p.synapse_matrix(&g)));
        println!(
            "{name:>10}: F = {:.3} B/step, inter-worker synapse std {spread:.1}",
            p.objective as f64 * 1e-6
        );
    }
    println!("\ngreedy placement:\n{}", format_partition(&runs[0].1));
    Ok(())
}
