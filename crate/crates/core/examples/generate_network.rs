//! Builds a DTI-like voxel network and writes its per-worker tables.
//!
//! cargo run --release --example generate_network

use voxsim::netgen::{emit_tables, generate, write_table, ConnectomeSource, NetworkConfig, NeuronScale, RegionTable};
use voxsim::partition::{estimate_traffic, partition_greedy, Capacity};

fn main() -> voxsim::Result<()> {
    let cfg = NetworkConfig {
        connectome: ConnectomeSource::DtiLike {
            voxels: 64,
            sparsity: 0.05,
            length_scale: 0.15,
            region_mix: [0.4, 0.4, 0.1, 0.1],
        },
        scale: NeuronScale::Total(20_000),
        regions: RegionTable::default().with_in_degree(100),
        ..Default::default()
    };
    let net = generate(&cfg, 42)?;
    let d = net.out_degree_stats();
    println!(
        "{} voxels, {} populations, {} neurons, {} synapses",
        net.voxels.len(),
        net.populations.len(),
        net.neurons(),
        net.synapse_count()
    );
    println!("out-degree mean {:.1} std {:.1} range {}..{}", d.mean, d.std, d.min, d.max);

    let g = estimate_traffic(&net, &vec![7.0; net.populations.len()], 1.0)?;
    let p = partition_greedy(&g, 4, &Capacity::default())?;
    let dir = std::env::temp_dir().join("voxsim-generate-example");
    std::fs::create_dir_all(&dir).map_err(|e| voxsim::Error::io(&dir, e))?;
    for t in emit_tables(&net, &p)? {
        let path = dir.join(format!("worker_{}.vxtb", t.worker));
        let bytes = write_table(&path, &t)?;
        println!("{}: {} neurons, {} entries, {} bytes", path.display(), t.len(), t.entries(), bytes.len());
    }
    Ok(())
}
