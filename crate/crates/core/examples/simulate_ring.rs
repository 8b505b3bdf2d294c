//! Simulates a ring of voxels on one and four workers and checks that the
//! spike rasters agree.
//!
//! cargo run --release --example simulate_ring

use voxsim::engine::{aggregate_timings, run, EngineConfig, Injection, TransportKind};
use voxsim::netgen::{emit_tables, generate, ConnectomeSource, NetworkConfig, NeuronScale, Region, RegionTable};
use voxsim::partition::{estimate_traffic, partition_sequential, Capacity, PartitionMap};

fn main() -> voxsim::Result<()> {
    let cfg = NetworkConfig {
        connectome: ConnectomeSource::Ring {
            voxels: 8,
            region: Region::Subcortex,
        },
        scale: NeuronScale::PerVoxel(500),
        regions: RegionTable::default().with_in_degree(100),
        ..Default::default()
    };
    let net = generate(&cfg, 7)?;
    let mut stim = Injection::new();
    stim.add_block(0, 200..400, 80.0);

    let single = emit_tables(&net, &PartitionMap::single(net.populations.len()))?;
    let g = estimate_traffic(&net, &vec![7.0; net.populations.len()], 1.0)?;
    let four = emit_tables(&net, &partition_sequential(&g, 4, &Capacity::default())?)?;

    let engine = EngineConfig {
        seed: 1,
        ..Default::default()
    };
    let a = run(&single, engine.clone(), 1000, stim.clone())?;
    let b = run(
        &four,
        EngineConfig {
            transport: TransportKind::Threads,
            ..engine
        },
        1000,
        stim,
    )?;
    let (_, rate) = a.rates.mean_rates(800);
    println!("{} spikes, mean rate {rate:.2} Hz", a.raster.len());
    println!("rasters identical across 1 and 4 workers: {}", a.global_raster() == b.global_raster());
    let r = aggregate_timings(&b.timings, 800)?;
    println!("4 workers: T_sim {:.3e} s/step, {} bytes sent", r.t_sim, r.bytes_sent);
    Ok(())
}
