#![allow(dead_code)]

use voxsim::model::{NeuronParams, OuParams};
use voxsim::netgen::{
    emit_tables, generate, ConnectionTable, ConnectomeSource, Network, NetworkConfig, NeuronRow, NeuronScale, Region,
    RegionTable, SynapseKind,
};
use voxsim::partition::PartitionMap;

pub fn ring_config(voxels: u32, per_voxel: u32, in_degree: u32) -> NetworkConfig {
    NetworkConfig {
        connectome: ConnectomeSource::Ring {
            voxels,
            region: Region::Subcortex,
        },
        scale: NeuronScale::PerVoxel(per_voxel),
        regions: RegionTable::default().with_in_degree(in_degree),
        ..Default::default()
    }
}

pub fn ring_network(voxels: u32, per_voxel: u32, in_degree: u32, seed: u64) -> Network {
    generate(&ring_config(voxels, per_voxel, in_degree), seed).unwrap()
}

/// Populations dealt round-robin over `workers`.
pub fn round_robin(net: &Network, workers: usize) -> Vec<ConnectionTable> {
    let units = net.populations.len();
    emit_tables(net, &PartitionMap::from_assignment((0..units).map(|u| u % workers).collect(), workers)).unwrap()
}

pub struct Neuron {
    pub worker: u32,
    pub voxel: u32,
    pub params: NeuronParams,
    pub ou: OuParams,
}

/// Hand-built tables: neuron `i` gets global id `i`; synapses are
/// `(source gid, target gid, kind, weight)`.
pub fn manual_tables(neurons: &[Neuron], synapses: &[(u32, u32, SynapseKind, f32)]) -> Vec<ConnectionTable> {
    let workers = neurons.iter().map(|n| n.worker).max().unwrap() + 1;
    let mut local = vec![0u32; neurons.len()];
    let mut tables: Vec<ConnectionTable> = (0..workers)
        .map(|w| ConnectionTable {
            worker: w,
            workers,
            neurons: Vec::new(),
            row_offsets: vec![0],
            src_worker: Vec::new(),
            src_local: Vec::new(),
            kind: Vec::new(),
            weight: Vec::new(),
        })
        .collect();
    for (g, n) in neurons.iter().enumerate() {
        local[g] = tables[n.worker as usize].neurons.len() as u32;
        tables[n.worker as usize].neurons.push(NeuronRow {
            global_id: g as u32,
            voxel: n.voxel,
            population: n.voxel,
            params: n.params,
            ou: n.ou,
        });
    }
    for (g, n) in neurons.iter().enumerate() {
        let t = &mut tables[n.worker as usize];
        for &(src, dst, kind, weight) in synapses {
            if dst as usize == g {
                t.src_worker.push(neurons[src as usize].worker);
                t.src_local.push(local[src as usize]);
                t.kind.push(kind);
                t.weight.push(weight);
            }
        }
        t.row_offsets.push(t.src_worker.len() as u64);
    }
    tables
}

pub fn quiet_ou() -> OuParams {
    OuParams {
        mean: 0.0,
        sigma: 0.0,
        tau: 5.0,
    }
}
