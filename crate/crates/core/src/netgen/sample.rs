use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ConnectomeGraph, PopulationParams, ReceptorMode, Region, VoxelSpec};
use crate::assim::{sample_population, HyperParams, LogNormal};
use crate::error::{Error, Result};
use crate::model::{NeuronParams, Receptor};
use crate::rng;

/// Receptor channel(s) a synapse drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum SynapseKind {
    Ampa = 0,
    Nmda = 1,
    GabaA = 2,
    GabaB = 3,
    /// AMPA and NMDA together.
    Excitatory = 4,
    /// GABAa and GABAb together.
    Inhibitory = 5,
}

impl SynapseKind {
    pub fn receptors(self) -> &'static [usize] {
        match self {
            SynapseKind::Ampa => &[0],
            SynapseKind::Nmda => &[1],
            SynapseKind::GabaA => &[2],
            SynapseKind::GabaB => &[3],
            SynapseKind::Excitatory => &[0, 1],
            SynapseKind::Inhibitory => &[2, 3],
        }
    }

    pub fn is_excitatory(self) -> bool {
        matches!(self, SynapseKind::Ampa | SynapseKind::Nmda | SynapseKind::Excitatory)
    }

    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => SynapseKind::Ampa,
            1 => SynapseKind::Nmda,
            2 => SynapseKind::GabaA,
            3 => SynapseKind::GabaB,
            4 => SynapseKind::Excitatory,
            5 => SynapseKind::Inhibitory,
            _ => return None,
        })
    }

    pub fn single(r: Receptor) -> Self {
        match r {
            Receptor::Ampa => SynapseKind::Ampa,
            Receptor::Nmda => SynapseKind::Nmda,
            Receptor::GabaA => SynapseKind::GabaA,
            Receptor::GabaB => SynapseKind::GabaB,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Synapse {
    /// Global id of the presynaptic neuron.
    pub source: u32,
    pub kind: SynapseKind,
    pub weight: f32,
}

/// A non-empty population instance; the atomic partitioning unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub id: u32,
    pub voxel: u32,
    /// Index inside the voxel layout.
    pub index: u32,
    pub region: Region,
    pub excitatory: bool,
    pub layer: Option<String>,
    /// First global neuron id.
    pub first: u32,
    pub size: u32,
    pub in_degree: u32,
    pub params: PopulationParams,
    pub hyper: [LogNormal; 4],
}

impl Population {
    pub fn label(&self) -> String {
        let kind = if self.excitatory { "E" } else { "I" };
        match &self.layer {
            Some(l) => format!("v{}:{l}{kind}", self.voxel),
            None => format!("v{}:{kind}", self.voxel),
        }
    }

    pub fn neurons(&self) -> std::ops::Range<u32> {
        self.first..self.first + self.size
    }
}

/// A fully sampled network in global neuron numbering (voxel, then
/// population, then index).
#[derive(Clone, Debug)]
pub struct Network {
    pub seed: u64,
    pub voxels: Vec<VoxelSpec>,
    pub populations: Vec<Population>,
    pub neuron_population: Vec<u32>,
    /// Row `i` of the in-synapse table is `synapses[row_offsets[i]..row_offsets[i + 1]]`.
    pub row_offsets: Vec<u64>,
    pub synapses: Vec<Synapse>,
    /// Per-neuron receptor conductance scales g_u (nS).
    pub conductance: Vec<[f32; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegreeStats {
    pub mean: f64,
    pub std: f64,
    pub min: u64,
    pub max: u64,
}

impl Network {
    pub fn neurons(&self) -> u32 {
        self.neuron_population.len() as u32
    }

    pub fn synapse_count(&self) -> u64 {
        self.synapses.len() as u64
    }

    pub fn row(&self, neuron: u32) -> &[Synapse] {
        let i = neuron as usize;
        &self.synapses[self.row_offsets[i] as usize..self.row_offsets[i + 1] as usize]
    }

    pub fn population_of(&self, neuron: u32) -> &Population {
        &self.populations[self.neuron_population[neuron as usize] as usize]
    }

    pub fn voxel_of(&self, neuron: u32) -> u32 {
        self.population_of(neuron).voxel
    }

    /// Full neuron-property row (population template plus sampled g_u).
    pub fn neuron_params(&self, neuron: u32) -> NeuronParams {
        let mut p = self.population_of(neuron).params.neuron;
        p.conductance = self.conductance[neuron as usize];
        p
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            populations: self.populations.iter().map(|p| p.hyper).collect(),
        }
    }

    /// Redraws every neuron's conductances from `h` with stream `seed`.
    pub fn resample_conductances(&mut self, h: &HyperParams, seed: u64) -> Result<()> {
        if h.populations.len() != self.populations.len() {
            return Err(Error::config("hyper-parameter rows do not match populations"));
        }
        h.validate()?;
        for (pop, dist) in self.populations.iter_mut().zip(&h.populations) {
            pop.hyper = *dist;
            let g = sample_population(dist, pop.id, pop.size, seed);
            self.conductance[pop.first as usize..(pop.first + pop.size) as usize].copy_from_slice(&g);
        }
        Ok(())
    }

    /// Out-degree distribution over all neurons (multi-edges counted).
    pub fn out_degree_stats(&self) -> DegreeStats {
        let mut deg = vec![0u64; self.neurons() as usize];
        for s in &self.synapses {
            deg[s.source as usize] += 1;
        }
        let n = deg.len().max(1) as f64;
        let mean = deg.iter().sum::<u64>() as f64 / n;
        let var = deg.iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / n;
        DegreeStats {
            mean,
            std: var.sqrt(),
            min: deg.iter().copied().min().unwrap_or(0),
            max: deg.iter().copied().max().unwrap_or(0),
        }
    }
}

/// Cumulative-weight sampler.
struct Cumulative<T> {
    items: Vec<T>,
    cum: Vec<f64>,
}

impl<T: Copy> Cumulative<T> {
    fn new(weighted: impl IntoIterator<Item = (T, f64)>) -> Self {
        let mut items = Vec::new();
        let mut cum = Vec::new();
        let mut acc = 0.0;
        for (item, w) in weighted {
            if w > 0.0 {
                acc += w;
                items.push(item);
                cum.push(acc);
            }
        }
        Cumulative { items, cum }
    }

    fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn pick(&self, r: &mut ChaCha8Rng) -> T {
        let total = *self.cum.last().expect("non-empty sampler");
        let x = r.gen::<f64>() * total;
        let i = self.cum.partition_point(|&c| c <= x).min(self.items.len() - 1);
        self.items[i]
    }
}

struct VoxelSampler {
    /// (first global id, size) of the voxel's excitatory populations.
    excitatory: Vec<(u32, u32)>,
    excitatory_total: u32,
    /// Per layout index of target population: source (first, size) sampler.
    intra: Vec<Cumulative<(u32, u32)>>,
    first: u32,
    neurons: u32,
}

impl VoxelSampler {
    fn pick_excitatory(&self, r: &mut ChaCha8Rng) -> u32 {
        let mut k = r.gen_range(0..self.excitatory_total);
        for &(first, size) in &self.excitatory {
            if k < size {
                return first + k;
            }
            k -= size;
        }
        unreachable!("excitatory pick within total")
    }
}

/// Samples the complete synapse set. Each neuron's picks come from its own
/// keyed stream, so the result is a pure function of the inputs and seed.
pub fn sample_synapses(graph: &ConnectomeGraph, voxels: &[VoxelSpec], mode: ReceptorMode, seed: u64) -> Result<Network> {
    if voxels.len() != graph.voxels.len() {
        return Err(Error::config("voxel specs do not match the connectome"));
    }

    // Population instances and global numbering.
    let mut populations = Vec::new();
    let mut layout_to_pop: Vec<Vec<Option<u32>>> = Vec::with_capacity(voxels.len());
    let mut next = 0u32;
    for v in voxels {
        let sizes = v.population_sizes();
        let mut map = Vec::with_capacity(sizes.len());
        for (spec, &size) in v.populations.iter().zip(&sizes) {
            if size == 0 {
                map.push(None);
                continue;
            }
            let id = populations.len() as u32;
            spec.params.ou.validate()?;
            populations.push(Population {
                id,
                voxel: v.id,
                index: spec.index,
                region: v.region,
                excitatory: spec.excitatory,
                layer: spec.layer.clone(),
                first: next,
                size,
                in_degree: v.in_degree,
                params: spec.params.clone(),
                hyper: spec.params.conductance.hyper(v.in_degree),
            });
            map.push(Some(id));
            next += size;
        }
        layout_to_pop.push(map);
    }
    let n = next as usize;
    let mut neuron_population = vec![0u32; n];
    for p in &populations {
        neuron_population[p.first as usize..(p.first + p.size) as usize].fill(p.id);
    }

    // Per-voxel samplers.
    let mc = &graph.intra.microcolumn;
    let samplers: Vec<VoxelSampler> = voxels
        .iter()
        .zip(&layout_to_pop)
        .map(|(v, map)| {
            let pops: Vec<Option<&Population>> = map.iter().map(|p| p.map(|id| &populations[id as usize])).collect();
            let excitatory: Vec<(u32, u32)> = pops.iter().flatten().filter(|p| p.excitatory).map(|p| (p.first, p.size)).collect();
            let excitatory_total = excitatory.iter().map(|&(_, s)| s).sum();
            let first = pops.iter().flatten().map(|p| p.first).min().unwrap_or(0);
            let prob = |t: usize, s: usize| -> f64 {
                match v.region {
                    Region::Cortex => mc.probability[t][s],
                    _ => graph.intra.two_population[t][s],
                }
            };
            let intra = (0..pops.len())
                .map(|t| {
                    let c = Cumulative::new(pops.iter().enumerate().filter_map(|(s, p)| {
                        p.map(|p| ((p.first, p.size), prob(t, s) * p.size as f64))
                    }));
                    if c.is_empty() {
                        Cumulative::new(pops.iter().flatten().map(|p| ((p.first, p.size), p.size as f64)))
                    } else {
                        c
                    }
                })
                .collect();
            VoxelSampler {
                excitatory,
                excitatory_total,
                intra,
                first,
                neurons: v.neurons,
            }
        })
        .collect();

    let inbound = graph.inbound_weights();
    let inter: Vec<Cumulative<u32>> = inbound
        .iter()
        .map(|srcs| {
            Cumulative::new(
                srcs.iter()
                    .filter(|(s, _)| samplers[*s as usize].excitatory_total > 0)
                    .map(|&(s, w)| (s, w)),
            )
        })
        .collect();

    for v in voxels {
        let picks = v.inter_picks();
        if picks > 0 && inter[v.id as usize].is_empty() {
            return Err(Error::config(format!(
                "voxel {} draws {picks} inter-voxel inputs per neuron but has no inbound edges from voxels with excitatory neurons",
                v.id
            )));
        }
        if v.in_degree > picks && v.neurons < 2 {
            return Err(Error::config(format!(
                "voxel {} needs intra-voxel inputs but has a single neuron",
                v.id
            )));
        }
    }

    let total_synapses: u64 = populations.iter().map(|p| p.size as u64 * p.in_degree as u64).sum();
    let mut synapses = Vec::with_capacity(total_synapses as usize);
    let mut row_offsets = Vec::with_capacity(n + 1);
    row_offsets.push(0u64);

    let make = |src: u32, r: &mut ChaCha8Rng| -> Synapse {
        let sp = &populations[neuron_population[src as usize] as usize];
        let kind = match (mode, sp.excitatory) {
            (ReceptorMode::Both, true) => SynapseKind::Excitatory,
            (ReceptorMode::Both, false) => SynapseKind::Inhibitory,
            (ReceptorMode::Split { fast_fraction }, true) => {
                if r.gen_bool(fast_fraction) {
                    SynapseKind::Ampa
                } else {
                    SynapseKind::Nmda
                }
            }
            (ReceptorMode::Split { fast_fraction }, false) => {
                if r.gen_bool(fast_fraction) {
                    SynapseKind::GabaA
                } else {
                    SynapseKind::GabaB
                }
            }
        };
        let w = sp.params.weight;
        let weight = if w.spread == 0.0 {
            w.mean
        } else {
            let u1: f64 = 1.0 - r.gen::<f64>();
            let u2: f64 = r.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            (w.mean + w.spread * z).max(0.0)
        };
        Synapse {
            source: src,
            kind,
            weight: weight as f32,
        }
    };

    for p in &populations {
        let v = &voxels[p.voxel as usize];
        let vs = &samplers[p.voxel as usize];
        let n_inter = v.inter_picks();
        let n_intra = v.in_degree - n_inter;
        let intra = &vs.intra[p.index as usize];
        for gid in p.neurons() {
            let mut r = rng::shard_rng(&[seed, rng::domain::SYNAPSES, gid as u64]);
            for _ in 0..n_inter {
                let sv = inter[v.id as usize].pick(&mut r);
                let src = samplers[sv as usize].pick_excitatory(&mut r);
                synapses.push(make(src, &mut r));
            }
            for _ in 0..n_intra {
                let src = loop {
                    let (first, size) = intra.pick(&mut r);
                    let s = first + r.gen_range(0..size);
                    if s != gid {
                        break s;
                    }
                    if vs.neurons < 2 {
                        unreachable!("validated above");
                    }
                };
                debug_assert!(src >= vs.first && src < vs.first + vs.neurons);
                synapses.push(make(src, &mut r));
            }
            row_offsets.push(synapses.len() as u64);
        }
    }

    let conductance = populations
        .iter()
        .flat_map(|p| sample_population(&p.hyper, p.id, p.size, seed))
        .collect();

    Ok(Network {
        seed,
        voxels: voxels.to_vec(),
        populations,
        neuron_population,
        row_offsets,
        synapses,
        conductance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgen::{generate, layout_voxels, parse_connectome, ConnectomeSource, IntraCircuit, NetworkConfig, NeuronScale, RegionTable};
    use std::path::Path;

    fn small(source: ConnectomeSource, per_voxel: u32, k: u32) -> NetworkConfig {
        NetworkConfig {
            connectome: source,
            scale: NeuronScale::PerVoxel(per_voxel),
            regions: RegionTable::default().with_in_degree(k),
            ..Default::default()
        }
    }

    #[test]
    fn in_degree_is_exact_and_no_self_loops() {
        let cfg = small(
            ConnectomeSource::Ring {
                voxels: 5,
                region: Region::Subcortex,
            },
            200,
            50,
        );
        let net = generate(&cfg, 1).unwrap();
        for gid in 0..net.neurons() {
            let row = net.row(gid);
            assert_eq!(row.len(), 50);
            assert!(row.iter().all(|s| s.source != gid));
        }
    }

    #[test]
    fn inter_voxel_synapses_are_excitatory() {
        let cfg = small(
            ConnectomeSource::DtiLike {
                voxels: 12,
                sparsity: 0.3,
                length_scale: 0.2,
                region_mix: [0.5, 0.2, 0.2, 0.1],
            },
            300,
            80,
        );
        let net = generate(&cfg, 2).unwrap();
        let mut inter = 0;
        for gid in 0..net.neurons() {
            let v = net.voxel_of(gid);
            for s in net.row(gid) {
                if net.voxel_of(s.source) != v {
                    inter += 1;
                    assert!(s.kind.is_excitatory());
                    assert!(net.population_of(s.source).excitatory);
                }
            }
        }
        assert!(inter > 0);
    }

    #[test]
    fn zero_inter_fraction_keeps_inputs_local() {
        let mut cfg = small(
            ConnectomeSource::Ring {
                voxels: 3,
                region: Region::Subcortex,
            },
            100,
            20,
        );
        cfg.regions.subcortex.inter_fraction = 0.0;
        let net = generate(&cfg, 3).unwrap();
        for gid in 0..net.neurons() {
            assert!(net.row(gid).iter().all(|s| net.voxel_of(s.source) == net.voxel_of(gid)));
        }
    }

    #[test]
    fn single_edge_sources_every_inter_pick() {
        let text = "voxels 2\n0 subcortex 50\n1 subcortex 50\nedges 1\n0 1 1\n";
        let graph = parse_connectome(text, Path::new("t"), IntraCircuit::default()).unwrap();
        let mut cfg = small(ConnectomeSource::File { path: "unused".into() }, 0, 10);
        cfg.scale = NeuronScale::FromSource;
        cfg.regions.subcortex.inter_fraction = 1.0;
        cfg.regions.subcortex.in_degree = 10;
        let mut voxels = layout_voxels(&graph, &cfg).unwrap();
        // voxel 0 has no inbound edge; keep it local
        voxels[0].inter_fraction = 0.0;
        let net = sample_synapses(&graph, &voxels, ReceptorMode::Both, 4).unwrap();
        for gid in 50..100 {
            assert!(net.row(gid).iter().all(|s| s.source < 50));
        }
    }

    #[test]
    fn missing_inbound_edges_is_a_config_error() {
        let text = "voxels 2\n0 subcortex 50\n1 subcortex 50\nedges 1\n0 1 1\n";
        let graph = parse_connectome(text, Path::new("t"), IntraCircuit::default()).unwrap();
        let mut cfg = small(ConnectomeSource::File { path: "unused".into() }, 0, 10);
        cfg.scale = NeuronScale::FromSource;
        let voxels = layout_voxels(&graph, &cfg).unwrap();
        let err = sample_synapses(&graph, &voxels, ReceptorMode::Both, 4).unwrap_err();
        assert!(err.to_string().contains("voxel 0"), "{err}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let cfg = small(
            ConnectomeSource::UniformRandom {
                voxels: 6,
                region: Region::Brainstem,
                sparsity: 0.5,
            },
            150,
            40,
        );
        let a = generate(&cfg, 9).unwrap();
        let b = generate(&cfg, 9).unwrap();
        assert_eq!(a.synapses, b.synapses);
        assert_eq!(a.conductance, b.conductance);
        let c = generate(&cfg, 10).unwrap();
        assert_ne!(a.synapses, c.synapses);
    }

    #[test]
    fn mean_out_degree_matches_in_degree() {
        let cfg = small(
            ConnectomeSource::DtiLike {
                voxels: 20,
                sparsity: 0.2,
                length_scale: 0.2,
                region_mix: [0.0, 1.0, 0.0, 0.0],
            },
            1000,
            100,
        );
        let net = generate(&cfg, 5).unwrap();
        assert!(net.synapse_count() >= 100_000);
        let stats = net.out_degree_stats();
        assert!((stats.mean - 100.0).abs() / 100.0 < 0.02, "{stats:?}");
    }

    #[test]
    fn cortex_rows_follow_region_in_degree() {
        let text = "voxels 2\n0 cortex 400\n1 cerebellum 400\nedges 2\n0 1 1\n1 0 1\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, text).unwrap();
        let mut cfg = NetworkConfig {
            connectome: ConnectomeSource::File { path },
            scale: NeuronScale::FromSource,
            regions: RegionTable::default(),
            ..Default::default()
        };
        cfg.regions.cortex.in_degree = 300;
        let net = generate(&cfg, 6).unwrap();
        for gid in 0..net.neurons() {
            let want = match net.population_of(gid).region {
                Region::Cortex => 300,
                _ => 100,
            };
            assert_eq!(net.row(gid).len(), want);
        }
        assert_eq!(net.populations.iter().filter(|p| p.voxel == 0).count(), 8);
    }

    #[test]
    fn split_mode_uses_single_receptors() {
        let mut cfg = small(
            ConnectomeSource::Ring {
                voxels: 3,
                region: Region::Subcortex,
            },
            100,
            30,
        );
        cfg.receptor_mode = ReceptorMode::Split { fast_fraction: 0.5 };
        let net = generate(&cfg, 7).unwrap();
        let kinds: std::collections::BTreeSet<_> = net.synapses.iter().map(|s| s.kind).collect();
        assert!(kinds.iter().all(|k| k.receptors().len() == 1));
        assert_eq!(kinds.len(), 4);
    }
}
