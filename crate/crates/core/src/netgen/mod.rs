//! Voxel-structured network construction.
//!
//! A network is built in three stages: a voxel-level [`ConnectomeGraph`]
//! (from file or a synthetic generator), a population layout per voxel
//! ([`VoxelSpec`]), and neuron-level synapse sampling ([`sample_synapses`]).
//! The sampled network is then cut into per-worker [`ConnectionTable`]s.

mod connectome;
mod sample;
mod tables;

pub use connectome::{
    build_connectome, dti_like, parse_connectome, read_connectome, ring, two_block, uniform_random,
    write_connectome, ConnectomeGraph, ConnectomeSource, Edge, VoxelInfo,
};
pub use sample::{sample_synapses, DegreeStats, Network, Population, Synapse, SynapseKind};
pub use tables::{decode_table, emit_tables, encode_table, read_table, write_table, ConnectionTable, NeuronRow, Placement, TABLE_VERSION};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::assim::LogNormal;
use crate::error::{Error, Result};
use crate::model::{NeuronParams, OuParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Cortex,
    #[default]
    Subcortex,
    Brainstem,
    Cerebellum,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Cortex, Region::Subcortex, Region::Brainstem, Region::Cerebellum];

    pub fn name(self) -> &'static str {
        match self {
            Region::Cortex => "cortex",
            Region::Subcortex => "subcortex",
            Region::Brainstem => "brainstem",
            Region::Cerebellum => "cerebellum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name().eq_ignore_ascii_case(s))
    }

    pub fn default_params(self) -> RegionParams {
        let (in_degree, inter_fraction) = match self {
            Region::Cortex => (1000, 2.0 / 7.0),
            Region::Subcortex => (1000, 6.0 / 25.0),
            Region::Brainstem => (100, 14.0 / 25.0),
            Region::Cerebellum => (100, 16.0 / 125.0),
        };
        RegionParams {
            in_degree,
            inter_fraction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionParams {
    /// Input synapses per neuron (K).
    pub in_degree: u32,
    /// Fraction of inputs drawn from other voxels (rho).
    pub inter_fraction: f64,
}

/// Fields missing from a configured region take that region's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PartialRegionTable")]
pub struct RegionTable {
    pub cortex: RegionParams,
    pub subcortex: RegionParams,
    pub brainstem: RegionParams,
    pub cerebellum: RegionParams,
}

impl Default for RegionTable {
    fn default() -> Self {
        RegionTable {
            cortex: Region::Cortex.default_params(),
            subcortex: Region::Subcortex.default_params(),
            brainstem: Region::Brainstem.default_params(),
            cerebellum: Region::Cerebellum.default_params(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialRegionParams {
    in_degree: Option<u32>,
    inter_fraction: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PartialRegionTable {
    cortex: Option<PartialRegionParams>,
    subcortex: Option<PartialRegionParams>,
    brainstem: Option<PartialRegionParams>,
    cerebellum: Option<PartialRegionParams>,
}

impl From<PartialRegionTable> for RegionTable {
    fn from(t: PartialRegionTable) -> Self {
        let merge = |r: Region, p: Option<PartialRegionParams>| {
            let d = r.default_params();
            p.map_or(d, |p| RegionParams {
                in_degree: p.in_degree.unwrap_or(d.in_degree),
                inter_fraction: p.inter_fraction.unwrap_or(d.inter_fraction),
            })
        };
        RegionTable {
            cortex: merge(Region::Cortex, t.cortex),
            subcortex: merge(Region::Subcortex, t.subcortex),
            brainstem: merge(Region::Brainstem, t.brainstem),
            cerebellum: merge(Region::Cerebellum, t.cerebellum),
        }
    }
}

impl RegionTable {
    pub fn get(&self, r: Region) -> RegionParams {
        match r {
            Region::Cortex => self.cortex,
            Region::Subcortex => self.subcortex,
            Region::Brainstem => self.brainstem,
            Region::Cerebellum => self.cerebellum,
        }
    }

    /// Sets the same in-degree on every region.
    pub fn with_in_degree(mut self, k: u32) -> Self {
        for p in [&mut self.cortex, &mut self.subcortex, &mut self.brainstem, &mut self.cerebellum] {
            p.in_degree = k;
        }
        self
    }
}

/// Layered population structure of a cortex voxel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrocolumnSpec {
    pub populations: Vec<String>,
    pub excitatory: Vec<bool>,
    pub fractions: Vec<f64>,
    /// `probability[target][source]`
    pub probability: Vec<Vec<f64>>,
}

const DEFAULT_MICROCOLUMN: &str = include_str!("../../data/microcolumn.toml");

impl Default for MicrocolumnSpec {
    fn default() -> Self {
        toml::from_str(DEFAULT_MICROCOLUMN).expect("bundled micro-column table parses")
    }
}

impl MicrocolumnSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.populations.len();
        if n == 0 || !n.is_multiple_of(2) {
            return Err(Error::config("micro-column needs a nonzero, even number of populations"));
        }
        if self.excitatory.len() != n || self.fractions.len() != n || self.probability.len() != n {
            return Err(Error::config("micro-column arrays disagree in length"));
        }
        for (i, e) in self.excitatory.iter().enumerate() {
            if *e != (i % 2 == 0) {
                return Err(Error::config("micro-column populations must alternate E, I per layer"));
            }
        }
        if self.probability.iter().any(|row| row.len() != n || row.iter().any(|&p| !(p >= 0.0))) {
            return Err(Error::config("micro-column probability matrix must be square and nonnegative"));
        }
        if self.fractions.iter().any(|&f| !(f >= 0.0)) || !(self.fractions.iter().sum::<f64>() > 0.0) {
            return Err(Error::config("micro-column fractions must be nonnegative with positive sum"));
        }
        Ok(())
    }

    /// Layer tag of population `i` (the name without its trailing E/I).
    pub fn layer(&self, i: usize) -> String {
        let name = &self.populations[i];
        name.trim_end_matches(['E', 'I']).to_string()
    }
}

/// Within-voxel population-to-population connection structure per region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntraCircuit {
    pub microcolumn: MicrocolumnSpec,
    /// `[target][source]` relative probability for the (E, I) pair of
    /// non-cortex voxels.
    pub two_population: [[f64; 2]; 2],
}

impl Default for IntraCircuit {
    fn default() -> Self {
        IntraCircuit {
            microcolumn: MicrocolumnSpec::default(),
            two_population: [[1.0, 1.0], [1.0, 1.0]],
        }
    }
}

/// Synapse weight distribution (normal, truncated at zero).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightDist {
    pub mean: f64,
    pub spread: f64,
}

/// Conductance prior of one population type, as per-receptor medians (nS)
/// and log-space spreads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConductancePrior {
    pub median: [f64; 4],
    pub spread: [f64; 4],
    /// Medians are quoted for this in-degree and rescaled by
    /// `reference_in_degree / K` for the actual voxel.
    pub reference_in_degree: u32,
}

impl ConductancePrior {
    pub fn hyper(&self, in_degree: u32) -> [LogNormal; 4] {
        let f = self.reference_in_degree as f64 / in_degree.max(1) as f64;
        std::array::from_fn(|u| LogNormal::from_median(self.median[u] * f, self.spread[u]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationParams {
    pub neuron: NeuronParams,
    pub ou: OuParams,
    pub conductance: ConductancePrior,
    pub weight: WeightDist,
}

impl Default for PopulationParams {
    fn default() -> Self {
        PopulationParams {
            neuron: NeuronParams::default(),
            ou: OuParams::default(),
            conductance: ConductancePrior {
                median: [0.2, 0.005, 3.0, 0.09],
                spread: [0.1; 4],
                reference_in_degree: 100,
            },
            weight: WeightDist {
                mean: 1.0,
                spread: 0.0,
            },
        }
    }
}

/// Per-population parameter adjustment; unset selectors match everything.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationOverride {
    pub region: Option<Region>,
    pub layer: Option<String>,
    pub excitatory: Option<bool>,
    pub voxel: Option<u32>,
    /// Multiplies the conductance medians.
    pub conductance_factor: Option<[f64; 4]>,
    pub ou: Option<OuParams>,
    pub weight: Option<WeightDist>,
    pub neuron: Option<NeuronParams>,
}

impl PopulationOverride {
    fn matches(&self, voxel: u32, region: Region, layer: Option<&str>, excitatory: bool) -> bool {
        self.region.is_none_or(|r| r == region)
            && self.voxel.is_none_or(|v| v == voxel)
            && self.excitatory.is_none_or(|e| e == excitatory)
            && self.layer.as_deref().is_none_or(|l| Some(l) == layer)
    }

    fn apply(&self, p: &mut PopulationParams) {
        if let Some(f) = self.conductance_factor {
            for u in 0..4 {
                p.conductance.median[u] *= f[u];
            }
        }
        if let Some(ou) = self.ou {
            p.ou = ou;
        }
        if let Some(w) = self.weight {
            p.weight = w;
        }
        if let Some(n) = self.neuron {
            p.neuron = n;
        }
    }
}

/// How inter/intra synapses map onto receptor channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReceptorMode {
    /// Every excitatory synapse drives AMPA and NMDA; every inhibitory one
    /// drives GABAa and GABAb.
    #[default]
    Both,
    /// Each synapse drives one channel: the fast one (AMPA / GABAa) with
    /// probability `fast_fraction`.
    Split { fast_fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronScale {
    /// Counts as given by the connectome file.
    FromSource,
    PerVoxel(u32),
    /// Total distributed in proportion to the voxels' gray-matter weights.
    Total(u64),
}

impl Default for NeuronScale {
    fn default() -> Self {
        NeuronScale::PerVoxel(1000)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub connectome: ConnectomeSource,
    pub scale: NeuronScale,
    pub regions: RegionTable,
    pub excitatory: PopulationParams,
    pub inhibitory: PopulationParams,
    pub overrides: Vec<PopulationOverride>,
    pub receptor_mode: ReceptorMode,
    /// Replaces the bundled micro-column table.
    pub microcolumn_file: Option<PathBuf>,
    pub two_population: [[f64; 2]; 2],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            connectome: ConnectomeSource::Ring {
                voxels: 4,
                region: Region::Subcortex,
            },
            scale: NeuronScale::default(),
            regions: RegionTable::default().with_in_degree(100),
            excitatory: PopulationParams::default(),
            inhibitory: PopulationParams::default(),
            overrides: Vec::new(),
            receptor_mode: ReceptorMode::Both,
            microcolumn_file: None,
            two_population: [[1.0, 1.0], [1.0, 1.0]],
        }
    }
}

impl NetworkConfig {
    pub fn intra_circuit(&self) -> Result<IntraCircuit> {
        let microcolumn = match &self.microcolumn_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
            None => MicrocolumnSpec::default(),
        };
        microcolumn.validate()?;
        Ok(IntraCircuit {
            microcolumn,
            two_population: self.two_population,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for r in Region::ALL {
            let p = self.regions.get(r);
            if p.in_degree == 0 {
                return Err(Error::config(format!("{}: in-degree must be at least 1", r.name())));
            }
            if !(0.0..=1.0).contains(&p.inter_fraction) {
                return Err(Error::config(format!("{}: inter-voxel fraction outside [0, 1]", r.name())));
            }
        }
        if let ReceptorMode::Split { fast_fraction } = self.receptor_mode {
            if !(0.0..=1.0).contains(&fast_fraction) {
                return Err(Error::config("receptor split fraction outside [0, 1]"));
            }
        }
        if let ConnectomeSource::File { path } = &self.connectome {
            if !path.exists() {
                return Err(Error::config(format!("connectome file {} does not exist", path.display())));
            }
        }
        if self.two_population.iter().flatten().any(|&p| !(p >= 0.0)) {
            return Err(Error::config("two-population matrix must be nonnegative"));
        }
        Ok(())
    }
}

/// One population inside a voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationSpec {
    /// Index within the voxel.
    pub index: u32,
    pub excitatory: bool,
    pub fraction: f64,
    pub layer: Option<String>,
    pub params: PopulationParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelSpec {
    pub id: u32,
    pub region: Region,
    pub neurons: u32,
    pub in_degree: u32,
    pub inter_fraction: f64,
    pub populations: Vec<PopulationSpec>,
}

impl VoxelSpec {
    /// Number of inter-voxel picks per neuron: `ceil(rho K)`.
    pub fn inter_picks(&self) -> u32 {
        let x = self.inter_fraction * self.in_degree as f64;
        ((x - 1e-9).ceil().max(0.0) as u32).min(self.in_degree)
    }

    /// Neuron count per population (largest-remainder rounding, sums to
    /// `neurons`).
    pub fn population_sizes(&self) -> Vec<u32> {
        let total: f64 = self.populations.iter().map(|p| p.fraction).sum();
        let exact: Vec<f64> = self
            .populations
            .iter()
            .map(|p| p.fraction / total * self.neurons as f64)
            .collect();
        let mut sizes: Vec<u32> = exact.iter().map(|x| x.floor() as u32).collect();
        let mut left = self.neurons - sizes.iter().sum::<u32>();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for i in order {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        sizes
    }
}

/// Lays out populations in every voxel and fixes neuron counts.
pub fn layout_voxels(graph: &ConnectomeGraph, cfg: &NetworkConfig) -> Result<Vec<VoxelSpec>> {
    let counts: Vec<u32> = match cfg.scale {
        NeuronScale::FromSource => graph.voxels.iter().map(|v| v.neuron_count).collect(),
        NeuronScale::PerVoxel(n) => vec![n; graph.voxels.len()],
        NeuronScale::Total(total) => distribute(total, &graph.voxels.iter().map(|v| v.gm_weight).collect::<Vec<_>>())?,
    };
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total > u32::MAX as u64 {
        return Err(Error::config("network exceeds 2^32 neurons"));
    }

    let mc = &graph.intra.microcolumn;
    let mut voxels = Vec::with_capacity(graph.voxels.len());
    for (id, (info, &n)) in graph.voxels.iter().zip(&counts).enumerate() {
        let id = id as u32;
        if n == 0 {
            return Err(Error::config(format!("voxel {id} has no neurons")));
        }
        let rp = cfg.regions.get(info.region);
        if rp.in_degree as u64 > total - 1 {
            return Err(Error::config(format!(
                "voxel {id}: in-degree {} exceeds the {} other neurons in the network",
                rp.in_degree,
                total - 1
            )));
        }
        let layers: Vec<(bool, f64, Option<String>)> = match info.region {
            Region::Cortex => (0..mc.populations.len())
                .map(|i| (mc.excitatory[i], mc.fractions[i], Some(mc.layer(i))))
                .collect(),
            _ => vec![(true, 0.8, None), (false, 0.2, None)],
        };
        let populations = layers
            .into_iter()
            .enumerate()
            .map(|(i, (excitatory, fraction, layer))| {
                let mut params = if excitatory {
                    cfg.excitatory.clone()
                } else {
                    cfg.inhibitory.clone()
                };
                for o in &cfg.overrides {
                    if o.matches(id, info.region, layer.as_deref(), excitatory) {
                        o.apply(&mut params);
                    }
                }
                PopulationSpec {
                    index: i as u32,
                    excitatory,
                    fraction,
                    layer,
                    params,
                }
            })
            .collect();
        voxels.push(VoxelSpec {
            id,
            region: info.region,
            neurons: n,
            in_degree: rp.in_degree,
            inter_fraction: rp.inter_fraction,
            populations,
        });
    }
    Ok(voxels)
}

fn distribute(total: u64, weights: &[f64]) -> Result<Vec<u32>> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) || weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::config("gray-matter weights must be nonnegative with positive sum"));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let mut left = total - out.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for i in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    Ok(out.into_iter().map(|c| c as u32).collect())
}

/// Builds the connectome, lays out voxels, and samples every synapse.
pub fn generate(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let graph = build_connectome(&cfg.connectome, cfg.intra_circuit()?, seed)?;
    let voxels = layout_voxels(&graph, cfg)?;
    sample_synapses(&graph, &voxels, cfg.receptor_mode, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_defaults() {
        assert_eq!(Region::Cortex.default_params().in_degree, 1000);
        assert_eq!(Region::Cerebellum.default_params().in_degree, 100);
        assert_eq!(Region::Subcortex.default_params().inter_fraction, 6.0 / 25.0);
        assert_eq!(Region::Brainstem.default_params().inter_fraction, 14.0 / 25.0);
        assert_eq!(Region::Cerebellum.default_params().inter_fraction, 16.0 / 125.0);
    }

    #[test]
    fn cortex_inter_pick_count() {
        let v = VoxelSpec {
            id: 0,
            region: Region::Cortex,
            neurons: 10,
            in_degree: 1000,
            inter_fraction: 2.0 / 7.0,
            populations: vec![],
        };
        assert_eq!(v.inter_picks(), 286);
        let exact = VoxelSpec {
            inter_fraction: 0.25,
            in_degree: 100,
            ..v
        };
        assert_eq!(exact.inter_picks(), 25);
    }

    #[test]
    fn bundled_microcolumn_is_valid() {
        let mc = MicrocolumnSpec::default();
        mc.validate().unwrap();
        assert_eq!(mc.populations.len(), 8);
        assert_eq!(mc.layer(0), "L23");
        assert_eq!(mc.layer(7), "L6");
    }

    #[test]
    fn population_sizes_sum_exactly() {
        let graph = ring(3, Region::Cortex, IntraCircuit::default());
        let cfg = NetworkConfig {
            scale: NeuronScale::PerVoxel(997),
            ..Default::default()
        };
        for v in layout_voxels(&graph, &cfg).unwrap() {
            assert_eq!(v.population_sizes().iter().sum::<u32>(), 997);
            assert_eq!(v.populations.len(), 8);
        }
        let graph = ring(3, Region::Brainstem, IntraCircuit::default());
        let v = &layout_voxels(&graph, &cfg).unwrap()[0];
        let sizes = v.population_sizes();
        assert_eq!(sizes, vec![798, 199]);
        assert!(v.populations[0].excitatory && !v.populations[1].excitatory);
    }

    #[test]
    fn total_scale_follows_gm_weights() {
        assert_eq!(distribute(10, &[1.0, 1.0, 2.0]).unwrap(), vec![3, 2, 5]);
        assert_eq!(distribute(7, &[1.0]).unwrap(), vec![7]);
    }

    #[test]
    fn overrides_select_populations() {
        let graph = ring(2, Region::Subcortex, IntraCircuit::default());
        let cfg = NetworkConfig {
            overrides: vec![PopulationOverride {
                excitatory: Some(true),
                conductance_factor: Some([2.0, 1.0, 1.0, 1.0]),
                ..Default::default()
            }],
            ..Default::default()
        };
        let v = layout_voxels(&graph, &cfg).unwrap();
        let base = PopulationParams::default().conductance.median[0];
        assert_eq!(v[0].populations[0].params.conductance.median[0], 2.0 * base);
        assert_eq!(v[0].populations[1].params.conductance.median[0], base);
    }

    #[test]
    fn in_degree_bounded_by_network() {
        let graph = ring(2, Region::Subcortex, IntraCircuit::default());
        let cfg = NetworkConfig {
            scale: NeuronScale::PerVoxel(10),
            ..Default::default()
        };
        assert!(layout_voxels(&graph, &cfg).is_err());
    }
}
