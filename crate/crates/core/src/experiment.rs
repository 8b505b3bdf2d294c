//! Scaling, rate-sweep and topology experiments over generated networks.
//!
//! Every grid point builds its network from a seed derived from the
//! experiment seed and the point's label, runs `steps` steps and aggregates
//! the timings of the last `window` steps.

use serde::{Deserialize, Serialize};

use crate::engine::{aggregate_timings, calibrate, Clock, CostModel, EngineConfig, Simulation, TimingReport};
use crate::error::{Error, Result};
use crate::model::Receptor;
use crate::netgen::{emit_tables, generate, ConnectomeSource, Network, NetworkConfig, NeuronScale, Region, RegionTable};
use crate::partition::{estimate_traffic, partition, Capacity, PartitionMap, PartitionMethod};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    WeakScaling,
    StrongScaling,
    RateSweep,
    TopologyCompare,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::WeakScaling => "weak_scaling",
            ExperimentKind::StrongScaling => "strong_scaling",
            ExperimentKind::RateSweep => "rate_sweep",
            ExperimentKind::TopologyCompare => "topology_compare",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ExperimentKind::WeakScaling,
            ExperimentKind::StrongScaling,
            ExperimentKind::RateSweep,
            ExperimentKind::TopologyCompare,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

/// How grid points are timed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ExperimentClock {
    Measured,
    Modeled(CostModel),
    /// Modeled with costs measured once on this host before the grid runs.
    #[default]
    Calibrated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Worker counts; sweeps and topology comparisons use the first entry.
    pub workers: Vec<usize>,
    /// Neurons per worker for weak scaling, total otherwise.
    pub neurons: u64,
    /// Voxels per worker for weak scaling, total otherwise.
    pub voxels: u32,
    pub in_degree: u32,
    pub region: Region,
    pub steps: u64,
    pub window: u64,
    /// Conductance factors of the rate sweep.
    pub factors: Vec<f64>,
    pub sweep_receptors: Vec<Receptor>,
    /// Connection probability of the DTI-like topology.
    pub sparsity: f64,
    /// Rate (Hz) assumed when estimating traffic for partitioning.
    pub rate_estimate: f64,
    pub capacity: Capacity,
    pub clock: ExperimentClock,
    pub engine: EngineConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::StrongScaling,
            workers: vec![1, 2, 4, 8],
            neurons: 20_000,
            voxels: 16,
            in_degree: 100,
            region: Region::Subcortex,
            steps: 1000,
            window: 800,
            factors: vec![1.0, 1.25, 1.5, 1.75, 2.0],
            sweep_receptors: vec![Receptor::Ampa, Receptor::Nmda],
            sparsity: 0.02,
            rate_estimate: 7.0,
            capacity: Capacity::default(),
            clock: ExperimentClock::default(),
            engine: EngineConfig::default(),
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers.is_empty() || self.workers.contains(&0) {
            return Err(Error::config("experiment needs a nonempty worker grid without zeros"));
        }
        if self.voxels == 0 || self.neurons < self.voxels as u64 {
            return Err(Error::config("experiment needs at least one neuron per voxel"));
        }
        if self.window == 0 || self.window > self.steps {
            return Err(Error::config("window must lie in 1..=steps"));
        }
        if self.kind == ExperimentKind::RateSweep && self.factors.is_empty() {
            return Err(Error::config("rate sweep needs at least one factor"));
        }
        self.engine.validate()
    }
}

/// One grid point of an experiment report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub experiment: String,
    pub label: String,
    pub workers: u32,
    pub voxels: u32,
    pub neurons: u64,
    pub synapses: u64,
    pub factor: f64,
    /// Partition objective (max inbound estimated traffic, bytes per step).
    pub objective: f64,
    pub rate_hz: f64,
    pub t_sim: f64,
    pub t_com: f64,
    pub t_send: f64,
    pub t_rec: f64,
    pub hat_sim: f64,
    pub hat_com: f64,
    pub hat_send: f64,
    pub hat_rec: f64,
    pub t_max: f64,
    pub t_std: f64,
    pub time_to_solution: f64,
    pub flops_membrane: f64,
    pub flops_inner: f64,
    pub flops_outer: f64,
    pub flops_gating: f64,
    pub flops_current: f64,
    pub bw_send_intra: f64,
    pub bw_send_inter: f64,
    pub bytes_sent_intra: u64,
    pub bytes_sent_inter: u64,
    pub bytes_sent: u64,
    pub spikes: u64,
}

impl GridRow {
    fn fill(&mut self, r: &TimingReport, dt: f64) {
        self.t_sim = r.t_sim;
        self.t_com = r.t_com;
        self.t_send = r.t_send;
        self.t_rec = r.t_rec;
        self.hat_sim = r.hat_sim;
        self.hat_com = r.hat_com;
        self.hat_send = r.hat_send;
        self.hat_rec = r.hat_rec;
        self.t_max = r.t_max;
        self.t_std = r.t_std;
        self.time_to_solution = r.time_to_solution(dt);
        self.flops_membrane = r.flops_membrane;
        self.flops_inner = r.flops_inner;
        self.flops_outer = r.flops_outer;
        self.flops_gating = r.flops_gating;
        self.flops_current = r.flops_current;
        self.bw_send_intra = r.bw_send_intra;
        self.bw_send_inter = r.bw_send_inter;
        self.bytes_sent_intra = r.bytes_sent_intra;
        self.bytes_sent_inter = r.bytes_sent_inter;
        self.bytes_sent = r.bytes_sent;
        self.spikes = r.spikes;
    }
}

fn network_config(source: ConnectomeSource, voxels: u32, neurons: u64, in_degree: u32) -> NetworkConfig {
    NetworkConfig {
        connectome: source,
        scale: NeuronScale::PerVoxel((neurons / voxels as u64).max(1) as u32),
        regions: RegionTable::default().with_in_degree(in_degree),
        ..Default::default()
    }
}

fn ring_source(voxels: u32, region: Region) -> ConnectomeSource {
    ConnectomeSource::Ring { voxels, region }
}

fn point_seed(cfg: &ExperimentConfig, label: &str) -> u64 {
    let mut h = rng::hash_key(&[cfg.seed, cfg.kind as u64]);
    for b in label.bytes() {
        h = rng::hash_key(&[h, b as u64]);
    }
    h
}

/// Partitions `network` with `method` using a uniform rate estimate.
pub fn place(network: &Network, workers: usize, method: &PartitionMethod, cfg: &ExperimentConfig) -> Result<PartitionMap> {
    if workers == 1 {
        return Ok(PartitionMap::single(network.populations.len()));
    }
    let rates = vec![cfg.rate_estimate; network.populations.len()];
    let g = estimate_traffic(network, &rates, cfg.engine.dt as f64)?;
    partition(&g, workers, &cfg.capacity, method)
}

/// Runs one configuration and reports its timings; `tune` may rescale
/// parameters before the run.
pub fn measure(
    network: &Network,
    placement: &PartitionMap,
    cfg: &ExperimentConfig,
    seed: u64,
    tune: impl FnMut(&crate::netgen::NeuronRow, &mut crate::model::NeuronParams),
) -> Result<(TimingReport, f64)> {
    let tables = emit_tables(network, placement)?;
    let engine = EngineConfig {
        seed,
        record_raster: false,
        record_timings: true,
        trace: Vec::new(),
        ..cfg.engine.clone()
    };
    let mut sim = Simulation::new(&tables, engine)?;
    drop(tables);
    sim.update_params(tune);
    sim.run(cfg.steps)?;
    let out = sim.take_output();
    let report = aggregate_timings(&out.timings, cfg.window)?;
    let (_, rate) = out.rates.mean_rates(cfg.window as usize);
    Ok((report, rate))
}

fn row(cfg: &ExperimentConfig, label: String, network: &Network, workers: usize, p: &PartitionMap) -> GridRow {
    GridRow {
        experiment: cfg.kind.name().to_string(),
        label,
        workers: workers as u32,
        voxels: network.voxels.len() as u32,
        neurons: network.neurons() as u64,
        synapses: network.synapse_count(),
        factor: 1.0,
        objective: p.objective as f64 * 1e-6,
        ..Default::default()
    }
}

/// Neurons of the single-worker calibration network.
const CALIBRATION_NEURONS: u64 = 20_000;
const CALIBRATION_STEPS: u64 = 300;

/// The engine clock the grid runs with.
pub fn resolve_clock(cfg: &ExperimentConfig) -> Result<Clock> {
    match cfg.clock {
        ExperimentClock::Measured => Ok(Clock::Measured),
        ExperimentClock::Modeled(m) => Ok(Clock::Modeled(m)),
        ExperimentClock::Calibrated => {
            let neurons = CALIBRATION_NEURONS.min(cfg.neurons.max(1000));
            let net = generate(
                &network_config(ring_source(2, cfg.region), 2, neurons, cfg.in_degree),
                point_seed(cfg, "calibration"),
            )?;
            let tables = emit_tables(&net, &PartitionMap::single(net.populations.len()))?;
            let m = calibrate(&tables, &cfg.engine, CALIBRATION_STEPS)?;
            log::info!("calibrated costs (ns): {m:?}");
            Ok(Clock::Modeled(m))
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let clock = resolve_clock(cfg)?;
    let cfg = &ExperimentConfig {
        engine: EngineConfig {
            clock,
            ..cfg.engine.clone()
        },
        ..cfg.clone()
    };
    let dt = cfg.engine.dt as f64;
    let mut rows = Vec::new();
    match cfg.kind {
        ExperimentKind::StrongScaling => {
            let seed = point_seed(cfg, "network");
            let net = generate(
                &network_config(ring_source(cfg.voxels, cfg.region), cfg.voxels, cfg.neurons, cfg.in_degree),
                seed,
            )?;
            for &w in &cfg.workers {
                let p = place(&net, w, &PartitionMethod::Greedy, cfg)?;
                let (rep, rate) = measure(&net, &p, cfg, seed, |_, _| {})?;
                let mut r = row(cfg, format!("workers={w}"), &net, w, &p);
                r.rate_hz = rate;
                r.fill(&rep, dt);
                log::info!("{}: T_com^ = {:.3e} s, rate {rate:.2} Hz", r.label, r.hat_com);
                rows.push(r);
            }
        }
        ExperimentKind::WeakScaling => {
            for &w in &cfg.workers {
                let voxels = cfg.voxels * w as u32;
                let label = format!("workers={w}");
                let seed = point_seed(cfg, &label);
                let net = generate(
                    &network_config(ring_source(voxels, cfg.region), voxels, cfg.neurons * w as u64, cfg.in_degree),
                    seed,
                )?;
                let p = place(&net, w, &PartitionMethod::Greedy, cfg)?;
                let (rep, rate) = measure(&net, &p, cfg, seed, |_, _| {})?;
                let mut r = row(cfg, label, &net, w, &p);
                r.rate_hz = rate;
                r.fill(&rep, dt);
                log::info!("{}: T_com^ = {:.3e} s, sent {} B", r.label, r.hat_com, r.bytes_sent);
                rows.push(r);
            }
        }
        ExperimentKind::RateSweep => {
            let w = cfg.workers[0];
            let seed = point_seed(cfg, "network");
            let net = generate(
                &network_config(ring_source(cfg.voxels, cfg.region), cfg.voxels, cfg.neurons, cfg.in_degree),
                seed,
            )?;
            let p = place(&net, w, &PartitionMethod::Greedy, cfg)?;
            for &f in &cfg.factors {
                let scaled: Vec<usize> = cfg.sweep_receptors.iter().map(|r| r.index()).collect();
                let (rep, rate) = measure(&net, &p, cfg, seed, |_, params| {
                    for &u in &scaled {
                        params.conductance[u] *= f as f32;
                    }
                })?;
                let mut r = row(cfg, format!("factor={f}"), &net, w, &p);
                r.factor = f;
                r.rate_hz = rate;
                r.fill(&rep, dt);
                log::info!("{}: rate {rate:.2} Hz, T_sim {:.3e} s", r.label, r.t_sim);
                rows.push(r);
            }
        }
        ExperimentKind::TopologyCompare => {
            let w = cfg.workers[0];
            let dti = ConnectomeSource::DtiLike {
                voxels: cfg.voxels,
                sparsity: cfg.sparsity,
                length_scale: 0.15,
                region_mix: std::array::from_fn(|i| if Region::ALL[i] == cfg.region { 1.0 } else { 0.0 }),
            };
            let seed = point_seed(cfg, "network");
            let ring = generate(
                &network_config(ring_source(cfg.voxels, cfg.region), cfg.voxels, cfg.neurons, cfg.in_degree),
                seed,
            )?;
            // Voxel sizes follow gray-matter weights; the ring's weights are uniform.
            let dti = NetworkConfig {
                scale: NeuronScale::Total(cfg.neurons),
                ..network_config(dti, cfg.voxels, cfg.neurons, cfg.in_degree)
            };
            let dti = generate(&dti, seed)?;
            let cases = [
                ("artificial_brain", &ring, PartitionMethod::Sequential),
                ("dti_greedy", &dti, PartitionMethod::Greedy),
                ("dti_sequential", &dti, PartitionMethod::Sequential),
            ];
            for (label, net, method) in cases {
                let p = place(net, w, &method, cfg)?;
                let (rep, rate) = measure(net, &p, cfg, seed, |_, _| {})?;
                let mut r = row(cfg, label.to_string(), net, w, &p);
                r.rate_hz = rate;
                r.fill(&rep, dt);
                log::info!("{label}: T_sim {:.3e} s, objective {:.1} B/step", r.t_sim, r.objective);
                rows.push(r);
            }
        }
    }
    Ok(rows)
}

pub fn write_grid_csv<W: std::io::Write>(out: W, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_grid_csv<R: std::io::Read>(input: R) -> Result<Vec<GridRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("grid CSV: {e}"))))
        .collect()
}
