//! Hierarchical conductance hyper-parameters and ensemble assimilation of BOLD series.
//!
//! Each ensemble member is a copy of the surrogate network whose neuron
//! conductances are drawn from the member's hyper-parameters. Per window
//! every member is simulated, its BOLD is synthesized, and the members'
//! log-space location offsets are updated towards the observation. Members
//! then redraw their conductances from the updated hyper-parameters while
//! keeping their membrane and hemodynamic state.

mod enkf;
mod hyper;

use serde::{Deserialize, Serialize};

use crate::engine::{EngineConfig, Injection, Simulation, TransportKind};
use crate::error::{Error, Result};
use crate::hemo::{BoldConfig, BoldSynth};
use crate::model::Receptor;
use crate::netgen::{emit_tables, ConnectionTable, Network};
use crate::partition::PartitionMap;
use crate::rng;
pub use enkf::{enkf_update, mean_of, pearson, UpdateOptions, UpdateStats};
pub use hyper::{conductance_variate, sample_conductances, sample_population, HyperParams, LogNormal};

/// Populations whose location for `receptor` moves by one shared offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGroup {
    pub receptor: Receptor,
    pub populations: Vec<u32>,
}

/// One group per voxel acting on every population of that voxel.
pub fn voxel_groups(network: &Network, receptor: Receptor) -> Vec<ParamGroup> {
    let mut groups: Vec<ParamGroup> = (0..network.voxels.len())
        .map(|_| ParamGroup {
            receptor,
            populations: Vec::new(),
        })
        .collect();
    for p in &network.populations {
        groups[p.voxel as usize].populations.push(p.id);
    }
    groups
}

/// `base` with every group's location shifted by `offsets[g]`.
pub fn apply_offsets(base: &HyperParams, groups: &[ParamGroup], offsets: &[f64]) -> HyperParams {
    let mut h = base.clone();
    for (g, &o) in groups.iter().zip(offsets) {
        for &p in &g.populations {
            h.populations[p as usize][g.receptor.index()].location += o;
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssimConfig {
    pub members: usize,
    pub windows: usize,
    pub bold: BoldConfig,
    /// Posterior anomaly inflation.
    pub inflation: f64,
    /// Observation error std relative to the observed BOLD range.
    pub obs_noise: f64,
    /// Initial ensemble std of each log offset.
    pub prior_spread: f64,
    pub spread_floor: f64,
    /// Offsets are clamped into this interval.
    pub offset_bounds: (f64, f64),
    /// Observed window `k` is compared with predicted window `k - lag`.
    pub lag: usize,
    /// Windows pooled into the fit correlation.
    pub correlation_span: usize,
    /// Consecutive correlation drops reported as divergence.
    pub divergence_windows: usize,
    /// Windows simulated before the first update.
    pub warmup_windows: usize,
    /// Run members on scoped threads.
    pub parallel: bool,
}

impl Default for AssimConfig {
    fn default() -> Self {
        AssimConfig {
            members: 8,
            windows: 50,
            bold: BoldConfig::default(),
            inflation: 1.05,
            obs_noise: 0.05,
            prior_spread: 0.3,
            spread_floor: 1e-3,
            offset_bounds: (-0.7, 0.8),
            lag: 0,
            correlation_span: 20,
            divergence_windows: 5,
            warmup_windows: 2,
            parallel: false,
        }
    }
}

impl AssimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::config("assimilation needs at least 2 ensemble members"));
        }
        if !(self.inflation >= 1.0) || !(self.obs_noise > 0.0) || !(self.prior_spread >= 0.0) {
            return Err(Error::config("inflation >= 1, obs_noise > 0 and prior_spread >= 0 are required"));
        }
        if !(self.offset_bounds.0 < self.offset_bounds.1) {
            return Err(Error::config("offset_bounds must be an increasing interval"));
        }
        if self.correlation_span < 2 {
            return Err(Error::config("correlation_span must be at least 2"));
        }
        Ok(())
    }
}

/// The network all members share, with its stimulus.
pub struct Surrogate<'a> {
    pub network: &'a Network,
    pub engine: EngineConfig,
    pub injection: Injection,
    /// Prior hyper-parameters; group offsets are relative to these.
    pub base: HyperParams,
    pub groups: Vec<ParamGroup>,
}

impl<'a> Surrogate<'a> {
    /// Single-worker surrogate with per-voxel AMPA groups.
    pub fn new(network: &'a Network, engine: EngineConfig, injection: Injection) -> Self {
        Surrogate {
            network,
            engine,
            injection,
            base: network.hyper_params(),
            groups: voxel_groups(network, Receptor::Ampa),
        }
    }

    fn tables(&self) -> Result<Vec<ConnectionTable>> {
        emit_tables(self.network, &PartitionMap::single(self.network.populations.len()))
    }
}

/// One network instance advanced window by window.
struct Member {
    sim: Simulation,
    synth: BoldSynth,
    stream: u64,
}

impl Member {
    fn new(s: &Surrogate, tables: &[ConnectionTable], stream: u64, bold: &BoldConfig) -> Result<Self> {
        let cfg = EngineConfig {
            seed: stream,
            transport: TransportKind::Loopback,
            record_raster: false,
            record_timings: false,
            trace: Vec::new(),
            ..s.engine.clone()
        };
        let mut sim = Simulation::new(tables, cfg)?;
        sim.set_injection(s.injection.clone());
        let idx = sim.population_index();
        let synth = BoldSynth::new(bold.clone(), &idx.sizes, &idx.voxel, s.engine.dt)?;
        Ok(Member { sim, synth, stream })
    }

    /// Redraws conductances from `h`; variates stay fixed per member.
    fn resample(&mut self, network: &Network, h: &HyperParams) {
        let stream = self.stream;
        self.sim.update_params(|row, p| {
            let pop = &network.populations[row.population as usize];
            let i = row.global_id - pop.first;
            let dist = &h.populations[row.population as usize];
            for (u, d) in dist.iter().enumerate() {
                p.conductance[u] = d.draw(conductance_variate(stream, pop.id, i, u));
            }
        });
    }

    fn window(&mut self, steps: u64) -> Result<Vec<f64>> {
        self.sim.run(steps)?;
        let out = self.sim.take_output();
        let rows = self.synth.push_series(&out.rates.counts)?;
        rows.into_iter()
            .last()
            .ok_or_else(|| Error::config("window shorter than the BOLD sampling period"))
    }
}

fn run_window(members: &mut [Member], steps: u64, parallel: bool) -> Result<Vec<Vec<f64>>> {
    if !parallel {
        return members.iter_mut().map(|m| m.window(steps)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = members.iter_mut().map(|m| s.spawn(move || m.window(steps))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("member thread panicked".into()))))
            .collect()
    })
}

/// Simulates the surrogate with fixed hyper-parameters and returns one BOLD
/// row per window.
pub fn synthesize_bold(s: &Surrogate, h: &HyperParams, bold: &BoldConfig, windows: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let tables = s.tables()?;
    let mut m = Member::new(s, &tables, seed, bold)?;
    m.resample(s.network, h);
    (0..windows).map(|_| m.window(bold.window_steps)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub window: u64,
    pub group: u32,
    pub receptor: String,
    /// Ensemble-mean log offset.
    pub offset: f64,
    pub spread: f64,
    /// Resulting median factor relative to the prior.
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub window: u64,
    /// Pooled correlation of ensemble-mean and observed BOLD over the
    /// trailing span; NaN until defined.
    pub correlation: f64,
    pub rmse: f64,
    pub innovation_norm: f64,
    pub collapsed: u32,
    pub diverging: bool,
}

#[derive(Clone, Debug)]
pub struct AssimResult {
    pub trajectory: Vec<TrajectoryRow>,
    pub fit: Vec<FitRow>,
    /// Ensemble-mean offsets after the last window.
    pub offsets: Vec<f64>,
    pub hyper: HyperParams,
    /// Ensemble-mean predicted BOLD per window.
    pub predicted: Vec<Vec<f64>>,
}

impl AssimResult {
    pub fn final_correlation(&self) -> Option<f64> {
        self.fit.last().map(|f| f.correlation).filter(|c| c.is_finite())
    }
}

/// Tracks `observed` (`[window][voxel]`) with an ensemble of surrogates.
pub fn assimilate(observed: &[Vec<f64>], s: &Surrogate, cfg: &AssimConfig, seed: u64) -> Result<AssimResult> {
    cfg.validate()?;
    let voxels = s.network.voxels.len();
    if observed.iter().any(|r| r.len() != voxels) {
        return Err(Error::config(format!("observed BOLD must have {voxels} voxels per window")));
    }
    let windows = cfg.windows.min(observed.len());
    if windows <= cfg.lag {
        return Err(Error::config("not enough observed windows for the configured lag"));
    }
    let d = s.groups.len();
    let tables = s.tables()?;

    let mut offsets: Vec<Vec<f64>> = (0..cfg.members)
        .map(|m| {
            (0..d)
                .map(|g| {
                    let xi = rng::normal(&[seed, rng::domain::ENSEMBLE, u64::MAX, m as u64, g as u64]);
                    (cfg.prior_spread * xi).clamp(cfg.offset_bounds.0, cfg.offset_bounds.1)
                })
                .collect()
        })
        .collect();
    let mut members = (0..cfg.members)
        .map(|m| {
            let stream = rng::hash_key(&[seed, rng::domain::ENSEMBLE, m as u64]);
            let mut mem = Member::new(s, &tables, stream, &cfg.bold)?;
            mem.resample(s.network, &apply_offsets(&s.base, &s.groups, &offsets[m]));
            Ok(mem)
        })
        .collect::<Result<Vec<_>>>()?;

    let (lo, hi) = observed[..windows]
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let noise = cfg.obs_noise * (hi - lo).max(1e-6);
    let obs_var = vec![noise * noise; voxels];

    let mut result = AssimResult {
        trajectory: Vec::new(),
        fit: Vec::new(),
        offsets: Vec::new(),
        hyper: s.base.clone(),
        predicted: Vec::new(),
    };
    let mut drops = 0usize;
    let mut last_corr = f64::NAN;
    for w in 0..windows - cfg.lag {
        let predicted = run_window(&mut members, cfg.bold.window_steps, cfg.parallel)?;
        let mean_pred = mean_of(&predicted);
        let y = &observed[w + cfg.lag];
        let rmse = (y.iter().zip(&mean_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / voxels as f64).sqrt();
        result.predicted.push(mean_pred);

        let mut stats = UpdateStats::default();
        if w >= cfg.warmup_windows {
            let opts = UpdateOptions {
                inflation: cfg.inflation,
                spread_floor: cfg.spread_floor,
                lower: cfg.offset_bounds.0,
                upper: cfg.offset_bounds.1,
                seed: rng::hash_key(&[seed, w as u64]),
            };
            stats = enkf_update(&mut offsets, &predicted, y, &obs_var, &opts)?;
            for (mem, o) in members.iter_mut().zip(&offsets) {
                mem.resample(s.network, &apply_offsets(&s.base, &s.groups, o));
            }
        }

        let from = (w + 1).saturating_sub(cfg.correlation_span);
        let pred: Vec<f64> = result.predicted[from..].iter().flatten().copied().collect();
        let obs: Vec<f64> = observed[from + cfg.lag..=w + cfg.lag].iter().flatten().copied().collect();
        let corr = pearson(&pred, &obs).unwrap_or(f64::NAN);
        if corr < last_corr {
            drops += 1;
        } else {
            drops = 0;
        }
        last_corr = corr;
        let diverging = drops >= cfg.divergence_windows;
        if diverging && drops == cfg.divergence_windows {
            log::warn!("fit correlation fell for {drops} consecutive windows (window {w}, r = {corr:.3})");
        }

        let mean = mean_of(&offsets);
        let spread: Vec<f64> = (0..d)
            .map(|g| {
                let v = offsets.iter().map(|o| (o[g] - mean[g]).powi(2)).sum::<f64>() / (cfg.members - 1) as f64;
                v.sqrt()
            })
            .collect();
        for (g, grp) in s.groups.iter().enumerate() {
            result.trajectory.push(TrajectoryRow {
                window: w as u64,
                group: g as u32,
                receptor: grp.receptor.name().to_string(),
                offset: mean[g],
                spread: spread[g],
                factor: mean[g].exp(),
            });
        }
        result.fit.push(FitRow {
            window: w as u64,
            correlation: corr,
            rmse,
            innovation_norm: stats.innovation.iter().map(|x| x * x).sum::<f64>().sqrt(),
            collapsed: stats.collapsed.len() as u32,
            diverging,
        });
        log::debug!("window {w}: r = {corr:.3}, rmse = {rmse:.3e}, offsets {mean:?}");
    }
    result.offsets = mean_of(&offsets);
    result.hyper = apply_offsets(&s.base, &s.groups, &result.offsets);
    Ok(result)
}

pub fn write_trajectory_csv<W: std::io::Write>(out: W, rows: &[TrajectoryRow]) -> Result<()> {
    write_rows(out, rows)
}

pub fn write_fit_csv<W: std::io::Write>(out: W, rows: &[FitRow]) -> Result<()> {
    write_rows(out, rows)
}

fn write_rows<W: std::io::Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Twin set-up: a stimulus of on/off blocks per voxel and the offsets the
/// observations are generated with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinConfig {
    /// Stimulus amplitude (pA) while a block is on.
    pub amplitude: f32,
    /// Block length in windows.
    pub block_windows: u64,
    /// Probability that a block is on.
    pub on_probability: f64,
    /// True offsets are drawn uniformly from this interval.
    pub truth_range: (f64, f64),
}

impl Default for TwinConfig {
    fn default() -> Self {
        TwinConfig {
            amplitude: 60.0,
            block_windows: 4,
            on_probability: 0.5,
            truth_range: (0.0, 0.5),
        }
    }
}

/// Random block stimulus covering `windows` windows of `window_steps` steps.
pub fn block_stimulus(voxels: usize, windows: usize, window_steps: u64, twin: &TwinConfig, seed: u64) -> Injection {
    let mut inj = Injection::new();
    let blocks = (windows as u64).div_ceil(twin.block_windows.max(1));
    let len = twin.block_windows.max(1) * window_steps;
    for v in 0..voxels {
        for b in 0..blocks {
            if rng::uniform(&[seed, rng::domain::ENSEMBLE, 7, v as u64, b]) < twin.on_probability {
                inj.add_block(v as u32, b * len..(b + 1) * len, twin.amplitude);
            }
        }
    }
    inj
}

pub fn twin_truth(groups: usize, twin: &TwinConfig, seed: u64) -> Vec<f64> {
    let (a, b) = twin.truth_range;
    (0..groups)
        .map(|g| a + (b - a) * rng::uniform(&[seed, rng::domain::ENSEMBLE, 11, g as u64]))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TwinOutcome {
    pub truth: Vec<f64>,
    pub observed: Vec<Vec<f64>>,
    pub result: AssimResult,
}

impl TwinOutcome {
    /// Largest relative error of the recovered median conductance factors.
    pub fn max_relative_error(&self) -> f64 {
        self.truth
            .iter()
            .zip(&self.result.offsets)
            .map(|(t, e)| ((e - t).exp() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Generates noiseless observations from known offsets on the surrogate and
/// assimilates them from the prior.
pub fn twin_experiment(
    network: &Network,
    engine: EngineConfig,
    cfg: &AssimConfig,
    twin: &TwinConfig,
    seed: u64,
) -> Result<TwinOutcome> {
    let windows = cfg.windows + cfg.lag;
    let injection = block_stimulus(network.voxels.len(), windows, cfg.bold.window_steps, twin, seed);
    let s = Surrogate::new(network, engine, injection);
    let truth = twin_truth(s.groups.len(), twin, seed);
    let h = apply_offsets(&s.base, &s.groups, &truth);
    let observed = synthesize_bold(&s, &h, &cfg.bold, windows, rng::hash_key(&[seed, 0x7717]))?;
    let result = assimilate(&observed, &s, cfg, rng::hash_key(&[seed, 0xa551]))?;
    Ok(TwinOutcome {
        truth,
        observed,
        result,
    })
}
