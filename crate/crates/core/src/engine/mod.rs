//! Step-synchronous multi-worker simulation.
//!
//! Each step every worker (1) updates membranes and collects spikes (`t1`),
//! (2) hands the spike list to its sender, (3) accumulates input from its own
//! spikes, (4) waits for one batch from every other worker (`t2`), and
//! (5) accumulates remote input, steps the gating variables and recomputes
//! synaptic currents (`t3`). A spike at step `t` therefore changes gating at
//! the end of step `t` and the membrane at step `t + 1`.
//!
//! Synaptic input is summed in fixed point, so the result is independent of
//! batch arrival order and of how neurons are spread over workers.
//!
//! Two execution modes share the phase code. [`TransportKind::Threads`] runs
//! a compute, sender and receiver thread per worker over in-process queues
//! and records wall-clock anchors. [`TransportKind::Loopback`] runs all
//! workers in one thread; phase durations are measured one worker at a time
//! and composed on a virtual bulk-synchronous timeline, with transfer times
//! from a [`LinkModel`].

pub mod batch;
pub mod stats;
pub mod transport;
mod worker;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam::channel::{bounded, unbounded, RecvTimeoutError};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgen::ConnectionTable;
pub use stats::{aggregate_timings, read_timings_csv, write_timings_csv, StepTimings, TimingReport};
pub use transport::{ChannelTransport, LoopbackTransport, Transport, TransportKind};
pub use worker::{InitialState, Routing, TraceRow, Worker};

/// Links of the virtual timeline. A batch occupies the sender's egress and
/// the receiver's ingress for its transfer time; latency overlaps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub intra_latency_ns: f64,
    pub intra_ns_per_byte: f64,
    pub inter_latency_ns: f64,
    pub inter_ns_per_byte: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            intra_latency_ns: 2_000.0,
            intra_ns_per_byte: 0.1,
            inter_latency_ns: 10_000.0,
            inter_ns_per_byte: 0.5,
        }
    }
}

impl LinkModel {
    pub fn latency(&self, inter: bool) -> u64 {
        let lat = if inter { self.inter_latency_ns } else { self.intra_latency_ns };
        lat.round() as u64
    }

    pub fn transfer(&self, inter: bool, bytes: usize) -> u64 {
        let per = if inter { self.inter_ns_per_byte } else { self.intra_ns_per_byte };
        (per * bytes as f64).round() as u64
    }
}

/// Per-unit phase costs (ns) for the modeled clock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Membrane and background-current update, per neuron.
    pub membrane: f64,
    /// One receptor delivery during accumulation.
    pub event: f64,
    /// Gating and current update, per neuron.
    pub update: f64,
    pub encode_batch: f64,
    pub encode_byte: f64,
    pub decode_batch: f64,
    pub decode_byte: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            membrane: 30.0,
            event: 2.0,
            update: 25.0,
            encode_batch: 100.0,
            encode_byte: 2.0,
            decode_batch: 100.0,
            decode_byte: 2.0,
        }
    }
}

impl CostModel {
    fn ns(x: f64) -> u64 {
        x.max(0.0).round() as u64
    }
}

/// Source of phase durations on the loopback timeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Clock {
    /// Wall-clock time of each phase.
    #[default]
    Measured,
    /// Work counts times per-unit costs; reproducible across runs.
    Modeled(CostModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// ms
    pub dt: f32,
    pub seed: u64,
    pub transport: TransportKind,
    /// Workers sharing a node; traffic between nodes is "inter".
    pub workers_per_node: usize,
    /// Wait for a missing batch before reporting a deadlock.
    pub timeout_ms: u64,
    pub link: LinkModel,
    /// Loopback transport only.
    pub clock: Clock,
    pub init: InitialState,
    pub record_raster: bool,
    pub record_timings: bool,
    /// Global ids whose state is recorded every step.
    pub trace: Vec<u32>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            dt: 1.0,
            seed: 0,
            transport: TransportKind::default(),
            workers_per_node: 4,
            timeout_ms: 30_000,
            link: LinkModel::default(),
            clock: Clock::default(),
            init: InitialState::default(),
            record_raster: true,
            record_timings: true,
            trace: Vec::new(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.workers_per_node == 0 {
            return Err(Error::config("workers_per_node must be at least 1"));
        }
        if self.timeout_ms == 0 {
            return Err(Error::config("timeout_ms must be positive"));
        }
        if self.transport == TransportKind::Threads && matches!(self.clock, Clock::Modeled(_)) {
            return Err(Error::config("the modeled clock requires the loopback transport"));
        }
        Ok(())
    }
}

/// External current per voxel and step (pA), added to every neuron of the voxel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Injection {
    steps: BTreeMap<u64, Vec<(u32, f32)>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InjectionRecord {
    step: u64,
    voxel_id: u32,
    #[serde(rename = "pA")]
    pa: f32,
}

impl Injection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Adds `pa` to `voxel` at `step`.
    pub fn add(&mut self, step: u64, voxel: u32, pa: f32) {
        let e = self.steps.entry(step).or_default();
        match e.iter_mut().find(|(v, _)| *v == voxel) {
            Some((_, x)) => *x += pa,
            None => e.push((voxel, pa)),
        }
    }

    /// Adds `pa` to `voxel` for every step in `steps`.
    pub fn add_block(&mut self, voxel: u32, steps: std::ops::Range<u64>, pa: f32) {
        for s in steps {
            self.add(s, voxel, pa);
        }
    }

    pub fn voxel_currents(&self, step: u64, voxels: usize) -> Vec<f32> {
        let mut v = vec![0.0; voxels];
        if let Some(e) = self.steps.get(&step) {
            for &(voxel, pa) in e {
                if let Some(x) = v.get_mut(voxel as usize) {
                    *x += pa;
                }
            }
        }
        v
    }

    /// Reads CSV `step,voxel_id,pA`.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut inj = Injection::new();
        for r in csv::Reader::from_reader(input).deserialize::<InjectionRecord>() {
            let r = r.map_err(|e| Error::Format(format!("injection CSV: {e}")))?;
            if !r.pa.is_finite() {
                return Err(Error::Format(format!("injection at step {} is not finite", r.step)));
            }
            inj.add(r.step, r.voxel_id, r.pa);
        }
        Ok(inj)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (&step, e) in &self.steps {
            let mut e = e.clone();
            e.sort_by_key(|x| x.0);
            for (voxel_id, pa) in e {
                w.serialize(InjectionRecord { step, voxel_id, pa })
                    .map_err(|e| Error::Format(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub step: u64,
    pub worker: u32,
    pub local_id: u32,
    pub global_id: u32,
}

/// Neuron-to-population mapping in global numbering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PopulationIndex {
    pub of_neuron: Vec<u32>,
    pub sizes: Vec<u32>,
    pub voxel: Vec<u32>,
}

/// Spike counts per population and step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RateSeries {
    pub dt: f32,
    pub first_step: u64,
    pub sizes: Vec<u32>,
    /// Row-major `[step][population]`.
    pub counts: Vec<u32>,
}

impl RateSeries {
    pub fn populations(&self) -> usize {
        self.sizes.len()
    }

    pub fn steps(&self) -> usize {
        self.counts.len().checked_div(self.sizes.len()).unwrap_or(0)
    }

    pub fn step_counts(&self, i: usize) -> &[u32] {
        let p = self.sizes.len();
        &self.counts[i * p..(i + 1) * p]
    }

    /// Rates (Hz) per population over the last `window` steps, and the
    /// network mean.
    pub fn mean_rates(&self, window: usize) -> (Vec<f64>, f64) {
        let steps = self.steps();
        let window = window.min(steps);
        let mut totals = vec![0u64; self.populations()];
        for i in steps - window..steps {
            for (t, &c) in totals.iter_mut().zip(self.step_counts(i)) {
                *t += c as u64;
            }
        }
        let secs = window as f64 * self.dt as f64 * 1e-3;
        let rate = |count: u64, n: u64| if n == 0 || secs == 0.0 { 0.0 } else { count as f64 / (n as f64 * secs) };
        let per: Vec<f64> = totals
            .iter()
            .zip(&self.sizes)
            .map(|(&c, &n)| rate(c, n as u64))
            .collect();
        let all = rate(totals.iter().sum(), self.sizes.iter().map(|&n| n as u64).sum());
        (per, all)
    }

    pub fn append(&mut self, other: &RateSeries) {
        self.counts.extend_from_slice(&other.counts);
    }
}

/// Builds per-population counts from a raster covering `steps` steps from
/// `first_step`.
pub fn compute_rates(raster: &[SpikeEvent], index: &PopulationIndex, first_step: u64, steps: u64, dt: f32) -> RateSeries {
    let p = index.sizes.len();
    let mut counts = vec![0u32; steps as usize * p];
    for e in raster {
        if e.step >= first_step && e.step < first_step + steps {
            let pop = index.of_neuron[e.global_id as usize] as usize;
            counts[(e.step - first_step) as usize * p + pop] += 1;
        }
    }
    RateSeries {
        dt,
        first_step,
        sizes: index.sizes.clone(),
        counts,
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub first_step: u64,
    pub steps: u64,
    /// Sorted by (step, worker, local id).
    pub raster: Vec<SpikeEvent>,
    /// Sorted by (step, worker).
    pub timings: Vec<StepTimings>,
    /// Sorted by (step, global id).
    pub traces: Vec<TraceRow>,
    pub rates: RateSeries,
}

impl RunOutput {
    /// `(step, global id)` pairs, sorted: comparable across partitions.
    pub fn global_raster(&self) -> Vec<(u64, u32)> {
        let mut r: Vec<(u64, u32)> = self.raster.iter().map(|e| (e.step, e.global_id)).collect();
        r.sort_unstable();
        r
    }

    fn append(&mut self, mut other: RunOutput) {
        if self.steps == 0 {
            *self = other;
            return;
        }
        self.steps += other.steps;
        self.raster.append(&mut other.raster);
        self.timings.append(&mut other.timings);
        self.traces.append(&mut other.traces);
        self.rates.append(&other.rates);
    }
}

pub fn write_raster_csv<W: Write>(out: W, raster: &[SpikeEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in raster {
        w.serialize(e).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_raster_csv<R: Read>(input: R) -> Result<Vec<SpikeEvent>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("raster CSV: {e}"))))
        .collect()
}

pub fn write_traces_csv<W: Write>(out: W, traces: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in traces {
        w.serialize(t).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_traces_csv<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("trace CSV: {e}"))))
        .collect()
}

/// Writes a CSV file, mapping I/O failures to the path.
pub fn write_csv_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[inline]
fn ns(d: Duration) -> u64 {
    d.as_nanos() as u64
}

/// Loaded workers plus the step counter; steps can be run in chunks.
pub struct Simulation {
    cfg: EngineConfig,
    workers: Vec<Worker>,
    routing: Vec<Routing>,
    sizes: Vec<u32>,
    voxels: usize,
    index: PopulationIndex,
    injection: Injection,
    step: u64,
    output: RunOutput,
}

struct ComputePart {
    timings: StepTimings,
    spikes: Vec<u32>,
    traces: Vec<TraceRow>,
}

struct SendPart {
    step: u64,
    worker: usize,
    t8: u64,
    t9: u64,
    send_intra: u64,
    send_inter: u64,
    bytes_intra: u64,
    bytes_inter: u64,
}

enum StatsMsg {
    Compute(Box<ComputePart>),
    Send(SendPart),
}

struct Inbound {
    started: Instant,
    /// (arrival, src, payload bytes)
    arrivals: Vec<(Instant, usize, usize)>,
    /// Indexed by source worker.
    batches: Vec<Vec<u32>>,
}

struct Pending {
    batches: Vec<Option<Vec<u32>>>,
    arrivals: Vec<(Instant, usize, usize)>,
    count: usize,
}

impl Pending {
    fn new(n: usize) -> Self {
        Pending {
            batches: vec![None; n],
            arrivals: Vec::new(),
            count: 0,
        }
    }
}

impl Simulation {
    pub fn new(tables: &[ConnectionTable], cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        if tables.is_empty() {
            return Err(Error::config("no worker tables"));
        }
        for (w, t) in tables.iter().enumerate() {
            if t.worker as usize != w {
                return Err(Error::config(format!("table {w} belongs to worker {}", t.worker)));
            }
        }
        if tables.len() > u16::MAX as usize {
            return Err(Error::config("too many workers"));
        }
        ConnectionTable::check_references(tables)?;
        let sizes: Vec<u32> = tables.iter().map(|t| t.len() as u32).collect();
        let workers = tables
            .iter()
            .map(|t| Worker::load(t, &sizes, cfg.dt, cfg.seed, cfg.init, &cfg.trace))
            .collect::<Result<Vec<_>>>()?;
        let routing = (0..tables.len()).map(|w| Routing::build(w, tables)).collect();

        let neurons: usize = sizes.iter().map(|&s| s as usize).sum();
        let mut index = PopulationIndex {
            of_neuron: vec![u32::MAX; neurons],
            ..Default::default()
        };
        let mut voxels = 0;
        for r in tables.iter().flat_map(|t| &t.neurons) {
            let gid = r.global_id as usize;
            if gid >= neurons || index.of_neuron[gid] != u32::MAX {
                return Err(Error::Format(format!("global id {gid} is duplicated or out of range")));
            }
            index.of_neuron[gid] = r.population;
            let p = r.population as usize;
            if index.sizes.len() <= p {
                index.sizes.resize(p + 1, 0);
                index.voxel.resize(p + 1, 0);
            }
            index.sizes[p] += 1;
            index.voxel[p] = r.voxel;
            voxels = voxels.max(r.voxel as usize + 1);
        }
        Ok(Simulation {
            cfg,
            workers,
            routing,
            sizes,
            voxels,
            index,
            injection: Injection::new(),
            step: 0,
            output: RunOutput::default(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn workers(&self) -> usize {
        self.workers.len()
    }

    pub fn worker(&self, w: usize) -> &Worker {
        &self.workers[w]
    }

    pub fn routing(&self, w: usize) -> &Routing {
        &self.routing[w]
    }

    pub fn population_index(&self) -> &PopulationIndex {
        &self.index
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn set_injection(&mut self, injection: Injection) {
        self.injection = injection;
    }

    /// Applies `f` to every neuron's parameters (e.g. resampled conductances).
    pub fn update_params(&mut self, mut f: impl FnMut(&crate::netgen::NeuronRow, &mut crate::model::NeuronParams)) {
        for w in &mut self.workers {
            for (r, p) in w.rows.iter().zip(w.params.iter_mut()) {
                f(r, p);
            }
        }
    }

    pub fn output(&self) -> &RunOutput {
        &self.output
    }

    /// Returns and clears everything recorded so far.
    pub fn take_output(&mut self) -> RunOutput {
        std::mem::take(&mut self.output)
    }

    fn is_inter(&self, a: usize, b: usize) -> bool {
        a / self.cfg.workers_per_node != b / self.cfg.workers_per_node
    }

    /// Runs `steps` steps with the configured transport.
    pub fn run(&mut self, steps: u64) -> Result<()> {
        let n = self.workers.len();
        match self.cfg.transport {
            TransportKind::Loopback => self.run_serial(steps, &LoopbackTransport::new(n)),
            TransportKind::Threads => self.run_threaded(steps, &ChannelTransport::new(n)),
        }
    }

    fn new_output(&self, steps: u64) -> RunOutput {
        RunOutput {
            first_step: self.step,
            steps,
            rates: RateSeries {
                dt: self.cfg.dt,
                first_step: self.step,
                sizes: self.index.sizes.clone(),
                counts: vec![0; steps as usize * self.index.sizes.len()],
            },
            ..Default::default()
        }
    }

    fn record_spikes(&self, out: &mut RunOutput, step: u64, worker: usize, spikes: &[u32]) {
        let p = self.index.sizes.len();
        let base = (step - out.first_step) as usize * p;
        let rows = &self.workers[worker].rows;
        for &l in spikes {
            let r = &rows[l as usize];
            out.rates.counts[base + r.population as usize] += 1;
            if self.cfg.record_raster {
                out.raster.push(SpikeEvent {
                    step,
                    worker: worker as u32,
                    local_id: l,
                    global_id: r.global_id,
                });
            }
        }
    }

    /// Steps all workers in this thread over `transport`, composing measured
    /// phase durations on the virtual timeline.
    pub fn run_serial(&mut self, steps: u64, transport: &dyn Transport) -> Result<()> {
        let mut out = self.new_output(steps);
        for _ in 0..steps {
            self.step_serial(transport, &mut out)?;
        }
        out.traces.sort_by_key(|t| (t.step, t.global_id));
        self.output.append(out);
        Ok(())
    }

    fn step_serial(&mut self, transport: &dyn Transport, out: &mut RunOutput) -> Result<()> {
        let step = self.step;
        let n = self.workers.len();
        let dt = self.cfg.dt;
        let inj = self.injection.voxel_currents(step, self.voxels);
        let timeout = Duration::from_millis(self.cfg.timeout_ms);
        let model = match self.cfg.clock {
            Clock::Modeled(m) => Some(m),
            Clock::Measured => None,
        };
        let clock = |c: Instant, modeled: &dyn Fn(&CostModel) -> f64| match &model {
            Some(m) => CostModel::ns(modeled(m)),
            None => ns(c.elapsed()),
        };
        let mut t: Vec<StepTimings> = (0..n)
            .map(|w| StepTimings {
                step,
                worker: w as u32,
                ..Default::default()
            })
            .collect();

        let mut spikes = Vec::with_capacity(n);
        for (w, wk) in self.workers.iter_mut().enumerate() {
            let c = Instant::now();
            let s = wk.membrane(step, dt, &inj, &mut out.traces)?;
            let neurons = wk.len() as f64;
            t[w].t1 = clock(c, &|m| m.membrane * neurons);
            t[w].t4 = t[w].t1;
            t[w].t5 = t[w].t1;
            t[w].flops_membrane = wk.membrane_flops();
            t[w].spikes = s.len() as u64;
            spikes.push(s);
        }

        // Sender: batches leave back to back in ring order.
        // arrivals[dst] = (arrival, src, transfer)
        let mut arrivals: Vec<Vec<(u64, usize, u64)>> = vec![Vec::with_capacity(n); n];
        for w in 0..n {
            let mut cursor = t[w].t1;
            t[w].t8 = cursor;
            for dst in self.routing[w].ring() {
                let c = Instant::now();
                let ids = self.routing[w].batch_for(&spikes[w], dst);
                let frame = batch::encode(step, w, dst, &ids);
                let bytes = batch::payload_len(&frame);
                transport.send(w, dst, frame)?;
                let inter = self.is_inter(w, dst);
                let transfer = self.cfg.link.transfer(inter, bytes);
                let d = clock(c, &|m| m.encode_batch + m.encode_byte * bytes as f64) + transfer;
                cursor += d;
                if inter {
                    t[w].send_inter += d;
                    t[w].bytes_sent_inter += bytes as u64;
                } else {
                    t[w].send_intra += d;
                    t[w].bytes_sent_intra += bytes as u64;
                }
                arrivals[dst].push((cursor + self.cfg.link.latency(inter), w, transfer));
            }
            t[w].t9 = cursor;
        }

        let mut intra_end = vec![0u64; n];
        for (w, wk) in self.workers.iter_mut().enumerate() {
            let c = Instant::now();
            let events = wk.accumulate(w, &spikes[w]);
            t[w].flops_inner = events;
            intra_end[w] = t[w].t1 + clock(c, &|m| m.event * events as f64);
        }

        for d in 0..n {
            let mut got: Vec<Option<(Vec<u32>, u64)>> = vec![None; n];
            for _ in 1..n {
                let frame = transport.recv(d, timeout)?.ok_or_else(|| Error::Deadlock {
                    step,
                    src: (0..n).find(|&s| s != d && got[s].is_none()).unwrap_or(0),
                    dst: d,
                })?;
                let c = Instant::now();
                let b = batch::decode(&frame, |s| self.sizes.get(s).copied())?;
                let len = batch::payload_len(&frame) as f64;
                let dec = clock(c, &|m| m.decode_batch + m.decode_byte * len);
                check_batch(&b, step, d, n)?;
                if got[b.src].is_some() {
                    return Err(Error::Corruption(format!("duplicate batch {}->{d} at step {step}", b.src)));
                }
                let bytes = batch::payload_len(&frame) as u64;
                if self.is_inter(b.src, d) {
                    t[d].bytes_recv_inter += bytes;
                } else {
                    t[d].bytes_recv_intra += bytes;
                }
                got[b.src] = Some((b.ids, dec));
            }
            arrivals[d].sort_unstable();
            let (mut ingress, mut done) = (0u64, 0u64);
            for &(arrival, src, transfer) in &arrivals[d] {
                let prev = done;
                ingress = (ingress + transfer).max(arrival);
                done = done.max(ingress) + got[src].as_ref().map_or(0, |g| g.1);
                if self.is_inter(src, d) {
                    t[d].rec_inter += done - prev;
                } else {
                    t[d].rec_intra += done - prev;
                }
            }
            t[d].t10 = 0;
            t[d].t11 = done;
            t[d].t2 = intra_end[d].max(done);
            t[d].t6 = t[d].t2;
            t[d].t7 = t[d].t2;

            let c = Instant::now();
            let wk = &mut self.workers[d];
            for (src, g) in got.iter().enumerate() {
                if let Some((ids, _)) = g {
                    t[d].flops_outer += wk.accumulate(src, ids);
                }
            }
            let f = wk.update(dt)?;
            let (events, neurons) = (t[d].flops_outer as f64, wk.len() as f64);
            t[d].t3 = t[d].t2 + clock(c, &|m| m.event * events + m.update * neurons);
            t[d].flops_gating = f.gating;
            t[d].flops_current = f.current;
        }

        for (w, s) in spikes.iter().enumerate() {
            self.record_spikes(out, step, w, s);
        }
        if self.cfg.record_timings {
            out.timings.extend(t);
        }
        self.step += 1;
        Ok(())
    }

    /// Runs every worker as a compute, sender and receiver thread over
    /// `transport`, recording wall-clock anchors.
    pub fn run_threaded(&mut self, steps: u64, transport: &dyn Transport) -> Result<()> {
        let n = self.workers.len();
        if transport.workers() != n {
            return Err(Error::config(format!(
                "transport connects {} workers, simulation has {n}",
                transport.workers()
            )));
        }
        let start = self.step;
        let dt = self.cfg.dt;
        let timeout = Duration::from_millis(self.cfg.timeout_ms);
        let poll = timeout.min(Duration::from_millis(100));
        let wpn = self.cfg.workers_per_node;
        let inter = move |a: usize, b: usize| a / wpn != b / wpn;
        let abort = AtomicBool::new(false);
        // Step each receiver is blocked on; a timeout defers to an older wait.
        let waiting: Vec<AtomicU64> = (0..n).map(|_| AtomicU64::new(u64::MAX)).collect();
        let waiting = &waiting;
        let failure: Mutex<Option<Error>> = Mutex::new(None);
        let fail = |e: Error| {
            let mut f = failure.lock().unwrap();
            if f.is_none() {
                *f = Some(e);
            }
            abort.store(true, Ordering::SeqCst);
        };
        let (stats_tx, stats_rx) = unbounded::<StatsMsg>();
        let mut parts: Vec<Option<ComputePart>> = (0..steps as usize * n).map(|_| None).collect();
        let mut sends: Vec<Option<SendPart>> = (0..steps as usize * n).map(|_| None).collect();

        let sizes = &self.sizes;
        let voxels = self.voxels;
        let injection = &self.injection;
        std::thread::scope(|s| {
            for (me, (core, routing)) in self.workers.iter_mut().zip(&self.routing).enumerate() {
                let (spk_tx, spk_rx) = bounded::<(u64, Instant, Arc<Vec<u32>>)>(2);
                let (in_tx, in_rx) = bounded::<Inbound>(2);
                let (abort, fail) = (&abort, &fail);

                let stats = stats_tx.clone();
                s.spawn(move || {
                    let mut run = || -> Result<()> {
                        for step in start..start + steps {
                            let origin = Instant::now();
                            let inj = injection.voxel_currents(step, voxels);
                            let mut traces = Vec::new();
                            let spikes = core.membrane(step, dt, &inj, &mut traces)?;
                            let t1 = ns(origin.elapsed());
                            let spikes = Arc::new(spikes);
                            spk_tx
                                .send((step, origin, Arc::clone(&spikes)))
                                .map_err(|_| Error::Transport(format!("sender of worker {me} stopped")))?;
                            let inner = core.accumulate(me, &spikes);
                            let inbound = loop {
                                match in_rx.recv_timeout(poll) {
                                    Ok(x) => break x,
                                    Err(RecvTimeoutError::Timeout) if !abort.load(Ordering::SeqCst) => {}
                                    _ => return Err(Error::Transport(format!("receiver of worker {me} stopped"))),
                                }
                            };
                            let t2 = ns(origin.elapsed());
                            let mut outer = 0;
                            for (src, ids) in inbound.batches.iter().enumerate() {
                                outer += core.accumulate(src, ids);
                            }
                            let f = core.update(dt)?;
                            let t3 = ns(origin.elapsed());

                            let rel = |i: Instant| ns(i.saturating_duration_since(origin));
                            let mut t = StepTimings {
                                step,
                                worker: me as u32,
                                t1,
                                t2,
                                t3,
                                t4: t1,
                                t5: t1,
                                t6: t2,
                                t7: t2,
                                t10: rel(inbound.started),
                                flops_membrane: core.membrane_flops(),
                                flops_inner: inner,
                                flops_outer: outer,
                                flops_gating: f.gating,
                                flops_current: f.current,
                                spikes: spikes.len() as u64,
                                ..Default::default()
                            };
                            let mut arrivals = inbound.arrivals;
                            arrivals.sort_by_key(|a| (a.0, a.1));
                            let mut prev = t.t10;
                            for (at, src, bytes) in arrivals {
                                let end = rel(at).max(prev);
                                if inter(src, me) {
                                    t.rec_inter += end - prev;
                                    t.bytes_recv_inter += bytes as u64;
                                } else {
                                    t.rec_intra += end - prev;
                                    t.bytes_recv_intra += bytes as u64;
                                }
                                prev = end;
                            }
                            t.t11 = prev;
                            let spikes = Arc::try_unwrap(spikes).unwrap_or_else(|a| (*a).clone());
                            let _ = stats.send(StatsMsg::Compute(Box::new(ComputePart {
                                timings: t,
                                spikes,
                                traces,
                            })));
                        }
                        Ok(())
                    };
                    if let Err(e) = run() {
                        fail(e);
                    }
                });

                let stats = stats_tx.clone();
                s.spawn(move || {
                    let run = || -> Result<()> {
                        for (step, origin, spikes) in spk_rx.iter() {
                            let t8 = ns(origin.elapsed());
                            let mut p = SendPart {
                                step,
                                worker: me,
                                t8,
                                t9: t8,
                                send_intra: 0,
                                send_inter: 0,
                                bytes_intra: 0,
                                bytes_inter: 0,
                            };
                            for dst in routing.ring() {
                                let frame = batch::encode(step, me, dst, &routing.batch_for(&spikes, dst));
                                let bytes = batch::payload_len(&frame) as u64;
                                transport.send(me, dst, frame)?;
                                let now = ns(origin.elapsed()).max(p.t9);
                                if inter(me, dst) {
                                    p.send_inter += now - p.t9;
                                    p.bytes_inter += bytes;
                                } else {
                                    p.send_intra += now - p.t9;
                                    p.bytes_intra += bytes;
                                }
                                p.t9 = now;
                            }
                            let _ = stats.send(StatsMsg::Send(p));
                        }
                        Ok(())
                    };
                    if let Err(e) = run() {
                        fail(e);
                    }
                });

                s.spawn(move || {
                    let run = || -> Result<()> {
                        let mut pending: BTreeMap<u64, Pending> = BTreeMap::new();
                        for step in start..start + steps {
                            let started = Instant::now();
                            let mut deadline = started + timeout;
                            waiting[me].store(step, Ordering::SeqCst);
                            while pending.get(&step).map_or(0, |p| p.count) < n - 1 {
                                let now = Instant::now();
                                if now >= deadline {
                                    let older = (0..n).any(|k| k != me && waiting[k].load(Ordering::SeqCst) < step);
                                    if older && !abort.load(Ordering::SeqCst) {
                                        deadline = now + poll;
                                        continue;
                                    }
                                    let have = pending.get(&step);
                                    let src = (0..n)
                                        .find(|&s| s != me && have.is_none_or(|p| p.batches[s].is_none()))
                                        .unwrap_or(0);
                                    return Err(Error::Deadlock { step, src, dst: me });
                                }
                                let Some(frame) = transport.recv(me, poll.min(deadline - now))? else {
                                    if abort.load(Ordering::SeqCst) {
                                        return Ok(());
                                    }
                                    continue;
                                };
                                let b = batch::decode(&frame, |s| sizes.get(s).copied())?;
                                if b.step < step {
                                    return Err(Error::Corruption(format!(
                                        "batch {}->{me} for step {} arrived during step {step}",
                                        b.src, b.step
                                    )));
                                }
                                check_batch(&b, b.step, me, n)?;
                                let p = pending.entry(b.step).or_insert_with(|| Pending::new(n));
                                if p.batches[b.src].is_some() {
                                    return Err(Error::Corruption(format!(
                                        "duplicate batch {}->{me} at step {}",
                                        b.src, b.step
                                    )));
                                }
                                p.arrivals.push((Instant::now(), b.src, batch::payload_len(&frame)));
                                p.batches[b.src] = Some(b.ids);
                                p.count += 1;
                            }
                            waiting[me].store(u64::MAX, Ordering::SeqCst);
                            let p = pending.remove(&step).unwrap_or_else(|| Pending::new(n));
                            let inbound = Inbound {
                                started,
                                arrivals: p.arrivals,
                                batches: p.batches.into_iter().map(Option::unwrap_or_default).collect(),
                            };
                            if in_tx.send(inbound).is_err() {
                                return Ok(());
                            }
                        }
                        Ok(())
                    };
                    if let Err(e) = run() {
                        fail(e);
                    }
                });
            }
            drop(stats_tx);
            for msg in stats_rx.iter() {
                match msg {
                    StatsMsg::Compute(p) => {
                        let i = (p.timings.step - start) as usize * n + p.timings.worker as usize;
                        parts[i] = Some(*p);
                    }
                    StatsMsg::Send(p) => {
                        let i = (p.step - start) as usize * n + p.worker;
                        sends[i] = Some(p);
                    }
                }
            }
        });

        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        let mut out = self.new_output(steps);
        for (i, (part, send)) in parts.into_iter().zip(sends).enumerate() {
            let (Some(mut part), Some(send)) = (part, send) else {
                return Err(Error::Transport(format!("missing statistics for record {i}")));
            };
            let t = &mut part.timings;
            t.t8 = send.t8;
            t.t9 = send.t9;
            t.send_intra = send.send_intra;
            t.send_inter = send.send_inter;
            t.bytes_sent_intra = send.bytes_intra;
            t.bytes_sent_inter = send.bytes_inter;
            self.record_spikes(&mut out, t.step, t.worker as usize, &part.spikes);
            out.traces.extend(part.traces);
            if self.cfg.record_timings {
                out.timings.push(*t);
            }
        }
        out.traces.sort_by_key(|t| (t.step, t.global_id));
        self.step += steps;
        self.output.append(out);
        Ok(())
    }
}

fn check_batch(b: &batch::SpikeBatch, step: u64, dst: usize, n: usize) -> Result<()> {
    if b.step != step || b.dst != dst || b.src == dst || b.src >= n {
        return Err(Error::Corruption(format!(
            "unexpected batch {}->{} for step {} at worker {dst}, step {step}",
            b.src, b.dst, b.step
        )));
    }
    Ok(())
}

/// Loads `tables` and runs `steps` steps with `injection`.
pub fn run(tables: &[ConnectionTable], cfg: EngineConfig, steps: u64, injection: Injection) -> Result<RunOutput> {
    let mut sim = Simulation::new(tables, cfg)?;
    sim.set_injection(injection);
    sim.run(steps)?;
    Ok(sim.take_output())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

/// Per-unit costs of this host, measured on an isolated single-worker run of
/// `tables` (which must describe one worker) plus an encode/decode probe.
pub fn calibrate(tables: &[ConnectionTable], cfg: &EngineConfig, steps: u64) -> Result<CostModel> {
    if tables.len() != 1 {
        return Err(Error::config("calibration needs single-worker tables"));
    }
    let cfg = EngineConfig {
        transport: TransportKind::Loopback,
        clock: Clock::Measured,
        record_raster: false,
        record_timings: true,
        trace: Vec::new(),
        ..cfg.clone()
    };
    let mut sim = Simulation::new(tables, cfg)?;
    let n = sim.worker(0).len().max(1) as f64;
    sim.run(steps)?;
    let out = sim.take_output();
    let per = |f: &dyn Fn(&StepTimings) -> Option<f64>| median(out.timings.iter().filter_map(f).collect());
    let d = CostModel::default();
    let membrane = per(&|t| Some(t.t1 as f64 / n)).unwrap_or(d.membrane);
    let update = per(&|t| Some((t.t3 - t.t2) as f64 / n)).unwrap_or(d.update);
    let event = per(&|t| (t.flops_inner > 0).then(|| (t.t2 - t.t1) as f64 / t.flops_inner as f64)).unwrap_or(d.event);

    // two batch sizes separate the fixed and per-byte parts
    let probe = |len: u32| -> (f64, f64, usize) {
        let ids: Vec<u32> = (0..len).map(|i| i * 37).collect();
        let reps = 200;
        let c = Instant::now();
        let mut frame = Vec::new();
        for _ in 0..reps {
            frame = batch::encode(1, 0, 1, std::hint::black_box(&ids));
        }
        let enc = ns(c.elapsed()) as f64 / reps as f64;
        let c = Instant::now();
        for _ in 0..reps {
            let _ = std::hint::black_box(batch::decode(&frame, |_| Some(u32::MAX)));
        }
        let dec = ns(c.elapsed()) as f64 / reps as f64;
        (enc, dec, batch::payload_len(&frame))
    };
    let (e0, d0, b0) = probe(8);
    let (e1, d1, b1) = probe(4096);
    let span = (b1 - b0).max(1) as f64;
    let encode_byte = ((e1 - e0) / span).max(0.0);
    let decode_byte = ((d1 - d0) / span).max(0.0);
    Ok(CostModel {
        membrane,
        event,
        update,
        encode_batch: (e0 - encode_byte * b0 as f64).max(0.0),
        encode_byte,
        decode_batch: (d0 - decode_byte * b0 as f64).max(0.0),
        decode_byte,
    })
}
