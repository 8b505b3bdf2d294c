mod common;

use std::collections::BTreeSet;
use std::sync::Mutex;
use std::time::Duration;

use common::{manual_tables, quiet_ou, ring_network, round_robin, Neuron};
use voxsim::engine::{
    self, batch, compute_rates, ChannelTransport, Clock, CostModel, EngineConfig, InitialState, Injection, LinkModel,
    LoopbackTransport,
    PopulationIndex, Simulation, SpikeEvent, Transport, TransportKind,
};
use voxsim::model::NeuronParams;
use voxsim::netgen::SynapseKind;
use voxsim::{Error, Result};

fn traced_config(transport: TransportKind) -> EngineConfig {
    EngineConfig {
        seed: 11,
        transport,
        trace: vec![0, 7, 333, 1999],
        ..Default::default()
    }
}

#[test]
fn results_do_not_depend_on_worker_count_or_mode() {
    let net = ring_network(4, 500, 50, 3);
    let reference = engine::run(&round_robin(&net, 1), traced_config(TransportKind::Loopback), 150, Injection::new())
        .unwrap();
    assert!(reference.raster.len() > 100, "network is silent");
    for workers in [2, 4, 8] {
        for mode in [TransportKind::Loopback, TransportKind::Threads] {
            let out = engine::run(&round_robin(&net, workers), traced_config(mode), 150, Injection::new()).unwrap();
            assert_eq!(out.global_raster(), reference.global_raster(), "{workers} workers {mode:?}");
            assert_eq!(out.traces, reference.traces, "{workers} workers {mode:?}");
            assert_eq!(out.rates.counts, reference.rates.counts);
        }
    }
}

#[test]
fn chunked_runs_match_one_run() {
    let net = ring_network(2, 400, 40, 5);
    let tables = round_robin(&net, 2);
    let whole = engine::run(&tables, traced_config(TransportKind::Loopback), 120, Injection::new()).unwrap();
    let mut sim = Simulation::new(&tables, traced_config(TransportKind::Threads)).unwrap();
    sim.run(50).unwrap();
    sim.run(70).unwrap();
    let parts = sim.take_output();
    assert_eq!(parts.steps, 120);
    assert_eq!(parts.global_raster(), whole.global_raster());
    assert_eq!(parts.rates.counts, whole.rates.counts);
}

fn silent_neurons(workers: u32, per_worker: u32) -> Vec<Neuron> {
    (0..workers * per_worker)
        .map(|g| Neuron {
            worker: g % workers,
            voxel: 0,
            params: NeuronParams::default(),
            ou: quiet_ou(),
        })
        .collect()
}

fn rest_config() -> EngineConfig {
    EngineConfig {
        init: InitialState::Rest,
        ..Default::default()
    }
}

#[test]
fn unconnected_network_at_rest_never_spikes() {
    let tables = manual_tables(&silent_neurons(3, 10), &[]);
    for mode in [TransportKind::Loopback, TransportKind::Threads] {
        let cfg = EngineConfig {
            transport: mode,
            ..rest_config()
        };
        let out = engine::run(&tables, cfg, 200, Injection::new()).unwrap();
        assert!(out.raster.is_empty());
        assert!(out.rates.counts.iter().all(|&c| c == 0));
        for t in &out.timings {
            t.check().unwrap();
            assert_eq!(t.flops_membrane, 10 * 6);
            assert_eq!(t.flops_inner + t.flops_outer, 0);
            assert_eq!(t.flops_gating, 10 * 16);
            assert_eq!(t.flops_current, 10 * 16);
            // counters exclude frame headers
            assert_eq!(t.bytes_sent(), 0);
        }
    }
}

fn pair() -> (Vec<Neuron>, NeuronParams) {
    let mut target = NeuronParams::default();
    target.conductance = [0.5, 0.0, 0.0, 0.0];
    let neurons = vec![
        Neuron {
            worker: 0,
            voxel: 0,
            params: NeuronParams::default(),
            ou: quiet_ou(),
        },
        Neuron {
            worker: 1,
            voxel: 1,
            params: target,
            ou: quiet_ou(),
        },
    ];
    (neurons, target)
}

#[test]
fn forced_spike_reaches_target_one_step_later() {
    let (neurons, target) = pair();
    let tables = manual_tables(&neurons, &[(0, 1, SynapseKind::Ampa, 1.0)]);
    let mut inj = Injection::new();
    // 15 mV above rest in one step needs 3750 pA at C = 250 pF
    inj.add(5, 0, 5000.0);
    for mode in [TransportKind::Loopback, TransportKind::Threads] {
        let cfg = EngineConfig {
            transport: mode,
            trace: vec![1],
            ..rest_config()
        };
        let out = engine::run(&tables, cfg, 10, inj.clone()).unwrap();
        assert_eq!(out.global_raster(), vec![(5, 0)]);
        let ampa: Vec<f32> = out.traces.iter().map(|t| t.ampa).collect();
        assert_eq!(&ampa[..6], &[0.0; 6]);
        assert_eq!(ampa[6], 1.0);
        // decay by (1 - dt / tau) with tau = 4
        assert_eq!(ampa[7], 0.75);
        let row6 = &out.traces[6];
        let expected = -target.conductance[0] * 1.0 * (out.traces[5].v - target.reversal[0]);
        assert_eq!(row6.i_syn, expected);
        assert!(row6.v > out.traces[5].v);
    }
}

/// Single neuron with constant drive, integrated by an independent loop.
#[test]
fn single_neuron_matches_scalar_loop() {
    let mut p = NeuronParams::default();
    p.refractory = 3.0;
    let ou = voxsim::model::OuParams {
        mean: 420.0,
        sigma: 0.0,
        tau: 5.0,
    };
    let tables = manual_tables(
        &[Neuron {
            worker: 0,
            voxel: 0,
            params: p,
            ou,
        }],
        &[],
    );
    let cfg = EngineConfig {
        trace: vec![0],
        ..rest_config()
    };
    let steps = 400;
    let out = engine::run(&tables, cfg, steps, Injection::new()).unwrap();

    let (c, g, el, vt, vr) = (250.0f64, 25.0, -65.0, -50.0, -65.0);
    let mut v = el;
    let mut hold = 0;
    let mut spikes = Vec::new();
    for step in 0..steps {
        if hold > 0 {
            hold -= 1;
            v = vr;
        } else {
            v += (1.0 / c) * (-g * (v - el) + 420.0);
            if v >= vt {
                v = vr;
                hold = 3;
                spikes.push((step, 0u32));
            }
        }
        let got = out.traces[step as usize].v as f64;
        assert!((got - v).abs() < 1e-3, "step {step}: {got} vs {v}");
    }
    assert_eq!(out.global_raster(), spikes);
    assert!(spikes.len() > 5);
}

/// Records every frame it forwards.
struct Recording<T> {
    inner: T,
    frames: Mutex<Vec<Vec<u8>>>,
}

impl<T: Transport> Transport for Recording<T> {
    fn workers(&self) -> usize {
        self.inner.workers()
    }
    fn send(&self, src: usize, dst: usize, frame: Vec<u8>) -> Result<()> {
        self.frames.lock().unwrap().push(frame.clone());
        self.inner.send(src, dst, frame)
    }
    fn recv(&self, dst: usize, timeout: Duration) -> Result<Option<Vec<u8>>> {
        self.inner.recv(dst, timeout)
    }
}

fn check_traffic(sim: &Simulation, frames: &[Vec<u8>], raster: &[SpikeEvent], timings: &[engine::StepTimings]) {
    let n = sim.workers();
    let mut seen = BTreeSet::new();
    let mut payload = 0u64;
    for f in frames {
        let b = batch::decode(f, |_| Some(u32::MAX)).unwrap();
        assert!(seen.insert((b.step, b.src, b.dst)), "batch sent twice");
        payload += batch::payload_len(f) as u64;
        let routing = sim.routing(b.src);
        let expected: Vec<u32> = raster
            .iter()
            .filter(|e| e.step == b.step && e.worker as usize == b.src)
            .map(|e| e.local_id)
            .filter(|&l| routing.reaches(l, b.dst))
            .collect();
        assert_eq!(b.ids, expected, "step {} {}->{}", b.step, b.src, b.dst);
    }
    let steps = timings.iter().map(|t| t.step).max().unwrap() + 1;
    assert_eq!(seen.len() as u64, steps * (n * (n - 1)) as u64);
    let sent: u64 = timings.iter().map(|t| t.bytes_sent()).sum();
    let recv: u64 = timings.iter().map(|t| t.bytes_recv_intra + t.bytes_recv_inter).sum();
    assert_eq!(sent, payload);
    assert_eq!(recv, payload);
}

#[test]
fn every_spike_is_routed_exactly_where_it_has_targets() {
    let net = ring_network(4, 300, 30, 8);
    let tables = round_robin(&net, 4);
    for threaded in [false, true] {
        let mut sim = Simulation::new(
            &tables,
            EngineConfig {
                workers_per_node: 2,
                ..Default::default()
            },
        )
        .unwrap();
        if threaded {
            let t = Recording {
                inner: ChannelTransport::new(4),
                frames: Mutex::new(Vec::new()),
            };
            sim.run_threaded(80, &t).unwrap();
            let out = sim.take_output();
            check_traffic(&sim, &t.frames.into_inner().unwrap(), &out.raster, &out.timings);
        } else {
            let t = Recording {
                inner: LoopbackTransport::new(4),
                frames: Mutex::new(Vec::new()),
            };
            sim.run_serial(80, &t).unwrap();
            let out = sim.take_output();
            assert!(!out.raster.is_empty());
            check_traffic(&sim, &t.frames.into_inner().unwrap(), &out.raster, &out.timings);
            // workers 0,1 share a node; 2,3 share the other
            let total = |f: fn(&engine::StepTimings) -> u64| out.timings.iter().map(f).sum::<u64>();
            assert_eq!(total(|t| t.bytes_sent_intra), total(|t| t.bytes_recv_intra));
            assert_eq!(total(|t| t.bytes_sent_inter), total(|t| t.bytes_recv_inter));
            assert!(total(|t| t.bytes_sent_inter) > 0);
            for tm in &out.timings {
                tm.check().unwrap();
                assert_eq!(tm.send_intra + tm.send_inter, tm.send());
                assert_eq!(tm.rec_intra + tm.rec_inter, tm.rec());
            }
        }
    }
}

/// Drops or duplicates the batch `src -> dst` of one step.
struct Faulty<T> {
    inner: T,
    step: u64,
    src: usize,
    dst: usize,
    duplicate: bool,
}

impl<T: Transport> Transport for Faulty<T> {
    fn workers(&self) -> usize {
        self.inner.workers()
    }
    fn send(&self, src: usize, dst: usize, frame: Vec<u8>) -> Result<()> {
        let b = batch::decode(&frame, |_| Some(u32::MAX)).unwrap();
        if (b.step, b.src, b.dst) == (self.step, self.src, self.dst) {
            if !self.duplicate {
                return Ok(());
            }
            self.inner.send(src, dst, frame.clone())?;
        }
        self.inner.send(src, dst, frame)
    }
    fn recv(&self, dst: usize, timeout: Duration) -> Result<Option<Vec<u8>>> {
        self.inner.recv(dst, timeout)
    }
}

#[test]
fn missing_batch_is_reported_as_deadlock() {
    let tables = manual_tables(&silent_neurons(3, 4), &[]);
    let cfg = EngineConfig {
        timeout_ms: 200,
        ..rest_config()
    };
    let mut sim = Simulation::new(&tables, cfg.clone()).unwrap();
    let t = Faulty {
        inner: LoopbackTransport::new(3),
        step: 3,
        src: 0,
        dst: 2,
        duplicate: false,
    };
    match sim.run_serial(10, &t) {
        Err(Error::Deadlock { step, src, dst }) => assert_eq!((step, src, dst), (3, 0, 2)),
        other => panic!("expected deadlock, got {other:?}"),
    }

    let mut sim = Simulation::new(&tables, cfg).unwrap();
    let t = Faulty {
        inner: ChannelTransport::new(3),
        step: 3,
        src: 0,
        dst: 2,
        duplicate: false,
    };
    match sim.run_threaded(10, &t) {
        Err(Error::Deadlock { step, src, dst }) => assert_eq!((step, src, dst), (3, 0, 2)),
        other => panic!("expected deadlock, got {other:?}"),
    }
}

#[test]
fn duplicated_batch_is_rejected() {
    let tables = manual_tables(&silent_neurons(2, 4), &[]);
    for threaded in [false, true] {
        let mut sim = Simulation::new(&tables, rest_config()).unwrap();
        let r = if threaded {
            let t = Faulty {
                inner: ChannelTransport::new(2),
                step: 2,
                src: 1,
                dst: 0,
                duplicate: true,
            };
            sim.run_threaded(6, &t)
        } else {
            let t = Faulty {
                inner: LoopbackTransport::new(2),
                step: 2,
                src: 1,
                dst: 0,
                duplicate: true,
            };
            sim.run_serial(6, &t)
        };
        assert!(matches!(r, Err(Error::Corruption(_))), "threaded {threaded}: {r:?}");
    }
}

#[test]
fn rates_from_raster() {
    let index = PopulationIndex {
        of_neuron: vec![0; 100],
        sizes: vec![100],
        voxel: vec![0],
    };
    let raster: Vec<SpikeEvent> = (0..700u32)
        .map(|i| SpikeEvent {
            step: (i as u64 * 7) % 1000,
            worker: 0,
            local_id: i % 100,
            global_id: i % 100,
        })
        .collect();
    let rates = compute_rates(&raster, &index, 0, 1000, 1.0);
    let (per, all) = rates.mean_rates(1000);
    assert!((per[0] - 7.0).abs() < 1e-12);
    assert!((all - 7.0).abs() < 1e-12);
    let empty = compute_rates(&[], &index, 0, 1000, 1.0);
    assert_eq!(empty.mean_rates(1000).1, 0.0);
}

#[test]
fn recorded_rates_agree_with_raster() {
    let net = ring_network(2, 500, 50, 2);
    let tables = round_robin(&net, 2);
    let sim = Simulation::new(&tables, EngineConfig::default()).unwrap();
    let index = sim.population_index().clone();
    let out = engine::run(&tables, EngineConfig::default(), 200, Injection::new()).unwrap();
    let rebuilt = compute_rates(&out.raster, &index, 0, 200, 1.0);
    assert_eq!(rebuilt.counts, out.rates.counts);
}

#[test]
fn injection_csv_round_trip() {
    let mut inj = Injection::new();
    inj.add_block(2, 10..20, 125.5);
    inj.add(3, 0, -40.0);
    let mut buf = Vec::new();
    inj.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("step,voxel_id,pA"));
    let back = Injection::read_csv(&buf[..]).unwrap();
    assert_eq!(back, inj);
    assert_eq!(back.voxel_currents(15, 4), vec![0.0, 0.0, 125.5, 0.0]);
}

#[test]
fn invalid_tables_are_rejected() {
    let mut tables = manual_tables(&silent_neurons(2, 2), &[(0, 1, SynapseKind::Ampa, 1.0)]);
    tables[1].src_local[0] = 99;
    assert!(Simulation::new(&tables, rest_config()).is_err());
    let mut bad = manual_tables(&silent_neurons(1, 1), &[]);
    bad[0].neurons[0].params.refractory = 1.5;
    assert!(matches!(Simulation::new(&bad, rest_config()), Err(Error::Config(_))));
}

fn zero_costs() -> CostModel {
    CostModel {
        membrane: 0.0,
        event: 0.0,
        update: 0.0,
        encode_batch: 0.0,
        encode_byte: 0.0,
        decode_batch: 0.0,
        decode_byte: 0.0,
    }
}

fn modeled(costs: CostModel, link: LinkModel) -> EngineConfig {
    EngineConfig {
        seed: 4,
        clock: Clock::Modeled(costs),
        link,
        workers_per_node: 1,
        ..Default::default()
    }
}

#[test]
fn modeled_timings_are_reproducible() {
    let net = ring_network(4, 300, 40, 8);
    let tables = round_robin(&net, 4);
    let cfg = modeled(CostModel::default(), LinkModel::default());
    let a = engine::run(&tables, cfg.clone(), 80, Injection::new()).unwrap();
    let b = engine::run(&tables, cfg, 80, Injection::new()).unwrap();
    assert!(!a.raster.is_empty());
    assert_eq!(a.timings, b.timings);
}

#[test]
fn modeled_clock_requires_loopback() {
    let net = ring_network(2, 50, 10, 1);
    let cfg = EngineConfig {
        transport: TransportKind::Threads,
        ..modeled(CostModel::default(), LinkModel::default())
    };
    assert!(matches!(Simulation::new(&round_robin(&net, 2), cfg), Err(Error::Config(_))));
}

#[test]
fn modeled_membrane_phase_is_cost_times_neurons() {
    let net = ring_network(3, 100, 10, 2);
    let tables = round_robin(&net, 3);
    let costs = CostModel {
        membrane: 7.0,
        ..zero_costs()
    };
    let out = engine::run(&tables, modeled(costs, LinkModel::default()), 20, Injection::new()).unwrap();
    for t in &out.timings {
        assert_eq!(t.t1, 7 * tables[t.worker as usize].len() as u64);
    }
}

#[test]
fn inbound_transfers_share_one_ingress_link() {
    let net = ring_network(4, 200, 40, 6);
    let tables = round_robin(&net, 4);
    let link = LinkModel {
        intra_latency_ns: 0.0,
        intra_ns_per_byte: 3.0,
        inter_latency_ns: 0.0,
        inter_ns_per_byte: 3.0,
    };
    let out = engine::run(&tables, modeled(zero_costs(), link), 60, Injection::new()).unwrap();
    let mut busy = 0;
    for t in &out.timings {
        let inbound = 3 * (t.bytes_recv_intra + t.bytes_recv_inter);
        assert!(t.t11 >= inbound, "step {} worker {}: {} < {inbound}", t.step, t.worker, t.t11);
        busy += inbound;
    }
    assert!(busy > 0);
}

#[test]
fn calibration_yields_positive_costs() {
    let net = ring_network(2, 500, 50, 9);
    let m = engine::calibrate(&round_robin(&net, 1), &EngineConfig::default(), 40).unwrap();
    for c in [m.membrane, m.event, m.update, m.encode_batch, m.encode_byte, m.decode_batch, m.decode_byte] {
        assert!(c.is_finite() && c >= 0.0, "{m:?}");
    }
    assert!(m.membrane > 0.0 && m.update > 0.0);
}
