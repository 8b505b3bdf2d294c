//! One worker's neuron state and the per-step phases that act on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    self, step_gating, step_membrane, step_ou, synaptic_current, weight_to_fixed, NeuronParams, NeuronState,
    OuProcess,
};
use crate::netgen::{ConnectionTable, NeuronRow, SynapseKind};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// `V = E_L` for every neuron.
    Rest,
    /// `V` uniform in `[E_L, V_th)`, keyed by global id.
    #[default]
    Uniform,
}

/// One recorded sample of a traced neuron. `i_syn` and `gating` are the
/// values the membrane update of `step` used; `v` is the result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub global_id: u32,
    pub v: f32,
    pub i_syn: f32,
    pub ampa: f32,
    pub nmda: f32,
    pub gaba_a: f32,
    pub gaba_b: f32,
}

#[derive(Clone, Copy, Debug)]
struct Target {
    local: u32,
    kind: SynapseKind,
    weight: i32,
}

/// In-synapses of this worker grouped by presynaptic neuron of one source worker.
#[derive(Clone, Debug, Default)]
struct PushIndex {
    offsets: Vec<u32>,
    targets: Vec<Target>,
}

/// Remote destination workers of each local neuron, as a bitset.
#[derive(Clone, Debug)]
pub struct Routing {
    pub worker: usize,
    pub workers: usize,
    words: usize,
    bits: Vec<u64>,
}

impl Routing {
    /// Builds the routing of worker `worker` from every worker's table.
    pub fn build(worker: usize, tables: &[ConnectionTable]) -> Self {
        let workers = tables.len();
        let words = workers.div_ceil(64).max(1);
        let mut bits = vec![0u64; tables[worker].len() * words];
        for (d, t) in tables.iter().enumerate() {
            if d == worker {
                continue;
            }
            for (s, &l) in t.src_worker.iter().zip(&t.src_local) {
                if *s as usize == worker {
                    bits[l as usize * words + d / 64] |= 1 << (d % 64);
                }
            }
        }
        Routing {
            worker,
            workers,
            words,
            bits,
        }
    }

    #[inline]
    pub fn reaches(&self, local: u32, dst: usize) -> bool {
        self.bits[local as usize * self.words + dst / 64] >> (dst % 64) & 1 == 1
    }

    /// Number of remote workers `local` has targets on.
    pub fn fan_out(&self, local: u32) -> u32 {
        let i = local as usize * self.words;
        self.bits[i..i + self.words].iter().map(|w| w.count_ones()).sum()
    }

    /// Destinations in send order: `rank+1, ..., N-1, 0, ..., rank-1`.
    pub fn ring(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.workers).map(move |k| (self.worker + k) % self.workers)
    }

    /// Spiking ids with at least one target on `dst`, ascending.
    pub fn batch_for(&self, spikes: &[u32], dst: usize) -> Vec<u32> {
        spikes.iter().copied().filter(|&l| self.reaches(l, dst)).collect()
    }
}

pub struct Worker {
    pub id: usize,
    pub rows: Vec<NeuronRow>,
    pub params: Vec<NeuronParams>,
    pub states: Vec<NeuronState>,
    pub ou: Vec<OuProcess>,
    /// Synaptic current for the next membrane update.
    pub i_syn: Vec<f32>,
    push: Vec<PushIndex>,
    /// (local id, global id) of traced neurons.
    traced: Vec<(u32, u32)>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct UpdateFlops {
    pub gating: u64,
    pub current: u64,
}

impl Worker {
    /// Loads `table` (worker `table.worker`); `sizes[s]` is worker `s`'s neuron count.
    pub fn load(
        table: &ConnectionTable,
        sizes: &[u32],
        dt: f32,
        seed: u64,
        init: InitialState,
        trace: &[u32],
    ) -> Result<Self> {
        let id = table.worker as usize;
        let mut counts: Vec<Vec<u32>> = sizes.iter().map(|&n| vec![0u32; n as usize + 1]).collect();
        for (&s, &l) in table.src_worker.iter().zip(&table.src_local) {
            let c = counts
                .get_mut(s as usize)
                .and_then(|c| c.get_mut(l as usize + 1))
                .ok_or_else(|| Error::Corruption(format!("worker {id}: synapse source ({s}, {l}) does not exist")))?;
            *c += 1;
        }
        const EMPTY: Target = Target {
            local: 0,
            kind: SynapseKind::Ampa,
            weight: 0,
        };
        let mut push: Vec<PushIndex> = counts
            .into_iter()
            .map(|mut c| {
                for i in 1..c.len() {
                    c[i] += c[i - 1];
                }
                let total = *c.last().unwrap() as usize;
                PushIndex {
                    offsets: c,
                    targets: vec![EMPTY; total],
                }
            })
            .collect();
        let mut cursor: Vec<Vec<u32>> = push.iter().map(|p| p.offsets.clone()).collect();
        for i in 0..table.len() {
            for k in table.row(i) {
                let (s, l) = (table.src_worker[k] as usize, table.src_local[k] as usize);
                let w = weight_to_fixed(table.weight[k]);
                let weight = i32::try_from(w)
                    .map_err(|_| Error::Format(format!("synapse weight {} out of range", table.weight[k])))?;
                let slot = cursor[s][l] as usize;
                cursor[s][l] += 1;
                push[s].targets[slot] = Target {
                    local: i as u32,
                    kind: table.kind[k],
                    weight,
                };
            }
        }

        let mut params = Vec::with_capacity(table.len());
        let mut states = Vec::with_capacity(table.len());
        let mut ou = Vec::with_capacity(table.len());
        for r in &table.neurons {
            r.params.validate(dt)?;
            r.ou.validate()?;
            let mut st = NeuronState::at_rest(&r.params);
            if init == InitialState::Uniform {
                let u = rng::uniform(&[seed, rng::domain::INIT, r.global_id as u64]) as f32;
                st.v = r.params.leak_reversal + u * (r.params.threshold - r.params.leak_reversal);
            }
            params.push(r.params);
            states.push(st);
            ou.push(OuProcess::new(r.ou, seed, r.global_id));
        }
        let mut traced: Vec<(u32, u32)> = table
            .neurons
            .iter()
            .enumerate()
            .filter(|(_, r)| trace.contains(&r.global_id))
            .map(|(i, r)| (i as u32, r.global_id))
            .collect();
        traced.sort_unstable_by_key(|t| t.1);
        Ok(Worker {
            id,
            rows: table.neurons.clone(),
            params,
            states,
            i_syn: vec![0.0; table.len()],
            ou,
            push,
            traced,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Membrane update and spike detection. `injection[voxel]` is added to
    /// the background current. Returns spiking local ids, ascending.
    pub fn membrane(
        &mut self,
        step: u64,
        dt: f32,
        injection: &[f32],
        traces: &mut Vec<TraceRow>,
    ) -> Result<Vec<u32>> {
        let mut spikes = Vec::new();
        for i in 0..self.states.len() {
            step_ou(&mut self.ou[i], dt, step);
            let inj = injection.get(self.rows[i].voxel as usize).copied().unwrap_or(0.0);
            let i_ext = self.ou[i].current + inj;
            let gid = self.rows[i].global_id;
            if step_membrane(&mut self.states[i], &self.params[i], self.i_syn[i], i_ext, dt, gid, step)? {
                spikes.push(i as u32);
            }
        }
        for &(l, gid) in &self.traced {
            let s = &self.states[l as usize];
            traces.push(TraceRow {
                step,
                global_id: gid,
                v: s.v,
                i_syn: self.i_syn[l as usize],
                ampa: s.gating[0],
                nmda: s.gating[1],
                gaba_a: s.gating[2],
                gaba_b: s.gating[3],
            });
        }
        Ok(spikes)
    }

    pub fn membrane_flops(&self) -> u64 {
        self.len() as u64 * model::FLOPS_MEMBRANE
    }

    /// Adds the synaptic input of spiking neurons `ids` of worker `src`.
    /// Returns the FLOPs spent (one add per receptor event).
    pub fn accumulate(&mut self, src: usize, ids: &[u32]) -> u64 {
        let p = &self.push[src];
        let mut flops = 0;
        for &l in ids {
            let (a, b) = (p.offsets[l as usize] as usize, p.offsets[l as usize + 1] as usize);
            for t in &p.targets[a..b] {
                let st = &mut self.states[t.local as usize];
                for &r in t.kind.receptors() {
                    st.deliver(r, t.weight as i64);
                }
                flops += t.kind.receptors().len() as u64;
            }
        }
        flops
    }

    /// Gating step and current update from the new membrane potential.
    pub fn update(&mut self, dt: f32) -> Result<UpdateFlops> {
        for i in 0..self.states.len() {
            step_gating(&mut self.states[i], &self.params[i], dt)?;
            self.i_syn[i] = synaptic_current(&self.states[i], &self.params[i]);
        }
        let n = self.len() as u64;
        Ok(UpdateFlops {
            gating: n * 4 * model::FLOPS_GATING_PER_RECEPTOR,
            current: n * 4 * model::FLOPS_CURRENT_PER_RECEPTOR,
        })
    }
}
