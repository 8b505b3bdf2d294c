//! Per-worker neuron-property and connection tables, and their binary dump.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VXTB"
//! 4       4     version (u32, currently 1)
//! 8       4     worker id (u32)
//! 12      4     worker count (u32)
//! 16      4     neuron count n (u32)
//! 20      8     synapse entry count e (u64)
//! 28      116n  neuron property rows:
//!                 global id, voxel, population, in-degree (u32 x 4)
//!                 C, g_L, E_L, V_th, V_reset, T_ref (f32 x 6)
//!                 E_u, tau_u, omega_u, g_u (f32 x 4 each)
//!                 OU mean, sigma, tau (f32 x 3)
//!         4e    presynaptic worker ids (u32), row-major
//!         4e    presynaptic local ids (u32), row-major
//!         e     synapse kinds (u8), row-major
//!         4e    synapse weights (f32), row-major
//! ```
//!
//! Rows have the in-degree of their neuron, so row `i` starts at the sum of
//! the preceding in-degrees.

use std::path::Path;

use super::{Network, SynapseKind};
use crate::error::{Error, Result};
use crate::model::{NeuronParams, OuParams};
use crate::partition::PartitionMap;

pub const TABLE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VXTB";
const ROW_BYTES: usize = 116;

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronRow {
    pub global_id: u32,
    pub voxel: u32,
    pub population: u32,
    pub params: NeuronParams,
    pub ou: OuParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectionTable {
    pub worker: u32,
    pub workers: u32,
    pub neurons: Vec<NeuronRow>,
    pub row_offsets: Vec<u64>,
    pub src_worker: Vec<u32>,
    pub src_local: Vec<u32>,
    pub kind: Vec<SynapseKind>,
    pub weight: Vec<f32>,
}

impl ConnectionTable {
    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn entries(&self) -> usize {
        self.src_worker.len()
    }

    pub fn row(&self, i: usize) -> std::ops::Range<usize> {
        self.row_offsets[i] as usize..self.row_offsets[i + 1] as usize
    }

    /// Checks that every presynaptic reference of every table resolves.
    pub fn check_references(tables: &[ConnectionTable]) -> Result<()> {
        let n = tables.len() as u32;
        for t in tables {
            if t.workers != n {
                return Err(Error::Format(format!(
                    "table of worker {} declares {} workers, {n} tables loaded",
                    t.worker, t.workers
                )));
            }
            for (w, l) in t.src_worker.iter().zip(&t.src_local) {
                if *w >= n || *l as usize >= tables[*w as usize].len() {
                    return Err(Error::Format(format!(
                        "worker {} references missing neuron ({w}, {l})",
                        t.worker
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Where every global neuron lives after partitioning.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub worker_of: Vec<u32>,
    pub local_of: Vec<u32>,
    /// Global ids of each worker's neurons in local order.
    pub global_ids: Vec<Vec<u32>>,
}

impl Placement {
    /// Workers hold their populations in ascending population id.
    pub fn new(network: &Network, partition: &PartitionMap) -> Result<Self> {
        if partition.assignment.len() != network.populations.len() {
            return Err(Error::config(format!(
                "partition covers {} units but the network has {} populations",
                partition.assignment.len(),
                network.populations.len()
            )));
        }
        let n = network.neurons() as usize;
        let mut worker_of = vec![0u32; n];
        let mut local_of = vec![0u32; n];
        let mut global_ids = vec![Vec::new(); partition.workers];
        for (pop, &w) in network.populations.iter().zip(&partition.assignment) {
            if w >= partition.workers {
                return Err(Error::config(format!("population {} assigned to missing worker {w}", pop.id)));
            }
            for gid in pop.neurons() {
                worker_of[gid as usize] = w as u32;
                local_of[gid as usize] = global_ids[w].len() as u32;
                global_ids[w].push(gid);
            }
        }
        Ok(Placement {
            worker_of,
            local_of,
            global_ids,
        })
    }
}

/// Cuts the network into one table per worker with presynaptic references
/// rewritten to (worker, local id).
pub fn emit_tables(network: &Network, partition: &PartitionMap) -> Result<Vec<ConnectionTable>> {
    let placement = Placement::new(network, partition)?;
    let workers = partition.workers as u32;
    let tables = placement
        .global_ids
        .iter()
        .enumerate()
        .map(|(w, gids)| {
            let entries: usize = gids.iter().map(|&g| network.row(g).len()).sum();
            let mut t = ConnectionTable {
                worker: w as u32,
                workers,
                neurons: Vec::with_capacity(gids.len()),
                row_offsets: Vec::with_capacity(gids.len() + 1),
                src_worker: Vec::with_capacity(entries),
                src_local: Vec::with_capacity(entries),
                kind: Vec::with_capacity(entries),
                weight: Vec::with_capacity(entries),
            };
            t.row_offsets.push(0);
            for &g in gids {
                let pop = network.population_of(g);
                t.neurons.push(NeuronRow {
                    global_id: g,
                    voxel: pop.voxel,
                    population: pop.id,
                    params: network.neuron_params(g),
                    ou: pop.params.ou,
                });
                for s in network.row(g) {
                    t.src_worker.push(placement.worker_of[s.source as usize]);
                    t.src_local.push(placement.local_of[s.source as usize]);
                    t.kind.push(s.kind);
                    t.weight.push(s.weight);
                }
                t.row_offsets.push(t.src_worker.len() as u64);
            }
            t
        })
        .collect();
    Ok(tables)
}

fn put_u32(b: &mut Vec<u8>, x: u32) {
    b.extend_from_slice(&x.to_le_bytes());
}

fn put_f32(b: &mut Vec<u8>, x: f32) {
    b.extend_from_slice(&x.to_le_bytes());
}

pub fn encode_table(t: &ConnectionTable) -> Vec<u8> {
    let e = t.entries();
    let mut b = Vec::with_capacity(28 + ROW_BYTES * t.len() + 13 * e);
    b.extend_from_slice(MAGIC);
    put_u32(&mut b, TABLE_VERSION);
    put_u32(&mut b, t.worker);
    put_u32(&mut b, t.workers);
    put_u32(&mut b, t.len() as u32);
    b.extend_from_slice(&(e as u64).to_le_bytes());
    for (i, r) in t.neurons.iter().enumerate() {
        put_u32(&mut b, r.global_id);
        put_u32(&mut b, r.voxel);
        put_u32(&mut b, r.population);
        put_u32(&mut b, (t.row_offsets[i + 1] - t.row_offsets[i]) as u32);
        let p = &r.params;
        for x in [p.capacitance, p.leak_conductance, p.leak_reversal, p.threshold, p.reset, p.refractory] {
            put_f32(&mut b, x);
        }
        for arr in [&p.reversal, &p.tau, &p.jump, &p.conductance] {
            for &x in arr {
                put_f32(&mut b, x);
            }
        }
        for x in [r.ou.mean, r.ou.sigma, r.ou.tau] {
            put_f32(&mut b, x);
        }
    }
    for &x in &t.src_worker {
        put_u32(&mut b, x);
    }
    for &x in &t.src_local {
        put_u32(&mut b, x);
    }
    b.extend(t.kind.iter().map(|&k| k as u8));
    for &x in &t.weight {
        put_f32(&mut b, x);
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32x4(&mut self) -> Result<[f32; 4]> {
        Ok([self.f32()?, self.f32()?, self.f32()?, self.f32()?])
    }
}

pub fn decode_table(buf: &[u8]) -> Result<ConnectionTable> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != TABLE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let worker = r.u32()?;
    let workers = r.u32()?;
    let n = r.u32()? as usize;
    let e = r.u64()? as usize;
    if buf.len() != 28 + ROW_BYTES * n + 13 * e {
        return Err(Error::Format(format!(
            "size {} does not match {n} rows and {e} entries",
            buf.len()
        )));
    }
    let mut neurons = Vec::with_capacity(n);
    let mut row_offsets = Vec::with_capacity(n + 1);
    row_offsets.push(0u64);
    for _ in 0..n {
        let global_id = r.u32()?;
        let voxel = r.u32()?;
        let population = r.u32()?;
        let degree = r.u32()? as u64;
        row_offsets.push(row_offsets.last().unwrap() + degree);
        let params = NeuronParams {
            capacitance: r.f32()?,
            leak_conductance: r.f32()?,
            leak_reversal: r.f32()?,
            threshold: r.f32()?,
            reset: r.f32()?,
            refractory: r.f32()?,
            reversal: r.f32x4()?,
            tau: r.f32x4()?,
            jump: r.f32x4()?,
            conductance: r.f32x4()?,
        };
        let ou = OuParams {
            mean: r.f32()?,
            sigma: r.f32()?,
            tau: r.f32()?,
        };
        neurons.push(NeuronRow {
            global_id,
            voxel,
            population,
            params,
            ou,
        });
    }
    if *row_offsets.last().unwrap() as usize != e {
        return Err(Error::Format("row degrees do not sum to the entry count".into()));
    }
    let src_worker = (0..e).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let src_local = (0..e).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let kind = r
        .take(e)?
        .iter()
        .map(|&b| SynapseKind::from_u8(b).ok_or_else(|| Error::Format(format!("bad synapse kind {b}"))))
        .collect::<Result<Vec<_>>>()?;
    let weight = (0..e).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    Ok(ConnectionTable {
        worker,
        workers,
        neurons,
        row_offsets,
        src_worker,
        src_local,
        kind,
        weight,
    })
}

pub fn write_table(path: &Path, t: &ConnectionTable) -> Result<Vec<u8>> {
    let bytes = encode_table(t);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn read_table(path: &Path) -> Result<ConnectionTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_table(&bytes)
}
