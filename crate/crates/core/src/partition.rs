//! Assignment of population units to workers.
//!
//! The objective is the heaviest inbound inter-worker traffic
//! `F = max_j sum_{i != j} D[i][j]`, subject to every worker's weighted size
//! `alpha*s1 + beta*s2 + mu*s3` staying within a common bound. Traffic weights
//! are integers (micro-bytes per step), so `F` is exact and solver-incremental
//! values agree with recomputation bit for bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NeuronState;
use crate::netgen::Network;

/// Bytes of one spike entry in a batch payload, and of a neuron id in the
/// spike buffer.
pub const SPIKE_ENTRY_BYTES: f64 = 4.0;
/// Bytes of one in-synapse table entry (source worker, source local, kind, weight).
pub const SYNAPSE_ENTRY_BYTES: u64 = 13;
/// Bytes of one neuron-property table row.
pub const PROPERTY_ROW_BYTES: u64 = 116;
/// Largest instance `partition_exact` accepts.
pub const EXACT_UNIT_LIMIT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSize {
    /// Neuron-state bytes.
    pub state: f64,
    /// Synapse-table bytes.
    pub synapses: f64,
    /// Expected spike-buffer bytes.
    pub spikes: f64,
    /// Units sharing a group (a voxel) are placed consecutively.
    #[serde(default)]
    pub group: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitEdge {
    pub src: u32,
    pub dst: u32,
    /// Expected traffic in micro-bytes per step.
    pub traffic: u64,
    /// Synapses from `src` onto `dst`.
    pub synapses: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitGraph {
    pub units: Vec<UnitSize>,
    /// Sorted by (src, dst); no self edges.
    pub edges: Vec<UnitEdge>,
}

impl UnitGraph {
    pub fn new(units: Vec<UnitSize>, mut edges: Vec<UnitEdge>) -> Result<Self> {
        let n = units.len() as u32;
        for (i, u) in units.iter().enumerate() {
            if !(u.state > 0.0 || u.synapses > 0.0 || u.spikes > 0.0)
                || [u.state, u.synapses, u.spikes].iter().any(|x| !(x.is_finite() && *x >= 0.0))
            {
                return Err(Error::config(format!("unit {i} needs a positive finite size")));
            }
        }
        if let Some(e) = edges.iter().find(|e| e.src >= n || e.dst >= n) {
            return Err(Error::config(format!("edge {} -> {} references a missing unit", e.src, e.dst)));
        }
        edges.retain(|e| e.src != e.dst);
        edges.sort_unstable_by_key(|e| (e.src, e.dst));
        edges.dedup_by(|b, a| {
            if a.src == b.src && a.dst == b.dst {
                a.traffic += b.traffic;
                a.synapses += b.synapses;
                true
            } else {
                false
            }
        });
        Ok(UnitGraph { units, edges })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Multiplies every traffic weight by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        let mut g = self.clone();
        for e in &mut g.edges {
            e.traffic *= factor;
        }
        g
    }

    /// Per-unit outgoing and incoming adjacency `(other, traffic)`.
    fn adjacency(&self) -> (Vec<Vec<(usize, u64)>>, Vec<Vec<(usize, u64)>>) {
        let mut out = vec![Vec::new(); self.len()];
        let mut inc = vec![Vec::new(); self.len()];
        for e in &self.edges {
            out[e.src as usize].push((e.dst as usize, e.traffic));
            inc[e.dst as usize].push((e.src as usize, e.traffic));
        }
        (out, inc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Capacity {
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    /// Per-worker bound as a multiple of the balanced share `sum / N`.
    pub slack: f64,
    /// Absolute per-worker bound; overrides `slack` when set.
    pub bound: Option<f64>,
}

impl Default for Capacity {
    fn default() -> Self {
        Capacity {
            alpha: 1.0,
            beta: 1.0,
            mu: 1.0,
            slack: 1.1,
            bound: None,
        }
    }
}

impl Capacity {
    pub fn weigh(&self, s: &UnitSize) -> f64 {
        self.alpha * s.state + self.beta * s.synapses + self.mu * s.spikes
    }

    /// The bound `gamma` for `workers` workers.
    pub fn bound_for(&self, g: &UnitGraph, workers: usize) -> f64 {
        match self.bound {
            Some(b) => b,
            None => self.slack * g.units.iter().map(|s| self.weigh(s)).sum::<f64>() / workers as f64,
        }
    }
}

/// Unit-to-worker assignment with its realized traffic matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionMap {
    pub assignment: Vec<usize>,
    pub workers: usize,
    pub bound: f64,
    pub loads: Vec<f64>,
    /// `traffic[i][j]`: expected micro-bytes per step from worker i to worker j.
    pub traffic: Vec<Vec<u64>>,
    /// `max_j sum_{i != j} traffic[i][j]`.
    pub objective: u64,
}

impl PartitionMap {
    /// Every unit on worker 0, no traffic information.
    pub fn single(units: usize) -> Self {
        Self::from_assignment(vec![0; units], 1)
    }

    /// An assignment without an attached graph (zero traffic, unit loads).
    pub fn from_assignment(assignment: Vec<usize>, workers: usize) -> Self {
        let mut loads = vec![0.0; workers];
        for &w in &assignment {
            if w < workers {
                loads[w] += 1.0;
            }
        }
        PartitionMap {
            assignment,
            workers,
            bound: f64::INFINITY,
            loads,
            traffic: vec![vec![0; workers]; workers],
            objective: 0,
        }
    }

    /// Evaluates `assignment` on `g`, checking the cover and capacity constraints.
    pub fn evaluate(g: &UnitGraph, assignment: Vec<usize>, workers: usize, cap: &Capacity) -> Result<Self> {
        let bound = cap.bound_for(g, workers);
        Self::evaluate_with_bound(g, assignment, workers, cap, bound)
    }

    fn evaluate_with_bound(
        g: &UnitGraph,
        assignment: Vec<usize>,
        workers: usize,
        cap: &Capacity,
        bound: f64,
    ) -> Result<Self> {
        if assignment.len() != g.len() {
            return Err(Error::config(format!(
                "assignment covers {} units, graph has {}",
                assignment.len(),
                g.len()
            )));
        }
        let mut loads = vec![0.0; workers];
        for (u, &w) in assignment.iter().enumerate() {
            if w >= workers {
                return Err(Error::config(format!("unit {u} assigned to missing worker {w}")));
            }
            loads[w] += cap.weigh(&g.units[u]);
        }
        for (w, &l) in loads.iter().enumerate() {
            if l > bound {
                return Err(Error::config(format!("worker {w} load {l} exceeds bound {bound}")));
            }
        }
        let traffic = traffic_matrix(g, &assignment, workers);
        let objective = objective(&traffic);
        Ok(PartitionMap {
            assignment,
            workers,
            bound,
            loads,
            traffic,
            objective,
        })
    }

    /// Inter-worker synapse counts, `[src worker][dst worker]`.
    pub fn synapse_matrix(&self, g: &UnitGraph) -> Vec<Vec<u64>> {
        let mut m = vec![vec![0u64; self.workers]; self.workers];
        for e in &g.edges {
            let (a, b) = (self.assignment[e.src as usize], self.assignment[e.dst as usize]);
            if a != b {
                m[a][b] += e.synapses;
            }
        }
        m
    }
}

/// Worker-level traffic `D` for an assignment.
pub fn traffic_matrix(g: &UnitGraph, assignment: &[usize], workers: usize) -> Vec<Vec<u64>> {
    let mut d = vec![vec![0u64; workers]; workers];
    for e in &g.edges {
        d[assignment[e.src as usize]][assignment[e.dst as usize]] += e.traffic;
    }
    d
}

/// `F = max_j sum_{i != j} D[i][j]`.
pub fn objective(d: &[Vec<u64>]) -> u64 {
    (0..d.len())
        .map(|j| (0..d.len()).filter(|&i| i != j).map(|i| d[i][j]).sum::<u64>())
        .max()
        .unwrap_or(0)
}

/// Unit-level traffic estimate: for each ordered pair of populations, the
/// expected spike entries per step sent from `u` to `v`, counting each source
/// neuron once per destination. `rates` is in Hz, one per population.
pub fn estimate_traffic(network: &Network, rates: &[f64], dt_ms: f64) -> Result<UnitGraph> {
    let npop = network.populations.len();
    if rates.len() != npop {
        return Err(Error::config(format!("{} rates for {npop} populations", rates.len())));
    }
    if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::config(format!("rate estimate must be positive, got {r}")));
    }
    let state_bytes = (std::mem::size_of::<NeuronState>() as u64 + PROPERTY_ROW_BYTES) as f64;
    let units = network
        .populations
        .iter()
        .map(|p| UnitSize {
            state: p.size as f64 * state_bytes,
            synapses: (p.size as u64 * p.in_degree as u64 * SYNAPSE_ENTRY_BYTES) as f64,
            spikes: p.size as f64 * rates[p.id as usize] * dt_ms * 1e-3 * SPIKE_ENTRY_BYTES,
            group: Some(p.voxel),
        })
        .collect();

    // stamp[s] = 1 + last target population that counted source s.
    let mut stamp = vec![0u32; network.neurons() as usize];
    let mut edges = Vec::new();
    let mut sources = vec![0u64; npop];
    let mut synapses = vec![0u64; npop];
    for (v, pop) in network.populations.iter().enumerate() {
        sources.iter_mut().for_each(|x| *x = 0);
        synapses.iter_mut().for_each(|x| *x = 0);
        for n in pop.neurons() {
            for s in network.row(n) {
                let u = network.neuron_population[s.source as usize] as usize;
                synapses[u] += 1;
                if stamp[s.source as usize] != v as u32 + 1 {
                    stamp[s.source as usize] = v as u32 + 1;
                    sources[u] += 1;
                }
            }
        }
        for u in 0..npop {
            if u != v && synapses[u] > 0 {
                let bytes = rates[u] * dt_ms * 1e-3 * sources[u] as f64 * SPIKE_ENTRY_BYTES;
                edges.push(UnitEdge {
                    src: u as u32,
                    dst: v as u32,
                    traffic: (bytes * 1e6).round() as u64,
                    synapses: synapses[u],
                });
            }
        }
    }
    UnitGraph::new(units, edges)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum PartitionMethod {
    #[default]
    Greedy,
    Sequential,
    Exact,
    File { path: PathBuf },
}


/// Groups in descending total weight, each group's units in descending
/// weight; ties by lowest unit id. Ungrouped units form their own group.
fn placement_order(g: &UnitGraph, cap: &Capacity) -> Vec<usize> {
    let key = |u: usize| g.units[u].group.map_or((1, u as u64), |k| (0, k as u64));
    let mut groups: std::collections::HashMap<(u8, u64), (f64, usize)> = std::collections::HashMap::new();
    for u in 0..g.len() {
        let e = groups.entry(key(u)).or_insert((0.0, u));
        e.0 += cap.weigh(&g.units[u]);
        e.1 = e.1.min(u);
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| {
        let (ga, gb) = (groups[&key(a)], groups[&key(b)]);
        gb.0.total_cmp(&ga.0)
            .then(ga.1.cmp(&gb.1))
            .then(cap.weigh(&g.units[b]).total_cmp(&cap.weigh(&g.units[a])))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy placement: groups of units in descending weighted size, each on
/// the feasible worker minimizing the resulting `F`, then the added cut
/// traffic, then lower load, then lower worker id.
pub fn partition_greedy(g: &UnitGraph, workers: usize, cap: &Capacity) -> Result<PartitionMap> {
    check_workers(workers)?;
    let bound = cap.bound_for(g, workers);
    let (out, inc) = g.adjacency();
    let order = placement_order(g, cap);

    let mut assignment = vec![usize::MAX; g.len()];
    let mut loads = vec![0.0f64; workers];
    let mut inbound = vec![0u64; workers];
    let mut delta = vec![0u64; workers];
    for &x in &order {
        let size = cap.weigh(&g.units[x]);
        let mut best: Option<(u64, u64, f64, usize)> = None;
        for w in 0..workers {
            if loads[w] + size > bound {
                continue;
            }
            delta.iter_mut().for_each(|d| *d = 0);
            for &(v, t) in &out[x] {
                let p = assignment[v];
                if p != usize::MAX && p != w {
                    delta[p] += t;
                }
            }
            for &(u, t) in &inc[x] {
                let p = assignment[u];
                if p != usize::MAX && p != w {
                    delta[w] += t;
                }
            }
            let f = (0..workers).map(|j| inbound[j] + delta[j]).max().unwrap_or(0);
            let cut: u64 = delta.iter().sum();
            let cand = (f, cut, loads[w], w);
            let better = match best {
                None => true,
                Some((bf, bc, bl, _)) => (f, cut) < (bf, bc) || ((f, cut) == (bf, bc) && loads[w] < bl),
            };
            if better {
                best = Some(cand);
            }
        }
        let Some((_, _, _, w)) = best else {
            return Err(Error::Infeasible {
                unit: x,
                size,
                bound,
            });
        };
        for &(v, t) in &out[x] {
            let p = assignment[v];
            if p != usize::MAX && p != w {
                inbound[p] += t;
            }
        }
        for &(u, t) in &inc[x] {
            let p = assignment[u];
            if p != usize::MAX && p != w {
                inbound[w] += t;
            }
        }
        assignment[x] = w;
        loads[w] += size;
    }
    let map = PartitionMap::evaluate_with_bound(g, assignment, workers, cap, bound)?;
    debug_assert_eq!(map.objective, inbound.iter().copied().max().unwrap_or(0));
    Ok(map)
}

/// First-fit in input order: fill worker 0, then worker 1, and so on.
pub fn partition_sequential(g: &UnitGraph, workers: usize, cap: &Capacity) -> Result<PartitionMap> {
    check_workers(workers)?;
    let bound = cap.bound_for(g, workers);
    let mut assignment = Vec::with_capacity(g.len());
    let mut w = 0;
    let mut load = 0.0;
    for (u, s) in g.units.iter().enumerate() {
        let size = cap.weigh(s);
        if load + size > bound {
            w += 1;
            load = 0.0;
        }
        if w >= workers || size > bound {
            return Err(Error::Infeasible {
                unit: u,
                size,
                bound,
            });
        }
        assignment.push(w);
        load += size;
    }
    PartitionMap::evaluate_with_bound(g, assignment, workers, cap, bound)
}

/// Global minimizer of `F` by enumeration; among optimal assignments the
/// lexicographically smallest is returned.
pub fn partition_exact(g: &UnitGraph, workers: usize, cap: &Capacity) -> Result<PartitionMap> {
    check_workers(workers)?;
    if g.len() > EXACT_UNIT_LIMIT {
        return Err(Error::TooManyUnits {
            units: g.len(),
            limit: EXACT_UNIT_LIMIT,
        });
    }
    let bound = cap.bound_for(g, workers);
    let (out, inc) = g.adjacency();
    let sizes: Vec<f64> = g.units.iter().map(|s| cap.weigh(s)).collect();
    if let Some(u) = sizes.iter().position(|&s| s > bound) {
        return Err(Error::Infeasible {
            unit: u,
            size: sizes[u],
            bound,
        });
    }

    struct Search<'a> {
        out: &'a [Vec<(usize, u64)>],
        inc: &'a [Vec<(usize, u64)>],
        sizes: &'a [f64],
        bound: f64,
        workers: usize,
        assignment: Vec<usize>,
        loads: Vec<f64>,
        inbound: Vec<u64>,
        best: Option<(u64, Vec<usize>)>,
    }

    impl Search<'_> {
        // Worker labels are interchangeable, so only restricted-growth
        // assignments (unit k uses at most one new label) are visited. The
        // lexicographically smallest member of every relabeling class is of
        // this form, which keeps the tie-break exact.
        fn visit(&mut self, x: usize, used: usize) {
            let current = self.inbound.iter().copied().max().unwrap_or(0);
            if let Some((bf, _)) = &self.best {
                if current >= *bf {
                    return;
                }
            }
            if x == self.assignment.len() {
                self.best = Some((current, self.assignment.clone()));
                return;
            }
            let limit = (used + 1).min(self.workers);
            for w in 0..limit {
                if self.loads[w] + self.sizes[x] > self.bound {
                    continue;
                }
                let saved = self.inbound.clone();
                for &(v, t) in &self.out[x] {
                    if v < x && self.assignment[v] != w {
                        self.inbound[self.assignment[v]] += t;
                    }
                }
                for &(u, t) in &self.inc[x] {
                    if u < x && self.assignment[u] != w {
                        self.inbound[w] += t;
                    }
                }
                self.assignment[x] = w;
                self.loads[w] += self.sizes[x];
                self.visit(x + 1, used.max(w + 1));
                self.loads[w] -= self.sizes[x];
                self.inbound = saved;
            }
        }
    }

    let mut s = Search {
        out: &out,
        inc: &inc,
        sizes: &sizes,
        bound,
        workers,
        assignment: vec![0; g.len()],
        loads: vec![0.0; workers],
        inbound: vec![0; workers],
        best: None,
    };
    s.visit(0, 0);
    let Some((_, assignment)) = s.best else {
        return Err(Error::Infeasible {
            unit: 0,
            size: sizes.iter().sum(),
            bound: bound * workers as f64,
        });
    };
    PartitionMap::evaluate_with_bound(g, assignment, workers, cap, bound)
}

fn check_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        return Err(Error::config("worker count must be at least 1"));
    }
    Ok(())
}

pub fn partition(g: &UnitGraph, workers: usize, cap: &Capacity, method: &PartitionMethod) -> Result<PartitionMap> {
    match method {
        PartitionMethod::Greedy => partition_greedy(g, workers, cap),
        PartitionMethod::Sequential => partition_sequential(g, workers, cap),
        PartitionMethod::Exact => partition_exact(g, workers, cap),
        PartitionMethod::File { path } => {
            let (assignment, n) = read_partition(path)?;
            if n != workers {
                return Err(Error::config(format!(
                    "{} assigns {n} workers, {workers} requested",
                    path.display()
                )));
            }
            PartitionMap::evaluate(g, assignment, workers, cap)
        }
    }
}

/// Text form: `workers N`, then `unit worker` lines, then a `#` footer with
/// `F`, per-worker loads, and the traffic matrix as CSV.
pub fn format_partition(p: &PartitionMap) -> String {
    let mut s = format!("workers {}\n", p.workers);
    for (u, w) in p.assignment.iter().enumerate() {
        let _ = writeln!(s, "{u} {w}");
    }
    let _ = writeln!(s, "# F {}", p.objective);
    let loads: Vec<String> = p.loads.iter().map(|l| format!("{l}")).collect();
    let _ = writeln!(s, "# loads {}", loads.join(","));
    let _ = writeln!(s, "# D");
    for row in &p.traffic {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "# {}", cells.join(","));
    }
    s
}

pub fn parse_partition(text: &str, path: &Path) -> Result<(Vec<usize>, usize)> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let workers = match lines.next() {
        Some((i, l)) => l
            .strip_prefix("workers ")
            .and_then(|x| x.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .ok_or_else(|| err(i, format!("expected `workers N`, got `{l}`")))?,
        None => return Err(err(1, "empty partition file".into())),
    };
    let mut assignment = Vec::new();
    for (i, l) in lines {
        let mut f = l.split_whitespace();
        let (Some(u), Some(w), None) = (f.next(), f.next(), f.next()) else {
            return Err(err(i, format!("expected `unit worker`, got `{l}`")));
        };
        let u: usize = u.parse().map_err(|_| err(i, format!("bad unit id `{u}`")))?;
        let w: usize = w.parse().map_err(|_| err(i, format!("bad worker id `{w}`")))?;
        if u != assignment.len() {
            return Err(err(i, format!("unit {u} out of order, expected {}", assignment.len())));
        }
        if w >= workers {
            return Err(err(i, format!("worker {w} out of range for {workers} workers")));
        }
        assignment.push(w);
    }
    Ok((assignment, workers))
}

pub fn read_partition(path: &Path) -> Result<(Vec<usize>, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_partition(&text, path)
}

pub fn write_partition(path: &Path, p: &PartitionMap) -> Result<()> {
    std::fs::write(path, format_partition(p)).map_err(|e| Error::io(path, e))
}

/// Off-diagonal entries of an inter-worker synapse matrix.
pub fn off_diagonal(m: &[Vec<u64>]) -> Vec<u64> {
    let mut v = Vec::new();
    for (i, row) in m.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            if i != j {
                v.push(x);
            }
        }
    }
    v
}

/// Population standard deviation.
pub fn std_dev(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&x| x as f64).sum::<f64>() / n;
    (values.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Histogram of per-worker-pair synapse counts as `(bin_lo, bin_hi, count)`
/// with `bins` equal-width bins over `[0, max]`.
pub fn histogram(values: &[u64], bins: usize) -> Vec<(u64, u64, u64)> {
    let bins = bins.max(1);
    let max = values.iter().copied().max().unwrap_or(0);
    let width = (max / bins as u64 + 1).max(1);
    let mut h: Vec<(u64, u64, u64)> = (0..bins as u64).map(|b| (b * width, (b + 1) * width, 0)).collect();
    for &x in values {
        let b = ((x / width) as usize).min(bins - 1);
        h[b].2 += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> UnitSize {
        UnitSize {
            state: 1.0,
            synapses: 0.0,
            spikes: 0.0,
            group: None,
        }
    }

    fn edge(src: u32, dst: u32, traffic: u64) -> UnitEdge {
        UnitEdge {
            src,
            dst,
            traffic,
            synapses: traffic,
        }
    }

    fn graph(n: usize, edges: Vec<UnitEdge>) -> UnitGraph {
        UnitGraph::new(vec![unit(); n], edges).unwrap()
    }

    fn exact_cap(bound: f64) -> Capacity {
        Capacity {
            bound: Some(bound),
            ..Default::default()
        }
    }

    #[test]
    fn single_worker_has_no_traffic() {
        let g = graph(3, vec![edge(0, 1, 5), edge(1, 2, 7)]);
        for p in [
            partition_greedy(&g, 1, &Capacity::default()).unwrap(),
            partition_exact(&g, 1, &Capacity::default()).unwrap(),
        ] {
            assert_eq!(p.assignment, vec![0, 0, 0]);
            assert_eq!(p.objective, 0);
        }
    }

    #[test]
    fn disconnected_cliques_split_cleanly() {
        let mut edges = Vec::new();
        for base in [0u32, 3] {
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        edges.push(edge(base + a, base + b, 10));
                    }
                }
            }
        }
        let g = graph(6, edges);
        let p = partition_greedy(&g, 2, &exact_cap(3.0)).unwrap();
        assert_eq!(p.objective, 0);
        assert_eq!(p.assignment[0..3], [p.assignment[0]; 3]);
        assert_eq!(p.assignment[3..6], [p.assignment[3]; 3]);
    }

    #[test]
    fn directed_ring_optimum() {
        // 0->1->2->3->0, weight 5, two units per worker. Balanced splits:
        // {0,1}|{2,3} and {0,3}|{1,2} cut two edges, one into each side (F=5);
        // {0,2}|{1,3} cuts all four (F=10).
        let g = graph(4, vec![edge(0, 1, 5), edge(1, 2, 5), edge(2, 3, 5), edge(3, 0, 5)]);
        let cap = exact_cap(2.0);
        let exact = partition_exact(&g, 2, &cap).unwrap();
        assert_eq!(exact.objective, 5);
        assert_eq!(exact.assignment, vec![0, 0, 1, 1]);
        let seq = partition_sequential(&g, 2, &cap).unwrap();
        let greedy = partition_greedy(&g, 2, &cap).unwrap();
        assert!(seq.objective >= greedy.objective);
        assert!(greedy.objective >= exact.objective);
    }

    #[test]
    fn sequential_one_unit_per_worker() {
        let g = graph(5, vec![edge(0, 4, 1)]);
        let p = partition_sequential(&g, 5, &Capacity::default()).unwrap();
        assert_eq!(p.assignment, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn infeasible_names_unit() {
        let mut units = vec![unit(); 3];
        units[1].state = 10.0;
        let g = UnitGraph::new(units, vec![]).unwrap();
        match partition_greedy(&g, 2, &exact_cap(5.0)) {
            Err(Error::Infeasible { unit, .. }) => assert_eq!(unit, 1),
            other => panic!("expected infeasible, got {other:?}"),
        }
        assert!(partition_sequential(&g, 2, &exact_cap(5.0)).is_err());
        assert!(partition_exact(&g, 2, &exact_cap(5.0)).is_err());
    }

    #[test]
    fn exact_refuses_large_instances() {
        let g = graph(13, vec![]);
        assert!(matches!(
            partition_exact(&g, 2, &Capacity::default()),
            Err(Error::TooManyUnits { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let g = graph(4, vec![edge(0, 1, 5), edge(2, 3, 1), edge(3, 1, 2)]);
        let p = partition_greedy(&g, 2, &Capacity::default()).unwrap();
        let text = format_partition(&p);
        let (a, n) = parse_partition(&text, Path::new("p.txt")).unwrap();
        assert_eq!((a, n), (p.assignment.clone(), 2));
        assert!(text.contains(&format!("# F {}", p.objective)));
        assert!(parse_partition("workers 2\n0 5\n", Path::new("p")).is_err());
        assert!(parse_partition("0 1\n", Path::new("p")).is_err());
    }

    #[test]
    fn histogram_bins_every_value() {
        let h = histogram(&[0, 1, 5, 9, 10], 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<u64>(), 5);
        assert_eq!(std_dev(&[2, 4]), 1.0);
    }

    fn instance() -> impl Strategy<Value = (UnitGraph, usize)> {
        (2usize..=8, 2usize..=4).prop_flat_map(|(n, workers)| {
            let sizes = proptest::collection::vec(1u32..20, n);
            let edges = proptest::collection::vec((0..n as u32, 0..n as u32, 0u64..1000), 0..3 * n);
            (sizes, edges).prop_map(move |(sizes, edges)| {
                let units = sizes
                    .into_iter()
                    .map(|s| UnitSize {
                        state: s as f64,
                        synapses: 0.0,
                        spikes: 0.0,
                        group: None,
                    })
                    .collect();
                let edges = edges.into_iter().map(|(a, b, t)| edge(a, b, t)).collect();
                (UnitGraph::new(units, edges).unwrap(), workers)
            })
        })
    }

    fn check_constraints(g: &UnitGraph, p: &PartitionMap, cap: &Capacity) {
        assert_eq!(p.assignment.len(), g.len());
        let mut loads = vec![0.0; p.workers];
        for (u, &w) in p.assignment.iter().enumerate() {
            assert!(w < p.workers);
            loads[w] += cap.weigh(&g.units[u]);
        }
        assert!(loads.iter().all(|&l| l <= p.bound));
        assert_eq!(p.objective, objective(&traffic_matrix(g, &p.assignment, p.workers)));
    }

    proptest! {
        #[test]
        fn exact_dominates_heuristics((g, workers) in instance()) {
            let cap = Capacity { slack: 1.5, ..Default::default() };
            let exact = partition_exact(&g, workers, &cap);
            let greedy = partition_greedy(&g, workers, &cap);
            let seq = partition_sequential(&g, workers, &cap);
            if let Ok(e) = &exact {
                check_constraints(&g, e, &cap);
                if let Ok(gr) = &greedy {
                    check_constraints(&g, gr, &cap);
                    prop_assert!(e.objective <= gr.objective);
                }
                if let Ok(s) = &seq {
                    check_constraints(&g, s, &cap);
                    prop_assert!(e.objective <= s.objective);
                }
            } else {
                prop_assert!(greedy.is_err() && seq.is_err());
            }
        }

        #[test]
        fn scaling_traffic_keeps_assignments((g, workers) in instance(), factor in 2u64..7) {
            let cap = Capacity { slack: 1.5, ..Default::default() };
            let scaled = g.scaled(factor);
            if let (Ok(a), Ok(b)) = (partition_greedy(&g, workers, &cap), partition_greedy(&scaled, workers, &cap)) {
                prop_assert_eq!(a.assignment, b.assignment);
                prop_assert_eq!(a.objective * factor, b.objective);
            }
            if let (Ok(a), Ok(b)) = (partition_exact(&g, workers, &cap), partition_exact(&scaled, workers, &cap)) {
                prop_assert_eq!(a.assignment, b.assignment);
            }
        }

        #[test]
        fn greedy_is_deterministic((g, workers) in instance()) {
            let cap = Capacity { slack: 1.5, ..Default::default() };
            prop_assert_eq!(partition_greedy(&g, workers, &cap).ok(), partition_greedy(&g, workers, &cap).ok());
        }
    }
}
