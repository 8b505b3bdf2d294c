//! Voxel-level connectome: file format and synthetic generators.
//!
//! File format (whitespace separated, `#` starts a comment):
//!
//! ```text
//! voxels N
//! <id> <region> <neuron_count> [gm_weight]     (N lines)
//! edges M
//! <src> <dst> <weight>                         (M lines)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{IntraCircuit, Region};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelInfo {
    pub region: Region,
    pub neuron_count: u32,
    pub gm_weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: u32,
    pub dst: u32,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct ConnectomeGraph {
    pub voxels: Vec<VoxelInfo>,
    /// Sparse inter-voxel edges, sorted by (src, dst).
    pub edges: Vec<Edge>,
    pub intra: IntraCircuit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConnectomeSource {
    File {
        path: std::path::PathBuf,
    },
    /// Each voxel connects to its two ring neighbours ("artificial brain").
    Ring {
        voxels: u32,
        #[serde(default)]
        region: Region,
    },
    /// Two equal blocks, dense inside, weak across.
    TwoBlock {
        voxels: u32,
        #[serde(default)]
        region: Region,
        #[serde(default = "one")]
        within: f64,
        #[serde(default = "tenth")]
        across: f64,
    },
    /// Independent ordered pairs with probability `sparsity`.
    UniformRandom {
        voxels: u32,
        #[serde(default)]
        region: Region,
        sparsity: f64,
    },
    /// Spatially embedded voxels with distance-decaying, heavy-tailed
    /// connectivity and mixed regions; voxel ids carry no spatial order.
    DtiLike {
        voxels: u32,
        sparsity: f64,
        #[serde(default = "default_length")]
        length_scale: f64,
        #[serde(default = "default_mix")]
        region_mix: [f64; 4],
    },
}

fn one() -> f64 {
    1.0
}
fn tenth() -> f64 {
    0.1
}
fn default_length() -> f64 {
    0.15
}
fn default_mix() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl ConnectomeGraph {
    pub fn validate(&self) -> Result<()> {
        let n = self.voxels.len() as u32;
        if n == 0 {
            return Err(Error::config("connectome has no voxels"));
        }
        for e in &self.edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::config(format!(
                    "edge {} -> {} references a voxel outside 0..{n}",
                    e.src, e.dst
                )));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::config(format!(
                    "edge {} -> {} has invalid weight {}",
                    e.src, e.dst, e.weight
                )));
            }
            if e.src == e.dst {
                return Err(Error::config(format!("self edge on voxel {}", e.src)));
            }
        }
        Ok(())
    }

    pub fn out_degree(&self, voxel: u32) -> usize {
        self.edges.iter().filter(|e| e.src == voxel).count()
    }

    /// Fraction of ordered voxel pairs that carry an edge.
    pub fn density(&self) -> f64 {
        let n = self.voxels.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        self.edges.len() as f64 / (n * (n - 1.0))
    }

    /// Per destination voxel, the sampling distribution over source voxels:
    /// edge weights normalized per source first, then taken as relative
    /// in-pick weights.
    pub fn inbound_weights(&self) -> Vec<Vec<(u32, f64)>> {
        let n = self.voxels.len();
        let mut out_sum = vec![0.0f64; n];
        for e in &self.edges {
            out_sum[e.src as usize] += e.weight;
        }
        let mut inbound = vec![Vec::new(); n];
        for e in &self.edges {
            let s = out_sum[e.src as usize];
            if s > 0.0 && e.weight > 0.0 {
                inbound[e.dst as usize].push((e.src, e.weight / s));
            }
        }
        inbound
    }

    fn finish(mut voxels: Vec<VoxelInfo>, mut edges: Vec<Edge>, intra: IntraCircuit) -> Self {
        edges.sort_by_key(|e| (e.src, e.dst));
        edges.dedup_by_key(|e| (e.src, e.dst));
        voxels.shrink_to_fit();
        ConnectomeGraph {
            voxels,
            edges,
            intra,
        }
    }

    /// Adds one in-edge to every voxel that has none (n >= 2), choosing the
    /// source with `pick`.
    fn ensure_inputs(&mut self, mut pick: impl FnMut(u32) -> u32) {
        let n = self.voxels.len() as u32;
        if n < 2 {
            return;
        }
        let mut has_in = vec![false; n as usize];
        for e in &self.edges {
            has_in[e.dst as usize] = true;
        }
        for v in 0..n {
            if !has_in[v as usize] {
                let src = pick(v);
                self.edges.push(Edge {
                    src,
                    dst: v,
                    weight: 1.0,
                });
            }
        }
        self.edges.sort_by_key(|e| (e.src, e.dst));
    }
}

pub fn build_connectome(source: &ConnectomeSource, intra: IntraCircuit, seed: u64) -> Result<ConnectomeGraph> {
    let graph = match source {
        ConnectomeSource::File { path } => read_connectome(path, intra)?,
        &ConnectomeSource::Ring { voxels, region } => ring(voxels, region, intra),
        &ConnectomeSource::TwoBlock {
            voxels,
            region,
            within,
            across,
        } => two_block(voxels, region, within, across, intra),
        &ConnectomeSource::UniformRandom {
            voxels,
            region,
            sparsity,
        } => uniform_random(voxels, region, sparsity, seed, intra)?,
        &ConnectomeSource::DtiLike {
            voxels,
            sparsity,
            length_scale,
            region_mix,
        } => dti_like(voxels, sparsity, length_scale, region_mix, seed, intra)?,
    };
    graph.validate()?;
    Ok(graph)
}

fn uniform_voxels(n: u32, region: Region) -> Vec<VoxelInfo> {
    (0..n)
        .map(|_| VoxelInfo {
            region,
            neuron_count: 0,
            gm_weight: 1.0,
        })
        .collect()
}

pub fn ring(n: u32, region: Region, intra: IntraCircuit) -> ConnectomeGraph {
    let mut edges = Vec::new();
    if n >= 2 {
        for v in 0..n {
            for dst in [(v + 1) % n, (v + n - 1) % n] {
                edges.push(Edge {
                    src: v,
                    dst,
                    weight: 1.0,
                });
            }
        }
    }
    ConnectomeGraph::finish(uniform_voxels(n, region), edges, intra)
}

pub fn two_block(n: u32, region: Region, within: f64, across: f64, intra: IntraCircuit) -> ConnectomeGraph {
    let half = n / 2;
    let mut edges = Vec::new();
    for s in 0..n {
        for d in 0..n {
            if s == d {
                continue;
            }
            let w = if (s < half) == (d < half) { within } else { across };
            if w > 0.0 {
                edges.push(Edge {
                    src: s,
                    dst: d,
                    weight: w,
                });
            }
        }
    }
    ConnectomeGraph::finish(uniform_voxels(n, region), edges, intra)
}

fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::config(format!("sparsity {sparsity} outside [0, 1]")));
    }
    Ok(())
}

pub fn uniform_random(n: u32, region: Region, sparsity: f64, seed: u64, intra: IntraCircuit) -> Result<ConnectomeGraph> {
    check_sparsity(sparsity)?;
    let mut edges = Vec::new();
    for s in 0..n {
        let mut r = rng::shard_rng(&[seed, rng::domain::CONNECTOME, 0, s as u64]);
        for d in 0..n {
            if s != d && r.gen_bool(sparsity) {
                edges.push(Edge {
                    src: s,
                    dst: d,
                    weight: 1.0,
                });
            }
        }
    }
    let mut g = ConnectomeGraph::finish(uniform_voxels(n, region), edges, intra);
    let mut r = rng::shard_rng(&[seed, rng::domain::CONNECTOME, 1]);
    g.ensure_inputs(|v| {
        let s = r.gen_range(0..n - 1);
        if s >= v {
            s + 1
        } else {
            s
        }
    });
    Ok(g)
}

pub fn dti_like(
    n: u32,
    sparsity: f64,
    length_scale: f64,
    region_mix: [f64; 4],
    seed: u64,
    intra: IntraCircuit,
) -> Result<ConnectomeGraph> {
    check_sparsity(sparsity)?;
    if !(length_scale > 0.0) {
        return Err(Error::config("dti_like length_scale must be positive"));
    }
    let mix_total: f64 = region_mix.iter().sum();
    if !(mix_total > 0.0) || region_mix.iter().any(|&m| m < 0.0) {
        return Err(Error::config("dti_like region_mix must be nonnegative with positive sum"));
    }
    let mut r = rng::shard_rng(&[seed, rng::domain::CONNECTOME, 2]);
    let pos: Vec<[f64; 3]> = (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let voxels: Vec<VoxelInfo> = (0..n)
        .map(|_| {
            let mut x = r.gen::<f64>() * mix_total;
            let mut region = Region::Cerebellum;
            for (i, &m) in region_mix.iter().enumerate() {
                if x < m {
                    region = Region::ALL[i];
                    break;
                }
                x -= m;
            }
            let gm = (0.5 * gaussian(&mut r)).exp();
            VoxelInfo {
                region,
                neuron_count: 0,
                gm_weight: gm,
            }
        })
        .collect();

    let dist = |a: usize, b: usize| -> f64 {
        let d: f64 = (0..3).map(|k| (pos[a][k] - pos[b][k]).powi(2)).sum();
        d.sqrt()
    };
    // Scale c so that sum_ij min(1, c exp(-d/l)) hits the target edge count.
    let target = sparsity * n as f64 * (n as f64 - 1.0);
    let kernel: Vec<f64> = (0..n as usize)
        .flat_map(|a| (0..n as usize).filter(move |&b| b != a).map(move |b| (a, b)))
        .map(|(a, b)| (-dist(a, b) / length_scale).exp())
        .collect();
    let expected = |c: f64| kernel.iter().map(|&k| (c * k).min(1.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while expected(hi) < target && hi < 1e12 {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);

    let mut edges = Vec::new();
    let mut idx = 0;
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let p = (c * kernel[idx]).min(1.0);
            idx += 1;
            if r.gen::<f64>() < p {
                edges.push(Edge {
                    src: a,
                    dst: b,
                    weight: gaussian(&mut r).exp(),
                });
            }
        }
    }
    let mut g = ConnectomeGraph::finish(voxels, edges, intra);
    g.ensure_inputs(|v| {
        (0..n)
            .filter(|&s| s != v)
            .min_by(|&x, &y| dist(x as usize, v as usize).total_cmp(&dist(y as usize, v as usize)))
            .unwrap_or(0)
    });
    Ok(g)
}

fn gaussian(r: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - r.gen::<f64>();
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn read_connectome(path: &Path, intra: IntraCircuit) -> Result<ConnectomeGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_connectome(&text, path, intra)
}

pub fn parse_connectome(text: &str, path: &Path, intra: IntraCircuit) -> Result<ConnectomeGraph> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let header = |lines: &mut dyn Iterator<Item = (usize, &str)>, keyword: &str| -> Result<usize> {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| err(0, format!("missing `{keyword}` header")))?;
        let mut it = l.split_whitespace();
        if it.next() != Some(keyword) {
            return Err(err(ln, format!("expected `{keyword} <count>`")));
        }
        it.next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| err(ln, format!("bad `{keyword}` count")))
    };

    let nv = header(&mut lines, "voxels")?;
    let mut ids = std::collections::HashMap::new();
    let mut voxels = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| err(0, "fewer voxel lines than declared".into()))?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < 3 || f.len() > 4 {
            return Err(err(ln, "expected `id region neuron_count [gm_weight]`".into()));
        }
        let id: i64 = f[0].parse().map_err(|_| err(ln, format!("bad voxel id `{}`", f[0])))?;
        let region = Region::parse(f[1]).ok_or_else(|| err(ln, format!("unknown region `{}`", f[1])))?;
        let neuron_count: u32 = f[2]
            .parse()
            .map_err(|_| err(ln, format!("bad neuron count `{}`", f[2])))?;
        let gm_weight = match f.get(3) {
            Some(s) => s.parse().map_err(|_| err(ln, format!("bad gm weight `{s}`")))?,
            None => 1.0,
        };
        if ids.insert(id, voxels.len() as u32).is_some() {
            return Err(err(ln, format!("duplicate voxel id {id}")));
        }
        voxels.push(VoxelInfo {
            region,
            neuron_count,
            gm_weight,
        });
    }

    let ne = header(&mut lines, "edges")?;
    let mut edges = Vec::with_capacity(ne);
    for _ in 0..ne {
        let (ln, l) = lines.next().ok_or_else(|| err(0, "fewer edge lines than declared".into()))?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 3 {
            return Err(err(ln, "expected `src dst weight`".into()));
        }
        let lookup = |s: &str| -> Result<u32> {
            let id: i64 = s.parse().map_err(|_| err(ln, format!("bad voxel id `{s}`")))?;
            ids.get(&id)
                .copied()
                .ok_or_else(|| err(ln, format!("edge references unknown voxel {id}")))
        };
        let src = lookup(f[0])?;
        let dst = lookup(f[1])?;
        let weight: f64 = f[2].parse().map_err(|_| err(ln, format!("bad weight `{}`", f[2])))?;
        if !(weight >= 0.0) {
            return Err(err(ln, format!("negative weight {weight}")));
        }
        if src == dst {
            return Err(err(ln, "self edge".into()));
        }
        edges.push(Edge { src, dst, weight });
    }
    if let Some((ln, _)) = lines.next() {
        return Err(err(ln, "trailing content after declared edges".into()));
    }
    let g = ConnectomeGraph::finish(voxels, edges, intra);
    g.validate()?;
    Ok(g)
}

pub fn write_connectome(g: &ConnectomeGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "voxels {}", g.voxels.len());
    for (i, v) in g.voxels.iter().enumerate() {
        let _ = writeln!(s, "{i} {} {} {}", v.region.name(), v.neuron_count, v.gm_weight);
    }
    let _ = writeln!(s, "edges {}", g.edges.len());
    for e in &g.edges {
        let _ = writeln!(s, "{} {} {}", e.src, e.dst, e.weight);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intra() -> IntraCircuit {
        IntraCircuit::default()
    }

    #[test]
    fn ring_has_two_neighbours() {
        let g = ring(10, Region::Subcortex, intra());
        for v in 0..10 {
            assert_eq!(g.out_degree(v), 2);
        }
        assert!(g.edges.iter().all(|e| (e.dst + 10 - e.src) % 10 == 1 || (e.src + 10 - e.dst) % 10 == 1));
    }

    #[test]
    fn single_voxel_has_no_edges() {
        assert!(ring(1, Region::Cortex, intra()).edges.is_empty());
        assert!(uniform_random(1, Region::Cortex, 0.5, 1, intra()).unwrap().edges.is_empty());
    }

    #[test]
    fn uniform_random_edge_count_matches_binomial_mean() {
        let g = uniform_random(1000, Region::Subcortex, 0.0072, 5, intra()).unwrap();
        let expected = 0.0072 * 1000.0 * 999.0;
        let got = g.edges.len() as f64;
        assert!((got - expected).abs() / expected < 0.05, "{got} vs {expected}");
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let a = dti_like(60, 0.1, 0.15, [0.7, 0.1, 0.1, 0.1], 3, intra()).unwrap();
        let b = dti_like(60, 0.1, 0.15, [0.7, 0.1, 0.1, 0.1], 3, intra()).unwrap();
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.voxels, b.voxels);
        let c = dti_like(60, 0.1, 0.15, [0.7, 0.1, 0.1, 0.1], 4, intra()).unwrap();
        assert_ne!(a.edges, c.edges);
    }

    #[test]
    fn dti_like_hits_target_density() {
        let g = dti_like(200, 0.05, 0.15, [1.0, 0.0, 0.0, 0.0], 8, intra()).unwrap();
        assert!((g.density() - 0.05).abs() < 0.01, "{}", g.density());
        let inbound = g.inbound_weights();
        assert!(inbound.iter().all(|v| !v.is_empty()));
    }

    #[test]
    fn inbound_weights_normalize_per_source() {
        let text = "voxels 3\n0 cortex 10\n1 cortex 10\n2 cortex 10\nedges 3\n0 1 1\n0 2 3\n1 2 5\n";
        let g = parse_connectome(text, Path::new("t"), intra()).unwrap();
        let inbound = g.inbound_weights();
        assert_eq!(inbound[1], vec![(0, 0.25)]);
        assert_eq!(inbound[2], vec![(0, 0.75), (1, 1.0)]);
    }

    #[test]
    fn file_round_trip() {
        let g = dti_like(20, 0.2, 0.2, [0.5, 0.2, 0.2, 0.1], 1, intra()).unwrap();
        let text = write_connectome(&g);
        let h = parse_connectome(&text, Path::new("t"), intra()).unwrap();
        assert_eq!(g.voxels.len(), h.voxels.len());
        assert_eq!(g.edges.len(), h.edges.len());
        for (a, b) in g.edges.iter().zip(&h.edges) {
            assert_eq!((a.src, a.dst), (b.src, b.dst));
            assert!((a.weight - b.weight).abs() <= 1e-12 * a.weight.abs().max(1.0));
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let p = Path::new("bad.txt");
        let cases = [
            ("voxels 2\n0 cortex 10\n", "fewer voxel lines"),
            ("voxels 1\n0 cortex 10\nedges 1\n0 7 1\n", "unknown voxel 7"),
            ("voxels 2\n0 cortex 10\n1 cortex 5\nedges 1\n0 1 -2\n", "negative weight"),
            ("voxels 1\n0 neocortex 10\nedges 0\n", "unknown region"),
            ("voxels 1\n0 cortex ten\nedges 0\n", "bad neuron count"),
        ];
        for (text, needle) in cases {
            let e = parse_connectome(text, p, intra()).unwrap_err().to_string();
            assert!(e.contains(needle), "`{e}` lacks `{needle}`");
        }
    }
}
