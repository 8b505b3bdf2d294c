//! Subcommand implementations behind the `voxsim` binary.
//!
//! Every command takes a validated [`RunConfig`] and writes into
//! `config.out`. Output files carry no timestamps; reruns with the same
//! inputs rewrite them byte for byte, apart from wall-clock timings under the
//! measured clock.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.toml           tables, their SHA-256 and the generating config hash
//! tables/worker_NNNN.vxtb binary connection tables, one per worker
//! partition.txt           unit -> worker assignment with objective footer
//! synapse_histogram.csv   inter-worker synapse counts, greedy vs sequential
//! raster.csv timings.csv traces.csv rates.csv bold.csv report.csv
//! <experiment>.csv
//! trajectory.csv fit.csv truth.csv observed_bold.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assim::{assimilate, twin_experiment, write_fit_csv, write_trajectory_csv, AssimResult, Surrogate};
use crate::config::RunConfig;
use crate::engine::{
    aggregate_timings, read_raster_csv, read_timings_csv, write_csv_file, write_raster_csv, write_timings_csv,
    write_traces_csv, Injection, PopulationIndex, RunOutput, Simulation, TimingReport,
};
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, write_grid_csv, ExperimentKind, GridRow};
use crate::hemo::{read_bold_csv, write_bold_csv, BoldSynth};
use crate::netgen::{decode_table, emit_tables, encode_table, generate, ConnectionTable, Network, TABLE_VERSION};
use crate::partition::{
    estimate_traffic, format_partition, histogram, off_diagonal, partition, std_dev, PartitionMap, PartitionMethod,
    UnitGraph,
};

pub const MANIFEST: &str = "manifest.toml";
const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntry {
    pub worker: u32,
    /// Relative to the manifest directory.
    pub file: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub table_version: u32,
    pub seed: u64,
    pub workers: u32,
    pub neurons: u64,
    pub synapses: u64,
    pub objective: u64,
    /// Hash of the settings that determine the tables.
    pub config_sha256: String,
    pub tables: Vec<TableEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Hash over seed, worker count, network and partition settings.
pub fn generation_key(cfg: &RunConfig) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        seed: u64,
        workers: usize,
        dt: f32,
        network: &'a crate::netgen::NetworkConfig,
        partition: &'a crate::config::PartitionSettings,
    }
    let text = toml::to_string(&Key {
        seed: cfg.seed,
        workers: cfg.workers,
        dt: cfg.engine.dt,
        network: &cfg.network,
        partition: &cfg.partition,
    })
    .map_err(|e| Error::config(format!("cannot serialize generation settings: {e}")))?;
    Ok(sha256_hex(text.as_bytes()))
}

/// The network and its unit graph under the uniform rate prior.
pub fn build_network(cfg: &RunConfig) -> Result<(Network, UnitGraph)> {
    let net = generate(&cfg.network, cfg.seed)?;
    let rates = vec![cfg.partition.rate_estimate; net.populations.len()];
    let g = estimate_traffic(&net, &rates, cfg.engine.dt as f64)?;
    Ok((net, g))
}

pub fn place(cfg: &RunConfig, g: &UnitGraph, method: &PartitionMethod) -> Result<PartitionMap> {
    if cfg.workers == 1 {
        return Ok(PartitionMap::single(g.len()));
    }
    partition(g, cfg.workers, &cfg.partition.capacity, method)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub method: String,
    pub lo: u64,
    pub hi: u64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub method: String,
    pub objective: u64,
    pub synapse_std: f64,
    pub synapse_max: u64,
}

/// Inter-worker synapse-count histograms of greedy and sequential placement
/// on a shared bin grid.
pub fn synapse_histograms(cfg: &RunConfig, g: &UnitGraph) -> Result<(Vec<HistogramRow>, Vec<SpreadRow>)> {
    let mut counts = Vec::new();
    let mut spread = Vec::new();
    for (name, method) in [("greedy", PartitionMethod::Greedy), ("sequential", PartitionMethod::Sequential)] {
        let p = place(cfg, g, &method)?;
        let v = off_diagonal(&p.synapse_matrix(g));
        spread.push(SpreadRow {
            method: name.into(),
            objective: p.objective,
            synapse_std: std_dev(&v),
            synapse_max: v.iter().copied().max().unwrap_or(0),
        });
        counts.push((name, v));
    }
    let all: Vec<u64> = counts.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let grid = histogram(&all, HISTOGRAM_BINS);
    let width = grid.first().map_or(1, |b| b.1 - b.0);
    let mut rows = Vec::new();
    for (name, v) in &counts {
        let mut h = vec![0u64; grid.len()];
        for &x in v {
            h[((x / width) as usize).min(grid.len() - 1)] += 1;
        }
        rows.extend(grid.iter().zip(h).map(|(&(lo, hi, _), count)| HistogramRow {
            method: name.to_string(),
            lo,
            hi,
            count,
        }));
    }
    Ok((rows, spread))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_csv_file(path, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        for r in rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    })
}

/// Writes `partition.txt`, `synapse_histogram.csv` and `synapse_spread.csv`.
pub fn cmd_partition(cfg: &RunConfig) -> Result<PartitionMap> {
    create_dir(&cfg.out)?;
    let (_, g) = build_network(cfg)?;
    let p = place(cfg, &g, &cfg.partition.method()?)?;
    write_text(&cfg.out.join("partition.txt"), &format_partition(&p))?;
    let (hist, spread) = synapse_histograms(cfg, &g)?;
    write_rows(&cfg.out.join("synapse_histogram.csv"), &hist)?;
    write_rows(&cfg.out.join("synapse_spread.csv"), &spread)?;
    log::info!("partitioned {} units over {} workers, F = {} ub", g.len(), p.workers, p.objective);
    Ok(p)
}

/// Writes the per-worker tables and the manifest.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Manifest> {
    let tables_dir = cfg.out.join("tables");
    create_dir(&tables_dir)?;
    let (net, g) = build_network(cfg)?;
    let p = place(cfg, &g, &cfg.partition.method()?)?;
    write_text(&cfg.out.join("partition.txt"), &format_partition(&p))?;
    let tables = emit_tables(&net, &p)?;
    let mut entries = Vec::with_capacity(tables.len());
    for t in &tables {
        let rel = PathBuf::from("tables").join(format!("worker_{:04}.vxtb", t.worker));
        let path = cfg.out.join(&rel);
        let bytes = encode_table(t);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TableEntry {
            worker: t.worker,
            file: rel,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        table_version: TABLE_VERSION,
        seed: cfg.seed,
        workers: cfg.workers as u32,
        neurons: net.neurons() as u64,
        synapses: net.synapse_count(),
        objective: p.objective,
        config_sha256: generation_key(cfg)?,
        tables: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    write_text(&cfg.out.join(MANIFEST), &text)?;
    log::info!(
        "generated {} neurons, {} synapses in {} tables",
        manifest.neurons,
        manifest.synapses,
        manifest.tables.len()
    );
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
        path,
        msg: e.message().to_string(),
    })
}

/// Loads the tables a manifest lists, checking sizes and hashes.
pub fn load_tables(dir: &Path, m: &Manifest) -> Result<Vec<ConnectionTable>> {
    if m.table_version != TABLE_VERSION {
        return Err(Error::Format(format!(
            "manifest table version {} is not {TABLE_VERSION}",
            m.table_version
        )));
    }
    let mut tables = Vec::with_capacity(m.tables.len());
    for e in &m.tables {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        if bytes.len() as u64 != e.bytes || sha256_hex(&bytes) != e.sha256 {
            return Err(Error::Format(format!("{} does not match its manifest hash", path.display())));
        }
        tables.push(decode_table(&bytes)?);
    }
    ConnectionTable::check_references(&tables)?;
    Ok(tables)
}

/// Tables for `cfg`: reused from the output directory when its manifest was
/// generated from the same settings, regenerated otherwise.
pub fn tables_for(cfg: &RunConfig) -> Result<Vec<ConnectionTable>> {
    let key = generation_key(cfg)?;
    let m = match read_manifest(&cfg.out) {
        Ok(m) if m.config_sha256 == key => m,
        _ => {
            log::info!("no matching manifest in {}, generating", cfg.out.display());
            cmd_generate(cfg)?
        }
    };
    load_tables(&cfg.out, &m)
}

fn load_injection(cfg: &RunConfig) -> Result<Injection> {
    match &cfg.injection {
        None => Ok(Injection::new()),
        Some(p) => Injection::read_csv(fs::File::open(p).map_err(|e| Error::io(p, e))?),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationRate {
    pub population: u32,
    pub voxel: u32,
    pub size: u32,
    pub rate_hz: f64,
}

/// Runs `cfg.steps` steps on the manifest's tables.
pub fn simulate(cfg: &RunConfig, tables: &[ConnectionTable]) -> Result<(RunOutput, PopulationIndex)> {
    let mut sim = Simulation::new(tables, cfg.engine())?;
    sim.set_injection(load_injection(cfg)?);
    sim.run(cfg.steps)?;
    Ok((sim.take_output(), sim.population_index().clone()))
}

/// Writes raster, timings, traces, per-population rates, BOLD and the
/// timing report.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<RunOutput> {
    let tables = tables_for(cfg)?;
    let (out, index) = simulate(cfg, &tables)?;
    let dir = &cfg.out;
    write_csv_file(&dir.join("raster.csv"), |b| write_raster_csv(b, &out.raster))?;
    write_csv_file(&dir.join("timings.csv"), |b| write_timings_csv(b, &out.timings))?;
    if !out.traces.is_empty() {
        write_csv_file(&dir.join("traces.csv"), |b| write_traces_csv(b, &out.traces))?;
    }
    let steps = out.rates.steps().max(1) as f64;
    let rates: Vec<PopulationRate> = (0..index.sizes.len())
        .map(|p| {
            let spikes: u64 = (0..out.rates.steps()).map(|s| out.rates.step_counts(s)[p] as u64).sum();
            PopulationRate {
                population: p as u32,
                voxel: index.voxel[p],
                size: index.sizes[p],
                rate_hz: spikes as f64 / (index.sizes[p].max(1) as f64 * steps * cfg.engine.dt as f64 * 1e-3),
            }
        })
        .collect();
    write_rows(&dir.join("rates.csv"), &rates)?;
    let mut bold = BoldSynth::new(cfg.assimilation.filter.bold.clone(), &index.sizes, &index.voxel, cfg.engine.dt)?;
    let series = bold.push_series(&out.rates.counts)?;
    write_csv_file(&dir.join("bold.csv"), |b| write_bold_csv(b, &series))?;
    if !out.timings.is_empty() {
        let report = aggregate_timings(&out.timings, cfg.stats_window.min(out.steps))?;
        write_rows(&dir.join("report.csv"), &[report])?;
    }
    log::info!("simulated {} steps, {} spikes", out.steps, out.raster.len());
    Ok(out)
}

/// Aggregates `timings.csv` over the trailing stats window and writes the
/// synapse histograms of the configured network.
pub fn cmd_report(cfg: &RunConfig) -> Result<TimingReport> {
    let path = cfg.out.join("timings.csv");
    let timings = read_timings_csv(fs::File::open(&path).map_err(|e| Error::io(&path, e))?)?;
    let row = aggregate_timings(&timings, cfg.stats_window)?;
    write_rows(&cfg.out.join("report.csv"), std::slice::from_ref(&row))?;
    let (_, g) = build_network(cfg)?;
    let (hist, spread) = synapse_histograms(cfg, &g)?;
    write_rows(&cfg.out.join("synapse_histogram.csv"), &hist)?;
    write_rows(&cfg.out.join("synapse_spread.csv"), &spread)?;
    Ok(row)
}

/// Runs the configured experiment, `kind` overriding the config.
pub fn cmd_experiment(cfg: &RunConfig, kind: Option<ExperimentKind>) -> Result<Vec<GridRow>> {
    create_dir(&cfg.out)?;
    let mut exp = cfg.experiment.clone();
    if let Some(k) = kind {
        exp.kind = k;
    }
    let rows = run_experiment(&exp)?;
    let path = cfg.out.join(format!("{}.csv", exp.kind.name()));
    write_csv_file(&path, |b| write_grid_csv(b, &rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub group: u32,
    pub truth: f64,
    pub estimate: f64,
    pub relative_error: f64,
}

/// Assimilates `assimilation.observed`, or runs a twin experiment when no
/// observation file is configured.
pub fn cmd_assimilate(cfg: &RunConfig) -> Result<AssimResult> {
    create_dir(&cfg.out)?;
    let net = generate(&cfg.network, cfg.seed)?;
    let settings = &cfg.assimilation;
    let result = match &settings.observed {
        Some(path) => {
            let observed = read_bold_csv(fs::File::open(path).map_err(|e| Error::io(path, e))?)?;
            if observed.first().map_or(0, Vec::len) != net.voxels.len() {
                return Err(Error::config(format!(
                    "{} has {} voxels, the network {}",
                    path.display(),
                    observed.first().map_or(0, Vec::len),
                    net.voxels.len()
                )));
            }
            let s = Surrogate::new(&net, cfg.engine(), load_injection(cfg)?);
            assimilate(&observed, &s, &settings.filter, cfg.seed)?
        }
        None => {
            let twin = twin_experiment(&net, cfg.engine(), &settings.filter, &settings.twin, cfg.seed)?;
            let rows: Vec<TruthRow> = twin
                .truth
                .iter()
                .zip(&twin.result.offsets)
                .enumerate()
                .map(|(g, (&t, &e))| TruthRow {
                    group: g as u32,
                    truth: t,
                    estimate: e,
                    relative_error: ((e - t).exp() - 1.0).abs(),
                })
                .collect();
            write_rows(&cfg.out.join("truth.csv"), &rows)?;
            write_csv_file(&cfg.out.join("observed_bold.csv"), |b| write_bold_csv(b, &twin.observed))?;
            log::info!("twin max relative error {:.4}", twin.max_relative_error());
            twin.result
        }
    };
    write_csv_file(&cfg.out.join("trajectory.csv"), |b| write_trajectory_csv(b, &result.trajectory))?;
    write_csv_file(&cfg.out.join("fit.csv"), |b| write_fit_csv(b, &result.fit))?;
    write_csv_file(&cfg.out.join("predicted_bold.csv"), |b| write_bold_csv(b, &result.predicted))?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyOutcome {
    /// Label of each compared run and its spike count.
    pub runs: Vec<(String, usize)>,
}

fn first_difference(a: &[(u64, u32)], b: &[(u64, u32)]) -> String {
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => format!("first difference at spike {i}: {:?} vs {:?}", a[i], b[i]),
        None => format!("{} vs {} spikes", a.len(), b.len()),
    }
}

fn raster_of(dir: &Path) -> Result<Vec<(u64, u32)>> {
    let path = dir.join("raster.csv");
    let raster = read_raster_csv(fs::File::open(&path).map_err(|e| Error::io(&path, e))?)?;
    let mut r: Vec<(u64, u32)> = raster.iter().map(|e| (e.step, e.global_id)).collect();
    r.sort_unstable();
    Ok(r)
}

/// Compares the rasters of previous runs in `dirs` against `cfg.out`, or,
/// without `dirs`, simulates the network once per worker count and compares
/// each run with the first. Differences are [`Error::Mismatch`].
pub fn cmd_verify(cfg: &RunConfig, worker_counts: &[usize], dirs: &[PathBuf]) -> Result<VerifyOutcome> {
    let mut runs: Vec<(String, Vec<(u64, u32)>)> = Vec::new();
    if dirs.is_empty() {
        let net = generate(&cfg.network, cfg.seed)?;
        for &w in worker_counts {
            let run_cfg = RunConfig {
                workers: w,
                ..cfg.clone()
            };
            let rates = vec![cfg.partition.rate_estimate; net.populations.len()];
            let g = estimate_traffic(&net, &rates, cfg.engine.dt as f64)?;
            let p = place(&run_cfg, &g, &cfg.partition.method()?)?;
            let (out, _) = simulate(&run_cfg, &emit_tables(&net, &p)?)?;
            runs.push((format!("{w} workers"), out.global_raster()));
        }
    } else {
        runs.push((cfg.out.display().to_string(), raster_of(&cfg.out)?));
        for d in dirs {
            runs.push((d.display().to_string(), raster_of(d)?));
        }
    }
    let Some((base_label, base)) = runs.first() else {
        return Err(Error::config("verify needs at least one run"));
    };
    let mut mismatches = BTreeMap::new();
    for (label, r) in &runs[1..] {
        if r != base {
            mismatches.insert(label.clone(), first_difference(base, r));
        }
    }
    if !mismatches.is_empty() {
        let detail: Vec<String> = mismatches.iter().map(|(l, d)| format!("{l} vs {base_label}: {d}")).collect();
        return Err(Error::Mismatch(detail.join("; ")));
    }
    Ok(VerifyOutcome {
        runs: runs.iter().map(|(l, r)| (l.clone(), r.len())).collect(),
    })
}
