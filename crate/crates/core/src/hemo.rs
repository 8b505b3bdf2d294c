//! Balloon-Windkessel hemodynamics: neural drive to BOLD signal.
//!
//! State per voxel is `(s, f, v, q)`: vasodilatory signal, inflow, volume and
//! deoxyhemoglobin content, all normalized so that rest is `(0, 1, 1, 1)`.
//! Time is in seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HemoParams {
    /// Signal decay (1/s).
    pub kappa: f64,
    /// Autoregulatory flow elimination (1/s).
    pub gamma: f64,
    /// Mean transit time (s).
    pub tau: f64,
    /// Grubb exponent.
    pub alpha: f64,
    /// Resting oxygen extraction fraction.
    pub e0: f64,
    /// Resting blood volume fraction.
    pub v0: f64,
}

impl Default for HemoParams {
    fn default() -> Self {
        HemoParams {
            kappa: 0.65,
            gamma: 0.41,
            tau: 0.98,
            alpha: 0.32,
            e0: 0.34,
            v0: 0.02,
        }
    }
}

impl HemoParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.kappa > 0.0
            && self.gamma > 0.0
            && self.tau > 0.0
            && self.alpha > 0.0
            && self.e0 > 0.0
            && self.e0 < 1.0
            && self.v0 > 0.0;
        if !ok {
            return Err(Error::config(format!("invalid hemodynamic parameters {self:?}")));
        }
        Ok(())
    }

    /// BOLD coefficients `(k1, k2, k3)` for a 1.5 T field.
    pub fn bold_coefficients(&self) -> [f64; 3] {
        [7.0 * self.e0, 2.0, 2.0 * self.e0 - 0.2]
    }
}

/// Hemodynamic state of every voxel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HemoState {
    pub params: HemoParams,
    pub s: Vec<f64>,
    pub f: Vec<f64>,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
}

impl HemoState {
    /// Resting equilibrium for `voxels` voxels.
    pub fn rest(voxels: usize, params: HemoParams) -> Self {
        HemoState {
            params,
            s: vec![0.0; voxels],
            f: vec![1.0; voxels],
            v: vec![1.0; voxels],
            q: vec![1.0; voxels],
        }
    }

    pub fn voxels(&self) -> usize {
        self.s.len()
    }
}

/// Oxygen extraction fraction at inflow `f`.
#[inline]
fn extraction(f: f64, e0: f64) -> f64 {
    1.0 - (1.0 - e0).powf(1.0 / f)
}

/// One explicit Euler step of length `dt` seconds with per-voxel drive `z`.
pub fn step_hemodynamics(state: &mut HemoState, z: &[f64], dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::config(format!("hemodynamic step must be positive, got {dt}")));
    }
    if z.len() != state.voxels() {
        return Err(Error::config(format!(
            "drive has {} voxels, state has {}",
            z.len(),
            state.voxels()
        )));
    }
    let p = state.params;
    for i in 0..state.voxels() {
        let (s, f, v, q) = (state.s[i], state.f[i], state.v[i], state.q[i]);
        let outflow = v.powf(1.0 / p.alpha);
        let ds = z[i] - p.kappa * s - p.gamma * (f - 1.0);
        let dv = (f - outflow) / p.tau;
        let dq = (f * extraction(f, p.e0) / p.e0 - outflow * q / v) / p.tau;
        let next = (s + dt * ds, f + dt * s, v + dt * dv, q + dt * dq);
        for (what, value) in [("inflow", next.1), ("volume", next.2), ("deoxyhemoglobin", next.3)] {
            if !(value > 0.0) {
                return Err(Error::Hemodynamic { voxel: i, what, value });
            }
        }
        state.s[i] = next.0;
        state.f[i] = next.1;
        state.v[i] = next.2;
        state.q[i] = next.3;
    }
    Ok(())
}

/// BOLD signal of voxel `i`.
#[inline]
pub fn bold_at(state: &HemoState, i: usize) -> f64 {
    let p = &state.params;
    let [k1, k2, k3] = p.bold_coefficients();
    let (v, q) = (state.v[i], state.q[i]);
    p.v0 * (k1 * (1.0 - q) + k2 * (1.0 - q / v) + k3 * (1.0 - v))
}

pub fn bold_signal(state: &HemoState) -> Vec<f64> {
    (0..state.voxels()).map(|i| bold_at(state, i)).collect()
}

/// Maps spike counts to drive and integrates the hemodynamics along a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoldConfig {
    pub hemo: HemoParams,
    /// Rate (Hz) that maps to unit drive.
    pub baseline_rate: f64,
    /// Simulation steps per BOLD sample.
    pub window_steps: u64,
}

impl Default for BoldConfig {
    fn default() -> Self {
        BoldConfig {
            hemo: HemoParams::default(),
            baseline_rate: 10.0,
            window_steps: 800,
        }
    }
}

/// Streaming BOLD synthesis for a fixed set of voxels.
#[derive(Clone, Debug)]
pub struct BoldSynth {
    cfg: BoldConfig,
    state: HemoState,
    /// Neurons per voxel.
    voxel_sizes: Vec<u64>,
    /// `(population, voxel)` pairs.
    pop_voxel: Vec<u32>,
    dt_s: f64,
    counts: Vec<u64>,
    step_in_window: u64,
}

impl BoldSynth {
    /// `pop_sizes[p]` neurons of population `p` live in voxel `pop_voxel[p]`.
    pub fn new(cfg: BoldConfig, pop_sizes: &[u32], pop_voxel: &[u32], dt_ms: f32) -> Result<Self> {
        cfg.hemo.validate()?;
        if !(cfg.baseline_rate > 0.0) || cfg.window_steps == 0 {
            return Err(Error::config("BOLD synthesis needs a positive baseline rate and window"));
        }
        let voxels = pop_voxel.iter().map(|&v| v as usize + 1).max().unwrap_or(0);
        let mut voxel_sizes = vec![0u64; voxels];
        for (&n, &v) in pop_sizes.iter().zip(pop_voxel) {
            voxel_sizes[v as usize] += n as u64;
        }
        Ok(BoldSynth {
            state: HemoState::rest(voxels, cfg.hemo),
            cfg,
            voxel_sizes,
            pop_voxel: pop_voxel.to_vec(),
            dt_s: dt_ms as f64 * 1e-3,
            counts: vec![0; voxels],
            step_in_window: 0,
        })
    }

    pub fn state(&self) -> &HemoState {
        &self.state
    }

    pub fn config(&self) -> &BoldConfig {
        &self.cfg
    }

    /// Advances one simulation step given that step's spike count per
    /// population. Returns the BOLD sample when a window completes.
    pub fn push_step(&mut self, pop_counts: &[u32]) -> Result<Option<Vec<f64>>> {
        self.counts.iter_mut().for_each(|c| *c = 0);
        for (&c, &v) in pop_counts.iter().zip(&self.pop_voxel) {
            self.counts[v as usize] += c as u64;
        }
        let z: Vec<f64> = self
            .counts
            .iter()
            .zip(&self.voxel_sizes)
            .map(|(&c, &n)| {
                if n == 0 {
                    0.0
                } else {
                    c as f64 / (n as f64 * self.dt_s) / self.cfg.baseline_rate
                }
            })
            .collect();
        step_hemodynamics(&mut self.state, &z, self.dt_s)?;
        self.step_in_window += 1;
        if self.step_in_window == self.cfg.window_steps {
            self.step_in_window = 0;
            Ok(Some(bold_signal(&self.state)))
        } else {
            Ok(None)
        }
    }

    /// Feeds a whole rate series (row-major `[step][population]`); returns
    /// one BOLD row per completed window.
    pub fn push_series(&mut self, counts: &[u32]) -> Result<Vec<Vec<f64>>> {
        let p = self.pop_voxel.len();
        let mut out = Vec::new();
        for row in counts.chunks(p.max(1)) {
            if let Some(b) = self.push_step(row)? {
                out.push(b);
            }
        }
        Ok(out)
    }
}

/// One BOLD sample of the CSV format `window,voxel_id,value`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoldRecord {
    pub window: u64,
    pub voxel_id: u32,
    pub value: f64,
}

/// Flattens `[window][voxel]` rows into records.
pub fn bold_records(series: &[Vec<f64>]) -> Vec<BoldRecord> {
    series
        .iter()
        .enumerate()
        .flat_map(|(w, row)| {
            row.iter().enumerate().map(move |(v, &value)| BoldRecord {
                window: w as u64,
                voxel_id: v as u32,
                value,
            })
        })
        .collect()
}

pub fn write_bold_csv<W: std::io::Write>(out: W, series: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in bold_records(series) {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Reads `window,voxel_id,value` rows into a dense `[window][voxel]` table.
/// Every window must list the same voxels.
pub fn read_bold_csv<R: std::io::Read>(input: R) -> Result<Vec<Vec<f64>>> {
    let mut rows: std::collections::BTreeMap<u64, std::collections::BTreeMap<u32, f64>> = Default::default();
    for (i, r) in csv::Reader::from_reader(input).deserialize::<BoldRecord>().enumerate() {
        let r = r.map_err(|e| Error::Format(format!("BOLD CSV row {}: {e}", i + 1)))?;
        if rows.entry(r.window).or_default().insert(r.voxel_id, r.value).is_some() {
            return Err(Error::Format(format!("BOLD CSV: window {} voxel {} repeated", r.window, r.voxel_id)));
        }
    }
    let voxels = rows.values().next().map_or(0, |m| m.len());
    let mut out = Vec::with_capacity(rows.len());
    for (expect, (w, m)) in rows.into_iter().enumerate() {
        if w != expect as u64 {
            return Err(Error::Format(format!("BOLD CSV: window {expect} missing")));
        }
        if m.len() != voxels || m.keys().enumerate().any(|(i, &v)| v != i as u32) {
            return Err(Error::Format(format!("BOLD CSV: window {w} does not cover voxels 0..{voxels}")));
        }
        out.push(m.into_values().collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rest_is_a_fixed_point() {
        for params in [
            HemoParams::default(),
            HemoParams {
                kappa: 1.2,
                gamma: 0.3,
                tau: 2.0,
                alpha: 0.4,
                e0: 0.6,
                v0: 0.04,
            },
        ] {
            let mut st = HemoState::rest(3, params);
            for _ in 0..10_000 {
                step_hemodynamics(&mut st, &[0.0; 3], 0.001).unwrap();
            }
            assert_eq!(st, HemoState::rest(3, params));
            assert_eq!(bold_signal(&st), vec![0.0; 3]);
        }
    }

    #[test]
    fn deoxygenation_drop_raises_signal() {
        let mut st = HemoState::rest(1, HemoParams::default());
        st.q[0] = 0.9;
        assert!(bold_at(&st, 0) > 0.0);
    }

    #[test]
    fn default_coefficients() {
        let [k1, k2, k3] = HemoParams::default().bold_coefficients();
        assert!((k1 - 2.38).abs() < 1e-12);
        assert_eq!(k2, 2.0);
        assert!((k3 - 0.48).abs() < 1e-12);
    }

    #[test]
    fn constant_drive_raises_inflow() {
        let mut st = HemoState::rest(1, HemoParams::default());
        for _ in 0..2000 {
            step_hemodynamics(&mut st, &[0.5], 0.001).unwrap();
        }
        assert!(st.f[0] > 1.0);
        assert!(bold_at(&st, 0) > 0.0);
    }

    #[test]
    fn perturbation_decays() {
        let mut st = HemoState::rest(1, HemoParams::default());
        st.s[0] = 0.1;
        for _ in 0..60_000 {
            step_hemodynamics(&mut st, &[0.0], 0.001).unwrap();
        }
        for x in [st.s[0], st.f[0] - 1.0, st.v[0] - 1.0, st.q[0] - 1.0] {
            assert!(x.abs() < 1e-3, "{st:?}");
        }
    }

    #[test]
    fn oversized_step_is_reported() {
        let mut st = HemoState::rest(1, HemoParams::default());
        let r = (0..100).try_for_each(|_| step_hemodynamics(&mut st, &[-50.0], 1.0));
        assert!(matches!(r, Err(Error::Hemodynamic { .. })));
    }

    #[test]
    fn synth_windows_and_drive() {
        let cfg = BoldConfig {
            window_steps: 10,
            ..Default::default()
        };
        let mut synth = BoldSynth::new(cfg, &[80, 20, 100], &[0, 0, 1], 1.0).unwrap();
        // 1 spike per step in 100 neurons at dt = 1 ms is 10 Hz, i.e. unit drive
        let counts: Vec<u32> = (0..25).flat_map(|_| [1, 0, 0]).collect();
        let rows = synth.push_series(&counts).unwrap();
        assert_eq!(rows.len(), 2);
        let mut reference = HemoState::rest(2, HemoParams::default());
        for _ in 0..20 {
            step_hemodynamics(&mut reference, &[1.0, 0.0], 0.001).unwrap();
        }
        assert_eq!(rows[1], bold_signal(&reference));
        assert_eq!(rows[1][1], 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let series = vec![vec![0.5, -0.25], vec![1e-3, 2.0]];
        let mut buf = Vec::new();
        write_bold_csv(&mut buf, &series).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("window,voxel_id,value"));
        assert_eq!(read_bold_csv(&buf[..]).unwrap(), series);
        let gap = b"window,voxel_id,value\n0,0,1\n2,0,1\n";
        assert!(read_bold_csv(&gap[..]).is_err());
    }
}
