//! Per-step time anchors, traffic and FLOP counters, and their aggregation.
//!
//! Anchors are nanoseconds from the worker's step start (`t0 = 0`):
//! `t1` spike list ready, `t2` all inbound batches available and `J_intra`
//! done, `t3` currents updated. `t4`/`t5` and `t6`/`t7` are the copy anchors
//! of a host/device split; they are zero-duration markers at `t1` and `t2`.
//! `t8..t9` spans the sender's work for the step and `t10..t11` the
//! receiver's. Send and receive durations are attributed per batch as
//! consecutive intervals, so the intra and inter parts sum exactly to the
//! totals.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTimings {
    pub step: u64,
    pub worker: u32,
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
    pub t4: u64,
    pub t5: u64,
    pub t6: u64,
    pub t7: u64,
    pub t8: u64,
    pub t9: u64,
    pub t10: u64,
    pub t11: u64,
    pub send_intra: u64,
    pub send_inter: u64,
    pub rec_intra: u64,
    pub rec_inter: u64,
    pub bytes_sent_intra: u64,
    pub bytes_sent_inter: u64,
    pub bytes_recv_intra: u64,
    pub bytes_recv_inter: u64,
    pub flops_membrane: u64,
    pub flops_inner: u64,
    pub flops_outer: u64,
    pub flops_gating: u64,
    pub flops_current: u64,
    pub spikes: u64,
}

impl StepTimings {
    pub fn sim(&self) -> u64 {
        self.t3
    }

    pub fn com(&self) -> u64 {
        self.t3 - self.t2 + self.t1
    }

    pub fn send(&self) -> u64 {
        self.t9 - self.t8
    }

    pub fn rec(&self) -> u64 {
        self.t11 - self.t10
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent_intra + self.bytes_sent_inter
    }

    pub fn check(&self) -> Result<()> {
        let ok = self.t1 <= self.t2
            && self.t2 <= self.t3
            && self.t8 <= self.t9
            && self.t10 <= self.t11
            && self.send_intra + self.send_inter == self.send()
            && self.rec_intra + self.rec_inter == self.rec();
        if ok {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "inconsistent anchors at step {} worker {}: {self:?}",
                self.step, self.worker
            )))
        }
    }
}

/// Aggregates in the timing-report schema. Times in seconds, rates per second.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub window: u64,
    pub workers: u32,
    /// Mean over steps of the slowest worker.
    pub t_sim: f64,
    pub t_com: f64,
    pub t_send: f64,
    pub t_rec: f64,
    /// Mean over steps and workers.
    pub hat_sim: f64,
    pub hat_com: f64,
    pub hat_send: f64,
    pub hat_rec: f64,
    /// Slowest over mean per-worker computation time.
    pub t_max: f64,
    /// Population std over mean of per-worker computation time.
    pub t_std: f64,
    /// FLOP/s per worker during computation phases.
    pub flops_membrane: f64,
    pub flops_inner: f64,
    pub flops_outer: f64,
    pub flops_gating: f64,
    pub flops_current: f64,
    /// Bytes/s per worker while sending.
    pub bw_send_intra: f64,
    pub bw_send_inter: f64,
    pub bytes_sent_intra: u64,
    pub bytes_sent_inter: u64,
    pub bytes_sent: u64,
    pub spikes: u64,
}

impl TimingReport {
    /// Wall seconds per simulated second for step `dt_ms`.
    pub fn time_to_solution(&self, dt_ms: f64) -> f64 {
        self.t_sim * 1000.0 / dt_ms
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Aggregates the last `window` steps. `timings` may be in any order.
pub fn aggregate_timings(timings: &[StepTimings], window: u64) -> Result<TimingReport> {
    if window == 0 {
        return Err(Error::config("aggregation window must be at least 1 step"));
    }
    let mut steps: Vec<u64> = timings.iter().map(|t| t.step).collect();
    steps.sort_unstable();
    steps.dedup();
    if (steps.len() as u64) < window {
        return Err(Error::config(format!(
            "aggregation window {window} exceeds the {} recorded steps",
            steps.len()
        )));
    }
    let first = steps[steps.len() - window as usize];
    let workers = timings.iter().map(|t| t.worker).max().map_or(0, |w| w + 1) as usize;
    let mut rows: Vec<Vec<Option<StepTimings>>> = vec![vec![None; workers]; window as usize];
    let index: std::collections::HashMap<u64, usize> = steps[steps.len() - window as usize..]
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i))
        .collect();
    for t in timings.iter().filter(|t| t.step >= first) {
        rows[index[&t.step]][t.worker as usize] = Some(*t);
    }

    let mut r = TimingReport {
        window,
        workers: workers as u32,
        ..Default::default()
    };
    let ns = 1e-9;
    let mut per_worker_com = vec![0.0f64; workers];
    let (mut com_total, mut send_intra, mut send_inter) = (0.0, 0.0, 0.0);
    let mut flops = [0u64; 5];
    for row in &rows {
        let row: Vec<&StepTimings> = row
            .iter()
            .map(|t| {
                t.as_ref()
                    .ok_or_else(|| Error::Format("a worker is missing from a recorded step".into()))
            })
            .collect::<Result<_>>()?;
        let n = row.len() as f64;
        let max = |f: fn(&StepTimings) -> u64| row.iter().map(|t| f(t)).max().unwrap_or(0) as f64 * ns;
        let mean = |f: fn(&StepTimings) -> u64| row.iter().map(|t| f(t)).sum::<u64>() as f64 * ns / n;
        r.t_sim += max(StepTimings::sim);
        r.t_com += max(StepTimings::com);
        r.t_send += max(StepTimings::send);
        r.t_rec += max(StepTimings::rec);
        r.hat_sim += mean(StepTimings::sim);
        r.hat_com += mean(StepTimings::com);
        r.hat_send += mean(StepTimings::send);
        r.hat_rec += mean(StepTimings::rec);
        for t in &row {
            per_worker_com[t.worker as usize] += t.com() as f64 * ns;
            com_total += t.com() as f64 * ns;
            send_intra += t.send_intra as f64 * ns;
            send_inter += t.send_inter as f64 * ns;
            r.bytes_sent_intra += t.bytes_sent_intra;
            r.bytes_sent_inter += t.bytes_sent_inter;
            r.spikes += t.spikes;
            for (acc, x) in flops.iter_mut().zip([
                t.flops_membrane,
                t.flops_inner,
                t.flops_outer,
                t.flops_gating,
                t.flops_current,
            ]) {
                *acc += x;
            }
        }
    }
    let w = window as f64;
    for x in [
        &mut r.t_sim,
        &mut r.t_com,
        &mut r.t_send,
        &mut r.t_rec,
        &mut r.hat_sim,
        &mut r.hat_com,
        &mut r.hat_send,
        &mut r.hat_rec,
    ] {
        *x /= w;
    }
    let mean_com = per_worker_com.iter().sum::<f64>() / workers as f64;
    let max_com = per_worker_com.iter().copied().fold(0.0, f64::max);
    let var = per_worker_com.iter().map(|c| (c - mean_com).powi(2)).sum::<f64>() / workers as f64;
    r.t_max = ratio(max_com, mean_com);
    r.t_std = ratio(var.sqrt(), mean_com);
    r.flops_membrane = ratio(flops[0] as f64, com_total);
    r.flops_inner = ratio(flops[1] as f64, com_total);
    r.flops_outer = ratio(flops[2] as f64, com_total);
    r.flops_gating = ratio(flops[3] as f64, com_total);
    r.flops_current = ratio(flops[4] as f64, com_total);
    r.bw_send_intra = ratio(r.bytes_sent_intra as f64, send_intra);
    r.bw_send_inter = ratio(r.bytes_sent_inter as f64, send_inter);
    r.bytes_sent = r.bytes_sent_intra + r.bytes_sent_inter;
    Ok(r)
}

pub fn write_timings_csv<W: Write>(out: W, timings: &[StepTimings]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in timings {
        w.serialize(t).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_timings_csv<R: Read>(input: R) -> Result<Vec<StepTimings>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("timings CSV: {e}"))))
        .collect()
}
