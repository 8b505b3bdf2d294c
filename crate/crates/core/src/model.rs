//! Leaky integrate-and-fire neuron with four conductance-based receptor
//! channels and an Ornstein-Uhlenbeck background current.
//!
//! All membrane and gating state is single precision. Synaptic input is
//! accumulated in fixed point ([`INPUT_SCALE`]) so that the order in which
//! presynaptic spikes are summed can never change a result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Receptor (synapse transmitter) types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Receptor {
    Ampa = 0,
    Nmda = 1,
    GabaA = 2,
    GabaB = 3,
}

impl Receptor {
    pub const ALL: [Receptor; 4] = [Receptor::Ampa, Receptor::Nmda, Receptor::GabaA, Receptor::GabaB];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_excitatory(self) -> bool {
        matches!(self, Receptor::Ampa | Receptor::Nmda)
    }

    pub fn name(self) -> &'static str {
        match self {
            Receptor::Ampa => "ampa",
            Receptor::Nmda => "nmda",
            Receptor::GabaA => "gabaa",
            Receptor::GabaB => "gabab",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name().eq_ignore_ascii_case(s))
    }
}

/// Fixed-point scale of accumulated synaptic input (weight units).
pub const INPUT_SCALE: f64 = (1u64 << 20) as f64;

/// Converts a synapse weight into accumulator units.
#[inline]
pub fn weight_to_fixed(weight: f32) -> i64 {
    (weight as f64 * INPUT_SCALE).round() as i64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronParams {
    /// pF
    pub capacitance: f32,
    /// nS
    pub leak_conductance: f32,
    /// mV
    pub leak_reversal: f32,
    pub threshold: f32,
    pub reset: f32,
    /// ms, integer multiple of dt
    pub refractory: f32,
    /// Reversal potentials E_u (mV), indexed by [`Receptor`].
    pub reversal: [f32; 4],
    /// Gating decay constants tau_u (ms).
    pub tau: [f32; 4],
    /// Dimensionless gating jump per unit of synaptic weight.
    pub jump: [f32; 4],
    /// Per-neuron receptor conductance scales g_u (nS).
    pub conductance: [f32; 4],
}

impl Default for NeuronParams {
    fn default() -> Self {
        NeuronParams {
            capacitance: 250.0,
            leak_conductance: 25.0,
            leak_reversal: -65.0,
            threshold: -50.0,
            reset: -65.0,
            refractory: 2.0,
            reversal: [0.0, 0.0, -70.0, -70.0],
            tau: [4.0, 100.0, 10.0, 200.0],
            jump: [1.0, 1.0, 1.0, 1.0],
            conductance: [0.0; 4],
        }
    }
}

impl NeuronParams {
    /// Checks the parameter invariants for integration step `dt` (ms).
    pub fn validate(&self, dt: f32) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(dt > 0.0) {
            return fail(format!("dt must be positive, got {dt}"));
        }
        if !(self.capacitance > 0.0) {
            return fail(format!("capacitance must be positive, got {}", self.capacitance));
        }
        if !(self.leak_conductance >= 0.0) {
            return fail("leak conductance must be nonnegative".into());
        }
        if !(self.reset < self.threshold) {
            return fail(format!(
                "reset ({}) must lie below threshold ({})",
                self.reset, self.threshold
            ));
        }
        for r in Receptor::ALL {
            let i = r.index();
            if !(self.tau[i] > 0.0) {
                return fail(format!("tau_{} must be positive", r.name()));
            }
            if !(dt < self.tau[i]) {
                return fail(format!(
                    "dt = {dt} ms is not below tau_{} = {} ms; explicit Euler gating is unstable",
                    r.name(),
                    self.tau[i]
                ));
            }
            if self.jump[i] < 0.0 || self.conductance[i] < 0.0 {
                return fail(format!("negative jump or conductance for {}", r.name()));
            }
            let e = self.reversal[i];
            if r.is_excitatory() && !(e > self.threshold) {
                return fail(format!("E_{} = {e} must exceed threshold", r.name()));
            }
            if !r.is_excitatory() && !(e < self.leak_reversal) {
                return fail(format!("E_{} = {e} must lie below E_L", r.name()));
            }
        }
        self.refractory_steps(dt).map(|_| ())
    }

    /// Refractory period expressed in whole steps.
    pub fn refractory_steps(&self, dt: f32) -> Result<u32> {
        let ratio = self.refractory as f64 / dt as f64;
        let steps = ratio.round();
        if self.refractory < 0.0 || (ratio - steps).abs() > 1e-6 {
            return Err(Error::config(format!(
                "refractory period {} ms is not a nonnegative multiple of dt = {dt} ms",
                self.refractory
            )));
        }
        Ok(steps as u32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NeuronState {
    /// Membrane potential (mV).
    pub v: f32,
    /// Gating variables j_u.
    pub gating: [f32; 4],
    /// Refractory steps remaining.
    pub refractory: u32,
    /// Synaptic input accumulated during the current step, fixed point.
    pub input: [i64; 4],
}

impl NeuronState {
    pub fn at_rest(params: &NeuronParams) -> Self {
        NeuronState {
            v: params.leak_reversal,
            ..Default::default()
        }
    }

    /// Adds one presynaptic event of `weight` (fixed point) on `receptor`.
    #[inline]
    pub fn deliver(&mut self, receptor: usize, weight: i64) {
        self.input[receptor] += weight;
    }
}

/// Decays every gating variable and applies the accumulated jumps:
/// `j <- j (1 - dt/tau) + omega * input`, then clears the input.
#[inline]
pub fn step_gating(state: &mut NeuronState, params: &NeuronParams, dt: f32) -> Result<()> {
    for u in 0..4 {
        let tau = params.tau[u];
        if !(dt < tau) {
            return Err(Error::config(format!(
                "dt = {dt} ms is not below tau = {tau} ms; explicit Euler gating is unstable"
            )));
        }
        let input = (state.input[u] as f64 / INPUT_SCALE) as f32;
        state.gating[u] = state.gating[u] * (1.0 - dt / tau) + params.jump[u] * input;
        state.input[u] = 0;
    }
    Ok(())
}

/// Total synaptic current `-sum_u g_u j_u (V - E_u)` in pA. Positive values
/// depolarize.
#[inline]
pub fn synaptic_current(state: &NeuronState, params: &NeuronParams) -> f32 {
    let mut i = 0.0f32;
    for u in 0..4 {
        i -= params.conductance[u] * state.gating[u] * (state.v - params.reversal[u]);
    }
    i
}

/// One forward-Euler membrane step. `i_ext` is the background plus any
/// injected current. Returns whether the neuron spiked.
#[inline]
pub fn step_membrane(
    state: &mut NeuronState,
    params: &NeuronParams,
    i_syn: f32,
    i_ext: f32,
    dt: f32,
    neuron: u32,
    step: u64,
) -> Result<bool> {
    if state.refractory > 0 {
        state.refractory -= 1;
        state.v = params.reset;
        return Ok(false);
    }
    let leak = -params.leak_conductance * (state.v - params.leak_reversal);
    let v = state.v + (dt / params.capacitance) * (leak + i_syn + i_ext);
    if !v.is_finite() {
        return Err(Error::Divergence {
            neuron,
            step,
            value: v,
        });
    }
    if v >= params.threshold {
        state.v = params.reset;
        state.refractory = (params.refractory / dt).round() as u32;
        Ok(true)
    } else {
        state.v = v;
        Ok(false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuParams {
    /// pA
    pub mean: f32,
    /// pA
    pub sigma: f32,
    /// ms
    pub tau: f32,
}

impl Default for OuParams {
    fn default() -> Self {
        OuParams {
            mean: 270.0,
            sigma: 150.0,
            tau: 5.0,
        }
    }
}

impl OuParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::config(format!(
                "OU process needs tau > 0 and sigma >= 0, got tau {} sigma {}",
                self.tau, self.sigma
            )));
        }
        Ok(())
    }
}

/// Background current of one neuron.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuProcess {
    pub params: OuParams,
    /// Current value (pA).
    pub current: f32,
    /// Key of this neuron's random stream (derived from seed and global id).
    pub stream: u64,
}

impl OuProcess {
    pub fn new(params: OuParams, seed: u64, global_id: u32) -> Self {
        OuProcess {
            params,
            current: params.mean,
            stream: rng::hash_key(&[seed, rng::domain::OU, global_id as u64]),
        }
    }
}

/// Advances the background current by one step. The noise sample is keyed by
/// `(stream, step)` only.
#[inline]
pub fn step_ou(proc: &mut OuProcess, dt: f32, step: u64) {
    let p = &proc.params;
    let mut i = proc.current + (dt / p.tau) * (p.mean - proc.current);
    if p.sigma > 0.0 {
        let xi = rng::normal(&[proc.stream, step]) as f32;
        i += p.sigma * (2.0 * dt / p.tau).sqrt() * xi;
    }
    proc.current = i;
}

/// FLOPs charged per neuron for the membrane equation (leak difference, leak
/// product, two current sums, dt/C product, state add).
pub const FLOPS_MEMBRANE: u64 = 6;
/// FLOPs per receptor for gating decay plus jump.
pub const FLOPS_GATING_PER_RECEPTOR: u64 = 4;
/// FLOPs per receptor for the synaptic current term.
pub const FLOPS_CURRENT_PER_RECEPTOR: u64 = 4;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> NeuronParams {
        NeuronParams::default()
    }

    #[test]
    fn closed_channels_stay_closed() {
        let p = params();
        let mut s = NeuronState::at_rest(&p);
        step_gating(&mut s, &p, 1.0).unwrap();
        assert_eq!(s.gating[0], 0.0);
    }

    #[test]
    fn gating_jump_and_decay() {
        let mut p = params();
        p.tau[0] = 4.0;
        p.jump[0] = 0.5;
        let mut s = NeuronState::at_rest(&p);
        s.gating[0] = 1.0;
        s.deliver(0, weight_to_fixed(1.0));
        s.deliver(0, weight_to_fixed(1.0));
        step_gating(&mut s, &p, 1.0).unwrap();
        // scalar reference: 1 * (1 - 1/4) + 0.5 * 2
        let reference = 1.0f64 * (1.0 - 1.0 / 4.0) + 0.5 * 2.0;
        assert_relative_eq!(s.gating[0] as f64, reference, epsilon = 1e-6);
        assert_relative_eq!(s.gating[0], 1.75);
        assert_eq!(s.input, [0; 4]);
    }

    #[test]
    fn slow_gating_barely_decays() {
        let mut p = params();
        p.tau[3] = 1e7;
        let mut s = NeuronState::at_rest(&p);
        s.gating[3] = 0.8;
        step_gating(&mut s, &p, 1.0).unwrap();
        assert!((s.gating[3] - 0.8).abs() <= 0.8 * 1.0 / 1e7 + 1e-7);
    }

    #[test]
    fn gating_rejects_unstable_dt() {
        let p = params();
        let mut s = NeuronState::at_rest(&p);
        assert!(matches!(step_gating(&mut s, &p, 4.0), Err(Error::Config(_))));
        assert!(p.validate(5.0).is_err());
    }

    #[test]
    fn current_sign_convention() {
        let mut p = params();
        let mut s = NeuronState::at_rest(&p);
        assert_eq!(synaptic_current(&s, &p), 0.0);

        p.conductance = [2.0, 0.0, 0.0, 0.0];
        s.v = -70.0;
        s.gating = [1.0, 0.0, 0.0, 0.0];
        assert_relative_eq!(synaptic_current(&s, &p), 140.0);

        p.conductance = [0.0, 0.0, 2.0, 0.0];
        s.v = -50.0;
        s.gating = [0.0, 0.0, 1.0, 0.0];
        assert_relative_eq!(synaptic_current(&s, &p), -40.0);
    }

    #[test]
    fn leak_fixed_point() {
        let p = params();
        let mut s = NeuronState::at_rest(&p);
        let spiked = step_membrane(&mut s, &p, 0.0, 0.0, 1.0, 0, 0).unwrap();
        assert!(!spiked);
        assert_eq!(s.v, p.leak_reversal);
    }

    #[test]
    fn euler_membrane_arithmetic() {
        let p = params();
        let mut s = NeuronState::at_rest(&p);
        s.v = -60.0;
        step_membrane(&mut s, &p, 500.0, 0.0, 1.0, 0, 0).unwrap();
        assert_relative_eq!(s.v, -58.5, epsilon = 1e-5);
    }

    #[test]
    fn threshold_crossing_resets_and_holds() {
        let p = params();
        let mut s = NeuronState::at_rest(&p);
        s.v = p.threshold - 0.01;
        assert!(step_membrane(&mut s, &p, 1e4, 0.0, 1.0, 0, 0).unwrap());
        assert_eq!(s.v, p.reset);
        assert_eq!(s.refractory, 2);
        for step in 1..=2 {
            assert!(!step_membrane(&mut s, &p, 1e4, 0.0, 1.0, 0, step).unwrap());
            assert_eq!(s.v, p.reset);
        }
        assert!(step_membrane(&mut s, &p, 1e4, 0.0, 1.0, 0, 3).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let p = params();
        let mut s = NeuronState::at_rest(&p);
        let err = step_membrane(&mut s, &p, f32::INFINITY, f32::NEG_INFINITY, 1.0, 17, 9)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { neuron: 17, step: 9, .. }));
    }

    #[test]
    fn ou_deterministic_relaxation() {
        let mut proc = OuProcess::new(
            OuParams {
                mean: 100.0,
                sigma: 0.0,
                tau: 10.0,
            },
            1,
            0,
        );
        proc.current = 0.0;
        step_ou(&mut proc, 1.0, 0);
        assert_relative_eq!(proc.current, 10.0);

        proc.current = 100.0;
        step_ou(&mut proc, 1.0, 1);
        assert_eq!(proc.current, 100.0);
    }

    #[test]
    fn ou_noise_is_keyed_by_step() {
        let params = OuParams::default();
        let mut a = OuProcess::new(params, 3, 11);
        let mut b = OuProcess::new(params, 3, 11);
        for step in 0..50 {
            step_ou(&mut a, 1.0, step);
        }
        for step in 0..50 {
            step_ou(&mut b, 1.0, step);
        }
        assert_eq!(a.current, b.current);
    }

    #[test]
    fn ou_stationary_variance() {
        // Monte Carlo oracle: the discrete recursion's stationary variance is
        // sigma^2 * (2 dt/tau) / (1 - (1 - dt/tau)^2), which tends to sigma^2.
        let params = OuParams {
            mean: 50.0,
            sigma: 20.0,
            tau: 100.0,
        };
        let mut proc = OuProcess::new(params, 99, 5);
        let (mut n, mut s, mut s2) = (0.0f64, 0.0f64, 0.0f64);
        for step in 0..1_000_000u64 {
            step_ou(&mut proc, 1.0, step);
            if step >= 1_000 {
                let x = proc.current as f64;
                n += 1.0;
                s += x;
                s2 += x * x;
            }
        }
        let mean = s / n;
        let var = s2 / n - mean * mean;
        let sigma2 = (params.sigma as f64).powi(2);
        assert!((var - sigma2).abs() / sigma2 < 0.05, "var {var}");
        assert!((mean - 50.0).abs() < 1.0, "mean {mean}");
    }

    #[test]
    fn refractory_must_be_step_multiple() {
        let mut p = params();
        p.refractory = 2.5;
        assert!(p.validate(1.0).is_err());
        assert_eq!(p.refractory_steps(0.5).unwrap(), 5);
    }
}
