//! Population-level conductance hyper-parameters and neuron-level resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Log-normal distribution of one receptor's conductance scale:
/// `g = exp(location + scale * xi)`, `xi ~ N(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormal {
    pub location: f64,
    pub scale: f64,
}

impl LogNormal {
    pub fn from_median(median: f64, scale: f64) -> Self {
        LogNormal {
            location: median.ln(),
            scale,
        }
    }

    pub fn median(&self) -> f64 {
        self.location.exp()
    }

    #[inline]
    pub fn draw(&self, xi: f64) -> f32 {
        (self.location + self.scale * xi).exp() as f32
    }
}

/// Hyper-parameters of every population, indexed `[population][receptor]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub populations: Vec<[LogNormal; 4]>,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (p, row) in self.populations.iter().enumerate() {
            for d in row {
                if !(d.scale >= 0.0) || !d.location.is_finite() {
                    return Err(Error::config(format!(
                        "population {p}: conductance distribution needs finite location and scale >= 0"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Standard normal variate for neuron `index` of `population`, receptor `receptor`.
#[inline]
pub fn conductance_variate(seed: u64, population: u32, index: u32, receptor: usize) -> f64 {
    rng::normal(&[
        seed,
        rng::domain::CONDUCTANCE,
        population as u64,
        index as u64,
        receptor as u64,
    ])
}

/// Draws per-neuron conductance scales for one population. Draw `i` depends
/// only on `(seed, population, i)`, so a larger population sampled from the
/// same hyper-parameters extends a smaller one.
pub fn sample_population(dist: &[LogNormal; 4], population: u32, size: u32, seed: u64) -> Vec<[f32; 4]> {
    (0..size)
        .map(|i| {
            let mut g = [0.0f32; 4];
            for (u, d) in dist.iter().enumerate() {
                g[u] = if d.scale == 0.0 {
                    d.location.exp() as f32
                } else {
                    d.draw(conductance_variate(seed, population, i, u))
                };
            }
            g
        })
        .collect()
}

/// Draws conductances for all populations; output is concatenated in
/// population order.
pub fn sample_conductances(h: &HyperParams, sizes: &[u32], seed: u64) -> Result<Vec<[f32; 4]>> {
    if sizes.len() != h.populations.len() {
        return Err(Error::config(format!(
            "{} population sizes given for {} hyper-parameter rows",
            sizes.len(),
            h.populations.len()
        )));
    }
    h.validate()?;
    let mut out = Vec::with_capacity(sizes.iter().map(|&s| s as usize).sum());
    for (p, (&size, dist)) in sizes.iter().zip(&h.populations).enumerate() {
        out.extend(sample_population(dist, p as u32, size, seed));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(location: f64, scale: f64) -> [LogNormal; 4] {
        [LogNormal { location, scale }; 4]
    }

    #[test]
    fn zero_scale_is_degenerate() {
        let g = sample_population(&dist(0.3, 0.0), 0, 50, 1);
        assert!(g.iter().all(|row| row.iter().all(|&x| x == 0.3f64.exp() as f32)));
    }

    #[test]
    fn empirical_log_mean_matches_location() {
        let location = -1.2;
        let g = sample_population(&dist(location, 0.5), 4, 100_000, 77);
        let mean: f64 = g.iter().map(|row| (row[0] as f64).ln()).sum::<f64>() / g.len() as f64;
        assert!((mean - location).abs() < 0.01 * location.abs(), "log-mean {mean}");
    }

    #[test]
    fn prefix_stable_across_sizes() {
        let a = sample_population(&dist(0.0, 0.4), 2, 100, 9);
        let b = sample_population(&dist(0.0, 0.4), 2, 1000, 9);
        assert_eq!(&b[..100], &a[..]);
    }

    #[test]
    fn sizes_must_match_rows() {
        let h = HyperParams {
            populations: vec![dist(0.0, 0.1)],
        };
        assert!(sample_conductances(&h, &[1, 2], 0).is_err());
        assert_eq!(sample_conductances(&h, &[3], 0).unwrap().len(), 3);
    }
}
