//! Deterministic ensemble Kalman update of a parameter ensemble.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng;

/// Summary of one analysis step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    /// Ensemble-mean innovation `y - mean(h)`.
    pub innovation: Vec<f64>,
    /// Posterior ensemble standard deviation per parameter.
    pub spread: Vec<f64>,
    /// Parameters whose spread fell below the floor and were re-spread.
    pub collapsed: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateOptions {
    /// Multiplies posterior anomalies.
    pub inflation: f64,
    /// Minimum posterior spread per parameter.
    pub spread_floor: f64,
    /// Posterior members are clamped into `[lower, upper]`.
    pub lower: f64,
    pub upper: f64,
    /// Keys the jitter used to re-spread a collapsed parameter.
    pub seed: u64,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        UpdateOptions {
            inflation: 1.05,
            spread_floor: 1e-3,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            seed: 0,
        }
    }
}

pub fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut m = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (a, &x) in m.iter_mut().zip(r) {
            *a += x / n;
        }
    }
    m
}

/// Updates `params` (`[member][parameter]`) from member predictions
/// `predicted` (`[member][observation]`), observations `observed` with error
/// variances `obs_var`.
///
/// The mean moves by `K (y - mean(h))` and anomalies by `-K A_h / 2`, so a
/// zero innovation leaves the mean unchanged.
pub fn enkf_update(
    params: &mut [Vec<f64>],
    predicted: &[Vec<f64>],
    observed: &[f64],
    obs_var: &[f64],
    opts: &UpdateOptions,
) -> Result<UpdateStats> {
    let m = params.len();
    if m < 2 || predicted.len() != m {
        return Err(Error::config(format!(
            "ensemble update needs at least 2 members with one prediction each, got {m} / {}",
            predicted.len()
        )));
    }
    let d = params[0].len();
    let p = observed.len();
    if params.iter().any(|r| r.len() != d) || predicted.iter().any(|r| r.len() != p) || obs_var.len() != p {
        return Err(Error::config("ensemble dimensions are inconsistent"));
    }
    if obs_var.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::config("observation variances must be positive"));
    }

    let theta_mean = mean_of(params);
    let h_mean = mean_of(predicted);
    let a = DMatrix::from_fn(d, m, |i, j| params[j][i] - theta_mean[i]);
    let ha = DMatrix::from_fn(p, m, |i, j| predicted[j][i] - h_mean[i]);
    let denom = (m - 1) as f64;
    let p_th = &a * ha.transpose() / denom;
    let mut s = &ha * ha.transpose() / denom;
    for i in 0..p {
        s[(i, i)] += obs_var[i];
    }
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::config("innovation covariance is not positive definite"))?;
    // K = P_th S^-1, computed as (S^-1 P_th^T)^T since S is symmetric
    let gain = chol.solve(&p_th.transpose()).transpose();

    let innovation: Vec<f64> = observed.iter().zip(&h_mean).map(|(y, h)| y - h).collect();
    let new_mean = DVector::from_column_slice(&theta_mean) + &gain * DVector::from_column_slice(&innovation);
    let mut anomalies = (&a - &gain * &ha * 0.5) * opts.inflation;

    let mut collapsed = Vec::new();
    let mut spread = vec![0.0; d];
    for i in 0..d {
        let sd = (anomalies.row(i).iter().map(|x| x * x).sum::<f64>() / denom).sqrt();
        if sd < opts.spread_floor {
            collapsed.push(i);
            let jitter: Vec<f64> = (0..m)
                .map(|j| rng::normal(&[opts.seed, rng::domain::ENSEMBLE, i as u64, j as u64]))
                .collect();
            let jm = jitter.iter().sum::<f64>() / m as f64;
            let js = (jitter.iter().map(|x| (x - jm).powi(2)).sum::<f64>() / denom).sqrt().max(1e-12);
            for j in 0..m {
                anomalies[(i, j)] = (jitter[j] - jm) / js * opts.spread_floor;
            }
            spread[i] = opts.spread_floor;
        } else {
            spread[i] = sd;
        }
    }
    for (j, row) in params.iter_mut().enumerate() {
        for i in 0..d {
            row[i] = (new_mean[i] + anomalies[(i, j)]).clamp(opts.lower, opts.upper);
        }
    }
    if !collapsed.is_empty() {
        log::warn!("ensemble spread collapsed for parameters {collapsed:?}; re-spread to {}", opts.spread_floor);
    }
    Ok(UpdateStats {
        innovation,
        spread,
        collapsed,
    })
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let (ma, mb) = (a[..n].iter().sum::<f64>() / n as f64, b[..n].iter().sum::<f64>() / n as f64);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_innovation_keeps_mean() {
        let mut params = vec![vec![0.1, -0.2], vec![0.3, 0.0], vec![-0.1, 0.4]];
        let predicted: Vec<Vec<f64>> = params.iter().map(|t| vec![2.0 * t[0], t[0] + t[1]]).collect();
        let before = mean_of(&params);
        let y = mean_of(&predicted);
        enkf_update(&mut params, &predicted, &y, &[0.01, 0.01], &UpdateOptions::default()).unwrap();
        let after = mean_of(&params);
        for (a, b) in before.iter().zip(&after) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    /// Linear-Gaussian scalar case against the closed-form Kalman update.
    #[test]
    fn scalar_gain_matches_kalman() {
        let mut params = vec![vec![-1.0], vec![0.0], vec![1.0]];
        let predicted: Vec<Vec<f64>> = params.iter().map(|t| vec![3.0 * t[0]]).collect();
        let (var_t, r, y) = (1.0, 0.5, 2.0);
        let opts = UpdateOptions {
            inflation: 1.0,
            ..Default::default()
        };
        let stats = enkf_update(&mut params, &predicted, &[y], &[r], &opts).unwrap();
        let k = 3.0 * var_t / (9.0 * var_t + r);
        assert_relative_eq!(mean_of(&params)[0], k * y, epsilon = 1e-12);
        // anomalies shrink by 1 - k H / 2
        assert_relative_eq!(stats.spread[0], 1.0 - 1.5 * k, epsilon = 1e-12);
    }

    #[test]
    fn collapse_is_respread_and_clamped() {
        let mut params = vec![vec![0.5]; 4];
        let predicted = vec![vec![1.0]; 4];
        let opts = UpdateOptions {
            spread_floor: 0.01,
            upper: 0.505,
            ..Default::default()
        };
        let stats = enkf_update(&mut params, &predicted, &[1.0], &[1.0], &opts).unwrap();
        assert_eq!(stats.collapsed, vec![0]);
        assert!(params.iter().any(|r| r[0] != 0.5));
        assert!(params.iter().all(|r| r[0] <= 0.505));
    }

    #[test]
    fn rejects_tiny_ensemble() {
        let mut params = vec![vec![0.0]];
        assert!(enkf_update(&mut params, &[vec![0.0]], &[0.0], &[1.0], &UpdateOptions::default()).is_err());
    }

    #[test]
    fn pearson_basics() {
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap(), 0.9979487, epsilon = 1e-6);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), None);
    }
}
