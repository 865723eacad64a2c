//! Stage predictor: affine link to remaining time, Wiener diffusion
//! estimate, and the inverse-Gaussian first-hitting-time law it induces.
//!
//! A stage maps a feature vector `x` to a drift `1 / f(x)` of a Wiener
//! process started at 0 with boundary 1. The hitting time is inverse
//! Gaussian with mean `f(x)` and shape `1 / sigma_B^2`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TimecastError};
use crate::linalg::eigen_range;
use crate::moments::RunningMoments;
use crate::types::StageModel;

/// Predictions below this are clamped before building a distribution.
pub const MIN_PREDICTED_TIME: f64 = 1e-3;
/// Floor on the diffusion estimate.
pub const MIN_DIFFUSION: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Inverse-Gaussian hitting-time parameters (boundary fixed at 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstHittingParams {
    /// Mean hitting time, `f(x)`.
    pub mu_ig: f64,
    /// Shape, `1 / sigma_B^2`.
    pub lambda_ig: f64,
}

impl FirstHittingParams {
    pub const BOUNDARY: f64 = 1.0;

    pub fn new(mu_ig: f64, lambda_ig: f64) -> Result<Self> {
        if !(mu_ig > 0.0 && mu_ig.is_finite()) || !(lambda_ig > 0.0) {
            return Err(TimecastError::Domain(format!(
                "invalid hitting-time parameters mu={mu_ig}, lambda={lambda_ig}"
            )));
        }
        Ok(Self { mu_ig, lambda_ig })
    }

    /// From a raw link value and diffusion; the link is clamped to
    /// [`MIN_PREDICTED_TIME`]. The flag reports whether clamping happened.
    pub fn from_link(link_value: f64, diffusion: f64) -> (Self, bool) {
        let clamped = !(link_value >= MIN_PREDICTED_TIME);
        let mu = if clamped { MIN_PREDICTED_TIME } else { link_value };
        let sigma = diffusion.max(MIN_DIFFUSION);
        (
            Self {
                mu_ig: mu,
                lambda_ig: 1.0 / (sigma * sigma),
            },
            clamped,
        )
    }

    pub fn diffusion(&self) -> f64 {
        (1.0 / self.lambda_ig).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkFit {
    /// Feature weights followed by the intercept.
    pub weights: Vec<f64>,
    /// True when the normal equations were rank-deficient and ridge was used.
    pub ridge: bool,
}

/// Least-squares affine fit of `tau` on `x`.
pub fn fit_link<P: AsRef<[f64]>>(pairs: &[(P, f64)]) -> Result<LinkFit> {
    let first = pairs
        .first()
        .ok_or_else(|| TimecastError::Argument("no pairs to fit the link".into()))?;
    let d = first.0.as_ref().len();
    let mut m = RunningMoments::new(d + 2);
    let mut z = vec![0.0; d + 2];
    for (x, tau) in pairs {
        let x = x.as_ref();
        if x.len() != d {
            return Err(TimecastError::Dimension {
                expected: d,
                actual: x.len(),
            });
        }
        if !(*tau > 0.0) {
            return Err(TimecastError::Domain(format!("non-positive label {tau}")));
        }
        z[..d].copy_from_slice(x);
        z[d] = *tau;
        z[d + 1] = 1.0 / tau;
        m.push(&z);
    }
    Ok(link_from_moments(&m))
}

/// Solves the centred normal equations from moments of `[x, tau, 1/tau]`.
pub fn link_from_moments(m: &RunningMoments) -> LinkFit {
    let d = m.dim() - 2;
    let mut weights = vec![0.0; d + 1];
    if m.count == 0 {
        return LinkFit {
            weights,
            ridge: false,
        };
    }
    let cov = m.covariance();
    let sxx = cov.view((0, 0), (d, d)).clone_owned();
    let sxy = DVector::from_fn(d, |i, _| cov[(i, d)]);
    let mean_x = &m.mean[..d];
    let mean_tau = m.mean[d];

    let trace = sxx.trace();
    let mut ridge = false;
    if d > 0 && trace > 0.0 {
        let (min_eig, max_eig) = eigen_range(&sxx);
        let deficient = (m.count as usize) < d + 2 || min_eig <= 1e-10 * max_eig;
        let mut penalty = if deficient {
            ridge = true;
            1e-6 * trace / d as f64
        } else {
            0.0
        };
        let a = loop {
            let mut lhs = sxx.clone();
            for i in 0..d {
                lhs[(i, i)] += penalty;
            }
            match lhs.cholesky() {
                Some(ch) => break ch.solve(&sxy),
                None => {
                    ridge = true;
                    penalty = if penalty == 0.0 { 1e-6 * trace / d as f64 } else { penalty * 10.0 };
                }
            }
        };
        weights[..d].copy_from_slice(a.as_slice());
    }
    let fitted_mean: f64 = weights[..d].iter().zip(mean_x).map(|(w, x)| w * x).sum();
    weights[d] = mean_tau - fitted_mean;
    LinkFit { weights, ridge }
}

/// Intercept-only link predicting the mean label.
pub fn constant_link(dim: usize, mean_label: f64) -> Vec<f64> {
    let mut w = vec![0.0; dim + 1];
    w[dim] = mean_label;
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diffusion {
    pub sigma: f64,
    /// Mean of `1/tau`.
    pub increment_mean: f64,
    /// `sum |1/tau - increment_mean|`.
    pub abs_dev_sum: f64,
}

/// `sigma_B = sqrt(mean |1/tau - mean(1/tau)|)`, floored at [`MIN_DIFFUSION`].
pub fn fit_diffusion(taus: &[f64]) -> Result<Diffusion> {
    if taus.len() < 2 {
        return Err(TimecastError::DegenerateStage(format!(
            "diffusion needs at least 2 pairs, got {}",
            taus.len()
        )));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0)) {
        return Err(TimecastError::Domain(format!("non-positive label {t}")));
    }
    let n = taus.len() as f64;
    let increment_mean = taus.iter().map(|t| 1.0 / t).sum::<f64>() / n;
    let abs_dev_sum: f64 = taus.iter().map(|t| (1.0 / t - increment_mean).abs()).sum();
    Ok(Diffusion {
        sigma: diffusion_from_abs_dev(abs_dev_sum, taus.len() as u64),
        increment_mean,
        abs_dev_sum,
    })
}

pub fn diffusion_from_abs_dev(abs_dev_sum: f64, count: u64) -> f64 {
    if count == 0 {
        return MIN_DIFFUSION;
    }
    (abs_dev_sum / count as f64).sqrt().max(MIN_DIFFUSION)
}

/// Hitting-time density at `tau`.
pub fn event_density(params: &FirstHittingParams, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(TimecastError::Domain(format!("density needs tau > 0, got {tau}")));
    }
    Ok(log_density(params, tau).exp())
}

/// `ln p(tau) = -1/2 ln(2 pi s^2 tau^3) - (1 - tau/f)^2 / (2 s^2 tau)`.
pub fn log_density(params: &FirstHittingParams, tau: f64) -> f64 {
    let s2 = 1.0 / params.lambda_ig;
    let r = 1.0 - tau / params.mu_ig;
    -0.5 * (LN_2PI + s2.ln() + 3.0 * tau.ln()) - r * r / (2.0 * s2 * tau)
}

/// `P(T > tau)`, the complement of the inverse-Gaussian CDF.
pub fn survival(params: &FirstHittingParams, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(TimecastError::Domain(format!("survival needs tau > 0, got {tau}")));
    }
    Ok(survival_unchecked(params, tau))
}

pub fn cdf(params: &FirstHittingParams, tau: f64) -> Result<f64> {
    Ok(1.0 - survival(params, tau)?)
}

fn survival_unchecked(params: &FirstHittingParams, tau: f64) -> f64 {
    let (mu, lambda) = (params.mu_ig, params.lambda_ig);
    let root = (lambda / tau).sqrt();
    let a = root * (tau / mu - 1.0);
    let b = root * (tau / mu + 1.0);
    // S = Phi(-a) - exp(2 lambda / mu) Phi(-b); the second factor overflows
    // on its own when lambda / mu is large
    let tail = (2.0 * lambda / mu + log_ndtr(-b)).exp();
    (ndtr(-a) - tail).clamp(0.0, 1.0)
}

/// Mean of the hitting-time law, which is the point prediction.
pub fn predicted_time(params: &FirstHittingParams) -> f64 {
    params.mu_ig
}

/// Per-point predictor term of the joint objective:
/// `-|tau - f(x)| - ln sigma^2 - |1/tau - mu_tau| / sigma^2`.
pub fn predictor_loglik(x: &[f64], tau: f64, stage: &StageModel) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(TimecastError::Domain(format!("predictor term needs tau > 0, got {tau}")));
    }
    if x.len() != stage.dim() {
        return Err(TimecastError::Dimension {
            expected: stage.dim(),
            actual: x.len(),
        });
    }
    Ok(predictor_term(
        stage.link(x),
        tau,
        stage.diffusion,
        stage.increment_mean,
    ))
}

pub(crate) fn predictor_term(link_value: f64, tau: f64, diffusion: f64, increment_mean: f64) -> f64 {
    let s2 = diffusion * diffusion;
    -(tau - link_value).abs() - s2.ln() - (1.0 / tau - increment_mean).abs() / s2
}

/// Standard normal CDF.
pub fn ndtr(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `ln Phi(z)`, accurate far into the lower tail.
pub fn log_ndtr(z: f64) -> f64 {
    if z > 5.0 {
        (-0.5 * libm::erfc(z / std::f64::consts::SQRT_2)).ln_1p()
    } else if z > -37.0 {
        ndtr(z).ln()
    } else {
        // asymptotic series of the Mills ratio
        let z2 = z * z;
        let inv = 1.0 / z2;
        let series = 1.0 - inv * (1.0 - 3.0 * inv * (1.0 - 5.0 * inv * (1.0 - 7.0 * inv)));
        -0.5 * z2 - (-z).ln() - 0.5 * LN_2PI + series.ln()
    }
}

/// Density and survival sampled on `taus`.
pub fn sample_curves(params: &FirstHittingParams, taus: &[f64]) -> Vec<(f64, f64, f64)> {
    taus.iter()
        .filter(|t| **t > 0.0)
        .map(|&t| (t, log_density(params, t).exp(), survival_unchecked(params, t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::StageStats;
    use nalgebra::DMatrix;

    fn params(f: f64, sigma: f64) -> FirstHittingParams {
        FirstHittingParams::new(f, 1.0 / (sigma * sigma)).unwrap()
    }

    fn stage(link: Vec<f64>, diffusion: f64, increment_mean: f64) -> StageModel {
        let d = link.len() - 1;
        StageModel {
            mean: vec![0.0; d],
            precision: DMatrix::identity(d, d),
            link_weights: link,
            diffusion,
            increment_mean,
            count: 0,
            sum_stats: StageStats::empty(d),
        }
    }

    #[test]
    fn constant_target_gives_intercept_only() {
        let pairs: Vec<(Vec<f64>, f64)> = (0..12)
            .map(|i| (vec![i as f64, ((i * 7) % 5) as f64], 7.0))
            .collect();
        let fit = fit_link(&pairs).unwrap();
        assert!(fit.weights[0].abs() < 1e-12 && fit.weights[1].abs() < 1e-12);
        assert!((fit.weights[2] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn exact_linear_data_is_recovered() {
        let pairs: Vec<(Vec<f64>, f64)> =
            (1..=10).map(|i| (vec![i as f64], 2.0 * i as f64 + 3.0)).collect();
        let fit = fit_link(&pairs).unwrap();
        assert!(!fit.ridge);
        assert!((fit.weights[0] - 2.0).abs() < 1e-8);
        assert!((fit.weights[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn underdetermined_link_uses_ridge() {
        let pairs = vec![(vec![1.0, 2.0, 3.0], 4.0), (vec![2.0, 1.0, 0.0], 2.0)];
        let fit = fit_link(&pairs).unwrap();
        assert!(fit.ridge);
        assert!(fit.weights.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn diffusion_examples() {
        let d = fit_diffusion(&[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(d.increment_mean, 0.25);
        assert_eq!(d.sigma, MIN_DIFFUSION);

        let d = fit_diffusion(&[1.0, 1.0 / 3.0]).unwrap();
        assert!((d.increment_mean - 2.0).abs() < 1e-12);
        assert!((d.sigma - 1.0).abs() < 1e-12);

        assert!(matches!(
            fit_diffusion(&[3.0]),
            Err(TimecastError::DegenerateStage(_))
        ));
    }

    #[test]
    fn density_examples() {
        let v = event_density(&params(1.0, 1.0), 1.0).unwrap();
        assert!((v - 0.398_942_280_401_432_7).abs() < 1e-12);
        // tau = f(x) again kills the exponent: 1 / sqrt(2 pi * 0.25 * 8)
        let v = event_density(&params(2.0, 0.5), 2.0).unwrap();
        assert!((v - 1.0 / (4.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!(event_density(&params(1.0, 1.0), 0.0).is_err());
        assert!(survival(&params(1.0, 1.0), -1.0).is_err());
    }

    #[test]
    fn survival_limits() {
        let p = params(3.0, 0.4);
        assert!((survival(&p, 1e-9).unwrap() - 1.0).abs() < 1e-12);
        assert!(survival(&p, 1e6).unwrap() < 1e-12);
        // near-Gaussian regime is symmetric about the mean
        let p = FirstHittingParams::new(1.0, 1e4).unwrap();
        assert!((survival(&p, 1.0).unwrap() - 0.5).abs() < 1e-2);
        // huge shape must not overflow
        let p = FirstHittingParams::new(2.0, 1e12).unwrap();
        let s = survival(&p, 1.5).unwrap();
        assert!(s.is_finite() && (s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn log_ndtr_is_continuous_across_branches() {
        for z in [-37.0f64, 5.0] {
            let lo = log_ndtr(z - 1e-9);
            let hi = log_ndtr(z + 1e-9);
            assert!((lo - hi).abs() < 1e-6 * lo.abs().max(1e-12), "z={z}: {lo} vs {hi}");
        }
        assert!((log_ndtr(0.0) - 0.5f64.ln()).abs() < 1e-15);
        // Phi(-40) ~ 3.6e-350 underflows; compare against the leading term
        let approx = -800.0 - 40f64.ln() - 0.5 * LN_2PI;
        assert!((log_ndtr(-40.0) - approx).abs() < 1e-3);
    }

    #[test]
    fn predicted_time_is_mean() {
        assert_eq!(predicted_time(&params(10.0, 1.0)), 10.0);
        assert_eq!(predicted_time(&params(92.0, 0.2)), 92.0);
    }

    #[test]
    fn clamp_flags_negative_links() {
        let (p, clamped) = FirstHittingParams::from_link(-4.0, 0.5);
        assert!(clamped);
        assert_eq!(p.mu_ig, MIN_PREDICTED_TIME);
        let (p, clamped) = FirstHittingParams::from_link(4.0, 0.5);
        assert!(!clamped);
        assert_eq!(p.lambda_ig, 4.0);
    }

    #[test]
    fn predictor_loglik_examples() {
        let s = stage(vec![0.0, 1.0], 1.0, 1.0);
        assert_eq!(predictor_loglik(&[5.0], 1.0, &s).unwrap(), 0.0);
        let s = stage(vec![0.0, 1.0], std::f64::consts::E, 1.0);
        assert!((predictor_loglik(&[5.0], 1.0, &s).unwrap() + 2.0).abs() < 1e-12);
        assert!(predictor_loglik(&[5.0], 0.0, &s).is_err());

        // fixture: link 0.5 x + 2 at x = 4 gives 4; tau = 5, sigma = 2, mu_tau = 0.1
        let s = stage(vec![0.5, 2.0], 2.0, 0.1);
        let expect = -1.0 - 4f64.ln() - (0.2f64 - 0.1).abs() / 4.0;
        assert!((predictor_loglik(&[4.0], 5.0, &s).unwrap() - expect).abs() < 1e-12);
    }
}
