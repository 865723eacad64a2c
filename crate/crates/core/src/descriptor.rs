//! Stage descriptor: Gaussian graphical model with an l1-sparse precision
//! matrix, fitted by ADMM graphical lasso.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TimecastError};
use crate::linalg::{self, eigen_range, inverse_spd, logdet_spd, offdiag_l1, quad_form};
use crate::moments::RunningMoments;

/// Entries of a fitted precision below this magnitude are snapped to zero.
pub const ZERO_SNAP: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlassoConfig {
    /// ADMM penalty parameter.
    pub rho: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_admm_iter: usize,
}

impl Default for GlassoConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            abs_tol: 1e-8,
            rel_tol: 1e-6,
            max_admm_iter: 10_000,
        }
    }
}

impl GlassoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.abs_tol > 0.0 && self.rel_tol > 0.0) || self.max_admm_iter == 0
        {
            return Err(TimecastError::Argument(
                "glasso config needs rho > 0, positive tolerances and max_admm_iter >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalStats {
    pub mean: Vec<f64>,
    /// Maximum-likelihood covariance (denominator n).
    pub covariance: DMatrix<f64>,
    pub count: u64,
}

impl EmpiricalStats {
    pub fn from_moments(m: &RunningMoments) -> Result<Self> {
        if m.count == 0 {
            return Err(TimecastError::Argument("no points for empirical stats".into()));
        }
        Ok(Self {
            mean: m.mean.clone(),
            covariance: m.covariance(),
            count: m.count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn empirical_stats<P: AsRef<[f64]>>(points: &[P]) -> Result<EmpiricalStats> {
    let first = points
        .first()
        .ok_or_else(|| TimecastError::Argument("empty point set".into()))?;
    let dim = first.as_ref().len();
    let mut m = RunningMoments::new(dim);
    for p in points {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(TimecastError::Dimension {
                expected: dim,
                actual: p.len(),
            });
        }
        m.push(p);
    }
    EmpiricalStats::from_moments(&m)
}

/// Outcome of one graphical-lasso solve, converged or not.
#[derive(Debug, Clone)]
pub struct GlassoFit {
    pub precision: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Diagonal loading added to the covariance before solving.
    pub loading: f64,
}

/// Diagonal loading for a covariance that is singular or backed by too few
/// points; zero when none is needed.
pub fn diagonal_loading(cov: &DMatrix<f64>, count: u64) -> f64 {
    let d = cov.nrows();
    if d == 0 {
        return 0.0;
    }
    let (min_eig, max_eig) = eigen_range(cov);
    let near_singular = !(max_eig > 0.0) || min_eig <= 1e-10 * max_eig;
    if (count as usize) < d + 1 || near_singular {
        (1e-3 * cov.trace() / d as f64).max(1e-6)
    } else {
        0.0
    }
}

/// Maximises `n (log det L - tr(Q L)) - alpha ||L||_od,1` over SPD `L`.
pub fn fit_precision(
    stats: &EmpiricalStats,
    alpha: f64,
    cfg: &GlassoConfig,
) -> Result<DMatrix<f64>> {
    let fit = fit_precision_detailed(stats, alpha, cfg)?;
    if !fit.converged {
        return Err(TimecastError::NotConverged {
            iterations: fit.iterations,
            primal_residual: fit.primal_residual,
            dual_residual: fit.dual_residual,
        });
    }
    Ok(fit.precision)
}

/// Like [`fit_precision`] but returns the last iterate on non-convergence.
pub fn fit_precision_detailed(
    stats: &EmpiricalStats,
    alpha: f64,
    cfg: &GlassoConfig,
) -> Result<GlassoFit> {
    cfg.validate()?;
    if !(alpha >= 0.0) {
        return Err(TimecastError::Argument("alpha must be >= 0".into()));
    }
    if stats.covariance.iter().any(|v| !v.is_finite()) {
        return Err(TimecastError::Argument("covariance has non-finite entries".into()));
    }
    let d = stats.dim();
    if stats.covariance.nrows() != d || stats.covariance.ncols() != d {
        return Err(TimecastError::Dimension {
            expected: d,
            actual: stats.covariance.nrows(),
        });
    }
    let loading = diagonal_loading(&stats.covariance, stats.count);
    let mut q = linalg::symmetrize(&stats.covariance);
    for i in 0..d {
        q[(i, i)] += loading;
    }
    let lambda = alpha / stats.count.max(1) as f64;

    if lambda == 0.0 {
        let precision = inverse_spd(&q).ok_or_else(|| {
            TimecastError::Domain("covariance is not positive definite".into())
        })?;
        return Ok(GlassoFit {
            precision,
            iterations: 0,
            converged: true,
            primal_residual: 0.0,
            dual_residual: 0.0,
            loading,
        });
    }

    let rho = cfg.rho;
    let mut z = DMatrix::<f64>::from_diagonal(&DVector::from_fn(d, |i, _| 1.0 / q[(i, i)]));
    let mut u = DMatrix::<f64>::zeros(d, d);
    let mut x = z.clone();
    let kappa = lambda / rho;
    let scale = d as f64;
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;

    for iter in 1..=cfg.max_admm_iter {
        // X-update: closed form through the eigenbasis of rho (Z - U) - Q
        let m = linalg::symmetrize(&((&z - &u) * rho - &q));
        let eig = m.symmetric_eigen();
        let theta = eig
            .eigenvalues
            .map(|e| (e + (e * e + 4.0 * rho).sqrt()) / (2.0 * rho));
        x = &eig.eigenvectors * DMatrix::from_diagonal(&theta) * eig.eigenvectors.transpose();
        x = linalg::symmetrize(&x);

        // Z-update: soft-threshold the off-diagonal
        let z_old = z.clone();
        let v = &x + &u;
        for i in 0..d {
            for j in 0..d {
                let a = v[(i, j)];
                z[(i, j)] = if i == j {
                    a
                } else {
                    a.signum() * (a.abs() - kappa).max(0.0)
                };
            }
        }
        u += &x - &z;

        primal = (&x - &z).norm();
        dual = rho * (&z - &z_old).norm();
        let eps_pri = scale * cfg.abs_tol + cfg.rel_tol * x.norm().max(z.norm());
        let eps_dual = scale * cfg.abs_tol + cfg.rel_tol * rho * u.norm();
        if primal < eps_pri && dual < eps_dual {
            return Ok(GlassoFit {
                precision: finalize(&z, &x),
                iterations: iter,
                converged: true,
                primal_residual: primal,
                dual_residual: dual,
                loading,
            });
        }
    }
    Ok(GlassoFit {
        precision: finalize(&z, &x),
        iterations: cfg.max_admm_iter,
        converged: false,
        primal_residual: primal,
        dual_residual: dual,
        loading,
    })
}

fn finalize(z: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = linalg::symmetrize(z);
    out.iter_mut().for_each(|v| {
        if v.abs() < ZERO_SNAP {
            *v = 0.0;
        }
    });
    if linalg::is_spd(&out) {
        out
    } else {
        linalg::symmetrize(x)
    }
}

/// Exact log density of `x` under `N(mean, precision^-1)`.
pub fn gaussian_loglik(x: &[f64], mean: &[f64], precision: &DMatrix<f64>) -> Result<f64> {
    let d = mean.len();
    if x.len() != d {
        return Err(TimecastError::Dimension {
            expected: d,
            actual: x.len(),
        });
    }
    if precision.nrows() != d || precision.ncols() != d {
        return Err(TimecastError::Dimension {
            expected: d,
            actual: precision.nrows(),
        });
    }
    let logdet = logdet_spd(precision)
        .ok_or_else(|| TimecastError::Domain("precision is not positive definite".into()))?;
    Ok(loglik_with_logdet(x, mean, precision, logdet))
}

pub(crate) fn loglik_with_logdet(
    x: &[f64],
    mean: &[f64],
    precision: &DMatrix<f64>,
    logdet: f64,
) -> f64 {
    let d = mean.len() as f64;
    -0.5 * quad_form(x, mean, precision) + 0.5 * logdet - 0.5 * d * LN_2PI
}

/// Summed log-likelihood of `points` minus the off-diagonal l1 penalty.
pub fn stage_descriptor_objective<P: AsRef<[f64]>>(
    points: &[P],
    mean: &[f64],
    precision: &DMatrix<f64>,
    alpha: f64,
) -> Result<f64> {
    let logdet = logdet_spd(precision)
        .ok_or_else(|| TimecastError::Domain("precision is not positive definite".into()))?;
    let mut acc = 0.0;
    for p in points {
        let p = p.as_ref();
        if p.len() != mean.len() {
            return Err(TimecastError::Dimension {
                expected: mean.len(),
                actual: p.len(),
            });
        }
        acc += loglik_with_logdet(p, mean, precision, logdet);
    }
    Ok(acc - alpha * offdiag_l1(precision))
}
