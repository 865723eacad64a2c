//! Independent reference implementations and fixtures shared by the
//! integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use timecast::synthetic::{SyntheticSpec, SyntheticStage};
use timecast::{StageModel, StageStats};

/// Every non-decreasing path of length `t` over `k` stages.
pub fn monotone_paths(k: usize, t: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, t: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == t {
            out.push(cur.clone());
            return;
        }
        let lo = cur.last().copied().unwrap_or(0);
        for s in lo..k {
            cur.push(s);
            rec(k, t, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, t, &mut Vec::new(), &mut out);
    out
}

/// Left-to-right sum of `cost[t][path[t]]`.
pub fn path_value(cost: &[Vec<f64>], path: &[usize]) -> f64 {
    let mut acc = 0.0;
    for (t, &s) in path.iter().enumerate() {
        acc += cost[t][s];
    }
    acc
}

/// Best monotone path by exhaustive enumeration; ties go to the
/// lexicographically smallest path.
pub fn enumerate_best(cost: &[Vec<f64>], k: usize) -> (f64, Vec<usize>) {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for p in monotone_paths(k, cost.len()) {
        let v = path_value(cost, &p);
        if v > best.0 {
            best = (v, p);
        }
    }
    best
}

fn soft(x: f64, l: f64) -> f64 {
    if x > l {
        x - l
    } else if x < -l {
        x + l
    } else {
        0.0
    }
}

/// Graphical lasso by block coordinate descent on the covariance, with the
/// penalty on off-diagonal entries only:
/// maximise `log det T - tr(S T) - lambda * sum_{i != j} |T_ij|`.
pub fn glasso_cd(s: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let p = s.nrows();
    let mut w = s.clone();
    let mut beta = vec![vec![0.0; p - 1]; p];
    for _ in 0..10_000 {
        let w_old = w.clone();
        for j in 0..p {
            let idx: Vec<usize> = (0..p).filter(|&i| i != j).collect();
            let b = &mut beta[j];
            for _ in 0..100_000 {
                let mut delta = 0.0f64;
                for a in 0..p - 1 {
                    let mut r = s[(idx[a], j)];
                    for c in 0..p - 1 {
                        if c != a {
                            r -= w[(idx[a], idx[c])] * b[c];
                        }
                    }
                    let nb = soft(r, lambda) / w[(idx[a], idx[a])];
                    delta = delta.max((nb - b[a]).abs());
                    b[a] = nb;
                }
                if delta < 1e-14 {
                    break;
                }
            }
            for a in 0..p - 1 {
                let mut v = 0.0;
                for c in 0..p - 1 {
                    v += w[(idx[a], idx[c])] * b[c];
                }
                w[(idx[a], j)] = v;
                w[(j, idx[a])] = v;
            }
        }
        if (&w - &w_old).abs().max() < 1e-13 {
            break;
        }
    }
    let mut theta = DMatrix::zeros(p, p);
    for j in 0..p {
        let idx: Vec<usize> = (0..p).filter(|&i| i != j).collect();
        let b = &beta[j];
        let mut wb = 0.0;
        for a in 0..p - 1 {
            wb += w[(idx[a], j)] * b[a];
        }
        let tjj = 1.0 / (w[(j, j)] - wb);
        theta[(j, j)] = tjj;
        for a in 0..p - 1 {
            theta[(idx[a], j)] = -b[a] * tjj;
        }
    }
    (&theta + theta.transpose()) * 0.5
}

/// Largest violation of the optimality conditions of the off-diagonal
/// penalised problem at `theta`.
pub fn kkt_residual(s: &DMatrix<f64>, theta: &DMatrix<f64>, lambda: f64) -> f64 {
    let w = theta.clone().try_inverse().expect("invertible");
    let p = s.nrows();
    let mut worst = 0.0f64;
    for i in 0..p {
        for j in 0..p {
            let g = w[(i, j)] - s[(i, j)];
            let r = if i == j {
                g.abs()
            } else if theta[(i, j)] != 0.0 {
                (g - lambda * theta[(i, j)].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            };
            worst = worst.max(r);
        }
    }
    worst
}

/// Adaptive Simpson on `[a, b]`.
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    // fixed pre-split so narrow peaks are not missed by the first estimate
    let pieces = 64;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let lo = a + i as f64 * h;
            let hi = lo + h;
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            step(f, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

/// Inverse-Gaussian density written out directly from its definition.
pub fn ig_density(mean: f64, sigma: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    let s2 = sigma * sigma;
    (2.0 * std::f64::consts::PI * s2 * tau.powi(3)).powf(-0.5) * (-(1.0 - tau / mean).powi(2) / (2.0 * s2 * tau)).exp()
}

/// `integral_{lo}^{hi} g(tau) dtau` by substitution `tau = e^u`.
pub fn integrate_log<F: Fn(f64) -> f64>(g: F, lo: f64, hi: f64, tol: f64) -> f64 {
    let h = |u: f64| {
        let t = u.exp();
        g(t) * t
    };
    simpson(&h, lo.ln(), hi.ln(), tol)
}

/// Least squares `y ~ X w + b` by the normal equations.
pub fn normal_equations(xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    let d = xs[0].len();
    let a = DMatrix::from_fn(xs.len(), d + 1, |i, j| if j < d { xs[i][j] } else { 1.0 });
    let y = nalgebra::DVector::from_column_slice(ys);
    let ata = a.transpose() * &a;
    let aty = a.transpose() * y;
    ata.lu().solve(&aty).expect("full rank").iter().copied().collect()
}

/// Two-pass mean and ML covariance.
pub fn batch_stats(pts: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let d = pts[0].len();
    let n = pts.len() as f64;
    let mut mean = vec![0.0; d];
    for p in pts {
        for i in 0..d {
            mean[i] += p[i] / n;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for p in pts {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
            }
        }
    }
    (mean, cov)
}

/// Random SPD matrix with unit-order entries.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}

/// Points drawn from `N(0, cov)`.
pub fn gaussian_points(rng: &mut ChaCha8Rng, cov: &DMatrix<f64>, n: usize) -> Vec<Vec<f64>> {
    let l = cov.clone().cholesky().expect("spd").l();
    (0..n)
        .map(|_| {
            let e = nalgebra::DVector::from_fn(cov.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
            (l.clone() * e).iter().copied().collect()
        })
        .collect()
}

/// Random stage model of dimension `d` for cost-table tests.
pub fn random_stage(rng: &mut ChaCha8Rng, d: usize) -> StageModel {
    let mean = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut link: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    link.push(rng.random_range(2.0..8.0));
    StageModel {
        mean,
        precision: random_spd(rng, d),
        link_weights: link,
        diffusion: rng.random_range(0.1..1.0),
        increment_mean: rng.random_range(0.05..0.5),
        count: 0,
        sum_stats: StageStats::empty(d),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn diag(v: &[f64]) -> Vec<Vec<f64>> {
    (0..v.len())
        .map(|i| (0..v.len()).map(|j| if i == j { v[i] } else { 0.0 }).collect())
        .collect()
}

/// Three well-separated stages with distinct sparse precisions and distinct
/// time dependence.
pub fn three_stage_spec(seed: u64, instances: usize) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        instances,
        id_prefix: "unit".into(),
        stages: vec![
            SyntheticStage {
                mean: vec![0.0, 0.0, 0.0],
                precision: vec![vec![4.0, 1.5, 0.0], vec![1.5, 4.0, 0.0], vec![0.0, 0.0, 4.0]],
                time_loading: vec![0.03, 0.0, 0.0],
                time_noise: 0.1,
                duration: [40, 60],
            },
            SyntheticStage {
                mean: vec![3.0, -3.0, 0.0],
                precision: vec![vec![4.0, 0.0, 0.0], vec![0.0, 4.0, -1.5], vec![0.0, -1.5, 4.0]],
                time_loading: vec![0.0, 0.08, 0.0],
                time_noise: 0.1,
                duration: [30, 40],
            },
            SyntheticStage {
                mean: vec![-3.0, 3.0, 3.0],
                precision: diag(&[9.0, 9.0, 9.0]),
                time_loading: vec![0.0, 0.0, 0.3],
                time_noise: 0.1,
                duration: [20, 30],
            },
        ],
    }
}
