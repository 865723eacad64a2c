//! Single-pass running mean and co-moment matrix (Welford), with Chan's
//! pairwise merge for combining two accumulators.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` sum of centred outer products.
    pub comoment: Vec<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    pub fn from_points<'a, I>(dim: usize, points: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut m = Self::new(dim);
        for p in points {
            m.push(p);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        self.count += 1;
        let n = self.count as f64;
        // delta against the old mean, delta2 against the new one
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            let di = delta[i];
            let row = &mut self.comoment[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += di * (x[j] - self.mean[j]);
            }
        }
    }

    pub fn merge(&mut self, other: &RunningMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let d = self.dim();
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..d {
            for j in 0..d {
                self.comoment[i * d + j] +=
                    other.comoment[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.count += other.count;
    }

    /// Maximum-likelihood covariance (denominator n); zero when empty.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        if self.count == 0 {
            return DMatrix::zeros(d, d);
        }
        let n = self.count as f64;
        let mut c = DMatrix::from_row_slice(d, d, &self.comoment) / n;
        // the update is only symmetric up to rounding
        for i in 0..d {
            for j in (i + 1)..d {
                let v = 0.5 * (c[(i, j)] + c[(j, i)]);
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        c
    }
}
