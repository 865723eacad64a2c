//! Seeded multi-stage sequence generator with known stage paths.
//!
//! Instance `v` passes through the stages in order, spending a uniformly
//! drawn number of ticks in each; its event time is the total length. At
//! tick `t` in stage `k`, with remaining time `tau = T - t`,
//! `x_t = z + w_k * tau_noisy` where `z ~ N(mu_k, Lambda_k^-1)` and
//! `tau_noisy = tau + s_k * sqrt(tau) * N(0, 1)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TimecastError};
use crate::linalg::inverse_spd;
use crate::types::{LabeledCollection, SensorSequence, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStage {
    pub mean: Vec<f64>,
    /// Precision matrix as rows.
    pub precision: Vec<Vec<f64>>,
    /// How strongly each sensor tracks the remaining time.
    pub time_loading: Vec<f64>,
    /// Scale of the Wiener-like noise on the tracked remaining time.
    #[serde(default)]
    pub time_noise: f64,
    /// Inclusive range of ticks spent in the stage.
    pub duration: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub instances: usize,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
    pub stages: Vec<SyntheticStage>,
}

fn default_prefix() -> String {
    "unit".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthPath {
    pub instance_id: String,
    /// 1-based stage per tick.
    pub stages: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: Vec<TruthPath>,
}

struct Prepared {
    mean: DVector<f64>,
    chol_cov: DMatrix<f64>,
    loading: Vec<f64>,
    noise: f64,
    duration: [usize; 2],
}

fn prepare(spec: &SyntheticSpec) -> Result<Vec<Prepared>> {
    if spec.stages.is_empty() {
        return Err(TimecastError::Argument("synthetic spec needs at least one stage".into()));
    }
    let d = spec.stages[0].mean.len();
    if d == 0 {
        return Err(TimecastError::Argument("synthetic stages need at least one sensor".into()));
    }
    spec.stages
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let k = k + 1;
            if s.mean.len() != d || s.time_loading.len() != d {
                return Err(TimecastError::Argument(format!("stage {k}: inconsistent dimensions")));
            }
            if s.precision.len() != d || s.precision.iter().any(|r| r.len() != d) {
                return Err(TimecastError::Argument(format!("stage {k}: precision must be {d}x{d}")));
            }
            if s.duration[0] == 0 || s.duration[0] > s.duration[1] {
                return Err(TimecastError::Argument(format!("stage {k}: bad duration range")));
            }
            if !(s.time_noise >= 0.0) {
                return Err(TimecastError::Argument(format!("stage {k}: negative time noise")));
            }
            let p = DMatrix::from_fn(d, d, |i, j| s.precision[i][j]);
            if (&p - p.transpose()).abs().max() > 1e-12 {
                return Err(TimecastError::Argument(format!("stage {k}: precision is not symmetric")));
            }
            let cov = inverse_spd(&p)
                .ok_or_else(|| TimecastError::Argument(format!("stage {k}: precision is not positive definite")))?;
            let chol = cov
                .cholesky()
                .ok_or_else(|| TimecastError::Argument(format!("stage {k}: covariance is not positive definite")))?;
            Ok(Prepared {
                mean: DVector::from_column_slice(&s.mean),
                chol_cov: chol.l(),
                loading: s.time_loading.clone(),
                noise: s.time_noise,
                duration: s.duration,
            })
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(LabeledCollection, SyntheticTruth)> {
    if spec.instances == 0 {
        return Err(TimecastError::Argument("synthetic spec needs at least one instance".into()));
    }
    let stages = prepare(spec)?;
    let d = stages[0].mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seqs = Vec::with_capacity(spec.instances);
    let mut paths = Vec::with_capacity(spec.instances);
    for v in 0..spec.instances {
        let mut truth = Vec::new();
        for (k, s) in stages.iter().enumerate() {
            let len = rng.random_range(s.duration[0]..=s.duration[1]);
            truth.extend(std::iter::repeat_n(k + 1, len));
        }
        let total = truth.len();
        let mut rows = Vec::with_capacity(total);
        for (t, &k) in truth.iter().enumerate() {
            let s = &stages[k - 1];
            let tau = (total - (t + 1)) as f64;
            let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = &s.mean + &s.chol_cov * e;
            let noisy = tau + s.noise * tau.sqrt() * rng.sample::<f64, _>(StandardNormal);
            rows.push((0..d).map(|i| z[i] + s.loading[i] * noisy).collect());
        }
        let id = format!("{}_{}", spec.id_prefix, v + 1);
        seqs.push(SensorSequence::from_rows(id.clone(), rows, None)?);
        paths.push(TruthPath {
            instance_id: id,
            stages: truth,
        });
    }
    Ok((
        LabeledCollection::new(seqs)?,
        SyntheticTruth {
            schema_version: SCHEMA_VERSION,
            seed: spec.seed,
            paths,
        },
    ))
}
