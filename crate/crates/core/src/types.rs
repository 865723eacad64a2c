//! Shared domain types: observations, sequences, hyperparameters, stage
//! models and the model set.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::descriptor::GlassoConfig;
use crate::error::{Result, TimecastError};
use crate::linalg::square_row_major;
use crate::moments::RunningMoments;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub instance_id: String,
    pub tick: usize,
    pub values: Vec<f64>,
}

/// One instance: observations at ticks `1..=n` and the tick of the event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSequence {
    pub instance_id: String,
    pub observations: Vec<Observation>,
    pub event_time: usize,
}

impl SensorSequence {
    /// Builds a sequence from row values; ticks are numbered from 1.
    /// `event_time` defaults to the last tick.
    pub fn from_rows(
        instance_id: impl Into<String>,
        rows: Vec<Vec<f64>>,
        event_time: Option<usize>,
    ) -> Result<Self> {
        let instance_id = instance_id.into();
        let observations = rows
            .into_iter()
            .enumerate()
            .map(|(i, values)| Observation {
                instance_id: instance_id.clone(),
                tick: i + 1,
                values,
            })
            .collect::<Vec<_>>();
        let n = observations.len();
        let seq = Self {
            instance_id,
            observations,
            event_time: event_time.unwrap_or(n),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.is_empty() {
            return Err(TimecastError::Argument(format!(
                "sequence `{}` has no observations",
                self.instance_id
            )));
        }
        let d = self.observations[0].values.len();
        for (i, obs) in self.observations.iter().enumerate() {
            if obs.tick != i + 1 {
                return Err(TimecastError::Data {
                    instance: self.instance_id.clone(),
                    row: i,
                    message: format!("expected tick {}, found {}", i + 1, obs.tick),
                });
            }
            if obs.values.len() != d {
                return Err(TimecastError::Dimension {
                    expected: d,
                    actual: obs.values.len(),
                });
            }
            if obs.values.iter().any(|v| !v.is_finite()) {
                return Err(TimecastError::Data {
                    instance: self.instance_id.clone(),
                    row: i,
                    message: "non-finite sensor value".into(),
                });
            }
        }
        if self.event_time < self.observations.len() {
            return Err(TimecastError::Argument(format!(
                "event time {} precedes last tick {} in `{}`",
                self.event_time,
                self.observations.len(),
                self.instance_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.observations.first().map_or(0, |o| o.values.len())
    }

    /// Remaining time `T_v - t` at 1-based tick `t`.
    pub fn label(&self, t: usize) -> Result<f64> {
        label_of(self, t)
    }
}

/// Remaining time until the event at tick `t`; defined for `1 <= t < T_v`.
pub fn label_of(seq: &SensorSequence, t: usize) -> Result<f64> {
    if t == 0 || t >= seq.event_time {
        return Err(TimecastError::TickOutOfRange {
            tick: t,
            event_time: seq.event_time,
        });
    }
    Ok((seq.event_time - t) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCollection {
    pub sequences: Vec<SensorSequence>,
    pub dimension: usize,
}

impl LabeledCollection {
    pub fn new(sequences: Vec<SensorSequence>) -> Result<Self> {
        let dimension = sequences.first().map_or(0, |s| s.dimension());
        for s in &sequences {
            s.validate()?;
            if s.dimension() != dimension {
                return Err(TimecastError::Dimension {
                    expected: dimension,
                    actual: s.dimension(),
                });
            }
        }
        Ok(Self {
            sequences,
            dimension,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_ticks(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn mean_length(&self) -> f64 {
        if self.sequences.is_empty() {
            return 0.0;
        }
        self.total_ticks() as f64 / self.sequences.len() as f64
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            dimension: self.dimension,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Off-diagonal l1 weight on each stage precision.
    pub alpha: f64,
    /// Weight of the predictor term in the joint objective.
    pub beta: f64,
    pub k_init: usize,
    /// Sliding-window width in ticks (1 disables windowing).
    pub window: usize,
    pub max_iter: usize,
    /// Relative objective change that counts as converged.
    pub tol: f64,
    /// Seed for initial cut-point jitter; `None` gives exact equal blocks.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_true")]
    pub prune_empty_stages: bool,
    #[serde(default)]
    pub glasso: GlassoConfig,
}

fn default_true() -> bool {
    true
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            k_init: 5,
            window: 1,
            max_iter: 50,
            tol: 1e-4,
            seed: None,
            prune_empty_stages: true,
            glasso: GlassoConfig::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TimecastError::Argument(m.to_string()));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if self.k_init == 0 {
            return bad("k_init must be >= 1");
        }
        if self.window == 0 {
            return bad("window must be >= 1");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be >= 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be > 0");
        }
        self.glasso.validate()
    }
}

/// Sufficient statistics kept per stage so models can be refreshed online.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    /// Moments of the descriptor features.
    pub descriptor: RunningMoments,
    /// Moments of `[x, tau, 1/tau]` over the (x, tau) training pairs.
    pub predictor: RunningMoments,
    /// Sum of `|1/tau - increment_mean|` over the pairs.
    pub abs_dev_sum: f64,
}

impl StageStats {
    pub fn empty(dim: usize) -> Self {
        Self {
            descriptor: RunningMoments::new(dim),
            predictor: RunningMoments::new(dim + 2),
            abs_dev_sum: 0.0,
        }
    }
}

/// One stage: Gaussian graphical descriptor plus Wiener first-hitting predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageModel {
    pub mean: Vec<f64>,
    #[serde(with = "square_row_major")]
    pub precision: DMatrix<f64>,
    /// Affine link weights; the last entry is the intercept.
    pub link_weights: Vec<f64>,
    pub diffusion: f64,
    /// Mean of `1/tau` over the stage's pairs.
    pub increment_mean: f64,
    pub count: u64,
    pub sum_stats: StageStats,
}

impl StageModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Raw (unclamped) affine link value.
    pub fn link(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = self.link_weights[d];
        for (w, v) in self.link_weights[..d].iter().zip(x) {
            acc += w * v;
        }
        acc
    }
}

/// Per-tick 0-based stage indices of one sequence, non-decreasing in time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct StageAssignmentPath {
    stages: Vec<usize>,
}

impl StageAssignmentPath {
    pub fn new(stages: Vec<usize>) -> Result<Self> {
        if let Some(w) = stages.windows(2).position(|w| w[0] > w[1]) {
            return Err(TimecastError::Argument(format!(
                "stage path decreases at tick {} ({} -> {})",
                w + 2,
                stages[w],
                stages[w + 1]
            )));
        }
        Ok(Self { stages })
    }

    pub fn from_one_based(stages: &[usize]) -> Result<Self> {
        if stages.contains(&0) {
            return Err(TimecastError::Argument("1-based stage index 0".into()));
        }
        Self::new(stages.iter().map(|s| s - 1).collect())
    }

    pub fn stages(&self) -> &[usize] {
        &self.stages
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s + 1).collect()
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn last(&self) -> Option<usize> {
        self.stages.last().copied()
    }

    /// Applies an index remap (e.g. after pruning). The map must be monotone.
    pub fn remap(&self, map: &[usize]) -> Result<Self> {
        Self::new(self.stages.iter().map(|&s| map[s]).collect())
    }
}

impl TryFrom<Vec<usize>> for StageAssignmentPath {
    type Error = TimecastError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::from_one_based(&v)
    }
}

impl From<StageAssignmentPath> for Vec<usize> {
    fn from(p: StageAssignmentPath) -> Self {
        p.to_one_based()
    }
}

/// Preprocessing applied before features reach the stage models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Raw sensor dimension `d`.
    pub sensors: usize,
    pub window: usize,
    pub znormalize: bool,
}

impl FeatureConfig {
    pub fn feature_dim(&self) -> usize {
        self.sensors * self.window
    }
}

/// Ordered stage models; order is the progression order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub stages: Vec<StageModel>,
    pub hyper: HyperParams,
    pub features: FeatureConfig,
}

#[derive(Serialize, Deserialize)]
struct ModelSetDocument {
    schema_version: u32,
    #[serde(flatten)]
    model: ModelSet,
}

impl ModelSet {
    pub fn k(&self) -> usize {
        self.stages.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.first().map_or(self.features.feature_dim(), |s| s.dim())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelSetDocument {
            schema_version: SCHEMA_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelSetDocument = serde_json::from_str(text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(TimecastError::Argument(format!(
                "unsupported model schema_version {}",
                doc.schema_version
            )));
        }
        if doc.model.stages.is_empty() {
            return Err(TimecastError::Argument("model set has no stages".into()));
        }
        Ok(doc.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize) -> SensorSequence {
        SensorSequence::from_rows("a", vec![vec![0.0]; t], None).unwrap()
    }

    #[test]
    fn label_examples() {
        assert_eq!(label_of(&seq(227), 135).unwrap(), 92.0);
        assert_eq!(label_of(&seq(10), 9).unwrap(), 1.0);
        assert!(matches!(
            label_of(&seq(10), 10),
            Err(TimecastError::TickOutOfRange { .. })
        ));
        assert!(label_of(&seq(10), 0).is_err());
    }

    #[test]
    fn path_must_be_monotone() {
        assert!(StageAssignmentPath::new(vec![0, 0, 1, 2, 2]).is_ok());
        assert!(StageAssignmentPath::new(vec![0, 1, 0]).is_err());
        let p = StageAssignmentPath::from_one_based(&[1, 2, 2]).unwrap();
        assert_eq!(p.stages(), &[0, 1, 1]);
        assert_eq!(p.to_one_based(), vec![1, 2, 2]);
    }

    #[test]
    fn path_json_is_one_based_and_checked() {
        let p = StageAssignmentPath::new(vec![0, 0, 2]).unwrap();
        assert_eq!(serde_json::to_string(&p).unwrap(), "[1,1,3]");
        assert!(serde_json::from_str::<StageAssignmentPath>("[2,1]").is_err());
    }

    #[test]
    fn sequence_rejects_nan_and_bad_event_time() {
        assert!(SensorSequence::from_rows("x", vec![vec![f64::NAN]], None).is_err());
        assert!(SensorSequence::from_rows("x", vec![vec![1.0]; 5], Some(3)).is_err());
    }

    #[test]
    fn hyper_validation() {
        assert!(HyperParams::default().validate().is_ok());
        let h = HyperParams {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(h.validate().is_err());
        let h = HyperParams {
            k_init: 0,
            ..Default::default()
        };
        assert!(h.validate().is_err());
    }
}
