//! Per-tick stage tracking and prediction for live streams, and
//! generate-and-validate model growth once a stream reaches its event.
//!
//! The streaming stage uses descriptor likelihoods only:
//! `G(k, t) = max_{k' <= k} G(k', t - 1) + psi_d(x_t | k)`, so a tick costs
//! O(K) cost evaluations and O(K) comparisons regardless of stream length.

use serde::{Deserialize, Serialize};

use crate::descriptor::{fit_precision_detailed, EmpiricalStats};
use crate::error::{Result, TimecastError};
use crate::evaluation::mape;
use crate::ingest::{windowize, znormalize, FeatureSequence, Windower};
use crate::moments::RunningMoments;
use crate::predictor::{
    constant_link, diffusion_from_abs_dev, link_from_moments, predicted_time, sample_curves,
    FirstHittingParams,
};
use crate::segmentation::{argmax_low, assign_features, evaluators, StageEvaluator};
use crate::types::{HyperParams, ModelSet, SensorSequence, StageModel, StageStats, SCHEMA_VERSION};

/// Running DP state of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    /// `G(k, t)` for the last processed tick.
    pub gamma: Vec<f64>,
    /// 0-based argmax of `gamma`, lowest index on ties.
    pub current_stage: usize,
    /// Ticks processed so far.
    pub tick: usize,
    /// Raw observations kept for the end-of-stream update.
    pub history: Vec<Vec<f64>>,
    /// Optional cap on `history`; the oldest rows are dropped beyond it.
    pub history_cap: Option<usize>,
    /// Operations spent on the last tick (cost evaluations plus comparisons).
    pub last_ops: u64,
}

impl StreamState {
    pub fn new(k: usize) -> Self {
        Self {
            gamma: vec![f64::NEG_INFINITY; k],
            current_stage: 0,
            tick: 0,
            history: Vec::new(),
            history_cap: None,
            last_ops: 0,
        }
    }

    pub fn with_history_cap(mut self, cap: Option<usize>) -> Self {
        self.history_cap = cap;
        self
    }

    /// Makes room for a stage inserted at 0-based `at`. The new entry starts
    /// unreachable and the current stage keeps pointing at the same model.
    pub fn insert_stage(&mut self, at: usize) {
        let at = at.min(self.gamma.len());
        self.gamma.insert(at, f64::NEG_INFINITY);
        if self.tick > 0 && self.current_stage >= at {
            self.current_stage += 1;
        }
    }

    fn remember(&mut self, raw: &[f64]) {
        self.history.push(raw.to_vec());
        if let Some(cap) = self.history_cap {
            if self.history.len() > cap {
                let drop = self.history.len() - cap;
                self.history.drain(..drop);
            }
        }
    }

    /// Drains the history into a finished sequence with the given event tick.
    pub fn finish(&mut self, instance_id: &str, event_time: Option<usize>) -> Result<SensorSequence> {
        let rows = std::mem::take(&mut self.history);
        SensorSequence::from_rows(instance_id, rows, event_time)
    }
}

/// A model snapshot with per-stage evaluators ready for streaming.
#[derive(Debug, Clone)]
pub struct StreamingModel {
    pub models: ModelSet,
    evals: Vec<StageEvaluator>,
}

impl StreamingModel {
    pub fn new(models: ModelSet) -> Result<Self> {
        let evals = evaluators(&models)?;
        Ok(Self { models, evals })
    }

    pub fn k(&self) -> usize {
        self.evals.len()
    }

    pub fn evaluators(&self) -> &[StageEvaluator] {
        &self.evals
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: f64,
    pub density: f64,
    pub survival: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutput {
    pub tick: usize,
    /// 1-based stage.
    pub stage: usize,
    pub params: FirstHittingParams,
    pub point_estimate: f64,
    /// The link value fell below the floor and was clamped.
    pub clamped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival_curve: Option<Vec<CurvePoint>>,
}

/// Advances `state` by one feature vector and predicts from the current stage.
pub fn adaptive_predict(state: &mut StreamState, x: &[f64], model: &StreamingModel) -> Result<PredictionOutput> {
    let k = model.k();
    if x.len() != model.models.feature_dim() {
        return Err(TimecastError::Dimension {
            expected: model.models.feature_dim(),
            actual: x.len(),
        });
    }
    if state.gamma.len() != k {
        return Err(TimecastError::Argument(format!(
            "stream state tracks {} stages but the model has {k}",
            state.gamma.len()
        )));
    }
    let evals = model.evaluators();
    let mut ops = 0u64;
    if state.tick == 0 {
        for (g, e) in state.gamma.iter_mut().zip(evals) {
            *g = e.descriptor(x);
            ops += 1;
        }
    } else {
        let mut best = f64::NEG_INFINITY;
        for (g, e) in state.gamma.iter_mut().zip(evals) {
            if *g > best {
                best = *g;
            }
            *g = best + e.descriptor(x);
            ops += 2;
        }
    }
    let (stage, _) = argmax_low(&state.gamma);
    ops += k as u64;
    state.current_stage = stage;
    state.tick += 1;
    state.last_ops = ops;

    let f = evals[stage].link_value(x);
    let (params, clamped) = FirstHittingParams::from_link(f, evals_diffusion(&model.models, stage));
    Ok(PredictionOutput {
        tick: state.tick,
        stage: stage + 1,
        params,
        point_estimate: predicted_time(&params),
        clamped,
        survival_curve: None,
    })
}

fn evals_diffusion(models: &ModelSet, stage: usize) -> f64 {
    models.stages[stage].diffusion
}

impl PredictionOutput {
    /// Attaches density and survival sampled at `tau = 1..=horizon`.
    pub fn with_curve(mut self, horizon: usize) -> Self {
        let taus: Vec<f64> = (1..=horizon).map(|t| t as f64).collect();
        self.survival_curve = Some(
            sample_curves(&self.params, &taus)
                .into_iter()
                .map(|(tau, density, survival)| CurvePoint { tau, density, survival })
                .collect(),
        );
        self
    }
}

/// Windowing plus state for one live stream.
#[derive(Debug, Clone)]
pub struct StreamSession {
    pub instance_id: String,
    pub state: StreamState,
    windower: Windower,
}

impl StreamSession {
    pub fn new(instance_id: impl Into<String>, models: &ModelSet) -> Self {
        Self {
            instance_id: instance_id.into(),
            state: StreamState::new(models.k()),
            windower: Windower::new(models.features.sensors, models.features.window),
        }
    }

    /// Feeds one raw sensor row.
    pub fn push(&mut self, raw: &[f64], model: &StreamingModel) -> Result<PredictionOutput> {
        if raw.len() != model.models.features.sensors {
            return Err(TimecastError::Dimension {
                expected: model.models.features.sensors,
                actual: raw.len(),
            });
        }
        let x = self.windower.push(raw);
        self.state.remember(raw);
        adaptive_predict(&mut self.state, &x, model)
    }
}

/// Adds one observation to a stage's running descriptor moments and mean.
/// The precision is left untouched until the next refit.
pub fn welford_update(stage: &StageModel, x: &[f64]) -> Result<StageModel> {
    if x.len() != stage.dim() {
        return Err(TimecastError::Dimension {
            expected: stage.dim(),
            actual: x.len(),
        });
    }
    let mut out = stage.clone();
    out.sum_stats.descriptor.push(x);
    out.count += 1;
    out.mean = out.sum_stats.descriptor.mean.clone();
    Ok(out)
}

/// Feature sequence the model would see for `seq` (z-normalised when the
/// model was trained that way).
pub fn model_features(models: &ModelSet, seq: &SensorSequence) -> FeatureSequence {
    if models.features.znormalize {
        windowize(&znormalize(seq).0, models.features.window)
    } else {
        windowize(seq, models.features.window)
    }
}

/// Streaming stage and point estimate at every tick of a whole sequence.
pub fn replay(model: &StreamingModel, feats: &FeatureSequence) -> Result<Vec<PredictionOutput>> {
    let mut state = StreamState::new(model.k());
    (0..feats.len())
        .map(|t| adaptive_predict(&mut state, feats.row(t), model))
        .collect()
}

/// Where a grown stage goes in the progression order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertPosition {
    #[default]
    AfterWorst,
    Append,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineOptions {
    pub insert: InsertPosition,
    pub max_refresh_iter: usize,
}

impl Default for OnlineOptions {
    fn default() -> Self {
        Self {
            insert: InsertPosition::AfterWorst,
            max_refresh_iter: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub schema_version: u32,
    pub instance_id: String,
    pub accepted: bool,
    pub reason: String,
    /// 1-based.
    pub worst_stage: Option<usize>,
    /// 1-based position of the candidate in the grown model.
    pub inserted_at: Option<usize>,
    pub candidate_points: usize,
    pub mape_before: Option<f64>,
    pub mape_after: Option<f64>,
    pub refresh_iterations: usize,
    pub k_before: usize,
    pub k_after: usize,
}

/// Streaming stage and `(prediction, truth)` at every tick.
fn streaming_trace(model: &StreamingModel, feats: &FeatureSequence) -> Result<Vec<(usize, Option<(f64, f64)>)>> {
    Ok(replay(model, feats)?
        .iter()
        .enumerate()
        .map(|(t, p)| (p.stage - 1, feats.label(t).map(|tau| (p.point_estimate, tau))))
        .collect())
}

/// MAPE over the labelled ticks selected by `keep`.
fn masked_mape(trace: &[(usize, Option<(f64, f64)>)], keep: impl Fn(usize, usize) -> bool) -> Result<Option<f64>> {
    let pairs: Vec<(f64, f64)> = trace
        .iter()
        .enumerate()
        .filter(|(t, (s, _))| keep(*t, *s))
        .filter_map(|(_, (_, p))| *p)
        .collect();
    if pairs.is_empty() {
        Ok(None)
    } else {
        mape(&pairs).map(Some)
    }
}

/// Ticks used to build and refresh the candidate; the others validate it.
fn is_fit_tick(t: usize) -> bool {
    t % 2 == 0
}

/// Stage parameters from accumulated moments. `jitter` is added to the
/// covariance diagonal before the precision fit.
fn stage_from_stats(
    stats: StageStats,
    count: u64,
    hyper: &HyperParams,
    jitter: f64,
    fallback: &StageModel,
) -> Result<StageModel> {
    let d = stats.descriptor.dim();
    let mut emp = EmpiricalStats::from_moments(&stats.descriptor)?;
    for i in 0..d {
        emp.covariance[(i, i)] += jitter;
    }
    let precision = fit_precision_detailed(&emp, 2.0 * hyper.alpha, &hyper.glasso)
        .map(|f| f.precision)
        .unwrap_or_else(|_| fallback.precision.clone());
    let n = stats.predictor.count;
    let (link_weights, increment_mean, diffusion) = if n == 0 {
        (fallback.link_weights.clone(), fallback.increment_mean, fallback.diffusion)
    } else {
        let link = if n as usize >= d + 2 {
            link_from_moments(&stats.predictor).weights
        } else {
            constant_link(d, stats.predictor.mean[d])
        };
        (
            link,
            stats.predictor.mean[d + 1],
            diffusion_from_abs_dev(stats.abs_dev_sum, n),
        )
    };
    Ok(StageModel {
        mean: emp.mean,
        precision,
        link_weights,
        diffusion,
        increment_mean,
        count,
        sum_stats: stats,
    })
}

/// Moments of the given ticks: descriptor features, `[x, tau, 1/tau]`, and
/// the `1/tau` values.
fn tick_moments(feats: &FeatureSequence, ticks: &[usize]) -> (RunningMoments, RunningMoments, Vec<f64>) {
    let d = feats.dim;
    let mut desc = RunningMoments::new(d);
    let mut pred = RunningMoments::new(d + 2);
    let mut inv = Vec::new();
    let mut z = vec![0.0; d + 2];
    for &t in ticks {
        let x = feats.row(t);
        desc.push(x);
        if let Some(tau) = feats.label(t) {
            z[..d].copy_from_slice(x);
            z[d] = tau;
            z[d + 1] = 1.0 / tau;
            pred.push(&z);
            inv.push(1.0 / tau);
        }
    }
    (desc, pred, inv)
}

fn abs_dev(inv: &[f64], center: f64) -> f64 {
    inv.iter().map(|v| (v - center).abs()).sum()
}

/// Generate-and-validate growth on one finished stream.
///
/// Ticks are split alternately into a fitting half and a validation half.
/// The worst stage is picked by its MAPE on fitting ticks; the candidate
/// starts from the fitting ticks that stage handled, is inserted into the
/// progression, and the grown model is refreshed on the fitting ticks
/// (existing stages merge their training moments with the new points). The
/// grown model is adopted only if its streaming MAPE on the validation ticks
/// is strictly lower.
pub fn online_model_update(
    models: &ModelSet,
    finished: &SensorSequence,
    hyper: &HyperParams,
    opts: &OnlineOptions,
) -> Result<(ModelSet, UpdateReport)> {
    let k = models.k();
    let mut report = UpdateReport {
        schema_version: SCHEMA_VERSION,
        instance_id: finished.instance_id.clone(),
        accepted: false,
        reason: String::new(),
        worst_stage: None,
        inserted_at: None,
        candidate_points: 0,
        mape_before: None,
        mape_after: None,
        refresh_iterations: 0,
        k_before: k,
        k_after: k,
    };
    if finished.dimension() != models.features.sensors {
        return Err(TimecastError::Dimension {
            expected: models.features.sensors,
            actual: finished.dimension(),
        });
    }
    if finished.len() < 2 || finished.event_time < 2 {
        report.reason = "stream shorter than 2 ticks".into();
        return Ok((models.clone(), report));
    }
    let feats = model_features(models, finished);
    let base = StreamingModel::new(models.clone())?;
    let trace = streaming_trace(&base, &feats)?;
    let Some(before) = masked_mape(&trace, |t, _| !is_fit_tick(t))? else {
        report.reason = "stream too short to hold out validation ticks".into();
        return Ok((models.clone(), report));
    };
    report.mape_before = Some(before);
    let per_stage = (0..k)
        .map(|s| masked_mape(&trace, |t, st| st == s && is_fit_tick(t)))
        .collect::<Result<Vec<_>>>()?;

    let worst = per_stage
        .iter()
        .enumerate()
        .filter_map(|(s, m)| m.map(|m| (s, m)))
        .fold(None, |acc: Option<(usize, f64)>, (s, m)| match acc {
            Some((_, best)) if best >= m => acc,
            _ => Some((s, m)),
        })
        .map(|(s, _)| s)
        .ok_or_else(|| TimecastError::Argument("stream has no labelled fitting ticks".into()))?;
    report.worst_stage = Some(worst + 1);

    let ticks: Vec<usize> = (0..feats.len()).filter(|&t| trace[t].0 == worst && is_fit_tick(t)).collect();
    report.candidate_points = ticks.len();
    if ticks.len() < 2 {
        report.reason = "worst stage has fewer than 2 points".into();
        return Ok((models.clone(), report));
    }

    // candidate from the worst stage's ticks, diagonal jitter breaks the tie
    // with the stage it was cut from
    let (desc, pred, inv) = tick_moments(&feats, &ticks);
    let d = feats.dim;
    let trace: f64 = desc.covariance().diagonal().sum();
    let jitter = 1e-2 * trace / d as f64;
    let center = if pred.count > 0 { pred.mean[d + 1] } else { 0.0 };
    let seed_stats = StageStats {
        abs_dev_sum: abs_dev(&inv, center),
        descriptor: desc,
        predictor: pred,
    };
    let candidate = stage_from_stats(seed_stats, ticks.len() as u64, hyper, jitter, &models.stages[worst])?;
    let at = match opts.insert {
        InsertPosition::AfterWorst => worst + 1,
        InsertPosition::Append => k,
    };
    let mut grown = models.clone();
    grown.stages.insert(at, candidate);
    report.inserted_at = Some(at + 1);

    // refresh: batch assignment on the stream, then moments merged per stage
    let mut prev_paths = None;
    for _ in 0..opts.max_refresh_iter.max(1) {
        report.refresh_iterations += 1;
        let evals = evaluators(&grown)?;
        let (_, path) = assign_features(&feats, &evals, hyper.beta);
        if prev_paths.as_ref() == Some(&path) {
            break;
        }
        let mut next = Vec::with_capacity(grown.k());
        for s in 0..grown.k() {
            let mine: Vec<usize> = (0..feats.len())
                .filter(|&t| path.stages()[t] == s && is_fit_tick(t))
                .collect();
            let old_index = if s == at { None } else { Some(if s > at { s - 1 } else { s }) };
            match old_index {
                None => {
                    if mine.is_empty() {
                        report.reason = "candidate stage received no points".into();
                        report.mape_after = None;
                        return Ok((models.clone(), report));
                    }
                    let (desc, pred, inv) = tick_moments(&feats, &mine);
                    let center = if pred.count > 0 { pred.mean[d + 1] } else { 0.0 };
                    let stats = StageStats {
                        abs_dev_sum: abs_dev(&inv, center),
                        descriptor: desc,
                        predictor: pred,
                    };
                    next.push(stage_from_stats(stats, mine.len() as u64, hyper, 0.0, &grown.stages[s])?);
                }
                Some(o) => {
                    let original = &models.stages[o];
                    if mine.is_empty() || original.sum_stats.descriptor.count == 0 {
                        next.push(original.clone());
                        continue;
                    }
                    let (desc, pred, inv) = tick_moments(&feats, &mine);
                    let mut stats = original.sum_stats.clone();
                    stats.descriptor.merge(&desc);
                    stats.predictor.merge(&pred);
                    let center = if stats.predictor.count > 0 {
                        stats.predictor.mean[d + 1]
                    } else {
                        original.increment_mean
                    };
                    // training deviations stay around the old centre; an
                    // approximation that avoids keeping training points
                    stats.abs_dev_sum += abs_dev(&inv, center);
                    let count = original.count + mine.len() as u64;
                    next.push(stage_from_stats(stats, count, hyper, 0.0, original)?);
                }
            }
        }
        grown.stages = next;
        prev_paths = Some(path);
    }

    let grown_model = StreamingModel::new(grown.clone())?;
    let after = masked_mape(&streaming_trace(&grown_model, &feats)?, |t, _| !is_fit_tick(t))?
        .expect("validation ticks were checked above");
    report.mape_after = Some(after);
    if after < before {
        report.accepted = true;
        report.k_after = grown.k();
        report.reason = "candidate improved streaming MAPE".into();
        Ok((grown, report))
    } else {
        report.reason = "candidate did not improve streaming MAPE".into();
        Ok((models.clone(), report))
    }
}
