//! Accuracy metrics on remaining-time predictions, Brier scores on the
//! predicted survival curves, and the k-fold evaluation driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TimecastError};
use crate::exec::Exec;
use crate::predictor::{survival, FirstHittingParams};
use crate::segmentation::learn_with;
use crate::streaming::{model_features, replay, StreamingModel};
use crate::types::{HyperParams, LabeledCollection, ModelSet, SCHEMA_VERSION};

fn check_pairs(pred: &[(f64, f64)]) -> Result<()> {
    if pred.is_empty() {
        return Err(TimecastError::Argument("no prediction pairs".into()));
    }
    if let Some((_, tau)) = pred.iter().find(|(_, tau)| !(*tau > 0.0)) {
        return Err(TimecastError::Argument(format!("true remaining time must be > 0, got {tau}")));
    }
    Ok(())
}

/// Mean absolute percentage error over `(predicted, actual)` pairs.
pub fn mape(pred: &[(f64, f64)]) -> Result<f64> {
    check_pairs(pred)?;
    let s: f64 = pred.iter().map(|(p, t)| (p - t).abs() / t).sum();
    Ok(s / pred.len() as f64)
}

/// Root mean squared percentage error.
pub fn rmspe(pred: &[(f64, f64)]) -> Result<f64> {
    check_pairs(pred)?;
    let s: f64 = pred.iter().map(|(p, t)| ((p - t) / t).powi(2)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// `(1[T > t + tau] - S(tau))^2` for a prediction made at tick `t`.
pub fn brier<S: Fn(f64) -> f64>(survival_fn: S, event_time: usize, t: usize, tau: usize) -> f64 {
    let survived = if event_time > t + tau { 1.0 } else { 0.0 };
    (survived - survival_fn(tau as f64)).powi(2)
}

/// Survival predictions for one instance: entry `i` is the curve predicted
/// at tick `i + 1`.
#[derive(Debug, Clone)]
pub struct SurvivalTrace<S> {
    pub event_time: usize,
    pub curves: Vec<S>,
}

/// Integrated Brier score over horizons `1..=horizon`. Each instance averages
/// over its ticks and horizons, then instances are averaged.
pub fn ibs<S: Fn(f64) -> f64>(traces: &[SurvivalTrace<S>], horizon: usize) -> Result<f64> {
    if horizon < 1 {
        return Err(TimecastError::Argument("IBS horizon must be at least 1".into()));
    }
    let mut total = 0.0;
    let mut instances = 0usize;
    for tr in traces {
        if tr.curves.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for (i, s) in tr.curves.iter().enumerate() {
            for tau in 1..=horizon {
                acc += brier(s, tr.event_time, i + 1, tau);
            }
        }
        total += acc / (tr.curves.len() * horizon) as f64;
        instances += 1;
    }
    if instances == 0 {
        return Err(TimecastError::Argument("no predictions to score".into()));
    }
    Ok(total / instances as f64)
}

/// Instance indices for one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Instance-level k-fold splits; 10% of each training part is held out for
/// validation.
pub fn kfold_protocol(n_instances: usize, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(TimecastError::Argument("need at least 2 folds".into()));
    }
    if n_instances < folds {
        return Err(TimecastError::Argument(format!(
            "{n_instances} instances cannot fill {folds} folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_instances).collect();
    order.shuffle(&mut rng);
    let mut bounds = vec![0];
    for f in 0..folds {
        let size = n_instances / folds + usize::from(f < n_instances % folds);
        bounds.push(bounds[f] + size);
    }
    Ok((0..folds)
        .map(|f| {
            let mut test = order[bounds[f]..bounds[f + 1]].to_vec();
            let mut rest: Vec<usize> = order[..bounds[f]]
                .iter()
                .chain(&order[bounds[f + 1]..])
                .copied()
                .collect();
            let n_val = (rest.len() as f64 * 0.1).round() as usize;
            let mut validation = rest.split_off(rest.len() - n_val);
            test.sort_unstable();
            rest.sort_unstable();
            validation.sort_unstable();
            FoldSplit {
                train: rest,
                validation,
                test,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub mape: f64,
    pub rmspe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub fold_id: usize,
    pub mape: f64,
    pub rmspe: f64,
    pub ibs: Option<f64>,
    pub ibs_horizon: Option<usize>,
    pub ticks: usize,
    /// Ticks whose link value was clamped to the floor (still scored).
    pub clamped_ticks: usize,
    pub per_instance: BTreeMap<String, InstanceMetrics>,
}

/// Median event time, rounded up to a whole tick.
pub fn median_event_time(collection: &LabeledCollection) -> usize {
    let mut t: Vec<usize> = collection.sequences.iter().map(|s| s.event_time).collect();
    if t.is_empty() {
        return 1;
    }
    t.sort_unstable();
    let n = t.len();
    let m = if n % 2 == 1 {
        t[n / 2] as f64
    } else {
        (t[n / 2 - 1] + t[n / 2]) as f64 / 2.0
    };
    (m.ceil() as usize).max(1)
}

/// Replays every sequence as a stream and scores the per-tick predictions
/// made before the event. `ibs_horizon = None` skips the Brier score.
pub fn evaluate_models(
    models: &ModelSet,
    collection: &LabeledCollection,
    ibs_horizon: Option<usize>,
    fold_id: usize,
    exec: Exec,
) -> Result<MetricReport> {
    let model = StreamingModel::new(models.clone())?;
    let per_seq = exec.map(&collection.sequences, |s| {
        let feats = model_features(models, s);
        replay(&model, &feats).map(|p| (s.event_time, p))
    });
    let mut all = Vec::new();
    let mut per_instance = BTreeMap::new();
    let mut traces = Vec::new();
    let mut clamped = 0;
    for (seq, r) in collection.sequences.iter().zip(per_seq) {
        let (event, preds) = r?;
        let mut pairs = Vec::new();
        let mut params: Vec<FirstHittingParams> = Vec::new();
        for p in preds.iter().filter(|p| p.tick < event) {
            pairs.push((p.point_estimate, (event - p.tick) as f64));
            params.push(p.params);
            clamped += usize::from(p.clamped);
        }
        if pairs.is_empty() {
            continue;
        }
        per_instance.insert(
            seq.instance_id.clone(),
            InstanceMetrics {
                mape: mape(&pairs)?,
                rmspe: rmspe(&pairs)?,
            },
        );
        all.extend(pairs);
        traces.push((event, params));
    }
    let ibs_value = match ibs_horizon {
        Some(h) => {
            let traces: Vec<SurvivalTrace<_>> = traces
                .iter()
                .map(|(event, params)| SurvivalTrace {
                    event_time: *event,
                    curves: params
                        .iter()
                        .map(|p| move |tau: f64| survival(p, tau).unwrap_or(0.0))
                        .collect(),
                })
                .collect();
            Some(ibs(&traces, h)?)
        }
        None => None,
    };
    Ok(MetricReport {
        schema_version: SCHEMA_VERSION,
        fold_id,
        mape: mape(&all)?,
        rmspe: rmspe(&all)?,
        ibs: ibs_value,
        ibs_horizon,
        ticks: all.len(),
        clamped_ticks: clamped,
        per_instance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub schema_version: u32,
    pub folds: Vec<MetricReport>,
    pub mean_mape: f64,
    pub mean_rmspe: f64,
    pub mean_ibs: Option<f64>,
}

/// Trains on each fold's training part (validation instances excluded) and
/// scores the test part.
pub fn cross_validate(
    collection: &LabeledCollection,
    hyper: &HyperParams,
    folds: usize,
    seed: u64,
    ibs_horizon: Option<usize>,
    exec: Exec,
) -> Result<CrossValidationReport> {
    let splits = kfold_protocol(collection.len(), folds, seed)?;
    let mut reports = Vec::with_capacity(folds);
    for (f, split) in splits.iter().enumerate() {
        let train = collection.subset(&split.train);
        let test = collection.subset(&split.test);
        let fit = learn_with(&train, hyper, exec)?;
        reports.push(evaluate_models(&fit.models, &test, ibs_horizon, f + 1, exec)?);
    }
    let n = reports.len() as f64;
    let mean_ibs = ibs_horizon.map(|_| reports.iter().filter_map(|r| r.ibs).sum::<f64>() / n);
    Ok(CrossValidationReport {
        schema_version: SCHEMA_VERSION,
        mean_mape: reports.iter().map(|r| r.mape).sum::<f64>() / n,
        mean_rmspe: reports.iter().map(|r| r.rmspe).sum::<f64>() / n,
        mean_ibs,
        folds: reports,
    })
}

impl CrossValidationReport {
    /// Aligned text table, one row per fold plus the mean.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:>10} {:>10} {:>10} {:>8} {:>8}",
            "fold", "mape", "rmspe", "ibs", "ticks", "clamped"
        );
        let fmt_ibs = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.5}"));
        for r in &self.folds {
            let _ = writeln!(
                out,
                "{:<6} {:>10.5} {:>10.5} {:>10} {:>8} {:>8}",
                r.fold_id,
                r.mape,
                r.rmspe,
                fmt_ibs(r.ibs),
                r.ticks,
                r.clamped_ticks
            );
        }
        let _ = writeln!(
            out,
            "{:<6} {:>10.5} {:>10.5} {:>10} {:>8} {:>8}",
            "mean",
            self.mean_mape,
            self.mean_rmspe,
            fmt_ibs(self.mean_ibs),
            "",
            ""
        );
        out
    }
}
