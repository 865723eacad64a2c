use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use timecast::evaluation::{cross_validate, evaluate_models, median_event_time, CrossValidationReport};
use timecast::ingest::{load_collection, write_atomic, write_collection, DatasetSpec};
use timecast::segmentation::learn_with;
use timecast::synthetic::{generate_synthetic, SyntheticSpec};
use timecast::{Exec, HyperParams, LabeledCollection, ModelSet, TimecastError, SCHEMA_VERSION};

use crate::{DataArgs, EvaluateArgs, SynthArgs, TrainArgs};

/// `dir/name.ext` -> `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load(args: &DataArgs, znormalize: bool) -> Result<LabeledCollection> {
    let mut spec = DatasetSpec::new(&args.data);
    spec.sensor_columns = args.sensors.clone();
    spec.instance_column = args.instance_column.clone();
    spec.tick_column = args.tick_column.clone();
    spec.event_time_column = args.event_column.clone();
    spec.znormalize = znormalize;
    load_collection(&spec).with_context(|| format!("loading {}", args.data.display()))
}

fn window(arg: &str, data: &LabeledCollection) -> Result<usize> {
    if arg == "auto" {
        return Ok(((0.1 * data.mean_length()).round() as usize).max(1));
    }
    match arg.parse::<usize>() {
        Ok(w) if w > 0 => Ok(w),
        _ => Err(TimecastError::Argument(format!("--window must be a positive integer or `auto`, got `{arg}`")).into()),
    }
}

pub fn train(a: TrainArgs, exec: Exec) -> Result<()> {
    let data = load(&a.data, a.znormalize)?;
    let hyper = HyperParams {
        alpha: a.alpha,
        beta: a.beta,
        k_init: a.k,
        window: window(&a.window, &data)?,
        max_iter: a.max_iter,
        tol: a.tol,
        seed: a.seed,
        prune_empty_stages: a.prune_empty_stages,
        ..Default::default()
    };
    log::info!(
        "training on {} instances, {} ticks, window {}",
        data.len(),
        data.total_ticks(),
        hyper.window
    );
    let mut out = learn_with(&data, &hyper, exec)?;
    out.models.features.znormalize = a.znormalize;
    let r = &out.report;
    log::info!(
        "K={} after {} iterations (converged: {}), objective {:.6}",
        r.final_k,
        r.iterations,
        r.converged,
        r.objective_trace.last().copied().unwrap_or(f64::NAN)
    );
    write_atomic(&a.out, out.models.to_json()?.as_bytes())
        .with_context(|| format!("writing {}", a.out.display()))?;
    let report = a.report.unwrap_or_else(|| sibling(&a.out, "report.json"));
    write_json(&report, &out.report)?;
    Ok(())
}

pub fn evaluate(a: EvaluateArgs, exec: Exec) -> Result<()> {
    let text = std::fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let models = ModelSet::from_json(&text)?;
    let report = if a.folds >= 2 {
        // folds retrain on already-normalised data
        let data = load(&a.data, models.features.znormalize)?;
        let horizon = a.ibs_horizon.unwrap_or_else(|| median_event_time(&data));
        cross_validate(&data, &models.hyper, a.folds, a.seed, Some(horizon), exec)?
    } else {
        let data = load(&a.data, false)?;
        let horizon = a.ibs_horizon.unwrap_or_else(|| median_event_time(&data));
        let r = evaluate_models(&models, &data, Some(horizon), 1, exec)?;
        CrossValidationReport {
            schema_version: SCHEMA_VERSION,
            mean_mape: r.mape,
            mean_rmspe: r.rmspe,
            mean_ibs: r.ibs,
            folds: vec![r],
        }
    };
    write_json(&a.out, &report)?;
    print!("{}", report.table());
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let spec: SyntheticSpec = serde_json::from_str(&text).map_err(TimecastError::from)?;
    let (data, truth) = generate_synthetic(&spec)?;
    let mut buf = Vec::new();
    write_collection(&data, &mut buf)?;
    write_atomic(&a.out, &buf).with_context(|| format!("writing {}", a.out.display()))?;
    write_json(&a.truth, &truth)?;
    log::info!("wrote {} instances, {} ticks", data.len(), data.total_ticks());
    Ok(())
}
