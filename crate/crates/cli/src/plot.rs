use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};

use anyhow::{Context, Result};
use serde::Serialize;
use timecast::predictor::sample_curves;
use timecast::streaming::CurvePoint;
use timecast::{TimecastError, SCHEMA_VERSION};

use crate::commands::write_json;
use crate::replay::PredictionLine;
use crate::PlotArgs;

#[derive(Debug, Serialize)]
pub struct Snapshot {
    pub tick: usize,
    pub stage: usize,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Default, Serialize)]
pub struct InstanceCurves {
    pub ticks: Vec<usize>,
    pub stages: Vec<usize>,
    pub point_estimates: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Serialize)]
pub struct PlotData {
    pub schema_version: u32,
    pub horizon: usize,
    pub instances: BTreeMap<String, InstanceCurves>,
}

pub fn build(lines: &[PredictionLine], horizon: usize, every: usize) -> PlotData {
    let every = every.max(1);
    let taus: Vec<f64> = (1..=horizon).map(|t| t as f64).collect();
    let mut instances: BTreeMap<String, InstanceCurves> = BTreeMap::new();
    for l in lines {
        let p = &l.prediction;
        let c = instances.entry(l.instance_id.clone()).or_default();
        c.ticks.push(p.tick);
        c.stages.push(p.stage);
        c.point_estimates.push(p.point_estimate);
        if (p.tick - 1) % every == 0 {
            let curve = sample_curves(&p.params, &taus)
                .into_iter()
                .map(|(tau, density, survival)| CurvePoint { tau, density, survival })
                .collect();
            c.snapshots.push(Snapshot {
                tick: p.tick,
                stage: p.stage,
                curve,
            });
        }
    }
    PlotData {
        schema_version: SCHEMA_VERSION,
        horizon,
        instances,
    }
}

pub fn plot_data(a: PlotArgs) -> Result<()> {
    if a.horizon == 0 {
        return Err(TimecastError::Argument("--horizon must be positive".into()).into());
    }
    let file = File::open(&a.preds).with_context(|| format!("opening {}", a.preds.display()))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(TimecastError::from)?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(serde_json::from_str::<PredictionLine>(&line).map_err(|e| TimecastError::Data {
            instance: String::new(),
            row: i + 1,
            message: e.to_string(),
        })?);
    }
    write_json(&a.out, &build(&lines, a.horizon, a.every))
}

#[cfg(test)]
mod tests {
    use super::*;
    use timecast::predictor::FirstHittingParams;
    use timecast::streaming::PredictionOutput;

    fn line(id: &str, tick: usize) -> PredictionLine {
        let params = FirstHittingParams::new(10.0, 5.0).unwrap();
        PredictionLine {
            schema_version: SCHEMA_VERSION,
            instance_id: id.into(),
            model_k: 2,
            prediction: PredictionOutput {
                tick,
                stage: 1,
                params,
                point_estimate: 10.0,
                clamped: false,
                survival_curve: None,
            },
        }
    }

    #[test]
    fn snapshots_follow_stride() {
        let lines: Vec<_> = (1..=7).map(|t| line("a", t)).chain([line("b", 1)]).collect();
        let d = build(&lines, 4, 3);
        let a = &d.instances["a"];
        assert_eq!(a.ticks.len(), 7);
        assert_eq!(a.snapshots.iter().map(|s| s.tick).collect::<Vec<_>>(), vec![1, 4, 7]);
        assert_eq!(a.snapshots[0].curve.len(), 4);
        assert!(a.snapshots[0].curve.windows(2).all(|w| w[1].survival <= w[0].survival));
        assert_eq!(d.instances["b"].snapshots.len(), 1);
    }
}
