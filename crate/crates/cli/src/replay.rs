use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use timecast::ingest::{load_collection, write_atomic, znormalize, DatasetSpec};
use timecast::streaming::{
    online_model_update, InsertPosition, OnlineOptions, PredictionOutput, StreamSession, StreamingModel,
};
use timecast::{ModelSet, SensorSequence, TimecastError, SCHEMA_VERSION};

use crate::commands::sibling;
use crate::{Insert, PredictArgs};

/// One incoming observation. A record carrying `event` closes its stream.
#[derive(Debug, Clone, Deserialize)]
pub struct StreamRecord {
    pub instance_id: String,
    #[serde(default)]
    pub tick: Option<usize>,
    pub values: Vec<f64>,
    #[serde(default)]
    pub event: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionLine {
    pub schema_version: u32,
    pub instance_id: String,
    pub model_k: usize,
    #[serde(flatten)]
    pub prediction: PredictionOutput,
}

fn read_ndjson(path: &Path) -> Result<Vec<StreamRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(TimecastError::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StreamRecord = serde_json::from_str(&line).map_err(|e| TimecastError::Data {
            instance: String::new(),
            row: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// A CSV collection replays instance by instance; the last row of each
/// instance closes it with the instance's event tick.
fn read_csv(path: &Path) -> Result<Vec<StreamRecord>> {
    let coll = load_collection(&DatasetSpec::new(path)).with_context(|| format!("loading {}", path.display()))?;
    let mut out = Vec::with_capacity(coll.total_ticks());
    for seq in &coll.sequences {
        let n = seq.observations.len();
        for (i, o) in seq.observations.iter().enumerate() {
            out.push(StreamRecord {
                instance_id: seq.instance_id.clone(),
                tick: Some(o.tick),
                values: o.values.clone(),
                event: (i + 1 == n).then_some(seq.event_time),
            });
        }
    }
    Ok(out)
}

pub fn read_stream(path: &Path) -> Result<Vec<StreamRecord>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv(path),
        _ => read_ndjson(path),
    }
}

/// Replaces each instance's values with their per-sensor z-scores over the
/// whole replay file.
fn normalize_records(records: &mut [StreamRecord]) -> Result<()> {
    let mut rows: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        rows.entry(r.instance_id.as_str()).or_default().push(i);
    }
    let rows: Vec<Vec<usize>> = rows.into_values().collect();
    for idx in rows {
        let seq = SensorSequence::from_rows("z", idx.iter().map(|&i| records[i].values.clone()).collect(), None)?;
        let (z, _) = znormalize(&seq);
        for (&i, o) in idx.iter().zip(z.observations) {
            records[i].values = o.values;
        }
    }
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let mut models = ModelSet::from_json(&text)?;
    let mut records = read_stream(&a.stream)?;
    if models.features.znormalize {
        log::warn!("model expects z-normalised input; normalising each stream over the whole file");
        normalize_records(&mut records)?;
    }
    let opts = OnlineOptions {
        insert: match a.insert {
            Insert::AfterWorst => InsertPosition::AfterWorst,
            Insert::Append => InsertPosition::Append,
        },
        ..Default::default()
    };

    let mut model = StreamingModel::new(models.clone())?;
    let mut sessions: HashMap<String, (StreamSession, usize)> = HashMap::new();
    let mut lines = 0usize;
    let mut updates = Vec::new();
    let mut out = Vec::new();

    for (row, rec) in records.iter().enumerate() {
        let (session, seen) = sessions.entry(rec.instance_id.clone()).or_insert_with(|| {
            let mut s = StreamSession::new(rec.instance_id.clone(), &models);
            s.state = s.state.clone().with_history_cap(a.history_cap);
            (s, 0)
        });
        *seen += 1;
        if let Some(t) = rec.tick {
            if t != *seen {
                return Err(TimecastError::Data {
                    instance: rec.instance_id.clone(),
                    row: row + 1,
                    message: format!("expected tick {seen}, got {t}"),
                }
                .into());
            }
        }
        let mut p = session.push(&rec.values, &model).map_err(|e| match e {
            TimecastError::Dimension { expected, actual } => TimecastError::Data {
                instance: rec.instance_id.clone(),
                row: row + 1,
                message: format!("expected {expected} sensor values, got {actual}"),
            },
            e => e,
        })?;
        if let Some(h) = a.curve_horizon {
            p = p.with_curve(h);
        }
        let line = PredictionLine {
            schema_version: SCHEMA_VERSION,
            instance_id: rec.instance_id.clone(),
            model_k: models.k(),
            prediction: p,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
        lines += 1;

        let Some(event) = rec.event else { continue };
        let (mut session, seen) = sessions.remove(&rec.instance_id).expect("session exists");
        if !a.online_update {
            continue;
        }
        // history may have been capped; event ticks count from the first kept row
        let dropped = seen - session.state.history.len();
        if event <= dropped {
            log::warn!("{}: event precedes kept history, skipping update", rec.instance_id);
            continue;
        }
        let finished = session.state.finish(&rec.instance_id, Some(event - dropped))?;
        let (grown, report) = online_model_update(&models, &finished, &models.hyper, &opts)?;
        log::info!(
            "{}: update {} ({}), K {} -> {}",
            rec.instance_id,
            if report.accepted { "adopted" } else { "rejected" },
            report.reason,
            report.k_before,
            report.k_after
        );
        if report.accepted {
            let at = report.inserted_at.expect("adopted update has a position") - 1;
            for (s, _) in sessions.values_mut() {
                s.state.insert_stage(at);
            }
            models = grown;
            model = StreamingModel::new(models.clone())?;
        }
        updates.push(report);
    }

    write_atomic(&a.out, &out).with_context(|| format!("writing {}", a.out.display()))?;
    log::info!("{} predictions, {} open streams at end of input", lines, sessions.len());
    if a.online_update {
        let model_out = a.model_out.unwrap_or_else(|| sibling(&a.model, "updated.json"));
        write_atomic(&model_out, models.to_json()?.as_bytes())
            .with_context(|| format!("writing {}", model_out.display()))?;
        let mut buf = Vec::new();
        for u in &updates {
            serde_json::to_writer(&mut buf, u)?;
            buf.write_all(b"\n")?;
        }
        let path = a.updates.unwrap_or_else(|| sibling(&a.out, "updates.ndjson"));
        write_atomic(&path, &buf).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
