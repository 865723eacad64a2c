//! Loading long-format CSV collections, per-sequence z-normalisation and
//! sliding-window feature construction.
//!
//! CSV layout: a header row, then one row per `(instance, tick)` with one
//! column per sensor. Ticks must run 1, 2, ... within each instance (rows may
//! arrive in any order). The event tick defaults to the last tick of each
//! instance unless an explicit event-time column is named.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TimecastError};
use crate::types::{LabeledCollection, Observation, SensorSequence};

/// Standard deviations below this are treated as zero.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    #[serde(default = "default_instance_column")]
    pub instance_column: String,
    #[serde(default = "default_tick_column")]
    pub tick_column: String,
    /// Sensor columns in order; `None` takes every remaining column.
    #[serde(default)]
    pub sensor_columns: Option<Vec<String>>,
    #[serde(default)]
    pub event_time_column: Option<String>,
    #[serde(default)]
    pub znormalize: bool,
}

fn default_instance_column() -> String {
    "instance_id".into()
}

fn default_tick_column() -> String {
    "tick".into()
}

impl DatasetSpec {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            instance_column: default_instance_column(),
            tick_column: default_tick_column(),
            sensor_columns: None,
            event_time_column: None,
            znormalize: false,
        }
    }
}

struct RawRow {
    tick: usize,
    row: usize,
    values: Vec<f64>,
    event_time: Option<usize>,
}

pub fn load_collection(spec: &DatasetSpec) -> Result<LabeledCollection> {
    let file = fs::File::open(&spec.path)?;
    read_collection(file, spec)
}

pub fn read_collection<R: std::io::Read>(reader: R, spec: &DatasetSpec) -> Result<LabeledCollection> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TimecastError::MissingColumn(name.to_string()))
    };
    let id_col = find(&spec.instance_column)?;
    let tick_col = find(&spec.tick_column)?;
    let event_col = spec.event_time_column.as_deref().map(find).transpose()?;
    let sensor_names: Vec<String> = match &spec.sensor_columns {
        Some(cols) => cols.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != id_col && *i != tick_col && Some(*i) != event_col)
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    if sensor_names.is_empty() {
        return Err(TimecastError::MissingColumn("<sensor>".into()));
    }
    let sensor_cols = sensor_names
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawRow>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let row = i + 2;
        let id = rec.get(id_col).unwrap_or("").to_string();
        let data_err = |message: String| TimecastError::Data {
            instance: id.clone(),
            row,
            message,
        };
        let tick_text = rec.get(tick_col).unwrap_or("");
        let tick: usize = tick_text
            .parse()
            .map_err(|_| data_err(format!("tick `{tick_text}` is not a non-negative integer")))?;
        let mut values = Vec::with_capacity(sensor_cols.len());
        for (name, &c) in sensor_names.iter().zip(&sensor_cols) {
            let text = rec.get(c).unwrap_or("");
            let v: f64 = text.parse().unwrap_or(f64::NAN);
            if !v.is_finite() {
                return Err(data_err(format!(
                    "missing or non-finite value `{text}` at tick {tick}, column `{name}`"
                )));
            }
            values.push(v);
        }
        let event_time = match event_col {
            Some(c) => {
                let text = rec.get(c).unwrap_or("");
                Some(text.parse::<usize>().map_err(|_| {
                    data_err(format!("event time `{text}` is not a non-negative integer"))
                })?)
            }
            None => None,
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(RawRow {
            tick,
            row,
            values,
            event_time,
        });
    }

    let mut sequences = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by_key(|r| (r.tick, r.row));
        for (i, r) in rows.iter().enumerate() {
            if r.tick != i + 1 {
                let message = if i > 0 && r.tick == rows[i - 1].tick {
                    format!("duplicate tick {}", r.tick)
                } else {
                    format!("ticks must run 1, 2, ...; expected {} but found {}", i + 1, r.tick)
                };
                return Err(TimecastError::Data {
                    instance: id.clone(),
                    row: r.row,
                    message,
                });
            }
        }
        let event_time = match event_col {
            Some(_) => {
                let first = rows[0].event_time;
                if let Some(r) = rows.iter().find(|r| r.event_time != first) {
                    return Err(TimecastError::Data {
                        instance: id.clone(),
                        row: r.row,
                        message: "event time differs within instance".into(),
                    });
                }
                first
            }
            None => None,
        };
        let observations = rows
            .into_iter()
            .map(|r| Observation {
                instance_id: id.clone(),
                tick: r.tick,
                values: r.values,
            })
            .collect::<Vec<_>>();
        let n = observations.len();
        let mut seq = SensorSequence {
            instance_id: id,
            observations,
            event_time: event_time.unwrap_or(n),
        };
        seq.validate()?;
        if spec.znormalize {
            seq = znormalize(&seq).0;
        }
        sequences.push(seq);
    }
    LabeledCollection::new(sequences)
}

/// Writes a collection in the long CSV layout (`instance_id,tick,s1..sd`,
/// plus `event_time` when any instance's event is after its last tick).
pub fn write_collection<W: std::io::Write>(collection: &LabeledCollection, writer: W) -> Result<()> {
    let explicit = collection
        .sequences
        .iter()
        .any(|s| s.event_time != s.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["instance_id".to_string(), "tick".to_string()];
    header.extend((1..=collection.dimension).map(|i| format!("sensor_{i}")));
    if explicit {
        header.push("event_time".into());
    }
    w.write_record(&header)?;
    for s in &collection.sequences {
        for o in &s.observations {
            let mut rec = vec![s.instance_id.clone(), o.tick.to_string()];
            // `{:?}` keeps full round-trip precision
            rec.extend(o.values.iter().map(|v| format!("{v:?}")));
            if explicit {
                rec.push(s.event_time.to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Per-sensor `(x - mean) / std` with the ML standard deviation. Constant
/// sensors become all zeros and are flagged in the returned mask.
pub fn znormalize(seq: &SensorSequence) -> (SensorSequence, Vec<bool>) {
    let d = seq.dimension();
    let n = seq.len() as f64;
    let mut mean = vec![0.0; d];
    for o in &seq.observations {
        for (m, v) in mean.iter_mut().zip(&o.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for o in &seq.observations {
        for j in 0..d {
            let c = o.values[j] - mean[j];
            var[j] += c * c;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let flags: Vec<bool> = std.iter().map(|s| *s < STD_FLOOR).collect();
    let mut out = seq.clone();
    for o in &mut out.observations {
        for j in 0..d {
            o.values[j] = if flags[j] {
                0.0
            } else {
                (o.values[j] - mean[j]) / std[j]
            };
        }
    }
    (out, flags)
}

/// Flattened window features for one sequence, row-major `len x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub instance_id: String,
    pub dim: usize,
    pub data: Vec<f64>,
    pub event_time: usize,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Features at 0-based position `i` (tick `i + 1`).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Remaining time at 0-based position `i`, `None` at or after the event.
    pub fn label(&self, i: usize) -> Option<f64> {
        let tick = i + 1;
        (tick < self.event_time).then(|| (self.event_time - tick) as f64)
    }

    pub fn prefix(&self, len: usize) -> FeatureSequence {
        FeatureSequence {
            instance_id: self.instance_id.clone(),
            dim: self.dim,
            data: self.data[..len * self.dim].to_vec(),
            event_time: self.event_time,
        }
    }
}

/// Tick `t` maps to `[x_{t-m+1}, ..., x_t]`; ticks before the first full
/// window repeat the first observation.
pub fn windowize(seq: &SensorSequence, m: usize) -> FeatureSequence {
    let m = m.max(1);
    let d = seq.dimension();
    let mut w = Windower::new(d, m);
    let mut data = Vec::with_capacity(seq.len() * d * m);
    for o in &seq.observations {
        data.extend_from_slice(&w.push(&o.values));
    }
    FeatureSequence {
        instance_id: seq.instance_id.clone(),
        dim: d * m,
        data,
        event_time: seq.event_time,
    }
}

/// Incremental window builder for streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Windower {
    sensors: usize,
    width: usize,
    buf: Vec<Vec<f64>>,
}

impl Windower {
    pub fn new(sensors: usize, width: usize) -> Self {
        Self {
            sensors,
            width: width.max(1),
            buf: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64]) -> Vec<f64> {
        if self.buf.is_empty() {
            self.buf = vec![x.to_vec(); self.width];
        } else {
            self.buf.remove(0);
            self.buf.push(x.to_vec());
        }
        let mut out = Vec::with_capacity(self.sensors * self.width);
        for v in &self.buf {
            out.extend_from_slice(v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "\
instance_id,tick,s1,s2
a,1,1.0,10.0
a,2,2.0,20.0
a,3,3.0,30.0
b,1,5.0,0.5
b,2,6.0,0.25
";

    const SHUFFLED: &str = "\
instance_id,tick,s1,s2
a,3,3.0,30.0
b,2,6.0,0.25
a,1,1.0,10.0
b,1,5.0,0.5
a,2,2.0,20.0
";

    fn load(text: &str) -> Result<LabeledCollection> {
        read_collection(text.as_bytes(), &DatasetSpec::new("mem.csv"))
    }

    #[test]
    fn loads_fixture() {
        let c = load(FIXTURE).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.dimension, 2);
        assert_eq!(c.sequences[0].event_time, 3);
        assert_eq!(c.sequences[1].event_time, 2);
        assert_eq!(c.sequences[1].observations[1].values, vec![6.0, 0.25]);
    }

    #[test]
    fn row_order_is_normalised() {
        assert_eq!(load(FIXTURE).unwrap(), load(SHUFFLED).unwrap());
    }

    #[test]
    fn nan_cell_is_pinpointed() {
        let text = "instance_id,tick,s1,s2\na,1,1.0,2.0\na,2,NaN,3.0\n";
        let err = load(text).unwrap_err().to_string();
        assert!(err.contains("`a`"), "{err}");
        assert!(err.contains("tick 2"), "{err}");
        assert!(err.contains("`s1`"), "{err}");
        let text = "instance_id,tick,s1\na,1,\n";
        assert!(load(text).is_err());
    }

    #[test]
    fn missing_column_is_named() {
        let spec = DatasetSpec {
            sensor_columns: Some(vec!["s9".into()]),
            ..DatasetSpec::new("mem.csv")
        };
        match read_collection(FIXTURE.as_bytes(), &spec) {
            Err(TimecastError::MissingColumn(c)) => assert_eq!(c, "s9"),
            other => panic!("{other:?}"),
        }
        let text = "id,tick,s1\na,1,1.0\n";
        assert!(matches!(load(text), Err(TimecastError::MissingColumn(c)) if c == "instance_id"));
    }

    #[test]
    fn bad_ticks_are_data_errors() {
        let dup = "instance_id,tick,s1\na,1,1.0\na,1,2.0\n";
        assert!(matches!(load(dup), Err(TimecastError::Data { .. })));
        let gap = "instance_id,tick,s1\na,1,1.0\na,3,2.0\n";
        assert!(matches!(load(gap), Err(TimecastError::Data { .. })));
    }

    #[test]
    fn explicit_event_time_column() {
        let text = "instance_id,tick,s1,event\na,1,1.0,5\na,2,2.0,5\n";
        let spec = DatasetSpec {
            event_time_column: Some("event".into()),
            ..DatasetSpec::new("mem.csv")
        };
        let c = read_collection(text.as_bytes(), &spec).unwrap();
        assert_eq!(c.dimension, 1);
        assert_eq!(c.sequences[0].event_time, 5);
    }

    #[test]
    fn csv_round_trip() {
        let c = load(FIXTURE).unwrap();
        let mut buf = Vec::new();
        write_collection(&c, &mut buf).unwrap();
        let back = read_collection(buf.as_slice(), &DatasetSpec::new("x")).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn znormalize_examples() {
        let s = SensorSequence::from_rows("a", vec![vec![1.0, 4.0], vec![2.0, 4.0], vec![3.0, 4.0]], None)
            .unwrap();
        let (z, flags) = znormalize(&s);
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (o, e) in z.observations.iter().zip(expect) {
            assert!((o.values[0] - e).abs() < 1e-12);
            assert_eq!(o.values[1], 0.0);
        }
        assert_eq!(flags, vec![false, true]);
    }

    #[test]
    fn windowize_examples() {
        let s = SensorSequence::from_rows(
            "a",
            vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
            None,
        )
        .unwrap();
        let f1 = windowize(&s, 1);
        assert_eq!(f1.dim, 2);
        assert_eq!(f1.row(1), &[3.0, 4.0]);

        let f2 = windowize(&s, 2);
        assert_eq!(f2.len(), 3);
        assert_eq!(f2.row(0), &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(f2.row(1), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f2.row(2), &[3.0, 4.0, 5.0, 6.0]);

        let f3 = windowize(&s, 3);
        assert_eq!(f3.row(0), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn labels_exclude_event_tick() {
        let s = SensorSequence::from_rows("a", vec![vec![0.0]; 4], None).unwrap();
        let f = windowize(&s, 1);
        assert_eq!(f.label(0), Some(3.0));
        assert_eq!(f.label(2), Some(1.0));
        assert_eq!(f.label(3), None);
    }
}
