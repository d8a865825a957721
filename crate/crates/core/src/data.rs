//! CSV ingestion, train/validation/test splits, the synthetic corpus and
//! enumeration of anomaly windows from predicted labels.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{make_window, TimeSeries, Window};

/// Read `timestamp,dim_0,...,dim_{D-1}[,label]`.
///
/// Error positions are 0-based: `row` is the data row (timestamp index),
/// `column` the CSV column.
pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    let file = std::fs::File::open(path)?;
    read_csv(file, name)
}

pub fn read_csv<R: std::io::Read>(reader: R, name: impl Into<String>) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: 0,
            message: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.first() != Some(&"timestamp") {
        return Err(Error::Parse {
            row: 0,
            column: 0,
            message: "first column must be `timestamp`".into(),
        });
    }
    let has_label = cols.last() == Some(&"label");
    let dims = cols.len() - 1 - usize::from(has_label);
    if dims == 0 {
        return Err(Error::Parse {
            row: 0,
            column: 1,
            message: "no value columns".into(),
        });
    }
    for (i, c) in cols[1..=dims].iter().enumerate() {
        if *c != format!("dim_{i}") {
            return Err(Error::Parse {
                row: 0,
                column: i + 1,
                message: format!("expected header `dim_{i}`, found `{c}`"),
            });
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != cols.len() {
            return Err(Error::Parse {
                row,
                column: record.len().min(cols.len()),
                message: format!("expected {} fields, found {}", cols.len(), record.len()),
            });
        }
        for column in 1..=dims {
            let v: f64 = record[column].parse().map_err(|_| Error::Parse {
                row,
                column,
                message: format!("`{}` is not a number", &record[column]),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { row, column });
            }
            values.push(v);
        }
        if has_label {
            let column = dims + 1;
            let l: f64 = record[column].parse().map_err(|_| Error::Parse {
                row,
                column,
                message: format!("`{}` is not a label", &record[column]),
            })?;
            let l = match l {
                x if x == 0.0 => 0u8,
                x if x == 1.0 => 1u8,
                _ => {
                    return Err(Error::Parse {
                        row,
                        column,
                        message: "label must be 0 or 1".into(),
                    })
                }
            };
            labels.push(l);
        }
    }
    let t = values.len() / dims;
    if t == 0 {
        return Err(Error::Parse {
            row: 0,
            column: 0,
            message: "no data rows".into(),
        });
    }
    let values = Array2::from_shape_vec((t, dims), values).expect("row-major fill");
    TimeSeries::new(name, values, has_label.then_some(labels))
}

pub fn write_csv(series: &TimeSeries, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["timestamp".to_string()];
    header.extend((0..series.dims()).map(|d| format!("dim_{d}")));
    if series.labels.is_some() {
        header.push("label".into());
    }
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    for (t, row) in series.values.outer_iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        if let Some(l) = &series.labels {
            rec.push(l[t].to_string());
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Contiguous 30/20/50 split; boundaries are floored, the remainder goes to
/// the test part.
pub fn split(series: &TimeSeries) -> Result<(TimeSeries, TimeSeries, TimeSeries)> {
    let (train_end, val_end) = split_points(series.len())?;
    Ok((
        series.slice(0, train_end),
        series.slice(train_end, val_end),
        series.slice(val_end, series.len()),
    ))
}

/// `(end of train, end of validation)`.
pub fn split_points(len: usize) -> Result<(usize, usize)> {
    if len < 10 {
        return Err(Error::TooShort(len));
    }
    let train = len * 3 / 10;
    let val = len * 2 / 10;
    Ok((train, train + val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseKind {
    Sine,
    ArNoise,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    Spike,
    LevelShift,
    Drift,
}

impl FromStr for BaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(BaseKind::Sine),
            "ar-noise" => Ok(BaseKind::ArNoise),
            "mixed" => Ok(BaseKind::Mixed),
            _ => Err(Error::invalid("base", format!("unknown base `{s}`"))),
        }
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spike" => Ok(AnomalyKind::Spike),
            "level-shift" => Ok(AnomalyKind::LevelShift),
            "drift" => Ok(AnomalyKind::Drift),
            _ => Err(Error::invalid("kinds", format!("unknown anomaly kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub length: usize,
    pub dims: usize,
    pub base: BaseKind,
    pub kinds: Vec<AnomalyKind>,
    pub count: usize,
    /// Amplitudes in units of the base signal's standard deviation.
    pub amplitude: (f64, f64),
    /// Anomalous channels per event.
    pub channels: usize,
    /// Standard deviation of the white noise added to sine bases.
    pub noise: f64,
    pub suspect_len: usize,
    pub context_len: usize,
    /// Anomalies start no earlier than this fraction of the series.
    pub start_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            length: 4000,
            dims: 1,
            base: BaseKind::Sine,
            kinds: vec![AnomalyKind::Spike],
            count: 10,
            amplitude: (4.0, 6.0),
            channels: 1,
            noise: 0.1,
            suspect_len: 10,
            context_len: 115,
            start_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedEvent {
    pub start: usize,
    pub len: usize,
    pub kind: AnomalyKind,
    pub channels: Vec<usize>,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub series: String,
    pub events: Vec<InjectedEvent>,
}

impl GroundTruth {
    /// The injected event whose span intersects `[start, start + len)`.
    pub fn event_overlapping(&self, start: usize, len: usize) -> Option<&InjectedEvent> {
        self.events
            .iter()
            .find(|e| e.start < start + len && start < e.start + e.len)
    }
}

fn base_signal(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut values = Array2::zeros((spec.length, spec.dims));
    for d in 0..spec.dims {
        let period: f64 = rng.random_range(24.0..72.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut ar = 0.0;
        for t in 0..spec.length {
            let angle = std::f64::consts::TAU * t as f64 / period + phase;
            let noise: f64 = rng.sample(StandardNormal);
            ar = 0.8 * ar + 0.6 * noise;
            values[[t, d]] = match spec.base {
                BaseKind::Sine => std::f64::consts::SQRT_2 * angle.sin() + spec.noise * noise,
                BaseKind::ArNoise => ar,
                BaseKind::Mixed => angle.sin() + 0.5 * ar,
            };
        }
    }
    values
}

/// Seeded synthetic series with injected anomalies and their ground truth.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(TimeSeries, GroundTruth)> {
    if spec.length == 0 || spec.dims == 0 || spec.suspect_len == 0 {
        return Err(Error::SpecInfeasible("length, dims and S must be positive".into()));
    }
    if spec.count > 0 && spec.kinds.is_empty() {
        return Err(Error::SpecInfeasible("no anomaly kinds to inject".into()));
    }
    if spec.channels == 0 || spec.channels > spec.dims {
        return Err(Error::SpecInfeasible(format!(
            "{} channels per event with {} dimensions",
            spec.channels, spec.dims
        )));
    }
    let (lo_amp, hi_amp) = spec.amplitude;
    if !(lo_amp.is_finite() && hi_amp.is_finite() && 0.0 <= lo_amp && lo_amp <= hi_amp) {
        return Err(Error::SpecInfeasible("amplitude range must be finite and ordered".into()));
    }
    if !(0.0..1.0).contains(&spec.start_fraction) {
        return Err(Error::SpecInfeasible("start fraction must lie in [0, 1)".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = base_signal(spec, &mut rng);
    let base_std = values.std_axis(ndarray::Axis(0), 0.0);

    let spacing = spec.context_len + spec.suspect_len;
    let lo = ((spec.start_fraction * spec.length as f64).ceil() as usize).max(spec.context_len);
    let hi = spec.length.checked_sub(spec.suspect_len).unwrap_or(0);
    let needed = spec.count.saturating_sub(1) * spacing;
    if spec.count > 0 && (hi < lo || hi - lo < needed) {
        return Err(Error::SpecInfeasible(format!(
            "{} anomalies spaced {} apart do not fit in [{lo}, {hi}]",
            spec.count, spacing
        )));
    }
    let slack = hi.saturating_sub(lo).saturating_sub(needed);
    let mut offsets: Vec<usize> = (0..spec.count).map(|_| rng.random_range(0..=slack)).collect();
    offsets.sort_unstable();

    let mut labels = vec![0u8; spec.length];
    let mut events = Vec::with_capacity(spec.count);
    let mut dims: Vec<usize> = (0..spec.dims).collect();
    for (k, off) in offsets.into_iter().enumerate() {
        let start = lo + off + k * spacing;
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        dims.shuffle(&mut rng);
        let mut channels = dims[..spec.channels].to_vec();
        channels.sort_unstable();
        let amplitude = rng.random_range(lo_amp..=hi_amp);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let len = match kind {
            AnomalyKind::Spike => 1,
            AnomalyKind::LevelShift | AnomalyKind::Drift => spec.suspect_len,
        };
        for &d in &channels {
            let step = sign * amplitude * base_std[d];
            for j in 0..len {
                values[[start + j, d]] += match kind {
                    AnomalyKind::Drift => step * (j + 1) as f64 / len as f64,
                    _ => step,
                };
            }
        }
        labels[start..start + len].fill(1);
        events.push(InjectedEvent {
            start,
            len,
            kind,
            channels,
            amplitude: sign * amplitude,
        });
    }
    let name = format!("synthetic-{}", spec.seed);
    let series = TimeSeries::new(name.clone(), values, Some(labels))?;
    Ok((series, GroundTruth { series: name, events }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Tp,
    Fp,
    All,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tp" => Ok(Mode::Tp),
            "fp" => Ok(Mode::Fp),
            "all" => Ok(Mode::All),
            _ => Err(Error::invalid("mode", format!("unknown mode `{s}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Tp => "tp",
            Mode::Fp => "fp",
            Mode::All => "all",
        })
    }
}

/// A maximal run of predicted-anomalous timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedEvent {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Enumeration {
    pub windows: Vec<Window>,
    pub events: Vec<PredictedEvent>,
    /// Events without room for a full context or suspect window.
    pub skipped: usize,
    /// Events longer than `S`, cut to their first `S` timestamps.
    pub truncated: usize,
    /// Events starting inside an earlier window's suspect segment.
    pub overlapping: usize,
}

pub fn predicted_events(predicted: &[u8]) -> Vec<PredictedEvent> {
    let mut events = Vec::new();
    let mut t = 0;
    while t < predicted.len() {
        if predicted[t] == 1 {
            let start = t;
            while t < predicted.len() && predicted[t] == 1 {
                t += 1;
            }
            events.push(PredictedEvent { start, len: t - start });
        } else {
            t += 1;
        }
    }
    events
}

/// One window per predicted event, its suspect segment starting at the
/// event start.
pub fn enumerate_anomaly_windows(
    series: &TimeSeries,
    predicted: &[u8],
    mode: Mode,
    suspect_len: usize,
    context_len: usize,
) -> Result<Enumeration> {
    if predicted.len() != series.len() {
        return Err(Error::shape(format!("{} predicted labels", series.len()), predicted.len()));
    }
    let truth = match (mode, &series.labels) {
        (Mode::All, _) => None,
        (_, Some(l)) => Some(l),
        (_, None) => return Err(Error::MissingLabels),
    };
    let mut out = Enumeration::default();
    let mut last_end = 0usize;
    for ev in predicted_events(predicted) {
        let overlaps_truth = truth.map(|l| l[ev.start..ev.start + ev.len].contains(&1));
        let keep = match (mode, overlaps_truth) {
            (Mode::All, _) => true,
            (Mode::Tp, Some(o)) => o,
            (Mode::Fp, Some(o)) => !o,
            _ => unreachable!("labels checked above"),
        };
        if !keep {
            continue;
        }
        if !out.windows.is_empty() && ev.start < last_end {
            out.overlapping += 1;
            continue;
        }
        if ev.start < context_len || ev.start + suspect_len > series.len() {
            out.skipped += 1;
            continue;
        }
        if ev.len > suspect_len {
            out.truncated += 1;
        }
        out.windows.push(make_window(series, ev.start, suspect_len, context_len)?);
        out.events.push(ev);
        last_end = ev.start + suspect_len;
    }
    Ok(out)
}
