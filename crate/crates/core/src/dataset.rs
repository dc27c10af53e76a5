//! Multichannel CPS time series: ingestion, preprocessing and windowing.

use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Continuous,
    Discrete,
}

/// A raw (pre-expansion) channel: a sensor reading or an actuator state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub kind: ChannelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
}

impl ChannelSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ChannelKind::Continuous,
            cardinality: None,
        }
    }

    pub fn discrete(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            kind: ChannelKind::Discrete,
            cardinality: Some(cardinality),
        }
    }

    /// Number of model columns after one-hot expansion.
    pub fn width(&self) -> usize {
        match self.kind {
            ChannelKind::Continuous => 1,
            ChannelKind::Discrete => self.cardinality.unwrap_or(0),
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        match self.kind {
            ChannelKind::Continuous => vec![self.name.clone()],
            ChannelKind::Discrete => (0..self.width())
                .map(|k| format!("{}={k}", self.name))
                .collect(),
        }
    }
}

/// Check names are unique and discrete cardinalities are at least 2.
pub fn validate_channels(channels: &[ChannelSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for ch in channels {
        if !seen.insert(ch.name.as_str()) {
            return Err(Error::Schema(format!("duplicate channel name {:?}", ch.name)));
        }
        if ch.name == LABEL_COLUMN {
            return Err(Error::Schema(format!("channel may not be named {LABEL_COLUMN:?}")));
        }
        match (ch.kind, ch.cardinality) {
            (ChannelKind::Discrete, Some(c)) if c >= 2 => {}
            (ChannelKind::Discrete, c) => {
                return Err(Error::Schema(format!(
                    "discrete channel {:?} needs cardinality >= 2, got {c:?}",
                    ch.name
                )))
            }
            (ChannelKind::Continuous, _) => {}
        }
    }
    Ok(())
}

pub fn expanded_width(channels: &[ChannelSpec]) -> usize {
    channels.iter().map(ChannelSpec::width).sum()
}

pub const LABEL_COLUMN: &str = "label";

/// Per-column min/max used for min-max scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn from_data(raw: &Array2<f64>) -> Self {
        let cols = raw.ncols();
        let mut min = vec![f64::INFINITY; cols];
        let mut max = vec![f64::NEG_INFINITY; cols];
        for row in raw.rows() {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    fn is_degenerate(&self, j: usize) -> bool {
        !(self.max[j] > self.min[j])
    }

    /// Inverse of [`normalize`] for non-degenerate columns; degenerate columns
    /// map back to their constant.
    pub fn denormalize(&self, norm: &Array2<f64>) -> Array2<f64> {
        let mut out = norm.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            if self.is_degenerate(j) {
                col.fill(self.min[j]);
            } else {
                let span = self.max[j] - self.min[j];
                col.mapv_inplace(|v| v * span + self.min[j]);
            }
        }
        out
    }
}

/// Min-max scale each column with the given stats, or with stats computed
/// from `raw`. Columns with `max == min` map to 0.
pub fn normalize(raw: &Array2<f64>, stats: Option<&NormStats>) -> (Array2<f64>, NormStats) {
    let stats = stats.cloned().unwrap_or_else(|| NormStats::from_data(raw));
    assert_eq!(stats.len(), raw.ncols(), "norm stats width mismatch");
    let mut out = raw.clone();
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        if stats.is_degenerate(j) {
            col.fill(0.0);
        } else {
            let (lo, span) = (stats.min[j], stats.max[j] - stats.min[j]);
            col.mapv_inplace(|v| (v - lo) / span);
        }
    }
    (out, stats)
}

/// Raw (unexpanded, unnormalised) table as read from or written to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub channels: Vec<ChannelSpec>,
    /// `T x channels.len()`; discrete channels hold integer state codes.
    pub values: Array2<f64>,
    pub labels: Option<Vec<u8>>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// One-hot expand discrete channels.
    pub fn expand(&self) -> Result<Array2<f64>> {
        let d = expanded_width(&self.channels);
        let mut out = Array2::zeros((self.len(), d));
        for (t, row) in self.values.rows().into_iter().enumerate() {
            let mut col = 0;
            for (ch, &v) in self.channels.iter().zip(row.iter()) {
                match ch.kind {
                    ChannelKind::Continuous => out[[t, col]] = v,
                    ChannelKind::Discrete => {
                        let card = ch.width();
                        let code = v.round();
                        if (v - code).abs() > 1e-9 || code < 0.0 || code as usize >= card {
                            return Err(Error::Parse {
                                row: t + 2,
                                msg: format!(
                                    "value {v} of discrete channel {:?} not in 0..{card}",
                                    ch.name
                                ),
                            });
                        }
                        out[[t, col + code as usize]] = 1.0;
                    }
                }
                col += ch.width();
            }
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| Error::Schema(format!("writing {}: {e}", path.display()));
        let mut header: Vec<String> = self.channels.iter().map(|c| c.name.clone()).collect();
        if self.labels.is_some() {
            header.push(LABEL_COLUMN.to_string());
        }
        w.write_record(&header).map_err(csv_err)?;
        for (t, row) in self.values.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = self
                .channels
                .iter()
                .zip(row.iter())
                .map(|(c, v)| match c.kind {
                    ChannelKind::Discrete => format!("{}", v.round() as i64),
                    ChannelKind::Continuous => format!("{v:.6}"),
                })
                .collect();
            if let Some(l) = &self.labels {
                rec.push(l[t].to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a CSV whose header names every channel of `channels` (any order)
    /// plus an optional `label` column. Rows with missing fields are dropped.
    pub fn read_csv(path: &Path, channels: &[ChannelSpec]) -> Result<Self> {
        validate_channels(channels)?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(file);
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse {
                row: 1,
                msg: e.to_string(),
            })?
            .clone();
        let mut label_col = None;
        let mut col_of = vec![usize::MAX; channels.len()];
        for (j, name) in header.iter().enumerate() {
            let name = name.trim();
            if name == LABEL_COLUMN {
                label_col = Some(j);
                continue;
            }
            match channels.iter().position(|c| c.name == name) {
                Some(k) => col_of[k] = j,
                None => return Err(Error::Schema(format!("unknown channel {name:?} in header"))),
            }
        }
        if let Some(k) = col_of.iter().position(|&c| c == usize::MAX) {
            return Err(Error::Schema(format!(
                "channel {:?} missing from header",
                channels[k].name
            )));
        }

        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut kept = 0;
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                row,
                msg: e.to_string(),
            })?;
            let missing = |s: &str| {
                let s = s.trim();
                s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na")
            };
            if rec.iter().any(missing) {
                continue;
            }
            for &j in &col_of {
                let field = rec[j].trim();
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("cannot parse {field:?} as a number in column {:?}", &header[j]),
                })?;
                data.push(v);
            }
            if let Some(j) = label_col {
                let l = match rec[j].trim() {
                    "0" => 0,
                    "1" => 1,
                    other => {
                        return Err(Error::Parse {
                            row,
                            msg: format!("label must be 0 or 1, got {other:?}"),
                        })
                    }
                };
                labels.push(l);
            }
            kept += 1;
        }
        let values = Array2::from_shape_vec((kept, channels.len()), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            channels: channels.to_vec(),
            values,
            labels: label_col.map(|_| labels),
        })
    }
}

/// Normalised model-ready series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    /// `T x D`, min-max scaled.
    pub values: Array2<f64>,
    pub labels: Option<Vec<u8>>,
    /// Source channels; `D` is the sum of their expanded widths.
    pub channels: Vec<ChannelSpec>,
    pub norm_stats: NormStats,
}

impl TimeSeriesDataset {
    /// Expand and normalise a raw table. With `stats = None` the stats are
    /// fitted on this table (training data); otherwise they are reused and
    /// values may leave `[0, 1]`.
    pub fn from_raw(raw: &RawTable, stats: Option<&NormStats>) -> Result<Self> {
        validate_channels(&raw.channels)?;
        let expanded = raw.expand()?;
        if let Some(s) = stats {
            if s.len() != expanded.ncols() {
                return Err(Error::Schema(format!(
                    "normalisation stats have {} columns, data has {}",
                    s.len(),
                    expanded.ncols()
                )));
            }
        }
        let (values, norm_stats) = normalize(&expanded, stats);
        Ok(Self {
            values,
            labels: raw.labels.clone(),
            channels: raw.channels.clone(),
            norm_stats,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.channels.iter().flat_map(ChannelSpec::column_names).collect()
    }

    /// Contiguous sub-range of rows.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            values: self.values.slice(s![start..end, ..]).to_owned(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            channels: self.channels.clone(),
            norm_stats: self.norm_stats.clone(),
        }
    }

    /// Target indices `omega..T` of every full window.
    pub fn window_targets(&self, omega: usize) -> Result<std::ops::Range<usize>> {
        if omega == 0 {
            return Err(Error::Config("window length must be >= 1".into()));
        }
        if self.len() <= omega {
            return Err(Error::Config(format!(
                "series of length {} too short for window {omega}",
                self.len()
            )));
        }
        Ok(omega..self.len())
    }

    /// Gather the windows for the given target indices.
    pub fn gather(&self, omega: usize, targets: &[usize]) -> WindowBatch {
        let d = self.dim();
        let mut histories = Array3::zeros((targets.len(), omega, d));
        let mut tgt = Array2::zeros((targets.len(), d));
        for (b, &t) in targets.iter().enumerate() {
            assert!(t >= omega && t < self.len(), "target {t} has no full window");
            histories
                .index_axis_mut(Axis(0), b)
                .assign(&self.values.slice(s![t - omega..t, ..]));
            tgt.row_mut(b).assign(&self.values.row(t));
        }
        WindowBatch {
            histories,
            targets: tgt,
            time_indices: targets.to_vec(),
        }
    }
}

/// History windows with their prediction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `B x omega x D`; row `b` covers timesteps `t-omega..t-1`.
    pub histories: Array3<f64>,
    /// `B x D`, the observation at `t`.
    pub targets: Array2<f64>,
    pub time_indices: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.time_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time_indices.is_empty()
    }

    pub fn omega(&self) -> usize {
        self.histories.shape()[1]
    }
}

/// Stream of `T - omega` windows in time order, `batch_size` at a time.
pub fn sliding_windows(
    ds: &TimeSeriesDataset,
    omega: usize,
    batch_size: usize,
) -> Result<impl Iterator<Item = WindowBatch> + '_> {
    let targets: Vec<usize> = ds.window_targets(omega)?.collect();
    let batch_size = batch_size.max(1);
    Ok((0..targets.len())
        .step_by(batch_size)
        .map(move |i| ds.gather(omega, &targets[i..(i + batch_size).min(targets.len())])))
}

/// Load a CSV, expand discrete channels and min-max normalise. With
/// `train_stats` the given stats are applied instead of fitted.
pub fn load_dataset(
    path: &Path,
    channels: &[ChannelSpec],
    train_stats: Option<&NormStats>,
) -> Result<TimeSeriesDataset> {
    let raw = RawTable::read_csv(path, channels)?;
    if raw.is_empty() {
        return Err(Error::Parse {
            row: 2,
            msg: format!("{} has no complete data rows", path.display()),
        });
    }
    TimeSeriesDataset::from_raw(&raw, train_stats)
}

/// Sidecar schema: the channel list as JSON.
pub fn write_schema(path: &Path, channels: &[ChannelSpec]) -> Result<()> {
    let json = serde_json::to_string_pretty(channels).expect("channel specs serialise");
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(json.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))
}

pub fn read_schema(path: &Path) -> Result<Vec<ChannelSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let channels: Vec<ChannelSpec> = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    validate_channels(&channels)?;
    Ok(channels)
}
