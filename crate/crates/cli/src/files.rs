//! Scores CSV, its sidecars, reports and plot data.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _, Result};
use serde::{Deserialize, Serialize};

use tfdpm::Detection;

use crate::Failure;

/// One scored step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub time_index: usize,
    pub score: f64,
    pub label: Option<u8>,
    pub n_calls: usize,
}

/// How a scores file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: String,
    pub checkpoint_hash: String,
    pub seed: u64,
    pub n_samples: usize,
    pub mean_calls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub q: usize,
    pub mode: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub mean_calls: Option<f64>,
}

/// Observed and predicted rows keyed by time index, in normalised units.
pub struct Series {
    pub columns: Vec<String>,
    pub time_index: Vec<usize>,
    pub observed: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
}

/// `scores.csv` -> `scores.<suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn data_err(path: &Path) -> impl FnOnce() -> String + '_ {
    move || format!("{}", path.display())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")
        .with_context(data_err(path))
        .context(Failure::Data)
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let labelled = rows.first().is_some_and(|r| r.label.is_some());
    let mut w = csv::Writer::from_path(path)
        .with_context(data_err(path))
        .context(Failure::Data)?;
    if labelled {
        w.write_record(["time_index", "score", "label", "n_calls"])?;
    } else {
        w.write_record(["time_index", "score", "n_calls"])?;
    }
    for r in rows {
        let mut rec = vec![r.time_index.to_string(), format!("{:?}", r.score)];
        if let Some(l) = r.label {
            rec.push(l.to_string());
        }
        rec.push(r.n_calls.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path)
        .with_context(data_err(path))
        .context(Failure::Data)?;
    r.deserialize()
        .collect::<Result<Vec<ScoreRow>, _>>()
        .with_context(data_err(path))
        .context(Failure::Data)
}

pub fn require_labels(rows: &[ScoreRow], path: &Path) -> Result<Vec<u8>> {
    rows.iter()
        .map(|r| r.label)
        .collect::<Option<Vec<u8>>>()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| anyhow!("{} has no label column", path.display()))
        .context(Failure::Data)
}

pub fn read_meta(path: &Path) -> Result<Option<RunMeta>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)
        .with_context(data_err(path))
        .context(Failure::Data)?;
    let meta = serde_json::from_str(&text)
        .with_context(data_err(path))
        .context(Failure::Data)?;
    Ok(Some(meta))
}

pub fn write_series(path: &Path, columns: &[String], det: &Detection) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(data_err(path))
        .context(Failure::Data)?;
    let mut header = vec!["time_index".to_string()];
    header.extend(columns.iter().map(|c| format!("observed_{c}")));
    header.extend(columns.iter().map(|c| format!("predicted_{c}")));
    w.write_record(&header)?;
    for (i, t) in det.time_indices.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(det.observed.row(i).iter().map(|v| format!("{v:?}")));
        rec.extend(det.predicted.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series(path: &Path) -> Result<Series> {
    let load = || -> Result<Series> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let d = (header.len().saturating_sub(1)) / 2;
        if header.len() != 2 * d + 1 || header.get(0) != Some("time_index") {
            return Err(anyhow!("unexpected header"));
        }
        let columns = header
            .iter()
            .skip(1)
            .take(d)
            .map(|c| c.trim_start_matches("observed_").to_string())
            .collect();
        let mut s = Series {
            columns,
            time_index: Vec::new(),
            observed: Vec::new(),
            predicted: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec?;
            s.time_index.push(rec[0].parse()?);
            let vals = rec.iter().skip(1).map(str::parse).collect::<Result<Vec<f64>, _>>()?;
            s.observed.push(vals[..d].to_vec());
            s.predicted.push(vals[d..].to_vec());
        }
        Ok(s)
    };
    load().with_context(data_err(path)).context(Failure::Data)
}

/// One row per scored step: `t`, observed and predicted columns, score, label.
pub fn write_plot(path: &Path, rows: &[ScoreRow], labels: &[u8], series: &Series) -> Result<()> {
    if series.time_index.len() != rows.len()
        || series.time_index.iter().zip(rows).any(|(&t, r)| t != r.time_index)
    {
        return Err(anyhow!("scores and series time indices differ")).context(Failure::Data);
    }
    let mut w = csv::Writer::from_path(path)
        .with_context(data_err(path))
        .context(Failure::Data)?;
    let mut header = vec!["t".to_string()];
    header.extend(series.columns.iter().map(|c| format!("observed_{c}")));
    header.extend(series.columns.iter().map(|c| format!("predicted_{c}")));
    header.extend(["score".to_string(), "label".to_string()]);
    w.write_record(&header)?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![r.time_index.to_string()];
        rec.extend(series.observed[i].iter().map(|v| format!("{v:?}")));
        rec.extend(series.predicted[i].iter().map(|v| format!("{v:?}")));
        rec.push(format!("{:?}", r.score));
        rec.push(labels[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
