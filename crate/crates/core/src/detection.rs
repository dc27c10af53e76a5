//! Anomaly scores, point-adjusted metrics and best-F1 threshold search.

use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeriesDataset;
use crate::diffusion::SamplerNoise;
use crate::error::{Error, Result};
use crate::model::Tfdpm;
use crate::scheduler::{FastScheduleTrace, SchedulerNet};

/// Mean squared difference between prediction and observation.
pub fn anomaly_score(pred: ArrayView1<f64>, obs: ArrayView1<f64>) -> Result<f64> {
    if pred.len() != obs.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} entries, observation {}",
            pred.len(),
            obs.len()
        )));
    }
    let sq: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum();
    Ok(sq / pred.len() as f64)
}

/// Maximal runs of label 1 as `start..end` ranges.
pub fn segments(labels: &[u8]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s0)) => {
                out.push(s0..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s0) = start {
        out.push(s0..labels.len());
    }
    out
}

/// Fill every labelled segment that contains at least one raw alert.
pub fn adjust(raw: &[u8], labels: &[u8]) -> Vec<u8> {
    assert_eq!(raw.len(), labels.len(), "prediction/label length mismatch");
    let mut out = raw.to_vec();
    for seg in segments(labels) {
        if raw[seg.clone()].iter().any(|&p| p != 0) {
            out[seg].fill(1);
        }
    }
    out
}

/// Alerts `score > threshold`, point-adjusted against `labels`.
pub fn point_adjust(scores: &[f64], labels: &[u8], threshold: f64) -> Vec<u8> {
    let raw: Vec<u8> = scores.iter().map(|&s| (s > threshold) as u8).collect();
    adjust(&raw, labels)
}

/// Pointwise precision, recall and F1; zero denominators give 0.
pub fn prf1(pred: &[u8], labels: &[u8]) -> (f64, f64, f64) {
    assert_eq!(pred.len(), labels.len(), "prediction/label length mismatch");
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p != 0, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fne);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub adjusted_predictions: Vec<u8>,
}

impl DetectionReport {
    pub fn q(&self) -> usize {
        self.scores.len()
    }
}

/// Candidate thresholds: every distinct score plus one sentinel below the
/// minimum (everything alerts) and the maximum itself (nothing alerts).
fn candidates(scores: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = scores.to_vec();
    c.sort_by(f64::total_cmp);
    c.dedup();
    if let Some(&lo) = c.first() {
        c.insert(0, lo - 1.0);
    }
    c
}

/// Highest point-adjusted F1 over all thresholds; ties go to the higher
/// precision, then to the lower threshold.
pub fn best_f1_search(scores: &[f64], labels: &[u8]) -> Result<DetectionReport> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !labels.iter().any(|&l| l != 0) {
        return Err(Error::Evaluation("labels contain no anomalies".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Evaluation("non-finite anomaly score".into()));
    }
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for th in candidates(scores) {
        let (p, r, f1) = prf1(&point_adjust(scores, labels, th), labels);
        let better = match best {
            None => true,
            Some((_, bp, _, bf)) => f1 > bf || (f1 == bf && p > bp),
        };
        if better {
            best = Some((th, p, r, f1));
        }
    }
    let (threshold, precision, recall, f1) = best.expect("at least one candidate");
    Ok(DetectionReport {
        scores: scores.to_vec(),
        threshold,
        precision,
        recall,
        f1,
        adjusted_predictions: point_adjust(scores, labels, threshold),
    })
}

/// Which reverse process generates predictions.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Full,
    Fast(&'a SchedulerNet),
}

impl Mode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Fast(_) => "fast",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectOptions {
    pub seed: u64,
    pub n_samples: usize,
    /// Rows per batched sampler call.
    pub chunk: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 1,
            chunk: 256,
        }
    }
}

/// Predictions and scores for every test step with a full history.
#[derive(Debug, Clone)]
pub struct Detection {
    pub time_indices: Vec<usize>,
    pub observed: Array2<f64>,
    pub predicted: Array2<f64>,
    pub scores: Vec<f64>,
    /// Noise-network calls per step (summed over samples).
    pub n_calls: Vec<usize>,
    pub traces: Vec<FastScheduleTrace>,
}

impl Detection {
    pub fn q(&self) -> usize {
        self.scores.len()
    }

    /// Best-F1 report against the dataset's labels at the scored steps.
    pub fn report(&self, labels: &[u8]) -> Result<DetectionReport> {
        let l: Vec<u8> = self.time_indices.iter().map(|&t| labels[t]).collect();
        best_f1_search(&self.scores, &l)
    }
}

/// Predict each `x_t`, `t = omega..T`, from the observed window before it and
/// score it against the observation.
pub fn predict_and_score(
    ds: &TimeSeriesDataset,
    model: &Tfdpm,
    mode: Mode<'_>,
    opts: &DetectOptions,
) -> Result<Detection> {
    if ds.dim() != model.dim {
        return Err(Error::Schema(format!(
            "model expects {} columns, data has {}",
            model.dim,
            ds.dim()
        )));
    }
    let targets: Vec<usize> = ds.window_targets(model.omega())?.collect();
    let q = targets.len();
    let mut predicted = Array2::zeros((q, model.dim));
    let mut n_calls = vec![0; q];
    let mut traces = Vec::new();
    let n_samples = opts.n_samples.max(1);
    let mut start = 0;
    for chunk in targets.chunks(opts.chunk.max(1)) {
        let batch = ds.gather(model.omega(), chunk);
        let features = model.features(&batch.histories)?;
        let mut acc = Array2::<f64>::zeros((chunk.len(), model.dim));
        for k in 0..n_samples {
            let mut rngs: Vec<_> = chunk.iter().map(|&t| Tfdpm::row_rng(opts.seed, t, k)).collect();
            let x = match mode {
                Mode::Full => {
                    for c in &mut n_calls[start..start + chunk.len()] {
                        *c += model.schedule.steps();
                    }
                    model.sample_full(&features, &mut rngs, SamplerNoise::Gaussian)?
                }
                Mode::Fast(sched) => {
                    let (x, tr) = sched.fast_sample(model, &features, &mut rngs, SamplerNoise::Gaussian)?;
                    for (c, t) in n_calls[start..start + chunk.len()].iter_mut().zip(&tr) {
                        *c += t.n_calls;
                    }
                    traces.extend(tr);
                    x
                }
            };
            acc = acc + x;
        }
        predicted.slice_mut(s![start..start + chunk.len(), ..]).assign(&(acc / n_samples as f64));
        start += chunk.len();
    }
    let observed = ds.values.slice(s![model.omega().., ..]).to_owned();
    let scores = predicted
        .rows()
        .into_iter()
        .zip(observed.rows())
        .map(|(p, o)| anomaly_score(p, o))
        .collect::<Result<Vec<_>>>()?;
    Ok(Detection {
        time_indices: targets,
        observed,
        predicted,
        scores,
        n_calls,
        traces,
    })
}

/// Score a labelled test set and pick the best-F1 threshold.
pub fn detect(
    ds: &TimeSeriesDataset,
    model: &Tfdpm,
    mode: Mode<'_>,
    opts: &DetectOptions,
) -> Result<(Detection, DetectionReport)> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Evaluation("test data has no labels".into()))?;
    let det = predict_and_score(ds, model, mode, opts)?;
    let report = det.report(labels)?;
    Ok((det, report))
}
