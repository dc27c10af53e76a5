//! Condition extractors mapping a history window `[B, omega, D]` to the
//! feature vector `F_t` `[B, hidden]`.

use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gat::{Adjacency, GatLayer};
use crate::nn::{init_uniform, zeros, Conv1d, Gru, ParamId, ParamStore};
use crate::tape::{Tape, Tensor, Var};

pub const SMOOTHING_KERNEL: usize = 5;
pub const TCN_FILTER_SIZES: [usize; 3] = [3, 5, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Gru,
    DoubleGat,
    TcnGat,
}

impl ExtractorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gru => "gru",
            Self::DoubleGat => "double_gat",
            Self::TcnGat => "tcn_gat",
        }
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(Self::Gru),
            "double_gat" => Ok(Self::DoubleGat),
            "tcn_gat" => Ok(Self::TcnGat),
            other => Err(Error::Config(format!(
                "unknown extractor {other:?} (expected gru, double_gat or tcn_gat)"
            ))),
        }
    }
}

impl std::fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub hidden_size: usize,
    pub smoothing_kernel: usize,
    pub tcn_filter_sizes: [usize; 3],
    /// Neighbourhood of the feature-oriented GAT (nodes = channels).
    pub feature_adjacency: Adjacency,
    /// Neighbourhood of the time-oriented GAT (nodes = timesteps).
    pub time_adjacency: Adjacency,
}

impl ExtractorConfig {
    pub fn new(kind: ExtractorKind, hidden_size: usize) -> Self {
        Self {
            kind,
            hidden_size,
            smoothing_kernel: SMOOTHING_KERNEL,
            tcn_filter_sizes: TCN_FILTER_SIZES,
            feature_adjacency: Adjacency::Complete,
            time_adjacency: Adjacency::Complete,
        }
    }
}

/// Condition vector for the target at `time_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureState {
    pub vector: Vec<f64>,
    pub time_index: usize,
}

/// Depthwise (per-channel) convolution over time with zero "same" padding.
#[derive(Debug, Clone)]
pub struct Smoother {
    pub kernel: usize,
    /// `[kernel, D]`.
    pub weight: ParamId,
    /// `[D]`.
    pub bias: ParamId,
}

impl Smoother {
    /// Initialised to the identity tap `[0, .., 1, .., 0]`.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, kernel: usize) -> Self {
        let mut w = zeros(&[kernel, dim]);
        w.index_axis_mut(Axis(0), kernel / 2).fill(1.0);
        Self {
            kernel,
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        smooth(x, tape.param(store, self.weight), tape.param(store, self.bias))
    }
}

/// `out[b, t, d] = bias[d] + Σ_k w[k, d] · x[b, t + k - (K-1)/2, d]`.
pub fn smooth<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let omega = x.shape()[1];
    let k = weight.shape()[0];
    let left = (k - 1) / 2;
    let padded = x.pad(1, left, k - 1 - left);
    let mut out = bias;
    for tap in 0..k {
        out = out + padded.narrow(1, tap, omega) * weight.narrow(0, tap, 1);
    }
    out
}

/// Three parallel channel-preserving convolutions, averaged.
#[derive(Debug, Clone)]
pub struct TcnBlock {
    pub branches: Vec<Conv1d>,
}

impl TcnBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, sizes: [usize; 3]) -> Self {
        Self {
            branches: sizes
                .iter()
                .map(|&k| Conv1d::new(store, rng, &format!("{name}.k{k}"), dim, dim, k, 1, true))
                .collect(),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let mut sum = self.branches[0].forward(tape, store, x);
        for b in &self.branches[1..] {
            sum = sum + b.forward(tape, store, x);
        }
        sum.scale(1.0 / self.branches.len() as f64)
    }
}

/// Feature-oriented GAT: nodes are channels, node features the time series.
fn feature_gat<'t>(gat: &GatLayer, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
    Ok(gat.forward(tape, store, x.permute(&[0, 2, 1]))?.permute(&[0, 2, 1]))
}

#[derive(Debug, Clone)]
enum Parts {
    Gru {
        gru: Gru,
    },
    DoubleGat {
        smooth: Smoother,
        time_gat: GatLayer,
        feat_gat: GatLayer,
        gru: Gru,
    },
    TcnGat {
        smooth: Smoother,
        tcn1: TcnBlock,
        gat1: GatLayer,
        tcn2: TcnBlock,
        gat2: GatLayer,
        gru: Gru,
    },
}

/// Intermediate activations of an extractor, exposed for inspection.
pub struct Trace<'t> {
    pub smoothed: Option<Var<'t>>,
    pub branches: Vec<Var<'t>>,
    pub sequence: Var<'t>,
    pub output: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub dim: usize,
    pub omega: usize,
    parts: Parts,
}

impl Extractor {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: ExtractorConfig,
        dim: usize,
        omega: usize,
    ) -> Result<Self> {
        let min_omega = match config.kind {
            ExtractorKind::Gru => 1,
            _ => 2,
        };
        if omega < min_omega || dim == 0 || config.hidden_size == 0 {
            return Err(Error::Config(format!(
                "{} extractor needs omega >= {min_omega}, D >= 1, hidden >= 1 (got omega={omega}, D={dim}, hidden={})",
                config.kind, config.hidden_size
            )));
        }
        let h = config.hidden_size;
        let parts = match config.kind {
            ExtractorKind::Gru => Parts::Gru {
                gru: Gru::new(store, rng, "extractor.gru", dim, h),
            },
            ExtractorKind::DoubleGat => Parts::DoubleGat {
                smooth: Smoother::new(store, "extractor.smooth", dim, config.smoothing_kernel),
                time_gat: GatLayer::new(store, rng, "extractor.time_gat", dim, dim, config.time_adjacency.clone()),
                feat_gat: GatLayer::new(
                    store,
                    rng,
                    "extractor.feat_gat",
                    omega,
                    omega,
                    config.feature_adjacency.clone(),
                ),
                gru: Gru::new(store, rng, "extractor.gru", 3 * dim, h),
            },
            ExtractorKind::TcnGat => Parts::TcnGat {
                smooth: Smoother::new(store, "extractor.smooth", dim, config.smoothing_kernel),
                tcn1: TcnBlock::new(store, rng, "extractor.block1.tcn", dim, config.tcn_filter_sizes),
                gat1: GatLayer::new(
                    store,
                    rng,
                    "extractor.block1.gat",
                    omega,
                    omega,
                    config.feature_adjacency.clone(),
                ),
                tcn2: TcnBlock::new(store, rng, "extractor.block2.tcn", dim, config.tcn_filter_sizes),
                gat2: GatLayer::new(
                    store,
                    rng,
                    "extractor.block2.gat",
                    omega,
                    omega,
                    config.feature_adjacency.clone(),
                ),
                gru: Gru::new(store, rng, "extractor.gru", 3 * dim, h),
            },
        };
        Ok(Self {
            config,
            dim,
            omega,
            parts,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    /// `[B, omega, D]` → `[B, hidden]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, window: Var<'t>) -> Result<Var<'t>> {
        Ok(self.trace(tape, store, window)?.output)
    }

    pub fn trace<'t>(&self, tape: &'t Tape, store: &ParamStore, window: Var<'t>) -> Result<Trace<'t>> {
        let shape = window.shape();
        if shape.len() != 3 || shape[1] != self.omega || shape[2] != self.dim {
            return Err(Error::Shape(format!(
                "extractor expects [B, {}, {}], got {shape:?}",
                self.omega, self.dim
            )));
        }
        match &self.parts {
            Parts::Gru { gru } => Ok(Trace {
                smoothed: None,
                branches: Vec::new(),
                sequence: window,
                output: gru.forward(tape, store, window),
            }),
            Parts::DoubleGat {
                smooth,
                time_gat,
                feat_gat,
                gru,
            } => {
                let s = smooth.forward(tape, store, window);
                let gt = time_gat.forward(tape, store, s)?;
                let gf = feature_gat(feat_gat, tape, store, s)?;
                let seq = tape.concat(&[gt, gf, s], 2);
                Ok(Trace {
                    smoothed: Some(s),
                    branches: vec![gt, gf],
                    sequence: seq,
                    output: gru.forward(tape, store, seq),
                })
            }
            Parts::TcnGat {
                smooth,
                tcn1,
                gat1,
                tcn2,
                gat2,
                gru,
            } => {
                let s = smooth.forward(tape, store, window);
                let b1 = feature_gat(gat1, tape, store, tcn1.forward(tape, store, s))?;
                let in2 = (b1 + s).scale(0.5);
                let b2 = feature_gat(gat2, tape, store, tcn2.forward(tape, store, in2))?;
                let seq = tape.concat(&[b1, b2, s], 2);
                Ok(Trace {
                    smoothed: Some(s),
                    branches: vec![b1, in2, b2],
                    sequence: seq,
                    output: gru.forward(tape, store, seq),
                })
            }
        }
    }

    /// Evaluate on plain arrays: `windows` is `[B, omega, D]`.
    pub fn extract(
        &self,
        store: &ParamStore,
        windows: &ndarray::Array3<f64>,
        time_indices: &[usize],
    ) -> Result<Vec<FeatureState>> {
        let tape = Tape::new();
        let f = self.forward(&tape, store, tape.constant(windows.clone().into_dyn()))?;
        let f: Array2<f64> = (*f.value()).clone().into_dimensionality().expect("2-d features");
        Ok(f.rows()
            .into_iter()
            .zip(time_indices)
            .map(|(r, &t)| FeatureState {
                vector: r.to_vec(),
                time_index: t,
            })
            .collect())
    }
}

/// Small random initialisation helper for tests and benches.
pub fn random_window(rng: &mut impl Rng, b: usize, omega: usize, dim: usize) -> Tensor {
    init_uniform(rng, &[b, omega, dim], 1)
}
