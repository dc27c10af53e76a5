//! Conditional diffusion models for attack detection on multivariate
//! cyber-physical time series: temporal-convolution and graph-attention
//! feature extraction, a denoising diffusion predictor, a learned noise
//! scheduler for short reverse processes, and best-F1 evaluation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detection;
pub mod diffusion;
pub mod eps_net;
pub mod error;
pub mod extractors;
pub mod gat;
pub mod model;
pub mod nn;
pub mod scheduler;
pub mod synth;
pub mod tape;

pub use checkpoint::{load_model, load_scheduler, model_hash, save_model, save_scheduler};
pub use config::RunConfig;
pub use dataset::{load_dataset, ChannelKind, ChannelSpec, NormStats, RawTable, TimeSeriesDataset, WindowBatch};
pub use detection::{best_f1_search, detect, predict_and_score, DetectOptions, Detection, DetectionReport, Mode};
pub use diffusion::{linear_schedule, NoiseSchedule, SamplerNoise};
pub use error::{Error, Result};
pub use extractors::ExtractorKind;
pub use model::{Tfdpm, TrainReport};
pub use scheduler::{
    train_scheduler, tune_init, FastScheduleTrace, SchedulerNet, SchedulerReport, SchedulerTraining, StopReason,
    TuneOptions, TuneReport,
};
pub use synth::{synth_cps, Scenario, SynthRun};
