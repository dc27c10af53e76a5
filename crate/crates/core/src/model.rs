//! The conditional diffusion predictor: extractor and noise-prediction
//! network trained jointly on windowed data.

use log::info;
use ndarray::{Array2, Array3, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::dataset::{ChannelSpec, NormStats, TimeSeriesDataset, WindowBatch};
use crate::diffusion::{own_levels, sample, NoiseSchedule, SamplerNoise};
use crate::eps_net::{to2, EpsNet};
use crate::error::{Error, Result};
use crate::extractors::{Extractor, ExtractorConfig};
use crate::nn::{clip_grad_norm, Adam, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Tfdpm {
    pub config: RunConfig,
    pub dim: usize,
    pub channels: Vec<ChannelSpec>,
    pub norm_stats: NormStats,
    pub store: ParamStore,
    pub extractor: Extractor,
    pub eps_net: EpsNet,
    pub schedule: NoiseSchedule,
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub steps: u64,
}

/// Draws for one training batch: diffusion step, noise and loss multiplier
/// per element.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    pub eps: Array2<f64>,
    pub weights: Vec<f64>,
}

impl NoiseDraw {
    /// Steps drawn with probability proportional to the SNR loss weight, each
    /// term scaled by the mean weight. The expected loss and gradient equal
    /// those of uniform steps with per-step weights, at far lower variance:
    /// the weights span several orders of magnitude.
    pub fn sample(rng: &mut impl Rng, batch: usize, dim: usize, schedule: &NoiseSchedule) -> Self {
        let w: Vec<f64> = (1..=schedule.steps()).map(|n| schedule.loss_weight(n)).collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let pick = WeightedIndex::new(&w).expect("loss weights are positive");
        let steps = (0..batch).map(|_| rng.sample(&pick) + 1).collect();
        let eps = Array2::from_shape_fn((batch, dim), |_| rng.sample(StandardNormal));
        Self {
            steps,
            eps,
            weights: vec![mean; batch],
        }
    }

    /// Uniform steps with the per-step SNR weight on each term.
    pub fn uniform(rng: &mut impl Rng, batch: usize, dim: usize, schedule: &NoiseSchedule) -> Self {
        let steps: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let eps = Array2::from_shape_fn((batch, dim), |_| rng.sample(StandardNormal));
        Self::weighted(schedule, steps, eps)
    }

    /// Given steps and noise, weighted by the SNR loss weight.
    pub fn weighted(schedule: &NoiseSchedule, steps: Vec<usize>, eps: Array2<f64>) -> Self {
        let weights = steps.iter().map(|&n| schedule.loss_weight(n)).collect();
        Self { steps, eps, weights }
    }
}

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

impl Tfdpm {
    /// Fresh model for data of `dim` expanded columns; parameters are
    /// initialised from `config.seed`.
    pub fn new(config: &RunConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let extractor = Extractor::new(
            &mut store,
            &mut rng,
            ExtractorConfig::new(config.extractor, config.hidden_size),
            dim,
            config.window,
        )?;
        let eps_net = EpsNet::new(&mut store, &mut rng, dim, config.residual_channels, config.hidden_size);
        let schedule = NoiseSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end)?;
        Ok(Self {
            config: config.clone(),
            dim,
            channels: Vec::new(),
            norm_stats: NormStats {
                min: vec![0.0; dim],
                max: vec![1.0; dim],
            },
            store,
            extractor,
            eps_net,
            schedule,
        })
    }

    /// Fresh model carrying the dataset's schema and normalisation stats.
    pub fn for_dataset(config: &RunConfig, ds: &TimeSeriesDataset) -> Result<Self> {
        let mut m = Self::new(config, ds.dim())?;
        m.channels = ds.channels.clone();
        m.norm_stats = ds.norm_stats.clone();
        Ok(m)
    }

    pub fn omega(&self) -> usize {
        self.config.window
    }

    /// Mean weighted loss of a batch as a tape scalar.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        histories: &Array3<f64>,
        targets: &Array2<f64>,
        draw: &NoiseDraw,
    ) -> Result<Var<'t>> {
        Ok(self.loss_terms(tape, histories, targets, draw)?.mean())
    }

    /// Per-element weighted losses `[B]`.
    pub fn loss_terms<'t>(
        &self,
        tape: &'t Tape,
        histories: &Array3<f64>,
        targets: &Array2<f64>,
        draw: &NoiseDraw,
    ) -> Result<Var<'t>> {
        let b = targets.nrows();
        if histories.shape()[0] != b
            || draw.steps.len() != b
            || draw.weights.len() != b
            || draw.eps.dim() != targets.dim()
        {
            return Err(Error::Shape("batch components disagree in size".into()));
        }
        for &n in &draw.steps {
            self.schedule.check_step(n)?;
        }
        let f = self.extractor.forward(tape, &self.store, tape.constant(histories.clone().into_dyn()))?;
        let mut xn = targets.clone();
        for (mut row, (&n, e)) in xn.rows_mut().into_iter().zip(draw.steps.iter().zip(draw.eps.rows())) {
            let ab = self.schedule.alpha_bar(n);
            row.zip_mut_with(&e, |x, &e| *x = ab.sqrt() * *x + (1.0 - ab).sqrt() * e);
        }
        let levels: Vec<f64> = draw.steps.iter().map(|&n| self.schedule.noise_level(n)).collect();
        let eps_hat = self.eps_net.forward(tape, &self.store, tape.constant(xn.into_dyn()), &levels, f)?;
        let weights = ndarray::Array1::from(draw.weights.clone());
        let sq = (eps_hat - tape.constant(draw.eps.clone().into_dyn())).square().sum_axis(1, false);
        Ok(sq * tape.constant(weights.into_dyn()))
    }

    /// One optimiser step on a batch with the given draws. Returns the mean
    /// loss before the update.
    pub fn train_step_with(&mut self, batch: &WindowBatch, draw: &NoiseDraw, adam: &mut Adam) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Shape("empty training batch".into()));
        }
        let (mut grads, value) = {
            let tape = Tape::new();
            let terms = self.loss_terms(&tape, &batch.histories, &batch.targets, draw)?;
            let loss = terms.mean();
            let value = loss.item();
            if !value.is_finite() {
                let t = terms.value();
                let k = t.iter().position(|v| !v.is_finite()).unwrap_or(0);
                let n = draw.steps[k];
                return Err(Error::NonFiniteLoss {
                    step: adam.steps(),
                    n,
                    x_norm: batch.targets.row(k).iter().map(|v| v * v).sum::<f64>().sqrt(),
                    weight: draw.weights[k],
                });
            }
            let g = tape.backward(loss);
            (vec![g.for_store(&self.store)], value)
        };
        clip_grad_norm(&mut grads, self.config.grad_clip);
        adam.update(&mut self.store, &grads[0]);
        Ok(value)
    }

    /// One optimiser step with fresh draws from `rng`.
    pub fn train_step(&mut self, batch: &WindowBatch, adam: &mut Adam, rng: &mut impl Rng) -> Result<f64> {
        let draw = NoiseDraw::sample(rng, batch.len(), self.dim, &self.schedule);
        self.train_step_with(batch, &draw, adam)
    }

    /// Mean loss over the windows ending at `targets`, with draws from a
    /// generator seeded identically on every call.
    pub fn evaluate_loss(&self, ds: &TimeSeriesDataset, targets: &[usize], seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(VAL_STREAM);
        let mut total = 0.0;
        for chunk in targets.chunks(self.config.batch_size.max(1)) {
            let batch = ds.gather(self.omega(), chunk);
            let draw = NoiseDraw::sample(&mut rng, batch.len(), self.dim, &self.schedule);
            let tape = Tape::new();
            total += self.loss_terms(&tape, &batch.histories, &batch.targets, &draw)?.sum().item();
        }
        Ok(total / targets.len().max(1) as f64)
    }

    /// Train with shuffled mini-batches, early stopping on the last
    /// `val_fraction` of windows (chronologically) and restoring the best
    /// parameters.
    pub fn fit(&mut self, train: &TimeSeriesDataset) -> Result<TrainReport> {
        if train.dim() != self.dim {
            return Err(Error::Schema(format!(
                "model expects {} columns, data has {}",
                self.dim,
                train.dim()
            )));
        }
        let all: Vec<usize> = train.window_targets(self.omega())?.collect();
        let n_val = (all.len() as f64 * self.config.val_fraction).floor() as usize;
        let (fit_idx, val_idx) = all.split_at(all.len() - n_val);
        if fit_idx.is_empty() {
            return Err(Error::Config("no training windows left after validation split".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(TRAIN_STREAM);
        let mut adam = Adam::new(&self.store, self.config.learning_rate);
        let mut order = fit_idx.to_vec();
        let mut report = TrainReport::default();
        let mut best = (f64::INFINITY, self.store.clone());
        let mut bad_epochs = 0;

        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch = train.gather(self.omega(), chunk);
                sum += self.train_step(&batch, &mut adam, &mut rng)? * chunk.len() as f64;
            }
            let epoch_loss = sum / order.len() as f64;
            report.epoch_losses.push(epoch_loss);
            let criterion = if val_idx.is_empty() {
                epoch_loss
            } else {
                self.evaluate_loss(train, val_idx, self.config.seed)?
            };
            report.val_losses.push(criterion);
            info!("epoch {:>2}: train loss {epoch_loss:.4}, validation loss {criterion:.4}", epoch + 1);
            if criterion < best.0 {
                best = (criterion, self.store.clone());
                report.best_epoch = epoch;
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs >= self.config.patience {
                    report.stopped_early = true;
                    info!("early stop after epoch {}", epoch + 1);
                    break;
                }
            }
        }
        report.steps = adam.steps();
        // Keep the same store identity so existing gradients map cleanly.
        for id in best.1.ids() {
            self.store.set(id, best.1.get(id).clone());
        }
        Ok(report)
    }

    /// Condition vectors `[B, H]` for history windows `[B, omega, D]`.
    pub fn features(&self, histories: &Array3<f64>) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let f = self.extractor.forward(&tape, &self.store, tape.constant(histories.clone().into_dyn()))?;
        Ok(to2(&f.value()))
    }

    /// Noise prediction for `x` `[B, D]` at per-row levels.
    pub fn predict_eps(&self, x: &Array2<f64>, levels: &[f64], features: &Array2<f64>) -> Result<Array2<f64>> {
        self.eps_net.predict(&self.store, x, levels, features)
    }

    /// Full ancestral sampler: one draw per row of `features`, `N_s`
    /// network calls.
    pub fn sample_full<R: Rng>(&self, features: &Array2<f64>, rngs: &mut [R], noise: SamplerNoise) -> Result<Array2<f64>> {
        let levels = own_levels(&self.schedule);
        sample(
            &self.schedule,
            &levels,
            self.dim,
            |x, _, level| self.predict_eps(x, &vec![level; x.nrows()], features),
            rngs,
            noise,
        )
    }

    /// Per-row generator for the target at time `t`, independent of batching.
    pub fn row_rng(seed: u64, t: usize, draw: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ (draw as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        r.set_stream(t as u64);
        r
    }

    /// Stack history windows for the given targets.
    pub fn histories(&self, ds: &TimeSeriesDataset, targets: &[usize]) -> Array3<f64> {
        ds.gather(self.omega(), targets).histories
    }
}

/// Stack `[B, omega, D]` windows from per-row arrays.
pub fn stack_windows(rows: &[ndarray::ArrayView2<f64>]) -> Array3<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("windows share a shape")
}
