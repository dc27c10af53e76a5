//! Learned noise scheduling and the accelerated sampler.
//!
//! A small network `σ_φ(x_n, F) ∈ (0, 1)` scales the admissible upper bound
//! on the next (smaller) noise scale. Starting from `(ᾱ̂_N, β̂_N)` the sampler
//! walks down the learned scales until one falls below the training
//! schedule's `β_1`, then reruns the ancestral sampler over the short
//! schedule it collected.

use log::{info, warn};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::TimeSeriesDataset;
use crate::detection::best_f1_search;
use crate::diffusion::{gaussian_rows, NoiseSchedule, SamplerNoise};
use crate::error::{Error, Result};
use crate::model::Tfdpm;
use crate::nn::{clip_grad_norm, Adam, Linear, ParamStore};
use crate::tape::{Tape, Var};

/// Logits are clamped so `σ` stays strictly inside (0, 1) in floating point.
const LOGIT_LIMIT: f64 = 30.0;
const TRAIN_STREAM: u64 = 11;
const VAL_STREAM: u64 = 12;

#[derive(Debug, Clone)]
pub struct SchedulerNet {
    pub store: ParamStore,
    pub dim: usize,
    pub cond_size: usize,
    pub hidden: usize,
    pub tau: usize,
    pub init_alpha_bar: f64,
    pub init_beta: f64,
    pub beta_floor: f64,
    l1: Linear,
    l2: Linear,
}

/// Upper bound on `β̂_n` given the next (larger) scale and cumulative product:
/// `min{1 − ᾱ̂_{n+1} / (1 − β̂_{n+1}), β̂_{n+1}}`.
pub fn beta_bound(beta_next: f64, alpha_bar_next: f64) -> f64 {
    (1.0 - alpha_bar_next / (1.0 - beta_next)).min(beta_next)
}

/// `β̂_n = bound · σ`.
pub fn next_beta(beta_next: f64, alpha_bar_next: f64, sigma: f64) -> Result<f64> {
    if !(beta_next > 0.0 && beta_next < 1.0 && alpha_bar_next > 0.0 && alpha_bar_next < 1.0) {
        return Err(Error::Schedule(format!(
            "need beta and alpha_bar in (0, 1), got {beta_next} and {alpha_bar_next}"
        )));
    }
    let bound = beta_bound(beta_next, alpha_bar_next);
    if bound <= 0.0 {
        return Err(Error::Schedule(format!(
            "no admissible scale below beta {beta_next} with alpha_bar {alpha_bar_next}"
        )));
    }
    Ok(bound * sigma)
}

/// Scale that makes one step equal `tau` steps of the base schedule from `n`:
/// `1 − ᾱ_{n+τ} / ᾱ_n`.
pub fn stride_beta(schedule: &NoiseSchedule, n: usize, tau: usize) -> Result<f64> {
    schedule.check_step(n)?;
    schedule.check_step(n + tau)?;
    Ok(1.0 - schedule.alpha_bar(n + tau) / schedule.alpha_bar(n))
}

/// `¼ log((1 − ᾱ̂)/β̂) + (D/2)(β̂/(1 − ᾱ̂) − 1)`.
pub fn c_n(alpha_bar: f64, beta: f64, dim: usize) -> f64 {
    let r2 = 1.0 - alpha_bar;
    0.25 * (r2 / beta).ln() + 0.5 * dim as f64 * (beta / r2 - 1.0)
}

/// Per-sample scheduling loss for noise `eps`, frozen prediction `eps_hat`,
/// learned scale `beta` and cumulative product `alpha_bar`.
pub fn scheduler_loss(eps: &[f64], eps_hat: &[f64], beta: f64, alpha_bar: f64) -> Result<f64> {
    if eps.len() != eps_hat.len() || eps.is_empty() {
        return Err(Error::Shape(format!("{} noise entries, {} predicted", eps.len(), eps_hat.len())));
    }
    let denom = 1.0 - beta - alpha_bar;
    if !(denom > 0.0) || !(beta > 0.0) {
        return Err(Error::Schedule(format!(
            "loss undefined for beta {beta} with alpha_bar {alpha_bar}"
        )));
    }
    let r = (1.0 - alpha_bar).sqrt();
    let sq: f64 = eps.iter().zip(eps_hat).map(|(e, h)| (r * e - beta / r * h).powi(2)).sum();
    Ok(sq / (2.0 * denom) + c_n(alpha_bar, beta, eps.len()))
}

/// Batched loss on the tape. `beta` is `[B]`; the squared norm is expanded as
/// `r²|ε|² − 2β ε·ε̂ + β²|ε̂|²/r²` so only `beta` carries gradients.
fn loss_terms<'t>(
    tape: &'t Tape,
    beta: Var<'t>,
    alpha_bar: &[f64],
    eps: &Array2<f64>,
    eps_hat: &Array2<f64>,
) -> Var<'t> {
    let d = eps.ncols() as f64;
    let r2 = Array1::from_iter(alpha_bar.iter().map(|a| 1.0 - a));
    let ee = (eps * eps).sum_axis(Axis(1)) * &r2;
    let eh = (eps * eps_hat).sum_axis(Axis(1)) * -2.0;
    let hh = (eps_hat * eps_hat).sum_axis(Axis(1)) / &r2;
    let c = |a: Array1<f64>| tape.constant(a.into_dyn());
    let sq = c(ee) + beta * c(eh) + beta.square() * c(hh);
    let denom = (c(r2.clone()) - beta).scale(2.0);
    let log_term = (c(r2.mapv(f64::ln)) - beta.ln()).scale(0.25);
    let lin = (beta / c(r2)).add_scalar(-1.0).scale(0.5 * d);
    sq / denom + log_term + lin
}

/// One learned step of the fast sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub beta_next: f64,
    pub alpha_bar_next: f64,
    pub bound: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// A candidate fell below the floor.
    HitFloor,
    /// The loop ran out of steps or no admissible smaller scale remained.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastScheduleTrace {
    /// Accepted scales in push order, starting with `β̂_N`.
    pub betas_used: Vec<f64>,
    pub steps: Vec<ScheduleStep>,
    pub stop_reason: StopReason,
    /// The candidate that ended the walk by falling under the floor.
    pub rejected: Option<f64>,
    pub n_calls: usize,
    pub fell_back: bool,
}

impl FastScheduleTrace {
    pub fn len(&self) -> usize {
        self.betas_used.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas_used.is_empty()
    }

    /// Short schedule in ascending order, ready for the standard sampler.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_betas(self.betas_used.iter().rev().copied().collect())
    }
}

/// Per-epoch record of scheduler training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchedulerReport {
    pub epoch_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub redraws: usize,
}

impl SchedulerNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut impl Rng,
        dim: usize,
        cond_size: usize,
        hidden: usize,
        tau: usize,
        init_alpha_bar: f64,
        init_beta: f64,
        beta_floor: f64,
    ) -> Result<Self> {
        if tau == 0 || hidden == 0 {
            return Err(Error::Config("tau and the scheduler width must be >= 1".into()));
        }
        for (name, v) in [("alpha_bar_n", init_alpha_bar), ("beta_n", init_beta), ("beta floor", beta_floor)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, rng, "sched.l1", dim + cond_size, hidden, true);
        let l2 = Linear::new(&mut store, rng, "sched.l2", hidden, 1, true);
        Ok(Self {
            store,
            dim,
            cond_size,
            hidden,
            tau,
            init_alpha_bar,
            init_beta,
            beta_floor,
            l1,
            l2,
        })
    }

    /// Untrained network matching `model`, with `τ`, `(ᾱ̂_N, β̂_N)` and
    /// width from the model's configuration and the floor at `β_1`.
    pub fn for_model(model: &Tfdpm) -> Result<Self> {
        Self::for_model_seeded(model, model.config.seed)
    }

    /// As [`SchedulerNet::for_model`] with an explicit initialisation seed.
    pub fn for_model_seeded(model: &Tfdpm, seed: u64) -> Result<Self> {
        let cfg = &model.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRAIN_STREAM);
        Self::new(
            &mut rng,
            model.dim,
            cfg.hidden_size,
            cfg.scheduler_hidden,
            cfg.tau,
            cfg.alpha_bar_n,
            cfg.beta_n,
            model.schedule.beta(1),
        )
    }

    pub fn l1(&self) -> &Linear {
        &self.l1
    }

    pub fn l2(&self) -> &Linear {
        &self.l2
    }

    fn sigma_var<'t>(&self, tape: &'t Tape, x: &Array2<f64>, features: &Array2<f64>) -> Result<Var<'t>> {
        if x.ncols() != self.dim || features.ncols() != self.cond_size || x.nrows() != features.nrows() {
            return Err(Error::Shape(format!(
                "scheduler expects x [B, {}] and features [B, {}], got {:?} and {:?}",
                self.dim,
                self.cond_size,
                x.shape(),
                features.shape()
            )));
        }
        let b = x.nrows();
        let input = tape.concat(
            &[tape.constant(x.clone().into_dyn()), tape.constant(features.clone().into_dyn())],
            1,
        );
        let h = self.l1.forward(tape, &self.store, input).tanh();
        let logit = self.l2.forward(tape, &self.store, h).reshape(&[b]);
        Ok(logit.clamp(-LOGIT_LIMIT, LOGIT_LIMIT).sigmoid())
    }

    /// `σ_φ(x, F)` per row.
    pub fn sigma(&self, x: &Array2<f64>, features: &Array2<f64>) -> Result<Vec<f64>> {
        let tape = Tape::new();
        Ok(self.sigma_var(&tape, x, features)?.value().iter().copied().collect())
    }

    /// Fast sampler: one draw per row of `features`.
    pub fn fast_sample<R: Rng>(
        &self,
        model: &Tfdpm,
        features: &Array2<f64>,
        rngs: &mut [R],
        noise: SamplerNoise,
    ) -> Result<(Array2<f64>, Vec<FastScheduleTrace>)> {
        if self.dim != model.dim || self.cond_size != features.ncols() {
            return Err(Error::Shape(format!(
                "scheduler built for {} columns and {} features, model has {} and {}",
                self.dim,
                self.cond_size,
                model.dim,
                features.ncols()
            )));
        }
        if self.init_beta < self.beta_floor {
            warn!(
                "initial scale {} is below the floor {}; using the full sampler",
                self.init_beta, self.beta_floor
            );
            let x = model.sample_full(features, rngs, noise)?;
            let trace = FastScheduleTrace {
                betas_used: Vec::new(),
                steps: Vec::new(),
                stop_reason: StopReason::Exhausted,
                rejected: None,
                n_calls: model.schedule.steps(),
                fell_back: true,
            };
            return Ok((x, vec![trace; features.nrows()]));
        }
        self.fast_sample_with(
            &model.schedule,
            features,
            |x, levels, rows| {
                let f = features.select(Axis(0), rows);
                model.predict_eps(x, levels, &f)
            },
            rngs,
            noise,
        )
    }

    /// Fast sampler against an arbitrary noise predictor. `eps` receives the
    /// active rows' samples, their conditioning levels on `base`, and their
    /// row indices.
    pub fn fast_sample_with<R: Rng>(
        &self,
        base: &NoiseSchedule,
        features: &Array2<f64>,
        mut eps: impl FnMut(&Array2<f64>, &[f64], &[usize]) -> Result<Array2<f64>>,
        rngs: &mut [R],
        noise: SamplerNoise,
    ) -> Result<(Array2<f64>, Vec<FastScheduleTrace>)> {
        let b = features.nrows();
        if rngs.len() != b {
            return Err(Error::Shape(format!("{} generators for {b} rows", rngs.len())));
        }
        let dim = self.dim;
        let mut x = gaussian_rows(rngs, dim);
        let mut beta = vec![self.init_beta; b];
        let mut abar = vec![self.init_alpha_bar; b];
        let mut traces: Vec<FastScheduleTrace> = (0..b)
            .map(|_| FastScheduleTrace {
                betas_used: vec![self.init_beta],
                steps: Vec::new(),
                stop_reason: StopReason::Exhausted,
                rejected: None,
                n_calls: 0,
                fell_back: false,
            })
            .collect();
        let mut active: Vec<usize> = (0..b).collect();

        for _ in 1..base.steps() {
            if active.is_empty() {
                break;
            }
            let xa = x.select(Axis(0), &active);
            let levels: Vec<f64> = active.iter().map(|&r| base.level_for_alpha_bar(abar[r])).collect();
            let e = eps(&xa, &levels, &active)?;
            if e.dim() != xa.dim() {
                return Err(Error::Shape(format!(
                    "noise prediction {:?} does not match sample {:?}",
                    e.shape(),
                    xa.shape()
                )));
            }
            let mut moved = Array2::zeros(xa.raw_dim());
            for (i, &r) in active.iter().enumerate() {
                let (bt, ab) = (beta[r], abar[r]);
                let alpha = 1.0 - bt;
                let ab_prev = ab / alpha;
                let post = ((1.0 - ab_prev) / (1.0 - ab) * bt).max(0.0);
                let c = bt / (1.0 - ab).sqrt();
                let mut row = moved.row_mut(i);
                row.assign(&((&xa.row(i) - &(&e.row(i) * c)) / alpha.sqrt()));
                if noise == SamplerNoise::Gaussian {
                    let sd = post.sqrt();
                    row.mapv_inplace(|v| v + sd * rngs[r].sample::<f64, _>(StandardNormal));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteSample(traces[r].betas_used.len()));
                }
                traces[r].n_calls += 1;
            }
            let fa = features.select(Axis(0), &active);
            let sig = self.sigma(&moved, &fa)?;
            let mut still = Vec::with_capacity(active.len());
            for (i, &r) in active.iter().enumerate() {
                x.row_mut(r).assign(&moved.row(i));
                let (bt, ab) = (beta[r], abar[r]);
                let bound = beta_bound(bt, ab);
                if bound <= 0.0 {
                    traces[r].stop_reason = StopReason::Exhausted;
                    continue;
                }
                let cand = bound * sig[i];
                traces[r].steps.push(ScheduleStep {
                    beta_next: bt,
                    alpha_bar_next: ab,
                    bound,
                    beta: cand,
                });
                if cand < self.beta_floor {
                    traces[r].stop_reason = StopReason::HitFloor;
                    traces[r].rejected = Some(cand);
                    continue;
                }
                traces[r].betas_used.push(cand);
                beta[r] = cand;
                abar[r] = ab / (1.0 - bt);
                still.push(r);
            }
            active = still;
        }

        let schedules = traces.iter().map(|t| t.schedule()).collect::<Result<Vec<_>>>()?;
        let out = run_short_schedules(base, &schedules, dim, eps, rngs, noise)?;
        for (t, s) in traces.iter_mut().zip(&schedules) {
            t.n_calls += s.steps();
        }
        Ok((out, traces))
    }
}

/// Ancestral sampler with a separate schedule per row, aligned so every row
/// finishes at its own step 1. Levels are matched to `base` by cumulative
/// product.
pub fn run_short_schedules<R: Rng>(
    base: &NoiseSchedule,
    schedules: &[NoiseSchedule],
    dim: usize,
    mut eps: impl FnMut(&Array2<f64>, &[f64], &[usize]) -> Result<Array2<f64>>,
    rngs: &mut [R],
    noise: SamplerNoise,
) -> Result<Array2<f64>> {
    if schedules.len() != rngs.len() {
        return Err(Error::Shape(format!("{} schedules for {} generators", schedules.len(), rngs.len())));
    }
    let mut x = gaussian_rows(rngs, dim);
    let longest = schedules.iter().map(NoiseSchedule::steps).max().unwrap_or(0);
    for k in (1..=longest).rev() {
        let active: Vec<usize> = (0..schedules.len()).filter(|&r| schedules[r].steps() >= k).collect();
        let xa = x.select(Axis(0), &active);
        let levels: Vec<f64> = active
            .iter()
            .map(|&r| base.level_for_alpha_bar(schedules[r].alpha_bar(k)))
            .collect();
        let e = eps(&xa, &levels, &active)?;
        if e.dim() != xa.dim() {
            return Err(Error::Shape(format!(
                "noise prediction {:?} does not match sample {:?}",
                e.shape(),
                xa.shape()
            )));
        }
        for (i, &r) in active.iter().enumerate() {
            let s = &schedules[r];
            let c = s.beta(k) / (1.0 - s.alpha_bar(k)).sqrt();
            let mut row = x.row_mut(r);
            row.assign(&((&xa.row(i) - &(&e.row(i) * c)) / s.alpha(k).sqrt()));
            if k > 1 && noise == SamplerNoise::Gaussian {
                let sd = s.posterior_beta(k).sqrt();
                row.mapv_inplace(|v| v + sd * rngs[r].sample::<f64, _>(StandardNormal));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteSample(k));
            }
        }
    }
    Ok(x)
}

/// Draws for one scheduler batch.
#[derive(Debug, Clone)]
struct SchedDraw {
    steps: Vec<usize>,
    eps: Array2<f64>,
}

/// Training windows with frozen features, computed once.
struct Frozen {
    features: Array2<f64>,
    targets: Array2<f64>,
}

impl Frozen {
    fn new(model: &Tfdpm, ds: &TimeSeriesDataset, idx: &[usize]) -> Result<Self> {
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for chunk in idx.chunks(256) {
            let batch = ds.gather(model.omega(), chunk);
            features.push(model.features(&batch.histories)?);
            targets.push(batch.targets);
        }
        let cat = |v: Vec<Array2<f64>>| {
            let views: Vec<_> = v.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("same widths")
        };
        Ok(Self {
            features: cat(features),
            targets: cat(targets),
        })
    }
}

/// Scheduler training setup derived from a run configuration.
#[derive(Debug, Clone)]
pub struct SchedulerTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl From<&RunConfig> for SchedulerTraining {
    fn from(c: &RunConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            grad_clip: c.grad_clip,
            patience: c.patience,
            val_fraction: c.val_fraction,
            seed: c.seed,
        }
    }
}

impl SchedulerNet {
    fn draw(&self, rng: &mut impl Rng, base: &NoiseSchedule, batch: usize) -> SchedDraw {
        let hi = base.steps() - self.tau;
        let steps = (0..batch).map(|_| rng.random_range(2..=hi)).collect();
        let eps = Array2::from_shape_fn((batch, self.dim), |_| rng.sample(StandardNormal));
        SchedDraw { steps, eps }
    }

    /// Per-row `(β̂_{n+1}, ᾱ̂_{n+1}, ᾱ̂_n)` for the drawn steps.
    fn anchors(&self, base: &NoiseSchedule, steps: &[usize]) -> Result<Vec<(f64, f64, f64)>> {
        steps
            .iter()
            .map(|&n| {
                let b_next = stride_beta(base, n, self.tau)?;
                Ok((b_next, base.alpha_bar(n + self.tau), base.alpha_bar(n)))
            })
            .collect()
    }

    /// Mean loss of a batch on the tape, plus the number of rows whose loss
    /// domain was invalid and were dropped.
    fn batch_loss<'t>(
        &self,
        tape: &'t Tape,
        model: &Tfdpm,
        frozen: &Frozen,
        rows: &[usize],
        draw: &SchedDraw,
    ) -> Result<(Var<'t>, usize)> {
        let base = &model.schedule;
        let f = frozen.features.select(Axis(0), rows);
        let x0 = frozen.targets.select(Axis(0), rows);
        let anchors = self.anchors(base, &draw.steps)?;
        let mut xn = x0;
        for (mut row, (&(_, _, ab), e)) in xn.rows_mut().into_iter().zip(anchors.iter().zip(draw.eps.rows())) {
            row.zip_mut_with(&e, |x, &e| *x = ab.sqrt() * *x + (1.0 - ab).sqrt() * e);
        }
        let levels: Vec<f64> = draw.steps.iter().map(|&n| base.noise_level(n)).collect();
        let eps_hat = model.predict_eps(&xn, &levels, &f)?;
        let bounds = Array1::from_iter(anchors.iter().map(|&(b, a, _)| beta_bound(b, a)));
        if bounds.iter().any(|&b| b <= 0.0) {
            return Err(Error::Schedule("stride produced an empty admissible range".into()));
        }
        let sigma = self.sigma_var(tape, &xn, &f)?;
        let beta = sigma * tape.constant(bounds.into_dyn());
        let abar: Vec<f64> = anchors.iter().map(|a| a.2).collect();
        let terms = loss_terms(tape, beta, &abar, &draw.eps, &eps_hat);
        // The domain 1 − β̂ − ᾱ̂ > 0 holds by construction; guard against
        // rounding at σ ≈ 1.
        let beta_v = beta.value();
        let bad = beta_v.iter().zip(&abar).filter(|(b, a)| !(1.0 - **b - **a > 0.0)).count();
        if bad > 0 || terms.value().iter().any(|v| !v.is_finite()) {
            return Ok((terms, bad.max(1)));
        }
        Ok((terms.mean(), 0))
    }

    fn eval_loss(&self, model: &Tfdpm, frozen: &Frozen, rows: &[usize], seed: u64, batch: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(VAL_STREAM);
        let mut total = 0.0;
        for chunk in rows.chunks(batch.max(1)) {
            let draw = self.draw(&mut rng, &model.schedule, chunk.len());
            let tape = Tape::new();
            let (l, bad) = self.batch_loss(&tape, model, frozen, chunk, &draw)?;
            if bad > 0 {
                return Err(Error::Schedule("invalid scheduling loss on validation draws".into()));
            }
            total += l.item() * chunk.len() as f64;
        }
        Ok(total / rows.len().max(1) as f64)
    }
}

/// Fit `σ_φ` against a frozen model. Batches whose draws leave the loss
/// domain are redrawn.
pub fn train_scheduler(
    model: &Tfdpm,
    train: &TimeSeriesDataset,
    mut sched: SchedulerNet,
    opts: &SchedulerTraining,
) -> Result<(SchedulerNet, SchedulerReport)> {
    if train.dim() != model.dim || sched.dim != model.dim {
        return Err(Error::Schema(format!(
            "model expects {} columns, data has {}, scheduler {}",
            model.dim,
            train.dim(),
            sched.dim
        )));
    }
    if sched.tau + 2 > model.schedule.steps() {
        return Err(Error::Config(format!(
            "tau must lie in 1..={}, got {}",
            model.schedule.steps() - 2,
            sched.tau
        )));
    }
    let all: Vec<usize> = train.window_targets(model.omega())?.collect();
    let frozen = Frozen::new(model, train, &all)?;
    let rows: Vec<usize> = (0..all.len()).collect();
    let n_val = (rows.len() as f64 * opts.val_fraction).floor() as usize;
    let (fit_rows, val_rows) = rows.split_at(rows.len() - n_val);
    if fit_rows.is_empty() {
        return Err(Error::Config("no training windows left after validation split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut adam = Adam::new(&sched.store, opts.learning_rate);
    let mut order = fit_rows.to_vec();
    let mut report = SchedulerReport::default();
    let mut best = (f64::INFINITY, sched.store.clone());
    let mut bad_epochs = 0;

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let mut attempts = 0;
            let (mut grads, value) = loop {
                let draw = sched.draw(&mut rng, &model.schedule, chunk.len());
                let tape = Tape::new();
                let (loss, bad) = sched.batch_loss(&tape, model, &frozen, chunk, &draw)?;
                if bad == 0 {
                    let value = loss.item();
                    break (vec![tape.backward(loss).for_store(&sched.store)], value);
                }
                report.redraws += 1;
                attempts += 1;
                if attempts >= 100 {
                    return Err(Error::Schedule("scheduling loss stayed undefined after 100 redraws".into()));
                }
            };
            clip_grad_norm(&mut grads, opts.grad_clip);
            adam.update(&mut sched.store, &grads[0]);
            sum += value * chunk.len() as f64;
        }
        let epoch_loss = sum / order.len() as f64;
        report.epoch_losses.push(epoch_loss);
        let criterion = if val_rows.is_empty() {
            epoch_loss
        } else {
            sched.eval_loss(model, &frozen, val_rows, opts.seed, opts.batch_size)?
        };
        report.val_losses.push(criterion);
        info!("scheduler epoch {:>2}: loss {epoch_loss:.4}, validation {criterion:.4}", epoch + 1);
        if criterion < best.0 {
            best = (criterion, sched.store.clone());
            report.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= opts.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    for id in best.1.ids() {
        sched.store.set(id, best.1.get(id).clone());
    }
    Ok((sched, report))
}

/// One evaluated grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha_bar_n: f64,
    pub beta_n: f64,
    pub f1: f64,
    pub mean_calls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub best: GridPoint,
    pub evaluated: Vec<GridPoint>,
}

#[derive(Debug, Clone)]
pub struct TuneOptions {
    pub grid: Vec<f64>,
    pub seed: u64,
    /// Discard pairs whose mean network calls per step exceed this.
    pub max_calls: Option<f64>,
    pub chunk: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            grid: (1..=9).map(|k| k as f64 / 10.0).collect(),
            seed: 0,
            max_calls: None,
            chunk: 256,
        }
    }
}

/// Grid search over `(ᾱ̂_N, β̂_N)` by best F1 of fast-sampler detection on a
/// labelled validation set. Ties go to fewer network calls, then to the
/// earlier grid point. The winning pair is written into `sched`.
pub fn tune_init(
    model: &Tfdpm,
    sched: &mut SchedulerNet,
    val: &TimeSeriesDataset,
    opts: &TuneOptions,
) -> Result<TuneReport> {
    let labels = val
        .labels
        .as_ref()
        .ok_or_else(|| Error::Evaluation("validation data has no labels".into()))?;
    let targets: Vec<usize> = val.window_targets(model.omega())?.collect();
    let scored_labels: Vec<u8> = targets.iter().map(|&t| labels[t]).collect();
    let mut feats = Vec::new();
    for chunk in targets.chunks(opts.chunk.max(1)) {
        feats.push((chunk.to_vec(), model.features(&val.gather(model.omega(), chunk).histories)?));
    }
    let mut evaluated = Vec::new();
    let mut best: Option<GridPoint> = None;
    for &a in &opts.grid {
        for &b in &opts.grid {
            let mut trial = sched.clone();
            trial.init_alpha_bar = a;
            trial.init_beta = b;
            let mut scores = Vec::with_capacity(targets.len());
            let mut calls = 0usize;
            for (chunk, f) in &feats {
                let mut rngs: Vec<_> = chunk.iter().map(|&t| Tfdpm::row_rng(opts.seed, t, 0)).collect();
                let (x, traces) = trial.fast_sample(model, f, &mut rngs, SamplerNoise::Gaussian)?;
                calls += traces.iter().map(|t| t.n_calls).sum::<usize>();
                for (row, &t) in x.rows().into_iter().zip(chunk) {
                    scores.push(crate::detection::anomaly_score(row, val.values.row(t))?);
                }
            }
            let f1 = best_f1_search(&scores, &scored_labels)?.f1;
            let point = GridPoint {
                alpha_bar_n: a,
                beta_n: b,
                f1,
                mean_calls: calls as f64 / targets.len() as f64,
            };
            info!("grid ({a:.1}, {b:.1}): f1 {f1:.4}, {:.1} calls", point.mean_calls);
            evaluated.push(point);
            if opts.max_calls.is_some_and(|m| point.mean_calls > m) {
                continue;
            }
            let better = match best {
                None => true,
                Some(p) => f1 > p.f1 || (f1 == p.f1 && point.mean_calls < p.mean_calls),
            };
            if better {
                best = Some(point);
            }
        }
    }
    let best = best.ok_or_else(|| Error::Evaluation("no grid point met the call budget".into()))?;
    sched.init_alpha_bar = best.alpha_bar_n;
    sched.init_beta = best.beta_n;
    Ok(TuneReport { best, evaluated })
}
