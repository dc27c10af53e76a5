//! Gaussian diffusion: variance schedule, closed-form corruption, posterior,
//! SNR-weighted loss and the ancestral sampler.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Tables indexed by diffusion step `n` in `0..=N`; index 0 is the clean
/// data (`β_0 = 0`, `ᾱ_0 = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_betas: Vec<f64>,
}

impl NoiseSchedule {
    /// `N` evenly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("need at least 2 diffusion steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let step = (beta_end - beta_start) / (steps - 1) as f64;
        let betas = (0..steps).map(|i| beta_start + step * i as f64).collect();
        Self::from_betas(betas)
    }

    /// Schedule from explicit `β_1..β_N`, which must be nondecreasing and
    /// inside (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Schedule("betas must be nondecreasing".into()));
        }
        Ok(Self::tables(betas))
    }

    fn tables(betas: Vec<f64>) -> Self {
        let n = betas.len();
        let mut b = Vec::with_capacity(n + 1);
        b.push(0.0);
        b.extend(betas);
        let alphas: Vec<f64> = b.iter().map(|x| 1.0 - x).collect();
        let mut alpha_bars = vec![1.0; n + 1];
        for i in 1..=n {
            alpha_bars[i] = alpha_bars[i - 1] * alphas[i];
        }
        let mut posterior_betas = vec![0.0; n + 1];
        for i in 1..=n {
            posterior_betas[i] = (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) * b[i];
        }
        Self {
            betas: b,
            alphas,
            alpha_bars,
            posterior_betas,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alphas[n]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bars[n]
    }

    pub fn posterior_beta(&self, n: usize) -> f64 {
        self.posterior_betas[n]
    }

    /// `β_1..β_N`.
    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    /// `ᾱ_1..ᾱ_N`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    pub fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return Err(Error::StepOutOfRange {
                n,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `ᾱ_n / (1 - ᾱ_n)`. At `n = 0` the ratio is infinite; it is replaced
    /// by the linear extrapolation `SNR(1) + (SNR(1) - SNR(2))`.
    pub fn snr(&self, n: usize) -> f64 {
        let raw = |k: usize| self.alpha_bars[k] / (1.0 - self.alpha_bars[k]);
        match n {
            0 if self.steps() >= 2 => 2.0 * raw(1) - raw(2),
            0 => 2.0 * raw(1),
            _ => raw(n),
        }
    }

    /// Loss weight `(N/2)(SNR(n-1) - SNR(n))`.
    pub fn loss_weight(&self, n: usize) -> f64 {
        0.5 * self.steps() as f64 * (self.snr(n - 1) - self.snr(n))
    }

    /// Coefficients `(c0, cn)` of the posterior mean
    /// `μ̃ = c0·x0 + cn·xn`.
    pub fn posterior_coefficients(&self, n: usize) -> (f64, f64) {
        let ab = self.alpha_bars[n];
        let ab_prev = self.alpha_bars[n - 1];
        (
            ab_prev.sqrt() * self.betas[n] / (1.0 - ab),
            self.alphas[n].sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        )
    }

    /// The step's noise level mapped to [0, 1] by
    /// `(α_n - α_N) / (α_1 - α_N)`; 1 is the cleanest step.
    pub fn noise_level(&self, n: usize) -> f64 {
        self.level_of_alpha(self.alphas[n])
    }

    fn level_of_alpha(&self, alpha: f64) -> f64 {
        let (hi, lo) = (self.alphas[1], self.alphas[self.steps()]);
        if hi - lo <= 0.0 {
            return 1.0;
        }
        (alpha - lo) / (hi - lo)
    }

    /// Level of the (fractional) step whose `ᾱ` equals `alpha_bar`, for
    /// conditioning the network on noise levels off the training grid.
    /// Values outside `[ᾱ_N, ᾱ_1]` are clamped to the ends.
    pub fn level_for_alpha_bar(&self, alpha_bar: f64) -> f64 {
        let n_max = self.steps();
        if alpha_bar >= self.alpha_bars[1] {
            return self.noise_level(1);
        }
        if alpha_bar <= self.alpha_bars[n_max] {
            return self.noise_level(n_max);
        }
        // ᾱ is strictly decreasing: find k with ᾱ_k >= a > ᾱ_{k+1}.
        let k = self.alpha_bars[1..].partition_point(|&a| a >= alpha_bar);
        let (a0, a1) = (self.alpha_bars[k], self.alpha_bars[k + 1]);
        let frac = (a0 - alpha_bar) / (a0 - a1);
        let alpha = self.alphas[k] + frac * (self.alphas[k + 1] - self.alphas[k]);
        self.level_of_alpha(alpha)
    }
}

pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// `x_n = √ᾱ_n x0 + √(1-ᾱ_n) ε`.
pub fn forward_sample(
    schedule: &NoiseSchedule,
    x0: ArrayView1<f64>,
    n: usize,
    eps: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    schedule.check_step(n)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {} entries, eps {}", x0.len(), eps.len())));
    }
    let ab = schedule.alpha_bar(n);
    Ok(Zip::from(&x0).and(&eps).map_collect(|&x, &e| ab.sqrt() * x + (1.0 - ab).sqrt() * e))
}

/// Posterior mean and variance of `q(x_{n-1} | x_n, x0)`.
pub fn posterior_params(
    schedule: &NoiseSchedule,
    x0: ArrayView1<f64>,
    xn: ArrayView1<f64>,
    n: usize,
) -> Result<(Array1<f64>, f64)> {
    schedule.check_step(n)?;
    let (c0, cn) = schedule.posterior_coefficients(n);
    Ok((&x0 * c0 + &xn * cn, schedule.posterior_beta(n)))
}

/// Weighted noise-prediction error for one element.
pub fn diffusion_loss(
    schedule: &NoiseSchedule,
    n: usize,
    eps: ArrayView1<f64>,
    eps_hat: ArrayView1<f64>,
) -> Result<f64> {
    schedule.check_step(n)?;
    let sq: f64 = Zip::from(&eps).and(&eps_hat).fold(0.0, |acc, &a, &b| acc + (a - b).powi(2));
    Ok(schedule.loss_weight(n) * sq)
}

/// Score implied by a noise prediction: `-ε̂ / √(1-ᾱ_n)`.
pub fn implied_score(schedule: &NoiseSchedule, n: usize, eps_hat: ArrayView1<f64>) -> Array1<f64> {
    let s = (1.0 - schedule.alpha_bar(n)).sqrt();
    eps_hat.mapv(|e| -e / s)
}

/// Whether reverse steps add fresh Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerNoise {
    Gaussian,
    Suppressed,
}

/// Standard-normal matrix with row `b` drawn from `rngs[b]`.
pub fn gaussian_rows<R: Rng>(rngs: &mut [R], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rngs.len(), dim));
    for (mut row, rng) in out.rows_mut().into_iter().zip(rngs.iter_mut()) {
        row.mapv_inplace(|_| rng.sample(StandardNormal));
    }
    out
}

/// Reverse process from `x_N` down to `x_0`.
///
/// `eps` is called once per step with `(x_n, n, level_n)` and returns the
/// noise prediction for the whole batch; `levels[n - 1]` is the conditioning
/// level for step `n`. Noise rows come from `rngs`, one generator per row,
/// so results do not depend on how rows are batched.
pub fn sample_from<R: Rng>(
    schedule: &NoiseSchedule,
    levels: &[f64],
    mut x: Array2<f64>,
    mut eps: impl FnMut(&Array2<f64>, usize, f64) -> Result<Array2<f64>>,
    rngs: &mut [R],
    noise: SamplerNoise,
) -> Result<Array2<f64>> {
    let n_max = schedule.steps();
    if levels.len() != n_max {
        return Err(Error::Shape(format!(
            "{} conditioning levels for {n_max} steps",
            levels.len()
        )));
    }
    if rngs.len() != x.nrows() {
        return Err(Error::Shape(format!("{} generators for {} rows", rngs.len(), x.nrows())));
    }
    for n in (1..=n_max).rev() {
        let e = eps(&x, n, levels[n - 1])?;
        if e.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "noise prediction {:?} does not match sample {:?}",
                e.shape(),
                x.shape()
            )));
        }
        let a = schedule.alpha(n);
        let c = schedule.beta(n) / (1.0 - schedule.alpha_bar(n)).sqrt();
        x = (&x - &(e * c)) / a.sqrt();
        if n > 1 && noise == SamplerNoise::Gaussian {
            let sd = schedule.posterior_beta(n).sqrt();
            let z = gaussian_rows(rngs, x.ncols());
            x = x + z * sd;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample(n));
        }
    }
    Ok(x)
}

/// Reverse process from fresh `x_N ~ N(0, I)`.
pub fn sample<R: Rng>(
    schedule: &NoiseSchedule,
    levels: &[f64],
    dim: usize,
    eps: impl FnMut(&Array2<f64>, usize, f64) -> Result<Array2<f64>>,
    rngs: &mut [R],
    noise: SamplerNoise,
) -> Result<Array2<f64>> {
    let x = gaussian_rows(rngs, dim);
    sample_from(schedule, levels, x, eps, rngs, noise)
}

/// Conditioning levels of the schedule's own steps.
pub fn own_levels(schedule: &NoiseSchedule) -> Vec<f64> {
    (1..=schedule.steps()).map(|n| schedule.noise_level(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> NoiseSchedule {
        linear_schedule(100, 1e-4, 1e-2).unwrap()
    }

    #[test]
    fn linear_schedule_endpoints_and_product() {
        let s = default_schedule();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(100) - 1e-2).abs() < 1e-15);
        // Independent oracle: product over freshly computed betas.
        let oracle: f64 = (0..100).map(|i| 1.0 - (1e-4 + i as f64 * (1e-2 - 1e-4) / 99.0)).product();
        assert!((s.alpha_bar(100) - oracle).abs() < 1e-12);
        assert!((s.alpha_bar(100) - 0.6028).abs() < 1e-3);
        assert!(linear_schedule(1, 1e-4, 1e-2).is_err());
        assert!(linear_schedule(10, 1e-2, 1e-4).is_err());
        assert!(linear_schedule(10, 0.0, 1e-4).is_err());
    }

    #[test]
    fn schedule_tables_consistent() {
        let s = default_schedule();
        assert_eq!(s.posterior_beta(1), 0.0);
        for n in 1..=100 {
            assert_eq!(s.alpha_bar(n), s.alpha_bar(n - 1) * s.alpha(n));
            assert!(s.snr(n) < s.snr(n - 1));
            assert!(s.loss_weight(n) > 0.0);
        }
        // Oracle for SNR(N) from the independent product above.
        assert!((s.snr(100) - 1.51560).abs() < 1e-4);
    }

    #[test]
    fn snr_of_half() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.6]).unwrap();
        assert!((s.snr(1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weight_example() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        // SNR(1) = 0.9/0.1 = 9, SNR(2) = 0.72/0.28.
        let expect = 9.0 - 0.72 / 0.28;
        assert!((s.loss_weight(2) - expect).abs() < 1e-12);
        assert!((s.loss_weight(2) - 6.4286).abs() < 1e-4);
        // The capped n = 1 weight extrapolates linearly.
        assert!((s.snr(0) - (18.0 - 0.72 / 0.28)).abs() < 1e-12);
    }

    #[test]
    fn forward_examples() {
        let s = NoiseSchedule::from_betas(vec![0.36]).unwrap();
        let x = forward_sample(&s, array![1.0].view(), 1, array![1.0].view()).unwrap();
        assert!((x[0] - 1.4).abs() < 1e-12);
        let x = forward_sample(&s, array![2.0, -1.0].view(), 1, array![0.0, 0.0].view()).unwrap();
        assert_eq!(x, array![1.6, -0.8]);
        assert!(matches!(
            forward_sample(&s, array![1.0].view(), 2, array![1.0].view()),
            Err(Error::StepOutOfRange { n: 2, max: 1 })
        ));
    }

    #[test]
    fn forward_monte_carlo_moments() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let trials = 10_000;
        let x0 = array![0.7];
        let xs: Vec<f64> = (0..trials)
            .map(|_| {
                let e = array![rng.sample::<f64, _>(StandardNormal)];
                forward_sample(&s, x0.view(), n, e.view()).unwrap()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / trials as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let ab = s.alpha_bar(n);
        let se_mean = ((1.0 - ab) / trials as f64).sqrt();
        let se_var = (1.0 - ab) * (2.0 / (trials - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * 0.7).abs() < 3.0 * se_mean);
        assert!((var - (1.0 - ab)).abs() < 3.0 * se_var);
    }

    #[test]
    fn posterior_examples() {
        // Two steps with ᾱ_1 = 0.9 and α_2 = 0.99 (not monotone, so built
        // without validation).
        let s = NoiseSchedule::tables(vec![0.1, 0.01]);
        let (c0, cn) = s.posterior_coefficients(2);
        assert!((c0 - 0.9f64.sqrt() * 0.01 / 0.109).abs() < 1e-15);
        assert!((c0 - 0.08704).abs() < 1e-5);
        assert!((cn - 0.91283).abs() < 1e-5);
        assert!((s.posterior_beta(2) - 0.009174).abs() < 1e-6);
        let d = default_schedule();
        let (mu, b) = posterior_params(&d, array![0.0, 0.0].view(), array![0.0, 0.0].view(), 7).unwrap();
        assert_eq!(mu, array![0.0, 0.0]);
        assert!(b > 0.0);
        assert_eq!(d.posterior_beta(1), 0.0);
    }

    #[test]
    fn loss_zero_for_perfect_prediction() {
        let s = default_schedule();
        let e = array![0.3, -1.2, 2.0];
        for n in [1, 2, 50, 100] {
            assert_eq!(diffusion_loss(&s, n, e.view(), e.view()).unwrap(), 0.0);
        }
    }

    #[test]
    fn telescoping_sampler() {
        let s = default_schedule();
        let mut rngs: Vec<ChaCha8Rng> = (0..3).map(ChaCha8Rng::seed_from_u64).collect();
        let x_n = gaussian_rows(&mut rngs, 4);
        let mut calls = 0;
        let x0 = sample_from(
            &s,
            &own_levels(&s),
            x_n.clone(),
            |x, _, _| {
                calls += 1;
                Ok(Array2::zeros(x.raw_dim()))
            },
            &mut rngs,
            SamplerNoise::Suppressed,
        )
        .unwrap();
        assert_eq!(calls, 100);
        let expect = x_n / s.alpha_bar(100).sqrt();
        for (a, b) in x0.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sampler_is_seeded() {
        let s = linear_schedule(20, 1e-3, 0.1).unwrap();
        let run = || {
            let mut rngs: Vec<ChaCha8Rng> = (10..12).map(ChaCha8Rng::seed_from_u64).collect();
            sample(&s, &own_levels(&s), 3, |x, _, _| Ok(x * 0.1), &mut rngs, SamplerNoise::Gaussian).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_sample_reported() {
        let s = linear_schedule(5, 1e-3, 0.1).unwrap();
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(0)];
        let r = sample(
            &s,
            &own_levels(&s),
            2,
            |x, n, _| Ok(if n == 3 { x * f64::NAN } else { x.clone() }),
            &mut rngs,
            SamplerNoise::Gaussian,
        );
        assert!(matches!(r, Err(Error::NonFiniteSample(3))));
    }

    #[test]
    fn levels_span_unit_interval() {
        let s = default_schedule();
        assert!((s.noise_level(1) - 1.0).abs() < 1e-12);
        assert!(s.noise_level(100).abs() < 1e-12);
        for n in [1, 17, 64, 100] {
            assert!((s.level_for_alpha_bar(s.alpha_bar(n)) - s.noise_level(n)).abs() < 1e-9);
        }
        let mid = 0.5 * (s.alpha_bar(30) + s.alpha_bar(31));
        let l = s.level_for_alpha_bar(mid);
        assert!(l < s.noise_level(30) && l > s.noise_level(31));
        assert_eq!(s.level_for_alpha_bar(0.1), 0.0);
        assert_eq!(s.level_for_alpha_bar(0.99999), 1.0);
    }

    #[test]
    fn implied_score_matches_gaussian_score() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.random_range(1..=100);
            let x0: Array1<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eps: Array1<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let xn = forward_sample(&s, x0.view(), n, eps.view()).unwrap();
            let ab = s.alpha_bar(n);
            let analytic = -(&xn - &(&x0 * ab.sqrt())) / (1.0 - ab);
            let score = implied_score(&s, n, eps.view());
            for (a, b) in score.iter().zip(analytic.iter()) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    proptest! {
        #[test]
        fn weights_positive_for_any_valid_schedule(
            mut betas in prop::collection::vec(1e-5f64..0.5, 2..30)
        ) {
            betas.sort_by(f64::total_cmp);
            let s = NoiseSchedule::from_betas(betas).unwrap();
            for n in 2..=s.steps() {
                prop_assert!(s.loss_weight(n) > 0.0);
            }
            prop_assert!(s.loss_weight(1) > 0.0);
        }
    }
}
