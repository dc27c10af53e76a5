//! Run configuration with a flat `key = value` text format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::extractors::ExtractorKind;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub window: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub extractor: ExtractorKind,
    pub hidden_size: usize,
    /// Residual and skip width of the noise-prediction network.
    pub residual_channels: usize,
    pub tau: usize,
    pub alpha_bar_n: f64,
    pub beta_n: f64,
    pub seed: u64,
    pub n_samples: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub scheduler_hidden: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            window: 12,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 1e-2,
            batch_size: 100,
            epochs: 20,
            extractor: ExtractorKind::TcnGat,
            hidden_size: 64,
            residual_channels: 64,
            tau: 10,
            alpha_bar_n: 0.5,
            beta_n: 0.5,
            seed: 0,
            n_samples: 1,
            learning_rate: 1e-3,
            grad_clip: 10.0,
            patience: 3,
            val_fraction: 0.1,
            scheduler_hidden: 64,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.window < 1 {
            return fail("window must be >= 1".into());
        }
        if self.diffusion_steps < 2 {
            return fail("diffusion_steps must be >= 2".into());
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return fail(format!(
                "need 0 < beta_start <= beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            ));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("hidden_size", self.hidden_size),
            ("residual_channels", self.residual_channels),
            ("n_samples", self.n_samples),
            ("scheduler_hidden", self.scheduler_hidden),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if self.tau < 1 || self.tau + 2 > self.diffusion_steps {
            return fail(format!(
                "tau must lie in 1..={}, got {}",
                self.diffusion_steps.saturating_sub(2),
                self.tau
            ));
        }
        for (name, v) in [("alpha_bar_n", self.alpha_bar_n), ("beta_n", self.beta_n)] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return fail("learning_rate and grad_clip must be positive".into());
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return fail(format!("val_fraction must lie in [0, 0.5), got {}", self.val_fraction));
        }
        Ok(())
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "window" => self.window = parse(key, value)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "extractor" => self.extractor = value.parse()?,
            "hidden_size" => self.hidden_size = parse(key, value)?,
            "residual_channels" => self.residual_channels = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "alpha_bar_n" => self.alpha_bar_n = parse(key, value)?,
            "beta_n" => self.beta_n = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n_samples" => self.n_samples = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "scheduler_hidden" => self.scheduler_hidden = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Parse defaults overridden by `key = value` lines. `#`/`;` start
    /// comments and `[section]` headers are ignored.
    pub fn from_ini(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini(&text)
    }

    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("window", self.window.to_string());
        put("diffusion_steps", self.diffusion_steps.to_string());
        put("beta_start", format!("{:?}", self.beta_start));
        put("beta_end", format!("{:?}", self.beta_end));
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("extractor", self.extractor.to_string());
        put("hidden_size", self.hidden_size.to_string());
        put("residual_channels", self.residual_channels.to_string());
        put("tau", self.tau.to_string());
        put("alpha_bar_n", format!("{:?}", self.alpha_bar_n));
        put("beta_n", format!("{:?}", self.beta_n));
        put("seed", self.seed.to_string());
        put("n_samples", self.n_samples.to_string());
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("grad_clip", format!("{:?}", self.grad_clip));
        put("patience", self.patience.to_string());
        put("val_fraction", format!("{:?}", self.val_fraction));
        put("scheduler_hidden", self.scheduler_hidden.to_string());
        s
    }
}
