//! Synthetic water-treatment-like process used as a desk-scale benchmark.
//!
//! Three tanks in series. Inflow to tank 1 is a slowly varying demand; pump
//! P101 moves water from tank 1 to tank 2 and P201 from tank 2 to tank 3,
//! each switched by a hysteresis controller that reads the *reported* level
//! of its source tank from the previous step, so falsified sensor readings
//! feed back into the physics. Tank 3 drains through a valve proportional to
//! its level. Flows follow first-order lags and all sensors carry Gaussian
//! noise.
//!
//! Attacks are injected into the test portion only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use ndarray::Array2;

use crate::dataset::{ChannelSpec, RawTable, TimeSeriesDataset};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Easy,
    Hard,
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Self::Easy),
            "hard" => Ok(Self::Hard),
            other => Err(format!("unknown scenario {other:?} (expected easy or hard)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    SensorBias,
    StuckAt,
    RampDrift,
    ActuatorFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSegment {
    pub kind: AttackKind,
    /// Raw channel index.
    pub channel: usize,
    /// First attacked step, relative to the start of the test set.
    pub start: usize,
    pub len: usize,
    /// Bias offset, stuck value, or total drift, in normalised units of the
    /// channel's range; unused for actuator flips.
    pub magnitude: f64,
}

#[derive(Debug, Clone)]
pub struct SynthRun {
    pub train: RawTable,
    pub test: RawTable,
    pub attacks: Vec<AttackSegment>,
}

// Raw channel layout.
const FIT101: usize = 0;
const LIT101: usize = 1;
const FIT201: usize = 2;
const PIT201: usize = 3;
const LIT201: usize = 4;
const FIT301: usize = 5;
const LIT301: usize = 6;
const FIT401: usize = 7;
const P101: usize = 8;
const P201: usize = 9;
const N_CONT: usize = 8;

/// Physical unit scale and offset per continuous channel; the simulation
/// runs in dimensionless units and reports `offset + scale * value`.
const UNITS: [(f64, f64); N_CONT] = [
    (0.0, 8.0),     // FIT101 m3/h
    (100.0, 800.0), // LIT101 mm
    (0.0, 8.0),     // FIT201
    (0.5, 2.0),     // PIT201 bar
    (100.0, 800.0), // LIT201
    (0.0, 8.0),     // FIT301
    (100.0, 800.0), // LIT301
    (0.0, 8.0),     // FIT401
];

/// Nominal reporting range of each continuous channel in simulation units,
/// used to size attack magnitudes.
const RANGE: [(f64, f64); N_CONT] = [
    (0.2, 0.4),
    (0.3, 0.7),
    (0.0, 0.6),
    (0.3, 1.0),
    (0.35, 0.65),
    (0.0, 0.5),
    (0.4, 0.6),
    (0.25, 0.35),
];

pub fn channels() -> Vec<ChannelSpec> {
    let mut ch: Vec<ChannelSpec> = [
        "FIT101", "LIT101", "FIT201", "PIT201", "LIT201", "FIT301", "LIT301", "FIT401",
    ]
    .into_iter()
    .map(ChannelSpec::continuous)
    .collect();
    ch.push(ChannelSpec::discrete("P101", 2));
    ch.push(ChannelSpec::discrete("P201", 2));
    ch
}

struct Plant {
    demand_noise: f64,
    l1: f64,
    l2: f64,
    l3: f64,
    q12: f64,
    q23: f64,
    q_out: f64,
    pressure: f64,
    p1: bool,
    p2: bool,
}

const K_TANK: f64 = 0.05;
const LAG: f64 = 0.4;

impl Plant {
    fn new() -> Self {
        Self {
            demand_noise: 0.0,
            l1: 0.5,
            l2: 0.5,
            l3: 0.5,
            q12: 0.0,
            q23: 0.0,
            q_out: 0.3,
            pressure: 0.35,
            p1: false,
            p2: false,
        }
    }

    /// Advance one step. `obs_l1`/`obs_l2` are last step's reported levels;
    /// `flip` forces the given pumps opposite to the controller command.
    fn step(&mut self, t: usize, rng: &mut ChaCha8Rng, obs_l1: f64, obs_l2: f64, flip: [bool; 2]) -> [f64; N_CONT] {
        let tf = t as f64;
        self.demand_noise = 0.95 * self.demand_noise + 0.004 * gauss(rng);
        let q_in = 0.3 + 0.05 * (2.0 * std::f64::consts::PI * tf / 240.0).sin() + self.demand_noise;

        // Hysteresis controllers on reported levels.
        if !self.p1 && obs_l1 > 0.7 {
            self.p1 = true;
        } else if self.p1 && obs_l1 < 0.3 {
            self.p1 = false;
        }
        if !self.p2 && obs_l2 > 0.65 {
            self.p2 = true;
        } else if self.p2 && obs_l2 < 0.35 {
            self.p2 = false;
        }
        let p1 = self.p1 ^ flip[0];
        let p2 = self.p2 ^ flip[1];

        let q12_target = if p1 && self.l1 > 0.02 { 0.6 } else { 0.0 };
        let q23_target = if p2 && self.l2 > 0.02 { 0.5 } else { 0.0 };
        self.q12 += LAG * (q12_target - self.q12);
        self.q23 += LAG * (q23_target - self.q23);
        self.q_out += LAG * (0.6 * self.l3 - self.q_out);
        self.pressure += 0.5 * (0.2 + 0.8 * self.q12 + 0.3 * self.l1 - self.pressure);

        self.l1 = (self.l1 + K_TANK * (q_in - self.q12)).clamp(0.0, 1.0);
        self.l2 = (self.l2 + K_TANK * (self.q12 - self.q23)).clamp(0.0, 1.0);
        self.l3 = (self.l3 + K_TANK * (self.q23 - self.q_out)).clamp(0.0, 1.0);

        [q_in, self.l1, self.q12, self.pressure, self.l2, self.q23, self.l3, self.q_out]
    }

    fn pumps(&self, flip: [bool; 2]) -> [bool; 2] {
        [self.p1 ^ flip[0], self.p2 ^ flip[1]]
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

fn plan_attacks(scenario: Scenario, t_test: usize, rng: &mut ChaCha8Rng) -> Vec<AttackSegment> {
    let n_seg = 6;
    let ratio = rng.random_range(0.06..0.10);
    let total = ((t_test as f64 * ratio).round() as usize).max(n_seg);
    let warmup = (t_test / 20).max(24).min(t_test / 4);
    let slot = (t_test - warmup) / n_seg;

    let mut kinds = vec![
        AttackKind::SensorBias,
        AttackKind::StuckAt,
        AttackKind::RampDrift,
        AttackKind::ActuatorFlip,
    ];
    let extra = [AttackKind::SensorBias, AttackKind::StuckAt, AttackKind::RampDrift, AttackKind::ActuatorFlip];
    kinds.push(extra[rng.random_range(0..4)]);
    kinds.push(extra[rng.random_range(0..4)]);
    kinds.shuffle(rng);

    // Split `total` into n_seg lengths with mild jitter.
    let base = total / n_seg;
    let mut lens = vec![base; n_seg];
    for l in lens.iter_mut().take(total - base * n_seg) {
        *l += 1;
    }
    for i in 0..n_seg / 2 {
        let shift = rng.random_range(0..=base / 4);
        lens[2 * i] += shift;
        lens[2 * i + 1] -= shift.min(lens[2 * i + 1] - 1);
    }

    let (bias, drift) = match scenario {
        Scenario::Easy => (0.45, 0.7),
        Scenario::Hard => (0.15, 0.25),
    };
    kinds
        .into_iter()
        .zip(lens)
        .enumerate()
        .map(|(i, (kind, len))| {
            let slot_start = warmup + i * slot;
            let room = slot.saturating_sub(len).max(1);
            // Keep the segment in the first half of its slot so the plant
            // recovers before the next one.
            let start = slot_start + rng.random_range(0..room.div_ceil(2));
            let (channel, magnitude) = match kind {
                AttackKind::SensorBias => {
                    let ch = [LIT101, FIT301, LIT301, PIT201][rng.random_range(0..4)];
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (ch, sign * bias)
                }
                AttackKind::StuckAt => {
                    let ch = [LIT101, LIT201, FIT101][rng.random_range(0..3)];
                    (ch, 0.0)
                }
                AttackKind::RampDrift => {
                    let ch = [FIT201, LIT301, FIT401][rng.random_range(0..3)];
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    (ch, sign * drift)
                }
                AttackKind::ActuatorFlip => ([P101, P201][rng.random_range(0..2)], 0.0),
            };
            AttackSegment {
                kind,
                channel,
                start,
                len,
                magnitude,
            }
        })
        .collect()
}

/// Simulate `t_train` normal steps followed by `t_test` steps with attacks.
pub fn simulate(scenario: Scenario, t_train: usize, t_test: usize, seed: u64) -> SynthRun {
    let salt = match scenario {
        Scenario::Easy => 0x5eed_0001,
        Scenario::Hard => 0x5eed_0002,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    let attacks = plan_attacks(scenario, t_test, &mut ChaCha8Rng::seed_from_u64(seed ^ salt ^ 0x00a7_7ac4));
    let noise_sd = match scenario {
        Scenario::Easy => 0.004,
        Scenario::Hard => 0.006,
    };

    let total = t_train + t_test;
    let width = N_CONT + 2;
    let mut values = Array2::zeros((total, width));
    let mut labels = vec![0u8; t_test];
    let mut plant = Plant::new();
    let mut obs = [0.0; N_CONT];
    obs[LIT101] = plant.l1;
    obs[LIT201] = plant.l2;
    let mut stuck = [f64::NAN; N_CONT];

    // Burn in so the series starts in a typical operating state.
    for t in 0..200 {
        let x = plant.step(t, &mut rng, obs[LIT101], obs[LIT201], [false; 2]);
        obs = x;
    }

    for t in 0..total {
        let test_t = t.checked_sub(t_train);
        let active: Vec<&AttackSegment> = match test_t {
            Some(k) => attacks.iter().filter(|a| k >= a.start && k < a.start + a.len).collect(),
            None => Vec::new(),
        };
        let mut flip = [false; 2];
        for a in &active {
            if a.kind == AttackKind::ActuatorFlip {
                flip[a.channel - P101] = true;
            }
        }
        let x = plant.step(t + 200, &mut rng, obs[LIT101], obs[LIT201], flip);
        let mut reading = [0.0; N_CONT];
        for c in 0..N_CONT {
            reading[c] = x[c] + noise_sd * gauss(&mut rng);
        }
        for c in 0..N_CONT {
            let is_stuck = active.iter().any(|a| a.kind == AttackKind::StuckAt && a.channel == c);
            if !is_stuck {
                stuck[c] = f64::NAN;
            }
        }
        for a in &active {
            let k = test_t.expect("attacks only in test");
            let c = a.channel;
            if c >= N_CONT {
                continue;
            }
            let (lo, hi) = RANGE[c];
            let span = hi - lo;
            match a.kind {
                AttackKind::SensorBias => reading[c] += a.magnitude * span,
                AttackKind::RampDrift => {
                    reading[c] += a.magnitude * span * (k - a.start + 1) as f64 / a.len as f64
                }
                AttackKind::StuckAt => {
                    if stuck[c].is_nan() {
                        stuck[c] = match scenario {
                            // Freeze at the far rail of the nominal range.
                            Scenario::Easy => {
                                if reading[c] > 0.5 * (lo + hi) {
                                    lo - 0.1 * span
                                } else {
                                    hi + 0.1 * span
                                }
                            }
                            Scenario::Hard => reading[c],
                        };
                    }
                    reading[c] = stuck[c];
                }
                AttackKind::ActuatorFlip => {}
            }
        }
        obs = reading;
        for c in 0..N_CONT {
            let (off, scale) = UNITS[c];
            values[[t, c]] = off + scale * reading[c];
        }
        let pumps = plant.pumps(flip);
        values[[t, P101]] = pumps[0] as u8 as f64;
        values[[t, P201]] = pumps[1] as u8 as f64;
        if let Some(k) = test_t {
            labels[k] = (!active.is_empty()) as u8;
        }
    }

    let ch = channels();
    let split = |a: usize, b: usize| values.slice(ndarray::s![a..b, ..]).to_owned();
    SynthRun {
        train: RawTable {
            channels: ch.clone(),
            values: split(0, t_train),
            labels: None,
        },
        test: RawTable {
            channels: ch,
            values: split(t_train, total),
            labels: Some(labels),
        },
        attacks,
    }
}

/// Normalised (train, test) pair; the test set reuses training stats and the
/// training set carries all-zero labels.
pub fn synth_cps(
    scenario: Scenario,
    t_train: usize,
    t_test: usize,
    seed: u64,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    let run = simulate(scenario, t_train, t_test, seed);
    to_datasets(&run)
}

pub fn to_datasets(run: &SynthRun) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    let mut train = TimeSeriesDataset::from_raw(&run.train, None)?;
    train.labels = Some(vec![0; train.len()]);
    let test = TimeSeriesDataset::from_raw(&run.test, Some(&train.norm_stats))?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let (a, b) = synth_cps(Scenario::Easy, 500, 300, 1).unwrap();
        let (c, d) = synth_cps(Scenario::Easy, 500, 300, 1).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        let (e, _) = synth_cps(Scenario::Easy, 500, 300, 2).unwrap();
        assert_ne!(a.values, e.values);
    }

    #[test]
    fn shapes_labels_and_ratio() {
        for scenario in [Scenario::Easy, Scenario::Hard] {
            for seed in 0..5 {
                let (train, test) = synth_cps(scenario, 5000, 2000, seed).unwrap();
                assert_eq!(train.dim(), 12);
                assert!(train.labels.as_ref().unwrap().iter().all(|&l| l == 0));
                assert!(train.values.iter().all(|v| (0.0..=1.0).contains(v)));
                let labels = test.labels.as_ref().unwrap();
                assert_eq!(labels.len(), 2000);
                let ratio = labels.iter().map(|&l| l as f64).sum::<f64>() / 2000.0;
                assert!((0.05..=0.12).contains(&ratio), "ratio {ratio}");
            }
        }
    }

    #[test]
    fn attack_segments_are_disjoint_and_cover_every_kind() {
        let run = simulate(Scenario::Easy, 1000, 2000, 7);
        assert!(run.attacks.len() >= 5);
        let mut sorted = run.attacks.clone();
        sorted.sort_by_key(|a| a.start);
        for w in sorted.windows(2) {
            assert!(w[0].start + w[0].len < w[1].start);
        }
        for kind in [
            AttackKind::SensorBias,
            AttackKind::StuckAt,
            AttackKind::RampDrift,
            AttackKind::ActuatorFlip,
        ] {
            assert!(run.attacks.iter().any(|a| a.kind == kind));
        }
        let labels = run.test.labels.as_ref().unwrap();
        let segments = labels.windows(2).filter(|w| w[0] == 0 && w[1] == 1).count();
        assert_eq!(segments, run.attacks.len());
    }

    #[test]
    fn short_series_still_valid() {
        let (_, test) = synth_cps(Scenario::Hard, 201, 201, 3).unwrap();
        let labels = test.labels.unwrap();
        assert!(labels.contains(&1));
        assert_eq!(labels.len(), 201);
    }

    #[test]
    fn pumps_switch_in_normal_operation() {
        let run = simulate(Scenario::Easy, 2000, 201, 0);
        for c in [P101, P201] {
            let col = run.train.values.column(c);
            let switches = col.windows(2).into_iter().filter(|w| w[0] != w[1]).count();
            assert!(switches >= 10, "channel {c} switched {switches} times");
        }
    }
}
