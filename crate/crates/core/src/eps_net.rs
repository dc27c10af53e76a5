//! Conditional noise-prediction network.
//!
//! The noisy vector `x_n` (length D) is treated as a one-channel sequence of
//! length D. A kernel-5 input convolution lifts it to `C` channels, a
//! Fourier embedding of the noise level is added, and four gated residual
//! blocks with dilations 1, 2, 4, 8 follow. Each block adds a projection of
//! the condition vector before the `tanh * sigmoid` gate and emits a skip
//! output. The summed skips are projected back to one channel.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{zeros, Conv1d, Linear, ParamStore};
use crate::tape::{Tape, Tensor, Var};

pub const FOURIER_FREQUENCIES: usize = 64;
pub const DILATIONS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone)]
struct Block {
    dilated: Conv1d,
    cond: Linear,
    out: Conv1d,
}

#[derive(Debug, Clone)]
pub struct EpsNet {
    pub dim: usize,
    pub channels: usize,
    pub cond_size: usize,
    input: Conv1d,
    emb1: Linear,
    emb2: Linear,
    blocks: Vec<Block>,
    skip: Conv1d,
    head: Conv1d,
}

/// Geometric frequencies `π · 10^(2.5 k / 63)` for `k = 0..64`.
fn frequencies() -> Vec<f64> {
    (0..FOURIER_FREQUENCIES)
        .map(|k| std::f64::consts::PI * 10f64.powf(2.5 * k as f64 / (FOURIER_FREQUENCIES - 1) as f64))
        .collect()
}

/// `[sin(f_k l), cos(f_k l)]` for each level `l`: `[B, 2 * 64]`.
pub fn fourier_features(levels: &[f64]) -> Array2<f64> {
    let freqs = frequencies();
    let k = freqs.len();
    Array2::from_shape_fn((levels.len(), 2 * k), |(b, j)| {
        if j < k {
            (freqs[j] * levels[b]).sin()
        } else {
            (freqs[j - k] * levels[b]).cos()
        }
    })
}

impl EpsNet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize, channels: usize, cond_size: usize) -> Self {
        let c = channels;
        let blocks = DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| Block {
                dilated: Conv1d::new(store, rng, &format!("eps.block{i}.dilated"), c, 2 * c, 3, d, true),
                cond: Linear::new(store, rng, &format!("eps.block{i}.cond"), cond_size, 2 * c, true),
                out: Conv1d::new(store, rng, &format!("eps.block{i}.out"), c, 2 * c, 1, 1, true),
            })
            .collect();
        let input = Conv1d::new(store, rng, "eps.input", 1, c, 5, 1, true);
        let emb1 = Linear::new(store, rng, "eps.emb1", 2 * FOURIER_FREQUENCIES, c, true);
        let emb2 = Linear::new(store, rng, "eps.emb2", c, c, true);
        let skip = Conv1d::new(store, rng, "eps.skip", c, c, 1, 1, true);
        let head = Conv1d::new(store, rng, "eps.head", c, 1, 1, 1, true);
        // Start from ε̂ = 0.
        store.set(head.weight, zeros(&[1, c, 1]));
        store.set(head.bias.expect("head bias"), zeros(&[1]));
        Self {
            dim,
            channels,
            cond_size,
            input,
            emb1,
            emb2,
            blocks,
            skip,
            head,
        }
    }

    /// `x`: `[B, D]`, `levels`: noise level per row in [0, 1], `cond`:
    /// `[B, H]`. Returns `[B, D]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        levels: &[f64],
        cond: Var<'t>,
    ) -> Result<Var<'t>> {
        let xs = x.shape();
        let cs = cond.shape();
        let b = xs.first().copied().unwrap_or(0);
        if xs != [b, self.dim] || cs != [b, self.cond_size] || levels.len() != b {
            return Err(Error::Shape(format!(
                "eps network expects x [B, {}], cond [B, {}], B levels; got {xs:?}, {cs:?}, {}",
                self.dim,
                self.cond_size,
                levels.len()
            )));
        }
        let c = self.channels;
        let emb = tape.constant(fourier_features(levels).into_dyn());
        let emb = self.emb1.forward(tape, store, emb).relu();
        let emb = self.emb2.forward(tape, store, emb).relu().reshape(&[b, 1, c]);

        let mut h = self.input.forward(tape, store, x.reshape(&[b, self.dim, 1])).relu() + emb;
        let mut skips: Option<Var<'t>> = None;
        for blk in &self.blocks {
            let cproj = blk.cond.forward(tape, store, cond).reshape(&[b, 1, 2 * c]);
            let y = blk.dilated.forward(tape, store, h) + cproj;
            let gated = y.narrow(2, 0, c).tanh() * y.narrow(2, c, c).sigmoid();
            let out = blk.out.forward(tape, store, gated);
            h = (h + out.narrow(2, 0, c)).scale(std::f64::consts::FRAC_1_SQRT_2);
            let s = out.narrow(2, c, c);
            skips = Some(match skips {
                Some(acc) => acc + s,
                None => s,
            });
        }
        let skips = skips.expect("at least one block").scale(1.0 / (self.blocks.len() as f64).sqrt());
        let y = self.skip.forward(tape, store, skips).relu();
        Ok(self.head.forward(tape, store, y).reshape(&[b, self.dim]))
    }

    /// Forward pass on plain arrays.
    pub fn predict(&self, store: &ParamStore, x: &Array2<f64>, levels: &[f64], cond: &Array2<f64>) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let out = self.forward(
            &tape,
            store,
            tape.constant(x.clone().into_dyn()),
            levels,
            tape.constant(cond.clone().into_dyn()),
        )?;
        Ok(to2(&out.value()))
    }
}

pub(crate) fn to2(t: &Tensor) -> Array2<f64> {
    t.view().into_dimensionality().expect("2-d tensor").to_owned()
}
