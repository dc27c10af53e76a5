//! Single-head graph attention layer.
//!
//! Attention logits are `e_ij = LeakyReLU(w · (h_i ⊕ h_j))`, split as
//! `a_src · h_i + a_dst · h_j`, normalised with a softmax restricted to each
//! node's neighbourhood. Outputs are `sigmoid(Σ_j α_ij V h_j)`.

use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Neighbourhood rule. Masks always include self-loops.
#[derive(Debug, Clone, PartialEq)]
pub enum Adjacency {
    Complete,
    Mask(Arc<Array2<bool>>),
}

impl Adjacency {
    /// `mask[i][j]` marks `j` as a neighbour of `i`; the diagonal is forced on.
    pub fn from_mask(mut mask: Array2<bool>) -> Result<Self> {
        if mask.nrows() != mask.ncols() {
            return Err(Error::Shape(format!("adjacency must be square, got {:?}", mask.shape())));
        }
        mask.diag_mut().fill(true);
        Ok(Self::Mask(Arc::new(mask)))
    }

    /// Path graph `0 - 1 - ... - (n-1)` with self-loops.
    pub fn line(n: usize) -> Self {
        let mask = Array2::from_shape_fn((n, n), |(i, j)| i.abs_diff(j) <= 1);
        Self::Mask(Arc::new(mask))
    }

    fn mask(&self, n: usize) -> Result<Option<Arc<Array2<bool>>>> {
        match self {
            Self::Complete => Ok(None),
            Self::Mask(m) if m.nrows() == n => Ok(Some(m.clone())),
            Self::Mask(m) => Err(Error::Shape(format!(
                "adjacency over {} nodes applied to {n} nodes",
                m.nrows()
            ))),
        }
    }

    pub fn is_neighbor(&self, i: usize, j: usize) -> bool {
        match self {
            Self::Complete => true,
            Self::Mask(m) => m[[i, j]],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub leaky_slope: f64,
    pub adjacency: Adjacency,
    /// First half of W, applied to the attending node `h_i`: `[F, 1]`.
    pub a_src: ParamId,
    /// Second half of W, applied to the neighbour `h_j`: `[F, 1]`.
    pub a_dst: ParamId,
    /// Value projection V: `[F, F']`.
    pub value: ParamId,
}

impl GatLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        adjacency: Adjacency,
    ) -> Self {
        let f = in_features;
        Self {
            in_features,
            out_features,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            adjacency,
            a_src: store.add(format!("{name}.a_src"), init_uniform(rng, &[f, 1], 2 * f)),
            a_dst: store.add(format!("{name}.a_dst"), init_uniform(rng, &[f, 1], 2 * f)),
            value: store.add(
                format!("{name}.value"),
                init_uniform(rng, &[f, out_features], f),
            ),
        }
    }

    fn check(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 3 || shape[2] != self.in_features {
            return Err(Error::Shape(format!(
                "GAT expects [B, N, {}], got {shape:?}",
                self.in_features
            )));
        }
        Ok(shape[1])
    }

    /// Attention matrix `[B, N, N]` for node features `[B, N, F]`.
    pub fn attention<'t>(&self, tape: &'t Tape, store: &ParamStore, h: Var<'t>) -> Result<Var<'t>> {
        let n = self.check(&h.shape())?;
        let mask = self.adjacency.mask(n)?;
        let src = h.matmul(tape.param(store, self.a_src)); // [B, N, 1]
        let dst = h.matmul(tape.param(store, self.a_dst)).permute(&[0, 2, 1]); // [B, 1, N]
        Ok((src + dst).leaky_relu(self.leaky_slope).softmax(mask))
    }

    /// Layer output `[B, N, F']` with entries in (0, 1).
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, h: Var<'t>) -> Result<Var<'t>> {
        let alpha = self.attention(tape, store, h)?;
        let v = h.matmul(tape.param(store, self.value));
        Ok(alpha.bmm(v).sigmoid())
    }

    /// Row-stochastic attention weights for a single graph `[N, F]`.
    pub fn attention_weights(&self, store: &ParamStore, h: &Array2<f64>) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let x = tape.constant(h.clone().insert_axis(Axis(0)).into_dyn());
        let a = self.attention(&tape, store, x)?.value();
        let a: Array3<f64> = (*a).clone().into_dimensionality().expect("3-d attention");
        Ok(a.index_axis_move(Axis(0), 0))
    }

    /// Outputs for a single graph `[N, F]`.
    pub fn gat_forward(&self, store: &ParamStore, h: &Array2<f64>) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let x = tape.constant(h.clone().insert_axis(Axis(0)).into_dyn());
        let o = self.forward(&tape, store, x)?.value();
        let o: Array3<f64> = (*o).clone().into_dimensionality().expect("3-d output");
        Ok(o.index_axis_move(Axis(0), 0))
    }
}
