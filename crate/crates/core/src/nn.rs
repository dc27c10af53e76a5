//! Parameter storage, basic layers, and the optimizer.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tape::{Conv1dGeom, Tape, Tensor, Var};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`ParamStore`], used to route gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors of one network.
#[derive(Debug)]
pub struct ParamStore {
    id: StoreId,
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed)),
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new((**v).clone())).collect(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed)),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Arc::new(value.as_standard_layout().into_owned()));
        ParamId(self.values.len() - 1)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        self.values[id.0].clone()
    }

    /// Mutable access; copies the buffer if a live tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "shape mismatch setting {}",
            self.names[id.0]
        );
        self.values[id.0] = Arc::new(value.as_standard_layout().into_owned());
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Set every parameter to zero.
    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            Arc::make_mut(v).fill(0.0);
        }
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, v) in self.names.iter().zip(&mut self.values) {
            if name.starts_with(prefix) {
                Arc::make_mut(v).fill(0.0);
            }
        }
    }

    /// Bit-level equality of names, shapes and values.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| {
                    a.shape() == b.shape()
                        && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Uniform(-bound, bound) initialisation with `bound = 1/sqrt(fan_in)`.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Tensor::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[input, output], input),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), init_uniform(rng, &[output], input)));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(tape.param(store, self.weight));
        match self.bias {
            Some(b) => y + tape.param(store, b),
            None => y,
        }
    }
}

/// Channel-last 1-D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: Conv1dGeom,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[kernel, cin, cout], fan_in),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), init_uniform(rng, &[cout], fan_in)));
        Self {
            weight,
            bias,
            geom: Conv1dGeom::same(kernel, dilation),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let y = x.conv1d(tape.param(store, self.weight), self.geom);
        match self.bias {
            Some(b) => y + tape.param(store, b),
            None => y,
        }
    }
}

/// Single-layer gated recurrent unit.
#[derive(Debug, Clone)]
pub struct Gru {
    pub input_size: usize,
    pub hidden_size: usize,
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input_size: usize,
        hidden_size: usize,
    ) -> Self {
        let h3 = 3 * hidden_size;
        Self {
            input_size,
            hidden_size,
            w_ih: store.add(
                format!("{name}.w_ih"),
                init_uniform(rng, &[input_size, h3], hidden_size),
            ),
            w_hh: store.add(
                format!("{name}.w_hh"),
                init_uniform(rng, &[hidden_size, h3], hidden_size),
            ),
            b_ih: store.add(format!("{name}.b_ih"), init_uniform(rng, &[h3], hidden_size)),
            b_hh: store.add(format!("{name}.b_hh"), init_uniform(rng, &[h3], hidden_size)),
        }
    }

    /// Runs over `[B, T, input]` from a zero state and returns the final
    /// hidden state `[B, hidden]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, seq: Var<'t>) -> Var<'t> {
        let shape = seq.shape();
        let (b, steps) = (shape[0], shape[1]);
        let hs = self.hidden_size;
        let w_hh = tape.param(store, self.w_hh);
        let b_hh = tape.param(store, self.b_hh);
        // Input projections for all steps in one product.
        let xw = seq.matmul(tape.param(store, self.w_ih)) + tape.param(store, self.b_ih);
        let mut h = tape.constant(zeros(&[b, hs]));
        for t in 0..steps {
            let xt = xw.narrow(1, t, 1).reshape(&[b, 3 * hs]);
            let hw = h.matmul(w_hh) + b_hh;
            let r = (xt.narrow(1, 0, hs) + hw.narrow(1, 0, hs)).sigmoid();
            let z = (xt.narrow(1, hs, hs) + hw.narrow(1, hs, hs)).sigmoid();
            let n = (xt.narrow(1, 2 * hs, hs) + r * hw.narrow(1, 2 * hs, hs)).tanh();
            h = n + z * (h - n);
        }
        h
    }
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<Option<Tensor>>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = max_norm / total;
        for g in grads.iter_mut().flatten().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
    total
}

/// Adaptive moment estimation over one parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.ids().map(|id| Tensor::zeros(store.get(id).raw_dim())).collect(),
            v: store.ids().map(|id| Tensor::zeros(store.get(id).raw_dim())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                });
            let p = store.get_mut(ParamId(i));
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}
