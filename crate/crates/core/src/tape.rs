//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! accumulates gradients for every node. Parameters enter the tape through
//! [`Tape::param`], which remembers which [`ParamStore`] slot each leaf came
//! from so gradients can be routed back to the optimizer.
//!
//! Binary elementwise ops broadcast with numpy semantics; gradients are summed
//! back to each operand's shape.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, Axis, IxDyn, Slice};

use crate::nn::{ParamId, ParamStore, StoreId};

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Softmax(usize),
    Sum(usize),
    SumAxis(usize, usize, bool),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    Pad(usize, usize, usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Conv1d(usize, usize, Conv1dGeom),
}

/// Geometry of a channel-last 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dGeom {
    /// Zero padding that keeps the output length equal to the input length.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let span = dilation * (kernel - 1);
        Self {
            dilation,
            pad_left: span / 2,
            pad_right: span - span / 2,
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Recording of a single forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bindings: RefCell<Vec<(StoreId, ParamId, usize)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar root with respect to every leaf on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bindings: Vec<(StoreId, ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for every parameter of `store`, summed over repeated bindings.
    /// Parameters that were never bound get `None`.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
        for &(sid, pid, node) in &self.bindings {
            if sid != store.id() {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut out[pid.0] {
                    Some(acc) => *acc += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn to_std(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

/// Sum `grad` down to `shape`, undoing numpy broadcasting.
fn reduce_to(grad: Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn as_matrix(t: &Tensor) -> ArrayView2<'_, f64> {
    let k = *t.shape().last().expect("matmul operand has no axes");
    let m = t.len() / k.max(1);
    t.view()
        .into_shape_with_order((m, k))
        .expect("matmul operand must be in standard layout")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Build the im2col matrix of a channel-last convolution input.
fn im2col(x: &Tensor, kernel: usize, geom: Conv1dGeom) -> (Array2<f64>, usize) {
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let l_out = (l + geom.pad_left + geom.pad_right)
        .checked_sub(geom.dilation * (kernel - 1))
        .expect("convolution kernel wider than padded input");
    let mut col = Array2::<f64>::zeros((b * l_out, kernel * c));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().unwrap();
    for bi in 0..b {
        for lo in 0..l_out {
            let row = (bi * l_out + lo) * kernel * c;
            for k in 0..kernel {
                let p = lo + k * geom.dilation;
                if p < geom.pad_left || p - geom.pad_left >= l {
                    continue;
                }
                let src = (bi * l + p - geom.pad_left) * c;
                cs[row + k * c..row + (k + 1) * c].copy_from_slice(&xs[src..src + c]);
            }
        }
    }
    (col, l_out)
}

fn col2im(col: &Array2<f64>, shape: &[usize], kernel: usize, geom: Conv1dGeom) -> Tensor {
    let (b, l, c) = (shape[0], shape[1], shape[2]);
    let l_out = col.nrows() / b;
    let mut gx = Tensor::zeros(IxDyn(shape));
    let gs = gx.as_slice_mut().unwrap();
    let col = col.as_standard_layout();
    let cs = col.as_slice().expect("standard layout");
    for bi in 0..b {
        for lo in 0..l_out {
            let row = (bi * l_out + lo) * kernel * c;
            for k in 0..kernel {
                let p = lo + k * geom.dilation;
                if p < geom.pad_left || p - geom.pad_left >= l {
                    continue;
                }
                let dst = (bi * l + p - geom.pad_left) * c;
                for (d, s) in gs[dst..dst + c]
                    .iter_mut()
                    .zip(&cs[row + k * c..row + (k + 1) * c])
                {
                    *d += s;
                }
            }
        }
    }
    gx
}

fn softmax_rows(x: &Tensor, mask: Option<&Array2<bool>>) -> Tensor {
    let mut out = x.clone();
    let last = out.ndim() - 1;
    let nrows = if out.ndim() >= 2 {
        out.shape()[last - 1]
    } else {
        1
    };
    for (r, mut lane) in out.lanes_mut(Axis(last)).into_iter().enumerate() {
        let i = r % nrows;
        let keep = |j: usize| mask.is_none_or(|m| m[[i, j]]);
        let mut max = f64::NEG_INFINITY;
        for (j, v) in lane.iter().enumerate() {
            if keep(j) && *v > max {
                max = *v;
            }
        }
        let mut sum = 0.0;
        for (j, v) in lane.iter_mut().enumerate() {
            if keep(j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        lane.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that does not receive parameter routing.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(to_std(value), Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::from_elem(IxDyn(&[]), v))
    }

    /// Bind a parameter as a leaf. Shares the stored buffer without copying.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let value = store.shared(id);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        let node = nodes.len() - 1;
        self.bindings.borrow_mut().push((store.id(), id, node));
        Var {
            tape: self,
            id: node,
        }
    }

    pub fn concat(&self, parts: &[Var<'_>], axis: usize) -> Var<'_> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| self.val(p.id)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        self.push(to_std(out), Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
    }

    /// Reverse pass from a scalar (or any-shaped, seeded with ones) root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = root.id + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.raw_dim()));

        fn acc(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let out = &*node.value;
            let v = |id: usize| -> &Tensor { &nodes[id].value };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), v(*a).shape()));
                    acc(&mut grads, *b, reduce_to(g, v(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), v(*a).shape()));
                    acc(&mut grads, *b, reduce_to(-g, v(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let ga = &g * v(*b);
                    let gb = &g * v(*a);
                    acc(&mut grads, *a, reduce_to(ga, v(*a).shape()));
                    acc(&mut grads, *b, reduce_to(gb, v(*b).shape()));
                }
                Op::Div(a, b) => {
                    let ga = &g / v(*b);
                    let gb = -(&g * out) / v(*b);
                    acc(&mut grads, *a, reduce_to(ga, v(*a).shape()));
                    acc(&mut grads, *b, reduce_to(gb, v(*b).shape()));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let d = out.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, g * d);
                }
                Op::Tanh(a) => {
                    let d = out.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, g * d);
                }
                Op::Relu(a) => {
                    let d = v(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * d);
                }
                Op::LeakyRelu(a, slope) => {
                    let d = v(*a).mapv(|x| if x > 0.0 { 1.0 } else { *slope });
                    acc(&mut grads, *a, g * d);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * out),
                Op::Log(a) => acc(&mut grads, *a, g / v(*a)),
                Op::Sqrt(a) => {
                    let d = out.mapv(|y| 0.5 / y);
                    acc(&mut grads, *a, g * d);
                }
                Op::Square(a) => {
                    let d = v(*a) * 2.0;
                    acc(&mut grads, *a, g * d);
                }
                Op::Clamp(a, lo, hi) => {
                    let d = v(*a).mapv(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * d);
                }
                Op::Softmax(a) => {
                    let gy = &g * out;
                    let last = out.ndim() - 1;
                    let s = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                    let ga = gy - out * &s;
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let s = *g.first().unwrap();
                    acc(&mut grads, *a, Tensor::from_elem(v(*a).raw_dim(), s));
                }
                Op::SumAxis(a, axis, keep) => {
                    let g = if *keep { g } else { g.insert_axis(Axis(*axis)) };
                    let full = g
                        .broadcast(v(*a).raw_dim())
                        .expect("sum-axis broadcast")
                        .to_owned();
                    acc(&mut grads, *a, full);
                }
                Op::Reshape(a) => {
                    let shape = v(*a).shape().to_vec();
                    let g = to_std(g).into_shape_with_order(IxDyn(&shape)).unwrap();
                    acc(&mut grads, *a, g);
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (k, &p) in perm.iter().enumerate() {
                        inv[p] = k;
                    }
                    let g = to_std(g.permuted_axes(IxDyn(&inv)));
                    acc(&mut grads, *a, g);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = v(p).shape()[*axis];
                        let piece = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .to_owned();
                        acc(&mut grads, p, to_std(piece));
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let mut full = Tensor::zeros(v(*a).raw_dim());
                    let len = g.shape()[*axis];
                    full.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                        .assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::Pad(a, axis, before) => {
                    let len = v(*a).shape()[*axis];
                    let piece = g
                        .slice_axis(Axis(*axis), Slice::from(*before..*before + len))
                        .to_owned();
                    acc(&mut grads, *a, to_std(piece));
                }
                Op::MatMul(a, b) => {
                    let av = v(*a);
                    let bv = v(*b);
                    let g = to_std(g);
                    let g2 = as_matrix(&g);
                    let b2 = bv
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("matmul rhs must be 2-D");
                    let ga = g2.dot(&b2.t());
                    let gb = as_matrix(av).t().dot(&g2);
                    let ga = to_std(ga.into_dyn()).into_shape_with_order(IxDyn(av.shape())).unwrap();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb.into_dyn());
                }
                Op::BatchMatMul(a, b) => {
                    let av = v(*a).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let bv = v(*b).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let g3 = g.into_dimensionality::<ndarray::Ix3>().unwrap();
                    let mut ga = ndarray::Array3::<f64>::zeros(av.raw_dim());
                    let mut gb = ndarray::Array3::<f64>::zeros(bv.raw_dim());
                    for k in 0..av.shape()[0] {
                        let gk = g3.index_axis(Axis(0), k);
                        general_mat_mul(
                            1.0,
                            &gk,
                            &bv.index_axis(Axis(0), k).t(),
                            0.0,
                            &mut ga.index_axis_mut(Axis(0), k),
                        );
                        general_mat_mul(
                            1.0,
                            &av.index_axis(Axis(0), k).t(),
                            &gk,
                            0.0,
                            &mut gb.index_axis_mut(Axis(0), k),
                        );
                    }
                    acc(&mut grads, *a, ga.into_dyn());
                    acc(&mut grads, *b, gb.into_dyn());
                }
                Op::Conv1d(x, w, geom) => {
                    let xv = v(*x);
                    let wv = v(*w);
                    let (kernel, cin, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                    let w2 = wv.view().into_shape_with_order((kernel * cin, cout)).unwrap();
                    let g = to_std(g);
                    let g2 = as_matrix(&g);
                    let (col, _) = im2col(xv, kernel, *geom);
                    let gw = col.t().dot(&g2);
                    let gcol = g2.dot(&w2.t());
                    let gx = col2im(&gcol, xv.shape(), kernel, *geom);
                    acc(&mut grads, *x, gx);
                    acc(
                        &mut grads,
                        *w,
                        to_std(gw.into_dyn())
                            .into_shape_with_order(IxDyn(&[kernel, cin, cout]))
                            .unwrap(),
                    );
                }
            }
        }
        Gradients {
            grads,
            bindings: self.bindings.borrow().clone(),
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The single element of a scalar (or one-element) node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Self {
        let out = self.value().mapv(f);
        self.tape.push(out, op)
    }

    pub fn add(self, other: Var<'t>) -> Self {
        let out = &*self.value() + &*other.value();
        self.tape.push(to_std(out), Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Self {
        let out = &*self.value() - &*other.value();
        self.tape.push(to_std(out), Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Self {
        let out = &*self.value() * &*other.value();
        self.tape.push(to_std(out), Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Self {
        let out = &*self.value() / &*other.value();
        self.tape.push(to_std(out), Op::Div(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Self {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(self, s: f64) -> Self {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(self) -> Self {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        self.unary(Op::LeakyRelu(self.id, slope), |x| {
            if x > 0.0 {
                x
            } else {
                x * slope
            }
        })
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Self {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Self {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(self) -> Self {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Softmax over the last axis. With a mask, entries where `mask[i][j]`
    /// is false (row `i` of the trailing `N x N` block) are exactly zero.
    pub fn softmax(self, mask: Option<Arc<Array2<bool>>>) -> Self {
        let out = softmax_rows(&self.value(), mask.as_deref());
        self.tape.push(out, Op::Softmax(self.id))
    }

    pub fn sum(self) -> Self {
        let s = self.value().sum();
        self.tape
            .push(Tensor::from_elem(IxDyn(&[]), s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Self {
        let mut out = self.value().sum_axis(Axis(axis));
        if keepdim {
            out = out.insert_axis(Axis(axis));
        }
        self.tape.push(out, Op::SumAxis(self.id, axis, keepdim))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let out = (*self.value())
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", self.shape(), shape));
        self.tape.push(out, Op::Reshape(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Self {
        let out = to_std((*self.value()).clone().permuted_axes(IxDyn(perm)));
        self.tape.push(out, Op::Permute(self.id, perm.to_vec()))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let out = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.tape.push(to_std(out), Op::Narrow(self.id, axis, start))
    }

    /// Zero-pad along `axis`.
    pub fn pad(self, axis: usize, before: usize, after: usize) -> Self {
        let v = self.value();
        let mut shape = v.shape().to_vec();
        let len = shape[axis];
        shape[axis] += before + after;
        let mut out = Tensor::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(before..before + len))
            .assign(&*v);
        self.tape.push(out, Op::Pad(self.id, axis, before))
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Self {
        let a = self.value();
        let b = rhs.value();
        let b2 = b
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs must be 2-D");
        assert_eq!(
            a.shape().last(),
            Some(&b2.nrows()),
            "matmul inner dimension mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let out = as_matrix(&a).dot(&b2);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = b2.ncols();
        let out = to_std(out.into_dyn()).into_shape_with_order(IxDyn(&shape)).unwrap();
        self.tape.push(out, Op::MatMul(self.id, rhs.id))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(self, rhs: Var<'t>) -> Self {
        let a = self.value();
        let b = rhs.value();
        let a3 = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let b3 = b.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        assert_eq!(a3.shape()[0], b3.shape()[0]);
        assert_eq!(a3.shape()[2], b3.shape()[1]);
        let mut out = ndarray::Array3::<f64>::zeros((a3.shape()[0], a3.shape()[1], b3.shape()[2]));
        for k in 0..a3.shape()[0] {
            general_mat_mul(
                1.0,
                &a3.index_axis(Axis(0), k),
                &b3.index_axis(Axis(0), k),
                0.0,
                &mut out.index_axis_mut(Axis(0), k),
            );
        }
        self.tape
            .push(out.into_dyn(), Op::BatchMatMul(self.id, rhs.id))
    }

    /// Channel-last convolution: `self` is `[B, L, Cin]`, `weight` is
    /// `[K, Cin, Cout]`, result is `[B, L_out, Cout]`.
    pub fn conv1d(self, weight: Var<'t>, geom: Conv1dGeom) -> Self {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.ndim(), 3, "conv1d input must be [B, L, C]");
        let (kernel, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        assert_eq!(x.shape()[2], cin, "conv1d channel mismatch");
        let (col, l_out) = im2col(&x, kernel, geom);
        let w2 = w.view().into_shape_with_order((kernel * cin, cout)).unwrap();
        let out = to_std(col.dot(&w2).into_dyn())
            .into_shape_with_order(IxDyn(&[x.shape()[0], l_out, cout]))
            .unwrap();
        self.tape
            .push(out, Op::Conv1d(self.id, weight.id, geom))
    }
}

macro_rules! bin_op {
    ($trait:ident, $method:ident, $impl:ident) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                Var::$impl(self, rhs)
            }
        }
    };
}

bin_op!(Add, add, add);
bin_op!(Sub, sub, sub);
bin_op!(Mul, mul, mul);
bin_op!(Div, div, div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            g.as_slice_mut().unwrap()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x: Tensor, build: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>) {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = build(&tape, xv).sum();
        let grads = tape.backward(y);
        let analytic = grads.get(xv).unwrap().clone();
        let numeric = numeric_grad(&x, |xx| {
            let t = Tape::new();
            let v = t.constant(xx.clone());
            build(&t, v).sum().item()
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    fn sample(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_shape_fn(IxDyn(shape), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn elementwise_gradients() {
        check(sample(&[3, 4], 1), |_, x| x.sigmoid());
        check(sample(&[3, 4], 2), |_, x| x.tanh().square());
        check(sample(&[3, 4], 3), |_, x| x.leaky_relu(0.2).scale(3.0));
        check(sample(&[3, 4], 4), |_, x| x.exp().add_scalar(1.0).ln());
        check(sample(&[3, 4], 5).mapv(|v| v.abs() + 0.5), |_, x| x.sqrt());
    }

    #[test]
    fn broadcast_gradients() {
        let b = sample(&[4], 9);
        check(sample(&[2, 3, 4], 6), move |t, x| {
            let bb = t.constant(b.clone());
            (x * bb + bb) / (bb.square().add_scalar(1.0))
        });
        let col = sample(&[2, 3, 1], 10);
        check(sample(&[2, 1, 4], 7), move |t, x| x - t.constant(col.clone()));
    }

    #[test]
    fn shape_op_gradients() {
        check(sample(&[2, 3, 4], 11), |_, x| {
            x.permute(&[0, 2, 1]).narrow(1, 1, 2).pad(2, 1, 2).square()
        });
        check(sample(&[2, 3, 4], 12), |t, x| {
            t.concat(&[x, x.scale(2.0)], 2).reshape(&[6, 8]).sum_axis(1, false).square()
        });
    }

    #[test]
    fn matmul_gradients() {
        let w = sample(&[4, 5], 13);
        check(sample(&[2, 3, 4], 14), move |t, x| x.matmul(t.constant(w.clone())).tanh());
        let x = sample(&[2, 3, 4], 15);
        check(sample(&[4, 5], 16), move |t, w| t.constant(x.clone()).matmul(w).square());
        let rhs = sample(&[2, 4, 3], 17);
        check(sample(&[2, 3, 4], 18), move |t, a| a.bmm(t.constant(rhs.clone())).square());
        let lhs = sample(&[2, 3, 4], 19);
        check(sample(&[2, 4, 3], 20), move |t, b| t.constant(lhs.clone()).bmm(b).square());
    }

    #[test]
    fn softmax_gradient_and_mask() {
        let mask = Arc::new(array![[true, true, false], [false, true, true], [true, false, true]]);
        let m2 = mask.clone();
        let weights = sample(&[2, 3, 3], 22);
        check(sample(&[2, 3, 3], 21), move |t, x| {
            x.softmax(Some(m2.clone())) * t.constant(weights.clone())
        });
        let tape = Tape::new();
        let y = tape.constant(sample(&[2, 3, 3], 23)).softmax(Some(mask));
        let v = y.value();
        assert_eq!(v[[0, 0, 2]], 0.0);
        assert_eq!(v[[1, 1, 0]], 0.0);
        for row in v.lanes(Axis(2)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_matches_direct_sum_and_gradients() {
        let x = sample(&[2, 7, 3], 24);
        let w = sample(&[3, 3, 2], 25);
        let geom = Conv1dGeom {
            dilation: 2,
            pad_left: 2,
            pad_right: 2,
        };
        let tape = Tape::new();
        let y = tape.constant(x.clone()).conv1d(tape.constant(w.clone()), geom).value();
        assert_eq!(y.shape(), &[2, 7, 2]);
        for b in 0..2 {
            for l in 0..7 {
                for o in 0..2 {
                    let mut s = 0.0;
                    for k in 0..3 {
                        let p = l as isize + (k * 2) as isize - 2;
                        if !(0..7).contains(&p) {
                            continue;
                        }
                        for c in 0..3 {
                            s += x[[b, p as usize, c]] * w[[k, c, o]];
                        }
                    }
                    assert!((y[[b, l, o]] - s).abs() < 1e-12);
                }
            }
        }
        let w2 = w.clone();
        check(x.clone(), move |t, xv| xv.conv1d(t.constant(w2.clone()), geom).square());
        check(w, move |t, wv| t.constant(x.clone()).conv1d(wv, geom).square());
    }

    #[test]
    fn same_padding_keeps_length() {
        for k in [3, 5, 7] {
            for d in [1, 2, 4, 8] {
                let g = Conv1dGeom::same(k, d);
                assert_eq!(g.pad_left + g.pad_right, d * (k - 1));
            }
        }
    }
}
