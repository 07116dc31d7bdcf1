//! Tape-based computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the reversed insertion
//! order is already a topological order for backprop. Values are held
//! behind `Arc` so parameter leaves share storage with the
//! [`crate::params::ParamStore`] instead of being cloned per tape.

use ndarray::prelude::*;
use ndarray::{IxDyn, Zip};
use std::collections::HashMap;
use std::sync::Arc;

/// Element type the engine runs in. `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar: ndarray::NdFloat + std::iter::Sum<Self> {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

enum Op<F: Scalar> {
    Leaf { param: Option<usize> },
    Detach(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize, F),
    MulScalar(usize, F),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Relu(usize),
    LeakyRelu(usize, F),
    Softplus(usize),
    Sigmoid(usize),
    Tanh(usize),
    MaxElem(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxesKeep(usize, Vec<usize>),
    MatMul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    Upsample2(usize),
    ConcatC(usize, usize),
    CropHw {
        x: usize,
        top: usize,
        left: usize,
    },
    PadBr {
        x: usize,
        bottom: usize,
        right: usize,
        reflect: bool,
    },
    GatherRows {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
}

struct Node<F: Scalar> {
    value: Arc<ArrayD<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Grads<F: Scalar> {
    by_node: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn of(&self, v: Var) -> Option<&ArrayD<F>> {
        self.by_node[v.0].as_ref()
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    param_cache: HashMap<usize, Var>,
    frozen_cache: HashMap<usize, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            param_cache: HashMap::new(),
            frozen_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-d (scalar) node.
    pub fn scalar(&self, v: Var) -> F {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        a.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_shared(&mut self, value: Arc<ArrayD<F>>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Constant input; no gradient flows to it.
    pub fn constant(&mut self, a: ArrayD<F>) -> Var {
        self.push(a, Op::Leaf { param: None }, false)
    }

    /// Differentiable input leaf (used for data-side gradient checks).
    pub fn leaf(&mut self, a: ArrayD<F>) -> Var {
        self.push(a, Op::Leaf { param: None }, true)
    }

    pub fn scalar_const(&mut self, v: F) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Parameter leaf sharing storage with the store; gradients are
    /// reported against the parameter id.
    pub fn param(&mut self, store: &crate::params::ParamStore<F>, id: crate::params::PId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push_shared(store.value(id).clone(), Op::Leaf { param: Some(id) }, true);
        self.param_cache.insert(id, v);
        v
    }

    /// Parameter treated as a constant (no gradient). Used where a loss
    /// must not touch another subnetwork's parameters by construction.
    pub fn frozen_param(
        &mut self,
        store: &crate::params::ParamStore<F>,
        id: crate::params::PId,
    ) -> Var {
        if let Some(&v) = self.frozen_cache.get(&id) {
            return v;
        }
        let v = self.push_shared(store.value(id).clone(), Op::Leaf { param: None }, false);
        self.frozen_cache.insert(id, v);
        v
    }

    /// Identity in value, blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push_shared(value, Op::Detach(a.0), false)
    }

    // ---- elementwise binary (co-broadcasting) ----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: impl Fn(usize, usize) -> Op<F>,
    ) -> Var {
        let shape = broadcast_shape(self.value(a).shape(), self.value(b).shape());
        let va = self.value(a).broadcast(shape.clone()).unwrap();
        let vb = self.value(b).broadcast(shape.clone()).unwrap();
        let mut out = ArrayD::zeros(shape);
        Zip::from(&mut out).and(&va).and(&vb).for_each(|o, &x, &y| *o = f(x, y));
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(out, op(a.0, b.0), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    /// Elementwise maximum; shapes must match. Ties route the gradient
    /// to the first argument.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        self.binary(a, b, |x, y| if x >= y { x } else { y }, Op::MaxElem)
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out = self.value(a).mapv(f);
        let ng = self.ng(a.0);
        self.push(out, op, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a.0))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a.0, c))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: F) -> Var {
        self.unary(
            a,
            |x| if x > F::zero() { x } else { alpha * x },
            Op::LeakyRelu(a.0, alpha),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus_stable, Op::Softplus(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_stable, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a.0))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a.0);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a.0), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / F::from_f64(v.len() as f64);
        let ng = self.ng(a.0);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::MeanAll(a.0), ng)
    }

    /// Sum over the given axes, keeping them as size-1 dims.
    pub fn sum_axes_keep(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut out = self.value(a).to_owned();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            let summed = out.sum_axis(Axis(ax));
            out = summed.insert_axis(Axis(ax));
        }
        let ng = self.ng(a.0);
        self.push(out, Op::SumAxesKeep(a.0, sorted), ng)
    }

    pub fn mean_axes_keep(&mut self, a: Var, axes: &[usize]) -> Var {
        let shape = self.value(a).shape().to_vec();
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes_keep(a, axes);
        self.mul_scalar(s, F::from_f64(1.0 / n as f64))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = as2(self.value(a));
        let vb = as2(self.value(b));
        assert_eq!(va.shape()[1], vb.shape()[0], "matmul inner dims");
        let out = va.dot(&vb).into_dyn();
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(out, Op::MatMul(a.0, b.0), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = as2(self.value(a));
        let out = va.t().to_owned().into_dyn();
        let ng = self.ng(a.0);
        self.push(out, Op::Transpose(a.0), ng)
    }

    /// Row-wise softmax of a 2-d array.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = as2(self.value(a));
        let mut out = va.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let ng = self.ng(a.0);
        self.push(out.into_dyn(), Op::SoftmaxRows(a.0), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape size");
        let out = v
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape requires standard layout");
        let ng = self.ng(a.0);
        self.push(out, Op::Reshape(a.0), ng)
    }

    /// Gather rows of a 2-d array by index (with repetition allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let va = as2(self.value(a));
        let cols = va.shape()[1];
        let mut out = Array2::<F>::zeros((idx.len(), cols));
        for (k, &r) in idx.iter().enumerate() {
            out.row_mut(k).assign(&va.row(r));
        }
        let ng = self.ng(a.0);
        self.push(out.into_dyn(), Op::GatherRows { x: a.0, idx }, ng)
    }

    // ---- image ops (CHW) ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = as3(self.value(x));
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let (cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, cin_w, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let col = im2col(&xv, kh, kw, stride, pad, ho, wo);
        let w2 = wv
            .to_shape((cout, cin * kh * kw))
            .expect("conv weight layout");
        let mut out2 = w2.dot(&col);
        if let Some(bv) = b {
            let bias = self.value(bv);
            for (c, mut row) in out2.rows_mut().into_iter().enumerate() {
                let bc = bias[[c]];
                row.mapv_inplace(|v| v + bc);
            }
        }
        let out = out2
            .into_shape_with_order((cout, ho, wo))
            .unwrap()
            .into_dyn();
        let ng = self.ng(x.0) || self.ng(w.0) || b.map(|bv| self.ng(bv.0)).unwrap_or(false);
        self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                pad,
            },
            ng,
        )
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array3::<F>::zeros((c, ho, wo));
        let mut argmax = vec![0u32; c * ho * wo];
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut bidx = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (ih, iw) = (2 * oh + di, 2 * ow + dj);
                            let v = xv[[ci, ih, iw]];
                            if v > best {
                                best = v;
                                bidx = (ci * h + ih) * w + iw;
                            }
                        }
                    }
                    out[[ci, oh, ow]] = best;
                    argmax[(ci * ho + oh) * wo + ow] = bidx as u32;
                }
            }
        }
        let ng = self.ng(x.0);
        self.push(out.into_dyn(), Op::MaxPool2 { x: x.0, argmax }, ng)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Array3::<F>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = xv[[ci, i, j]];
                    out[[ci, 2 * i, 2 * j]] = v;
                    out[[ci, 2 * i + 1, 2 * j]] = v;
                    out[[ci, 2 * i, 2 * j + 1]] = v;
                    out[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        let ng = self.ng(x.0);
        self.push(out.into_dyn(), Op::Upsample2(x.0), ng)
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let va = as3(self.value(a));
        let vb = as3(self.value(b));
        assert_eq!(va.shape()[1..], vb.shape()[1..], "concat_c spatial dims");
        let out = ndarray::concatenate(Axis(0), &[va.view(), vb.view()]).unwrap();
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(out.into_dyn(), Op::ConcatC(a.0, b.0), ng)
    }

    pub fn crop_hw(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let xv = as3(self.value(x));
        let out = xv
            .slice(ndarray::s![.., top..top + h, left..left + w])
            .to_owned();
        let ng = self.ng(x.0);
        self.push(
            out.into_dyn(),
            Op::CropHw {
                x: x.0,
                top,
                left,
            },
            ng,
        )
    }

    /// Pad bottom/right, reflecting (without edge repetition) or zero.
    pub fn pad_br(&mut self, x: Var, bottom: usize, right: usize, reflect: bool) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if reflect {
            assert!(bottom < h && right < w, "reflect pad exceeds size");
        }
        let mut out = Array3::<F>::zeros((c, h + bottom, w + right));
        for ci in 0..c {
            for i in 0..h + bottom {
                let si = mirror(i, h, reflect);
                for j in 0..w + right {
                    let sj = mirror(j, w, reflect);
                    out[[ci, i, j]] = match (si, sj) {
                        (Some(si), Some(sj)) => xv[[ci, si, sj]],
                        _ => F::zero(),
                    };
                }
            }
        }
        let ng = self.ng(x.0);
        self.push(
            out.into_dyn(),
            Op::PadBr {
                x: x.0,
                bottom,
                right,
                reflect,
            },
            ng,
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Grads<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), F::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { by_node: grads }
    }

    /// Gradient w.r.t. a parameter leaf used in this tape, if any.
    pub fn param_grad<'g>(
        &self,
        grads: &'g Grads<F>,
        id: crate::params::PId,
    ) -> Option<&'g ArrayD<F>> {
        self.param_cache.get(&id).and_then(|v| grads.by_node[v.0].as_ref())
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.acc_bcast(grads, *a, g, |x| x);
                self.acc_bcast(grads, *b, g, |x| x);
            }
            Op::Sub(a, b) => {
                self.acc_bcast(grads, *a, g, |x| x);
                self.acc_bcast(grads, *b, g, |x| -x);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let vb = self.nodes[*b].value.broadcast(g.raw_dim()).unwrap();
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&vb).for_each(|gi, &y| *gi = *gi * y);
                    self.acc_reduce(grads, *a, ga);
                }
                if self.ng(*b) {
                    let va = self.nodes[*a].value.broadcast(g.raw_dim()).unwrap();
                    let mut gb = g.clone();
                    Zip::from(&mut gb).and(&va).for_each(|gi, &x| *gi = *gi * x);
                    self.acc_reduce(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let vb = self.nodes[*b].value.broadcast(g.raw_dim()).unwrap();
                if self.ng(*a) {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&vb).for_each(|gi, &y| *gi = *gi / y);
                    self.acc_reduce(grads, *a, ga);
                }
                if self.ng(*b) {
                    let va = self.nodes[*a].value.broadcast(g.raw_dim()).unwrap();
                    let mut gb = g.clone();
                    Zip::from(&mut gb)
                        .and(&va)
                        .and(&vb)
                        .for_each(|gi, &x, &y| *gi = -*gi * x / (y * y));
                    self.acc_reduce(grads, *b, gb);
                }
            }
            Op::MaxElem(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                if self.ng(*a) {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(&**va)
                        .and(&**vb)
                        .for_each(|gi, &x, &y| {
                            if x < y {
                                *gi = F::zero()
                            }
                        });
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = g.clone();
                    Zip::from(&mut gb)
                        .and(&**va)
                        .and(&**vb)
                        .for_each(|gi, &x, &y| {
                            if x >= y {
                                *gi = F::zero()
                            }
                        });
                    self.acc(grads, *b, gb);
                }
            }
            Op::Neg(a) => self.acc_map(grads, *a, g, |gi, _| -gi),
            Op::AddScalar(a, _) => self.acc_map(grads, *a, g, |gi, _| gi),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.acc_map(grads, *a, g, move |gi, _| gi * c)
            }
            Op::Abs(a) => self.acc_map(grads, *a, g, |gi, x| {
                if x > F::zero() {
                    gi
                } else if x < F::zero() {
                    -gi
                } else {
                    F::zero()
                }
            }),
            Op::Square(a) => self.acc_map(grads, *a, g, |gi, x| gi * (x + x)),
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                if self.ng(*a) {
                    let mut ga = g.clone();
                    let half = F::from_f64(0.5);
                    Zip::from(&mut ga).and(&**y).for_each(|gi, &yv| *gi = *gi * half / yv);
                    self.acc(grads, *a, ga);
                }
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                if self.ng(*a) {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&**y).for_each(|gi, &yv| *gi = *gi * yv);
                    self.acc(grads, *a, ga);
                }
            }
            Op::Relu(a) => self.acc_map(grads, *a, g, |gi, x| {
                if x > F::zero() {
                    gi
                } else {
                    F::zero()
                }
            }),
            Op::LeakyRelu(a, alpha) => {
                let alpha = *alpha;
                self.acc_map(grads, *a, g, move |gi, x| {
                    if x > F::zero() {
                        gi
                    } else {
                        gi * alpha
                    }
                })
            }
            Op::Softplus(a) => self.acc_map(grads, *a, g, |gi, x| gi * sigmoid_stable(x)),
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                if self.ng(*a) {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(&**y)
                        .for_each(|gi, &yv| *gi = *gi * yv * (F::one() - yv));
                    self.acc(grads, *a, ga);
                }
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                if self.ng(*a) {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(&**y)
                        .for_each(|gi, &yv| *gi = *gi * (F::one() - yv * yv));
                    self.acc(grads, *a, ga);
                }
            }
            Op::SumAll(a) => {
                let gs = g.iter().copied().next().unwrap();
                let shape = self.nodes[*a].value.raw_dim();
                self.acc(grads, *a, ArrayD::from_elem(shape, gs));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.len();
                let gs = g.iter().copied().next().unwrap() / F::from_f64(n as f64);
                let shape = self.nodes[*a].value.raw_dim();
                self.acc(grads, *a, ArrayD::from_elem(shape, gs));
            }
            Op::SumAxesKeep(a, _) => {
                if self.ng(*a) {
                    let shape = self.nodes[*a].value.raw_dim();
                    let ga = g.broadcast(shape).unwrap().to_owned();
                    self.acc(grads, *a, ga);
                }
            }
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                if self.ng(*a) {
                    let vb = as2(&self.nodes[*b].value);
                    self.acc(grads, *a, g2.dot(&vb.t()).into_dyn());
                }
                if self.ng(*b) {
                    let va = as2(&self.nodes[*a].value);
                    self.acc(grads, *b, va.t().dot(&g2).into_dyn());
                }
            }
            Op::Transpose(a) => {
                let g2 = as2(g);
                self.acc(grads, *a, g2.t().to_owned().into_dyn());
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let y = as2(&self.nodes[i].value);
                    let g2 = as2(g);
                    let mut ga = Array2::<F>::zeros(y.raw_dim());
                    for (mut row_out, (row_y, row_g)) in ga
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows().into_iter().zip(g2.rows()))
                    {
                        let dot: F = row_y
                            .iter()
                            .zip(row_g.iter())
                            .map(|(&yv, &gv)| yv * gv)
                            .sum();
                        Zip::from(&mut row_out)
                            .and(&row_y)
                            .and(&row_g)
                            .for_each(|o, &yv, &gv| *o = yv * (gv - dot));
                    }
                    self.acc(grads, *a, ga.into_dyn());
                }
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.raw_dim();
                let ga = g.to_owned().into_shape_with_order(shape).unwrap();
                self.acc(grads, *a, ga);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.backprop_conv(i, *x, *w, *b, *stride, *pad, g, grads);
            }
            Op::MaxPool2 { x, argmax } => {
                if self.ng(*x) {
                    let shape = self.nodes[*x].value.raw_dim();
                    let mut gx = ArrayD::<F>::zeros(shape);
                    let gx_flat = gx.as_slice_mut().unwrap();
                    for (k, &src) in argmax.iter().enumerate() {
                        gx_flat[src as usize] = gx_flat[src as usize] + g.as_slice().unwrap()[k];
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Upsample2(x) => {
                if self.ng(*x) {
                    let xv = &self.nodes[*x].value;
                    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let g3 = as3(g);
                    let mut gx = Array3::<F>::zeros((c, h, w));
                    for ci in 0..c {
                        for ih in 0..h {
                            for iw in 0..w {
                                gx[[ci, ih, iw]] = g3[[ci, 2 * ih, 2 * iw]]
                                    + g3[[ci, 2 * ih + 1, 2 * iw]]
                                    + g3[[ci, 2 * ih, 2 * iw + 1]]
                                    + g3[[ci, 2 * ih + 1, 2 * iw + 1]];
                            }
                        }
                    }
                    self.acc(grads, *x, gx.into_dyn());
                }
            }
            Op::ConcatC(a, b) => {
                let ca = self.nodes[*a].value.shape()[0];
                let g3 = as3(g);
                if self.ng(*a) {
                    let ga = g3.slice(ndarray::s![..ca, .., ..]).to_owned();
                    self.acc(grads, *a, ga.into_dyn());
                }
                if self.ng(*b) {
                    let gb = g3.slice(ndarray::s![ca.., .., ..]).to_owned();
                    self.acc(grads, *b, gb.into_dyn());
                }
            }
            Op::CropHw { x, top, left } => {
                if self.ng(*x) {
                    let shape = self.nodes[*x].value.raw_dim();
                    let mut gx = ArrayD::<F>::zeros(shape);
                    let g3 = as3(g);
                    let (h, w) = (g3.shape()[1], g3.shape()[2]);
                    gx.slice_mut(ndarray::s![.., *top..top + h, *left..left + w])
                        .assign(&g3);
                    self.acc(grads, *x, gx);
                }
            }
            Op::PadBr {
                x,
                bottom: _,
                right: _,
                reflect,
            } => {
                if self.ng(*x) {
                    let xv = &self.nodes[*x].value;
                    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let g3 = as3(g);
                    let mut gx = Array3::<F>::zeros((c, h, w));
                    for ci in 0..c {
                        for i in 0..g3.shape()[1] {
                            let Some(si) = mirror(i, h, *reflect) else { continue };
                            for j in 0..g3.shape()[2] {
                                let Some(sj) = mirror(j, w, *reflect) else { continue };
                                gx[[ci, si, sj]] = gx[[ci, si, sj]] + g3[[ci, i, j]];
                            }
                        }
                    }
                    self.acc(grads, *x, gx.into_dyn());
                }
            }
            Op::GatherRows { x, idx } => {
                if self.ng(*x) {
                    let shape = self.nodes[*x].value.raw_dim();
                    let mut gx = ArrayD::<F>::zeros(shape);
                    let mut gx2 = gx.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let g2 = as2(g);
                    for (k, &r) in idx.iter().enumerate() {
                        let mut row = gx2.row_mut(r);
                        row += &g2.row(k);
                    }
                    self.acc(grads, *x, gx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        _i: usize,
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        g: &ArrayD<F>,
        grads: &mut [Option<ArrayD<F>>],
    ) {
        let xv = as3(&self.nodes[x].value);
        let wv = self.nodes[w]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (cin, kh, kw) = (wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        let cout = wv.shape()[0];
        let g3 = as3(g);
        let (ho, wo) = (g3.shape()[1], g3.shape()[2]);
        let g2 = g3
            .to_shape((cout, ho * wo))
            .expect("conv grad layout");
        if let Some(bi) = b {
            if self.ng(bi) {
                let db = g2.sum_axis(Axis(1));
                self.acc(grads, bi, db.into_dyn());
            }
        }
        if self.ng(w) {
            // Recompute im2col instead of caching it on the tape.
            let col = im2col(&xv, kh, kw, stride, pad, ho, wo);
            let dw = g2.dot(&col.t());
            let dw = dw
                .into_shape_with_order((cout, cin, kh, kw))
                .unwrap()
                .into_dyn();
            self.acc(grads, w, dw);
        }
        if self.ng(x) {
            let w2 = wv.to_shape((cout, cin * kh * kw)).unwrap();
            let dcol = w2.t().dot(&g2);
            let dx = col2im(
                &dcol,
                xv.shape()[0],
                xv.shape()[1],
                xv.shape()[2],
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            );
            self.acc(grads, x, dx.into_dyn());
        }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<F>>], target: usize, g: ArrayD<F>) {
        if !self.ng(target) {
            return;
        }
        match &mut grads[target] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_map(
        &self,
        grads: &mut [Option<ArrayD<F>>],
        target: usize,
        g: &ArrayD<F>,
        f: impl Fn(F, F) -> F,
    ) {
        if !self.ng(target) {
            return;
        }
        let x = &self.nodes[target].value;
        let mut ga = g.clone();
        Zip::from(&mut ga).and(&**x).for_each(|gi, &xv| *gi = f(*gi, xv));
        self.acc(grads, target, ga);
    }

    fn acc_bcast(
        &self,
        grads: &mut [Option<ArrayD<F>>],
        target: usize,
        g: &ArrayD<F>,
        f: impl Fn(F) -> F,
    ) {
        if !self.ng(target) {
            return;
        }
        let ga = g.mapv(&f);
        self.acc_reduce(grads, target, ga);
    }

    /// Accumulate a full-shape gradient into a possibly-broadcast parent.
    fn acc_reduce(&self, grads: &mut [Option<ArrayD<F>>], target: usize, g: ArrayD<F>) {
        if !self.ng(target) {
            return;
        }
        let tshape = self.nodes[target].value.shape().to_vec();
        let reduced = reduce_to_shape(g, &tshape);
        self.acc(grads, target, reduced);
    }
}

fn softplus_stable<F: Scalar>(x: F) -> F {
    let hi = F::from_f64(20.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn mirror(i: usize, n: usize, reflect: bool) -> Option<usize> {
    if i < n {
        Some(i)
    } else if reflect {
        Some(2 * n - 2 - i)
    } else {
        None
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> IxDyn {
    assert_eq!(a.len(), b.len(), "binary ops require equal ndim");
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        if x == y {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else if y == 1 {
            out.push(x);
        } else {
            panic!("incompatible broadcast {:?} vs {:?}", a, b);
        }
    }
    IxDyn(&out)
}

fn reduce_to_shape<F: Scalar>(g: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    let mut out = g;
    for ax in 0..shape.len() {
        if out.shape()[ax] != shape[ax] {
            debug_assert_eq!(shape[ax], 1);
            let summed = out.sum_axis(Axis(ax));
            out = summed.insert_axis(Axis(ax));
        }
    }
    out
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d")
}

fn as3<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView3<'_, F> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-d")
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &ndarray::ArrayView3<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<F>::zeros((cin * kh * kw, ho * wo));
    let xs = x.as_slice().expect("conv input must be contiguous");
    let cs = col.as_slice_mut().unwrap();
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * ho * wo;
                for oh in 0..ho {
                    let ih = oh * stride + ki;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    let xrow = (c * h + ih) * w;
                    let orow = base + oh * wo;
                    for ow in 0..wo {
                        let iw = ow * stride + kj;
                        if iw < pad || iw >= w + pad {
                            continue;
                        }
                        cs[orow + ow] = xs[xrow + iw - pad];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<F> {
    let mut dx = Array3::<F>::zeros((cin, h, w));
    let ds = dcol.as_slice().expect("col grad contiguous");
    {
        let dxs = dx.as_slice_mut().unwrap();
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let base = row * ho * wo;
                    for oh in 0..ho {
                        let ih = oh * stride + ki;
                        if ih < pad || ih >= h + pad {
                            continue;
                        }
                        let ih = ih - pad;
                        let xrow = (c * h + ih) * w;
                        let orow = base + oh * wo;
                        for ow in 0..wo {
                            let iw = ow * stride + kj;
                            if iw < pad || iw >= w + pad {
                                continue;
                            }
                            let t = xrow + iw - pad;
                            dxs[t] = dxs[t] + ds[orow + ow];
                        }
                    }
                }
            }
        }
    }
    dx
}
