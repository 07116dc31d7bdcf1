//! Layer building blocks: convolution and instance normalization.
//!
//! Layers hold parameter ids into a [`ParamStore`]; forward methods
//! build tape nodes, so one layer definition serves both the f32
//! training path and the f64 verification path.

use crate::init::{init_array, ones, zeros, Init};
use crate::params::{PId, ParamGroup, ParamStore};
use crate::tape::{Scalar, Tape, Var};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: PId,
    pub b: Option<PId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        group: ParamGroup,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.register(
            format!("{name}.w"),
            init_array(&[cout, cin, k, k], init, fan_in, rng),
            group,
        );
        let b = store.register(format!("{name}.b"), zeros(&[cout]), group);
        Conv2d {
            w,
            b: Some(b),
            stride,
            pad,
        }
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = t.param(store, self.w);
        let b = self.b.map(|id| t.param(store, id));
        t.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Forward with parameters treated as constants (no gradients into
    /// this layer). Used for the generator-side pass through a critic.
    pub fn forward_frozen<F: Scalar>(&self, t: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = t.frozen_param(store, self.w);
        let b = self.b.map(|id| t.frozen_param(store, id));
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Instance normalization with affine parameters, built from primitive
/// tape ops so its backward comes from composition.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: PId,
    pub beta: PId,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        group: ParamGroup,
    ) -> Self {
        let gamma = store.register(format!("{name}.gamma"), ones(&[channels, 1, 1]), group);
        let beta = store.register(format!("{name}.beta"), zeros(&[channels, 1, 1]), group);
        InstanceNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let mu = t.mean_axes_keep(x, &[1, 2]);
        let centered = t.sub(x, mu);
        let sq = t.square(centered);
        let var = t.mean_axes_keep(sq, &[1, 2]);
        let var_eps = t.add_scalar(var, F::from_f64(self.eps));
        let std = t.sqrt(var_eps);
        let normed = t.div(centered, std);
        let gamma = t.param(store, self.gamma);
        let beta = t.param(store, self.beta);
        let scaled = t.mul(normed, gamma);
        t.add(scaled, beta)
    }
}

/// Per-channel spatial mean over a CHW feature map -> (C,1,1).
pub fn channel_mean<F: Scalar>(t: &mut Tape<F>, x: Var) -> Var {
    t.mean_axes_keep(x, &[1, 2])
}

/// Population (biased) per-channel standard deviation -> (C,1,1).
pub fn channel_std<F: Scalar>(t: &mut Tape<F>, x: Var, eps_under_sqrt: f64) -> Var {
    let mu = t.mean_axes_keep(x, &[1, 2]);
    let c = t.sub(x, mu);
    let sq = t.square(c);
    let var = t.mean_axes_keep(sq, &[1, 2]);
    let ve = t.add_scalar(var, F::from_f64(eps_under_sqrt));
    t.sqrt(ve)
}
