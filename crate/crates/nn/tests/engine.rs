//! Finite-difference checks for every op family plus optimizer sanity.

use ndarray::prelude::*;
use ndarray::IxDyn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdfc_nn::gradcheck::max_rel_err;
use rdfc_nn::{Tape, Var};
use std::sync::Arc;

const TOL: f64 = 1e-6;
const STEP: f64 = 1e-5;

fn randa(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
}

fn randa_pos(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(0.5..2.0))
}

#[test]
fn binary_ops_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randa(&mut rng, &[3, 4]);
    let b = randa_pos(&mut rng, &[3, 4]);
    for op in 0..4 {
        let err = max_rel_err(
            &[a.clone(), b.clone()],
            |t, v| {
                let r = match op {
                    0 => t.add(v[0], v[1]),
                    1 => t.sub(v[0], v[1]),
                    2 => t.mul(v[0], v[1]),
                    _ => t.div(v[0], v[1]),
                };
                let sq = t.square(r);
                t.mean_all(sq)
            },
            STEP,
        );
        assert!(err < TOL, "op {op} err {err}");
    }
}

#[test]
fn broadcast_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // (C,1,1) x (1,H,W) co-broadcast, as used by the fusion module.
    let a = randa(&mut rng, &[3, 1, 1]);
    let b = randa(&mut rng, &[1, 4, 5]);
    let err = max_rel_err(
        &[a, b],
        |t, v| {
            let m = t.mul(v[0], v[1]);
            let s = t.sigmoid(m);
            t.mean_all(s)
        },
        STEP,
    );
    assert!(err < TOL, "err {err}");
}

#[test]
fn unary_ops_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randa_pos(&mut rng, &[2, 3]);
    for op in 0..9 {
        let err = max_rel_err(
            &[x.clone()],
            |t, v| {
                let r = match op {
                    0 => t.neg(v[0]),
                    1 => t.abs(v[0]),
                    2 => t.square(v[0]),
                    3 => t.sqrt(v[0]),
                    4 => t.exp(v[0]),
                    5 => t.softplus(v[0]),
                    6 => t.sigmoid(v[0]),
                    7 => t.tanh(v[0]),
                    _ => t.leaky_relu(v[0], 0.2),
                };
                t.sum_all(r)
            },
            STEP,
        );
        assert!(err < TOL, "unary op {op} err {err}");
    }
}

#[test]
fn reduction_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randa(&mut rng, &[3, 4, 5]);
    let err = max_rel_err(
        &[x.clone()],
        |t, v| {
            let s = t.sum_axes_keep(v[0], &[1, 2]);
            let sq = t.square(s);
            t.mean_all(sq)
        },
        STEP,
    );
    assert!(err < TOL, "sum_axes err {err}");

    let err = max_rel_err(
        &[x],
        |t, v| {
            let m = t.mean_axes_keep(v[0], &[0]);
            let e = t.exp(m);
            t.sum_all(e)
        },
        STEP,
    );
    assert!(err < TOL, "mean_axes err {err}");
}

#[test]
fn matmul_softmax_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = randa(&mut rng, &[4, 3]);
    let b = randa(&mut rng, &[3, 5]);
    let err = max_rel_err(
        &[a, b],
        |t, v| {
            let m = t.matmul(v[0], v[1]);
            let s = t.softmax_rows(m);
            let tr = t.transpose(s);
            let sq = t.square(tr);
            t.sum_all(sq)
        },
        STEP,
    );
    assert!(err < TOL, "matmul/softmax err {err}");
}

#[test]
fn conv_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 1, 4), (1, 0, 1), (2, 3, 7)] {
        let x = randa(&mut rng, &[2, 8, 8]);
        let w = randa(&mut rng, &[3, 2, k, k]);
        let b = randa(&mut rng, &[3]);
        let err = max_rel_err(
            &[x, w, b],
            |t, v| {
                let c = t.conv2d(v[0], v[1], Some(v[2]), stride, pad);
                let sq = t.square(c);
                t.mean_all(sq)
            },
            STEP,
        );
        assert!(err < TOL, "conv s{stride} p{pad} k{k} err {err}");
    }
}

#[test]
fn pool_upsample_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randa(&mut rng, &[2, 6, 6]);
    let err = max_rel_err(
        &[x.clone()],
        |t, v| {
            let p = t.max_pool2(v[0]);
            let sq = t.square(p);
            t.sum_all(sq)
        },
        STEP,
    );
    assert!(err < TOL, "maxpool err {err}");

    let err = max_rel_err(
        &[x],
        |t, v| {
            let u = t.upsample2(v[0]);
            let s = t.tanh(u);
            t.mean_all(s)
        },
        STEP,
    );
    assert!(err < TOL, "upsample err {err}");
}

#[test]
fn concat_crop_pad_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = randa(&mut rng, &[2, 5, 6]);
    let b = randa(&mut rng, &[3, 5, 6]);
    let err = max_rel_err(
        &[a.clone(), b],
        |t, v| {
            let c = t.concat_c(v[0], v[1]);
            let cr = t.crop_hw(c, 1, 2, 3, 3);
            let sq = t.square(cr);
            t.sum_all(sq)
        },
        STEP,
    );
    assert!(err < TOL, "concat/crop err {err}");

    for reflect in [false, true] {
        let err = max_rel_err(
            &[a.clone()],
            |t, v| {
                let p = t.pad_br(v[0], 3, 2, reflect);
                let s = t.square(p);
                t.mean_all(s)
            },
            STEP,
        );
        assert!(err < TOL, "pad reflect={reflect} err {err}");
    }
}

#[test]
fn gather_max_elem_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = randa(&mut rng, &[6, 3]);
    let idx = Arc::new(vec![0usize, 2, 2, 5, 1]);
    let err = max_rel_err(
        &[a.clone()],
        |t, v| {
            let g = t.gather_rows(v[0], idx.clone());
            let sq = t.square(g);
            t.sum_all(sq)
        },
        STEP,
    );
    assert!(err < TOL, "gather err {err}");

    let b = randa(&mut rng, &[6, 3]);
    let err = max_rel_err(
        &[a, b],
        |t, v| {
            let m = t.max_elem(v[0], v[1]);
            let s = t.square(m);
            t.mean_all(s)
        },
        STEP,
    );
    assert!(err < TOL, "max_elem err {err}");
}

#[test]
fn detach_blocks_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 3.0));
    let d = t.detach(x);
    let y = t.square(d);
    let root = t.sum_all(y);
    let grads = t.backward(root);
    assert!(grads.of(x).is_none(), "detach must block gradient");
}

#[test]
fn shared_subgraph_two_backwards() {
    // Two losses on one tape produce independent gradient stores.
    let mut t = Tape::<f64>::new();
    let x = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
    let sq = t.square(x);
    let l1 = t.sum_all(sq);
    let c = t.exp(x);
    let l2 = t.sum_all(c);
    let g1 = t.backward(l1);
    let g2 = t.backward(l2);
    let gx1 = g1.of(x).unwrap();
    let gx2 = g2.of(x).unwrap();
    assert!((gx1[[0]] - 4.0).abs() < 1e-12);
    assert!((gx2[[0]] - 2.0f64.exp()).abs() < 1e-12);
}

#[test]
fn adam_descends_quadratic() {
    use rdfc_nn::optim::Adam;
    use rdfc_nn::{GradAccum, ParamGroup, ParamStore};
    let mut store = ParamStore::<f64>::new();
    let p = store.register("p", ArrayD::from_elem(IxDyn(&[4]), 5.0), ParamGroup::Generator);
    let mut opt = Adam::new(&store, vec![p], 0.1, 0.9, 0.999, 0.0);
    for _ in 0..200 {
        let mut t = Tape::<f64>::new();
        let v = t.param(&store, p);
        let sq = t.square(v);
        let loss = t.sum_all(sq);
        let grads = t.backward(loss);
        let mut acc = GradAccum::new(store.len());
        acc.absorb(&t, &grads);
        opt.step(&mut store, &acc, 1.0);
    }
    let val = store.value(p);
    assert!(val.iter().all(|v| v.abs() < 0.5), "adam failed to descend: {val:?}");
}

#[test]
fn clip_group_bounds() {
    use rdfc_nn::{ParamGroup, ParamStore};
    let mut store = ParamStore::<f64>::new();
    let c = store.register(
        "c",
        ArrayD::from_shape_simple_fn(IxDyn(&[10]), {
            let mut k = -5.0;
            move || {
                k += 1.0;
                k
            }
        }),
        ParamGroup::Critic,
    );
    store.clip_group(ParamGroup::Critic, 0.01);
    assert!(store.value(c).iter().all(|v| v.abs() <= 0.01));
}

#[test]
fn frozen_param_gets_no_grad() {
    use rdfc_nn::{ParamGroup, ParamStore};
    let mut store = ParamStore::<f64>::new();
    let p = store.register("p", ArrayD::from_elem(IxDyn(&[3]), 1.5), ParamGroup::Critic);
    let mut t = Tape::<f64>::new();
    let x = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
    let w = t.frozen_param(&store, p);
    let y = t.mul(x, w);
    let root = t.sum_all(y);
    let grads = t.backward(root);
    assert!(t.param_grad(&grads, p).is_none());
    let gx = grads.of(x).unwrap();
    assert!((gx[[0]] - 1.5).abs() < 1e-12);
}

#[test]
fn conv_matches_direct_computation() {
    // 1x1 identity-ish kernel sanity: conv with k=1 stride=1 equals a
    // per-pixel linear map.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randa(&mut rng, &[2, 4, 4]);
    let w = randa(&mut rng, &[3, 2, 1, 1]);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let wv = t.constant(w.clone());
    let out = t.conv2d(xv, wv, None, 1, 0);
    let ov = t.value(out);
    for i in 0..4 {
        for j in 0..4 {
            for co in 0..3 {
                let expect: f64 = (0..2).map(|ci| w[[co, ci, 0, 0]] * x[[ci, i, j]]).sum();
                let got = ov[[co, i, j]];
                assert!((expect - got).abs() < 1e-12);
            }
        }
    }
}

/// Hand-rolled dense conv used as an oracle for strided/padded cases.
fn conv_oracle(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> Array3<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Array3::<f64>::zeros((cout, ho, wo));
    for co in 0..cout {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut s = 0.0;
                for ci in 0..cin {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let ih = oh * stride + ki;
                            let iw = ow * stride + kj;
                            if ih < pad || iw < pad {
                                continue;
                            }
                            let (ih, iw) = (ih - pad, iw - pad);
                            if ih >= h || iw >= wd {
                                continue;
                            }
                            s += x[[ci, ih, iw]] * w[[co, ci, ki, kj]];
                        }
                    }
                }
                out[[co, oh, ow]] = s;
            }
        }
    }
    out
}

#[test]
fn conv_matches_oracle_strided() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 1, 4), (2, 3, 7)] {
        let x = randa(&mut rng, &[3, 9, 11]);
        let w = randa(&mut rng, &[2, 3, k, k]);
        let expect = conv_oracle(&x, &w, stride, pad);
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x);
        let wv = t.constant(w);
        let out = t.conv2d(xv, wv, None, stride, pad);
        let got = t.value(out);
        assert_eq!(got.shape(), expect.shape());
        for (idx, &e) in expect.indexed_iter() {
            let g = got[[idx.0, idx.1, idx.2]];
            assert!((e - g).abs() < 1e-10, "mismatch at {idx:?}: {e} vs {g}");
        }
    }
}

fn tape_param_roundtrip(t: &mut Tape<f64>, v: Var) -> Var {
    let s = t.softplus(v);
    t.mean_all(s)
}

#[test]
fn param_cache_dedups() {
    use rdfc_nn::{ParamGroup, ParamStore};
    let mut store = ParamStore::<f64>::new();
    let p = store.register("p", ArrayD::from_elem(IxDyn(&[2]), 0.3), ParamGroup::Generator);
    let mut t = Tape::<f64>::new();
    let v1 = t.param(&store, p);
    let v2 = t.param(&store, p);
    assert_eq!(v1, v2);
    let root = tape_param_roundtrip(&mut t, v1);
    let grads = t.backward(root);
    assert!(t.param_grad(&grads, p).is_some());
}
