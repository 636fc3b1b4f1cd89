//! Engine correctness: op semantics against naive references, and
//! finite-difference verification of every backward implementation.

use ndarray::{arr0, Array1, Array4, ArrayD, IxDyn};
use rand::Rng;
use serah_nn::gradcheck::{check_sampled, sample_indices};
use serah_nn::init::rng_from;
use serah_nn::ops;
use serah_nn::{Adam, AdamConfig, Arr, ParamSet, Session};

fn rand_arr(rng: &mut impl Rng, shape: &[usize]) -> Arr {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// Direct six-loop convolution; the independent reference for the
/// im2col/GEMM implementation.
fn conv2d_naive(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, wd) = x.dim();
    let (f, _, kh, kw) = w.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Array4::<f64>::zeros((n, f, oh, ow));
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += x[[ni, ci, iy as usize, ix as usize]]
                                        * w[[fi, ci, ky, kx]];
                                }
                            }
                        }
                    }
                    out[[ni, fi, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_reference() {
    let mut rng = rng_from(7, 0);
    for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1), (2, 1, 4)] {
        let x = rand_arr(&mut rng, &[3, 4, 9, 10]);
        let w = rand_arr(&mut rng, &[5, 4, k, k]);
        let b = rand_arr(&mut rng, &[5]);
        let x4 = x.view().into_dimensionality().unwrap();
        let w4 = w.view().into_dimensionality().unwrap();
        let b1 = b.view().into_dimensionality().unwrap();
        let fast = ops::conv2d_forward(&x4, &w4, Some(&b1), stride, pad);
        let naive = conv2d_naive(
            &x4.to_owned(),
            &w4.to_owned(),
            &b1.to_owned(),
            stride,
            pad,
        );
        let diff = (&fast - &naive).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "conv mismatch (stride {stride} pad {pad} k {k}): {diff}");
    }
}

#[test]
fn conv2d_deterministic_across_runs() {
    let mut rng = rng_from(9, 0);
    let x = rand_arr(&mut rng, &[7, 3, 16, 16]);
    let w = rand_arr(&mut rng, &[4, 3, 3, 3]);
    let x4 = x.view().into_dimensionality().unwrap();
    let w4 = w.view().into_dimensionality().unwrap();
    let a = ops::conv2d_forward(&x4, &w4, None, 1, 1);
    let b = ops::conv2d_forward(&x4, &w4, None, 1, 1);
    assert_eq!(a, b);
}

#[test]
fn pixel_shuffle_layout() {
    // 1 sample, 4 channels, 1x1 spatial, r=2: channel c lands at (c/2, c%2).
    let x = Array4::from_shape_vec((1, 4, 1, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = ops::pixel_shuffle_forward(&x.view(), 2);
    assert_eq!(y.dim(), (1, 1, 2, 2));
    assert_eq!(y[[0, 0, 0, 0]], 0.0);
    assert_eq!(y[[0, 0, 0, 1]], 1.0);
    assert_eq!(y[[0, 0, 1, 0]], 2.0);
    assert_eq!(y[[0, 0, 1, 1]], 3.0);
}

#[test]
fn softmax_lanes_sum_to_one() {
    let mut rng = rng_from(11, 0);
    let x = rand_arr(&mut rng, &[2, 3, 5, 2, 2]);
    let y = serah_nn::ops_seq::softmax_axis_forward(&x.view(), 2);
    for lane in y.lanes(ndarray::Axis(2)) {
        let s: f64 = lane.sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

/// Runs a forward/backward pass, then re-evaluates the forward closure
/// under central-difference perturbations of sampled parameter entries.
fn run_fd(
    ps: &mut ParamSet,
    ids: &[serah_nn::ParamId],
    forward: impl Fn(&mut Session) -> serah_nn::Var,
    n_samples: usize,
    seed: u64,
) {
    let mut s = Session::new(ps);
    let loss = forward(&mut s);
    let grads = s.backward(loss);
    drop(s);
    let mut rng = rng_from(seed, 2);
    let samples = sample_indices(ps, ids, n_samples, &mut rng);
    let report = check_sampled(ps, &grads, &samples, 1e-5, |p| {
        let mut s = Session::new(p);
        let loss = forward(&mut s);
        s.scalar(loss)
    });
    assert!(
        report.max_rel_err < 1e-6,
        "fd mismatch: {:?} (max rel err {})",
        report.worst,
        report.max_rel_err
    );
}

#[test]
fn fd_conv_relu_groupnorm_chain() {
    let mut rng = rng_from(21, 0);
    let x = rand_arr(&mut rng, &[2, 3, 8, 8]);
    let t = rand_arr(&mut rng, &[2, 4, 4, 4]);
    let mut ps = ParamSet::new();
    let w1 = ps.add("w1", rand_arr(&mut rng, &[4, 3, 3, 3]));
    let b1 = ps.add("b1", rand_arr(&mut rng, &[4]));
    let gamma = ps.add("gamma", rand_arr(&mut rng, &[4]));
    let beta = ps.add("beta", rand_arr(&mut rng, &[4]));
    let ids = [w1, b1, gamma, beta];
    run_fd(
        &mut ps,
        &ids,
        |s| {
            let xv = s.input(x.clone());
            let tv = s.input(t.clone());
            let w = s.param(w1);
            let b = s.param(b1);
            let y = s.graph.conv2d(xv, w, Some(b), 2, 1);
            let ga = s.param(gamma);
            let be = s.param(beta);
            let y = s.graph.group_norm(y, ga, be, 2, 1e-5);
            let y = s.graph.relu(y);
            s.graph.smooth_l1(y, tv, 1.0)
        },
        48,
        100,
    );
}

#[test]
fn fd_conv_stride1_pad1_dx() {
    // Checks gradient flow *through* a conv into an upstream conv's params.
    let mut rng = rng_from(22, 0);
    let x = rand_arr(&mut rng, &[2, 2, 6, 6]);
    let t = rand_arr(&mut rng, &[2, 3, 6, 6]);
    let mut ps = ParamSet::new();
    let w1 = ps.add("w1", rand_arr(&mut rng, &[5, 2, 3, 3]));
    let b1 = ps.add("b1", rand_arr(&mut rng, &[5]));
    let w2 = ps.add("w2", rand_arr(&mut rng, &[3, 5, 3, 3]));
    let b2 = ps.add("b2", rand_arr(&mut rng, &[3]));
    let ids = [w1, b1, w2, b2];
    run_fd(
        &mut ps,
        &ids,
        |s| {
            let xv = s.input(x.clone());
            let tv = s.input(t.clone());
            let w1v = s.param(w1);
            let b1v = s.param(b1);
            let h = s.graph.conv2d(xv, w1v, Some(b1v), 1, 1);
            let h = s.graph.relu(h);
            let w2v = s.param(w2);
            let b2v = s.param(b2);
            let y = s.graph.conv2d(h, w2v, Some(b2v), 1, 1);
            s.graph.smooth_l1(y, tv, 1.0)
        },
        48,
        101,
    );
}

#[test]
fn fd_pixel_shuffle_upsample_concat() {
    let mut rng = rng_from(23, 0);
    let x = rand_arr(&mut rng, &[2, 2, 4, 4]);
    let t = rand_arr(&mut rng, &[2, 3, 8, 8]);
    let mut ps = ParamSet::new();
    let w1 = ps.add("w1", rand_arr(&mut rng, &[8, 2, 3, 3]));
    let w2 = ps.add("w2", rand_arr(&mut rng, &[3, 4, 1, 1]));
    let ids = [w1, w2];
    run_fd(
        &mut ps,
        &ids,
        |s| {
            let xv = s.input(x.clone());
            let tv = s.input(t.clone());
            let w1v = s.param(w1);
            let h = s.graph.conv2d(xv, w1v, None, 1, 1); // (2,8,4,4)
            let a = s.graph.pixel_shuffle(h, 2); // (2,2,8,8)
            let xv2 = s.input(x.clone());
            let b = s.graph.upsample_nearest(xv2, 2); // (2,2,8,8)
            let cat = s.graph.concat(&[a, b], 1); // (2,4,8,8)
            let w2v = s.param(w2);
            let y = s.graph.conv2d(cat, w2v, None, 1, 0);
            s.graph.smooth_l1(y, tv, 1.0)
        },
        32,
        102,
    );
}

#[test]
fn fd_attention_path() {
    // keys from a 1x1 conv, query param, softmax over T, collapse.
    let (b, t, c, h, w) = (2usize, 4usize, 6usize, 3usize, 3usize);
    let (heads, dk) = (2usize, 2usize);
    let mut rng = rng_from(24, 0);
    let x = rand_arr(&mut rng, &[b, t, c, h, w]);
    let enc = rand_arr(&mut rng, &[b, t, c]);
    let target = rand_arr(&mut rng, &[b, c, h, w]);
    let mut ps = ParamSet::new();
    let wk = ps.add("wk", rand_arr(&mut rng, &[heads * dk, c, 1, 1]));
    let q = ps.add("q", rand_arr(&mut rng, &[heads, dk]));
    let ids = [wk, q];
    run_fd(
        &mut ps,
        &ids,
        |s| {
            let xv = s.input(x.clone());
            let ev = s.input(enc.clone());
            let tv = s.input(target.clone());
            let xe = s.graph.add_time_chan(xv, ev);
            let flat = s.graph.reshape(xe, &[b * t, c, h, w]);
            let wkv = s.param(wk);
            let keys = s.graph.conv2d(flat, wkv, None, 1, 0);
            let keys = s.graph.reshape(keys, &[b, t, heads * dk, h, w]);
            let qv = s.param(q);
            let scores = s.graph.attn_scores(keys, qv);
            let attn = s.graph.softmax_axis(scores, 2);
            let y = s.graph.attn_collapse(xe, attn);
            s.graph.smooth_l1(y, tv, 1.0)
        },
        32,
        103,
    );
}

#[test]
fn fd_residual_scale_mul() {
    let mut rng = rng_from(25, 0);
    let x = rand_arr(&mut rng, &[2, 3, 5, 5]);
    let t = rand_arr(&mut rng, &[2, 3, 5, 5]);
    let mut ps = ParamSet::new();
    let w1 = ps.add("w1", rand_arr(&mut rng, &[3, 3, 3, 3]));
    let ids = [w1];
    run_fd(
        &mut ps,
        &ids,
        |s| {
            let xv = s.input(x.clone());
            let tv = s.input(t.clone());
            let w1v = s.param(w1);
            let h = s.graph.conv2d(xv, w1v, None, 1, 1);
            let h = s.graph.scale(h, 0.1);
            let y = s.graph.add(h, xv);
            let y2 = s.graph.mul(y, y);
            s.graph.smooth_l1(y2, tv, 1.0)
        },
        24,
        104,
    );
}

#[test]
fn shared_param_grads_accumulate() {
    // Binding the same weight twice must sum both contributions.
    let mut rng = rng_from(26, 0);
    let x = rand_arr(&mut rng, &[1, 2, 4, 4]);
    let t = rand_arr(&mut rng, &[1, 2, 4, 4]);
    let mut ps = ParamSet::new();
    let w1 = ps.add("w1", rand_arr(&mut rng, &[2, 2, 3, 3]));
    let ids = [w1];
    run_fd(
        &mut ps,
        &ids,
        |s| {
            let xv = s.input(x.clone());
            let tv = s.input(t.clone());
            let wa = s.param(w1);
            let h = s.graph.conv2d(xv, wa, None, 1, 1);
            let h = s.graph.relu(h);
            let wb = s.param(w1); // same parameter bound again
            let y = s.graph.conv2d(h, wb, None, 1, 1);
            s.graph.smooth_l1(y, tv, 1.0)
        },
        24,
        105,
    );
}

#[test]
fn adam_lr_zero_leaves_params_bit_identical() {
    let mut rng = rng_from(27, 0);
    let mut ps = ParamSet::new();
    let w = ps.add("w", rand_arr(&mut rng, &[3, 2, 3, 3]));
    let before = ps.value(w).clone();
    let x = rand_arr(&mut rng, &[1, 2, 5, 5]);
    let t = rand_arr(&mut rng, &[1, 3, 5, 5]);
    let mut s = Session::new(&ps);
    let xv = s.input(x);
    let tv = s.input(t);
    let wv = s.param(w);
    let y = s.graph.conv2d(xv, wv, None, 1, 1);
    let loss = s.graph.smooth_l1(y, tv, 1.0);
    let grads = s.backward(loss);
    drop(s);
    let mut adam = Adam::new(&ps, AdamConfig { lr: 0.0, ..Default::default() });
    adam.step(&mut ps, &grads);
    assert_eq!(ps.value(w), &before);
}

#[test]
fn adam_reduces_quadratic_loss() {
    let mut rng = rng_from(28, 0);
    let mut ps = ParamSet::new();
    let w = ps.add("w", rand_arr(&mut rng, &[1, 1, 3, 3]));
    let x = rand_arr(&mut rng, &[4, 1, 8, 8]);
    let t = rand_arr(&mut rng, &[4, 1, 8, 8]);
    let mut adam = Adam::new(&ps, AdamConfig { lr: 1e-2, ..Default::default() });
    let loss_at = |ps: &ParamSet| {
        let mut s = Session::inference(ps);
        let xv = s.input(x.clone());
        let tv = s.input(t.clone());
        let wv = s.param(w);
        let y = s.graph.conv2d(xv, wv, None, 1, 1);
        let l = s.graph.smooth_l1(y, tv, 1.0);
        s.scalar(l)
    };
    let l0 = loss_at(&ps);
    for _ in 0..50 {
        let mut s = Session::new(&ps);
        let xv = s.input(x.clone());
        let tv = s.input(t.clone());
        let wv = s.param(w);
        let y = s.graph.conv2d(xv, wv, None, 1, 1);
        let l = s.graph.smooth_l1(y, tv, 1.0);
        let grads = s.backward(l);
        drop(s);
        adam.step(&mut ps, &grads);
    }
    let l1 = loss_at(&ps);
    assert!(l1 < l0 * 0.5, "Adam failed to optimize: {l0} -> {l1}");
}

#[test]
fn checkpoint_roundtrip_preserves_values_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.snt");
    let mut rng = rng_from(29, 0);
    let mut ps = ParamSet::new();
    let a = ps.add("layer.weight", rand_arr(&mut rng, &[2, 3, 3, 3]));
    let b = ps.add("layer.bias", rand_arr(&mut rng, &[2]));
    let meta = serde_json::json!({"model": "test", "channel_roles": ["B2", "B3"]});
    serah_nn::checkpoint::save_params(&path, &ps, meta.clone()).unwrap();
    let (va, vb) = (ps.value(a).clone(), ps.value(b).clone());
    *ps.value_mut(a) = Arr::zeros(va.shape());
    *ps.value_mut(b) = Arr::zeros(vb.shape());
    let got_meta = serah_nn::checkpoint::load_params(&path, &mut ps).unwrap();
    assert_eq!(ps.value(a), &va);
    assert_eq!(ps.value(b), &vb);
    assert_eq!(got_meta, meta);
}

#[test]
fn checkpoint_shape_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.snt");
    let mut rng = rng_from(30, 0);
    let mut ps = ParamSet::new();
    ps.add("w", rand_arr(&mut rng, &[2, 2]));
    serah_nn::checkpoint::save_params(&path, &ps, serde_json::Value::Null).unwrap();
    let mut other = ParamSet::new();
    other.add("w", rand_arr(&mut rng, &[3, 2]));
    let err = serah_nn::checkpoint::load_params(&path, &mut other);
    assert!(matches!(err, Err(serah_nn::checkpoint::CheckpointError::ShapeMismatch { .. })));
}

#[test]
fn smooth_l1_values() {
    let p = arr0(0.5).into_dyn();
    let t = arr0(0.0).into_dyn();
    assert!((serah_nn::ops_seq::smooth_l1_value(&p.view(), &t.view(), 1.0) - 0.125).abs() < 1e-15);
    let p = arr0(3.0).into_dyn();
    assert!((serah_nn::ops_seq::smooth_l1_value(&p.view(), &t.view(), 1.0) - 2.5).abs() < 1e-15);
}

#[test]
fn backward_is_deterministic() {
    let mut rng = rng_from(31, 0);
    let x = rand_arr(&mut rng, &[6, 3, 12, 12]);
    let t = rand_arr(&mut rng, &[6, 4, 12, 12]);
    let mut ps = ParamSet::new();
    let w = ps.add("w", rand_arr(&mut rng, &[4, 3, 3, 3]));
    let run = |ps: &ParamSet| {
        let mut s = Session::new(ps);
        let xv = s.input(x.clone());
        let tv = s.input(t.clone());
        let wv = s.param(w);
        let y = s.graph.conv2d(xv, wv, None, 1, 1);
        let l = s.graph.smooth_l1(y, tv, 1.0);
        let g = s.backward(l);
        g.get(w).unwrap().clone()
    };
    let g1 = run(&ps);
    let g2 = run(&ps);
    assert_eq!(g1, g2);
}
