//! Kernels for the temporal-sequence ops: softmax over an axis, date-code
//! broadcast add, per-pixel temporal attention scores and the weighted
//! collapse of a frame stack.

use ndarray::{Array2, Array5, ArrayD, ArrayView2, ArrayView5, ArrayViewD, Axis};

pub fn softmax_axis_forward(x: &ArrayViewD<f64>, axis: usize) -> ArrayD<f64> {
    let mut y = x.to_owned();
    for mut lane in y.lanes_mut(Axis(axis)) {
        let mx = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in lane.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// dx = y * (g - sum(g * y)) per lane, where y is the softmax output.
pub fn softmax_axis_backward(y: &ArrayViewD<f64>, gout: &ArrayViewD<f64>, axis: usize) -> ArrayD<f64> {
    let mut dx = gout.to_owned();
    for (mut glane, ylane) in dx.lanes_mut(Axis(axis)).into_iter().zip(y.lanes(Axis(axis))) {
        let dot: f64 = glane.iter().zip(ylane.iter()).map(|(g, yv)| g * yv).sum();
        for (g, yv) in glane.iter_mut().zip(ylane.iter()) {
            *g = yv * (*g - dot);
        }
    }
    dx
}

/// y[b,t,c,i,j] = x[b,t,c,i,j] + enc[b,t,c]
pub fn add_time_chan_forward(x: &ArrayView5<f64>, enc: &ndarray::ArrayView3<f64>) -> Array5<f64> {
    let (b, t, c, _h, _w) = x.dim();
    assert_eq!(enc.dim(), (b, t, c), "date encoding must be (B, T, C)");
    let mut y = x.to_owned();
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                let e = enc[[bi, ti, ci]];
                y.slice_mut(ndarray::s![bi, ti, ci, .., ..]).mapv_inplace(|v| v + e);
            }
        }
    }
    y
}

pub fn add_time_chan_backward_enc(gout: &ArrayView5<f64>) -> ndarray::Array3<f64> {
    let (b, t, c, _, _) = gout.dim();
    let mut denc = ndarray::Array3::<f64>::zeros((b, t, c));
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                denc[[bi, ti, ci]] += gout.slice(ndarray::s![bi, ti, ci, .., ..]).sum();
            }
        }
    }
    denc
}

/// scores[b,g,t,i,j] = sum_k q[g,k] * keys[b,t,g*dk+k,i,j] / sqrt(dk)
pub fn attn_scores_forward(keys: &ArrayView5<f64>, q: &ArrayView2<f64>) -> Array5<f64> {
    let (b, t, gk, h, w) = keys.dim();
    let (g, dk) = q.dim();
    assert_eq!(gk, g * dk, "keys channel dim {gk} != heads*d_k {}", g * dk);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut s = Array5::<f64>::zeros((b, g, t, h, w));
    for bi in 0..b {
        for gi in 0..g {
            for ti in 0..t {
                let mut acc = ndarray::Array2::<f64>::zeros((h, w));
                for ki in 0..dk {
                    let kv = keys.slice(ndarray::s![bi, ti, gi * dk + ki, .., ..]);
                    acc.scaled_add(q[[gi, ki]], &kv);
                }
                s.slice_mut(ndarray::s![bi, gi, ti, .., ..]).assign(&(acc * scale));
            }
        }
    }
    s
}

pub fn attn_scores_backward(
    keys: &ArrayView5<f64>,
    q: &ArrayView2<f64>,
    gout: &ArrayView5<f64>,
) -> (Array5<f64>, Array2<f64>) {
    let (b, t, _gk, h, w) = keys.dim();
    let (g, dk) = q.dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dkeys = Array5::<f64>::zeros(keys.dim());
    let mut dq = Array2::<f64>::zeros((g, dk));
    let _ = (h, w);
    for bi in 0..b {
        for gi in 0..g {
            for ti in 0..t {
                let gs = gout.slice(ndarray::s![bi, gi, ti, .., ..]);
                for ki in 0..dk {
                    let kv = keys.slice(ndarray::s![bi, ti, gi * dk + ki, .., ..]);
                    dq[[gi, ki]] += scale * ndarray::Zip::from(&gs).and(&kv).fold(0.0, |a, g1, k1| a + g1 * k1);
                    let mut dkv = dkeys.slice_mut(ndarray::s![bi, ti, gi * dk + ki, .., ..]);
                    dkv.scaled_add(scale * q[[gi, ki]], &gs);
                }
            }
        }
    }
    (dkeys, dq)
}

/// y[b,c,i,j] = sum_t attn[b, c/(C/G), t, i, j] * x[b,t,c,i,j]
pub fn attn_collapse_forward(x: &ArrayView5<f64>, attn: &ArrayView5<f64>) -> ndarray::Array4<f64> {
    let (b, t, c, h, w) = x.dim();
    let (ba, g, ta, ha, wa) = attn.dim();
    assert_eq!((ba, ta, ha, wa), (b, t, h, w), "attn/frames shape mismatch");
    assert!(c % g == 0, "channels {c} not divisible by heads {g}");
    let cg = c / g;
    let mut y = ndarray::Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let gi = ci / cg;
            let mut acc = y.slice_mut(ndarray::s![bi, ci, .., ..]);
            for ti in 0..t {
                let av = attn.slice(ndarray::s![bi, gi, ti, .., ..]);
                let xv = x.slice(ndarray::s![bi, ti, ci, .., ..]);
                ndarray::Zip::from(&mut acc).and(&av).and(&xv).for_each(|o, a, v| *o += a * v);
            }
        }
    }
    y
}

pub fn attn_collapse_backward(
    x: &ArrayView5<f64>,
    attn: &ArrayView5<f64>,
    gout: &ndarray::ArrayView4<f64>,
) -> (Array5<f64>, Array5<f64>) {
    let (b, t, c, _h, _w) = x.dim();
    let g = attn.dim().1;
    let cg = c / g;
    let mut dx = Array5::<f64>::zeros(x.dim());
    let mut dattn = Array5::<f64>::zeros(attn.dim());
    for bi in 0..b {
        for ci in 0..c {
            let gi = ci / cg;
            let go = gout.slice(ndarray::s![bi, ci, .., ..]);
            for ti in 0..t {
                let av = attn.slice(ndarray::s![bi, gi, ti, .., ..]);
                let xv = x.slice(ndarray::s![bi, ti, ci, .., ..]);
                let mut dxv = dx.slice_mut(ndarray::s![bi, ti, ci, .., ..]);
                ndarray::Zip::from(&mut dxv).and(&go).and(&av).for_each(|d, g1, a| *d = g1 * a);
                let mut dav = dattn.slice_mut(ndarray::s![bi, gi, ti, .., ..]);
                ndarray::Zip::from(&mut dav).and(&go).and(&xv).for_each(|d, g1, v| *d += g1 * v);
            }
        }
    }
    (dx, dattn)
}

/// Smooth L1 (Huber with quadratic/linear transition at `beta`), averaged
/// over all elements.
pub fn smooth_l1_value(pred: &ArrayViewD<f64>, target: &ArrayViewD<f64>, beta: f64) -> f64 {
    assert_eq!(pred.shape(), target.shape(), "smooth_l1: shape mismatch");
    let n = pred.len() as f64;
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        let d = p - t;
        acc += if d.abs() < beta { 0.5 * d * d / beta } else { d.abs() - 0.5 * beta };
    }
    acc / n
}

pub fn smooth_l1_grad(pred: &ArrayViewD<f64>, target: &ArrayViewD<f64>, beta: f64, gscale: f64) -> ArrayD<f64> {
    let n = pred.len() as f64;
    let mut dpred = pred.to_owned();
    ndarray::Zip::from(&mut dpred).and(target).for_each(|p, t| {
        let d = *p - t;
        *p = gscale * if d.abs() < beta { d / beta } else { d.signum() } / n;
    });
    dpred
}
