//! Array-level forward/backward kernels used by the graph.
//!
//! All kernels are deterministic: parallel work is split along fixed
//! chunk boundaries and partial results are reduced in index order, so
//! results do not depend on thread count or scheduling.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView4, ArrayViewMut3, Axis};
use rayon::iter::{ParallelBridge, ParallelIterator};

/// Upper bound on the im2col buffer per chunk. Fixed so that chunk
/// boundaries (and therefore summation order) never depend on the host.
const CHUNK_BYTES: usize = 16 << 20;

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn infer(x: &ArrayView4<f64>, w: &ArrayView4<f64>, stride: usize, pad: usize) -> ConvGeom {
        let (n, c, h, wd) = x.dim();
        let (f, wc, kh, kw) = w.dim();
        assert_eq!(c, wc, "conv2d: input channels {c} != weight channels {wc}");
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        ConvGeom { n, c, h, w: wd, f, kh, kw, stride, pad, oh, ow }
    }

    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn chunk_len(&self) -> usize {
        let per_sample = self.ck() * self.oh * self.ow * 8;
        (CHUNK_BYTES / per_sample.max(1)).clamp(1, self.n.max(1))
    }
}

/// Fills `col` (ck, cn*oh*ow) from samples [n0, n0+cn) of `x`.
fn im2col_chunk(x: &ArrayView4<f64>, n0: usize, cn: usize, g: &ConvGeom, col: &mut Array2<f64>) {
    let ohw = g.oh * g.ow;
    for ln in 0..cn {
        let xn = x.index_axis(Axis(0), n0 + ln);
        let base = ln * ohw;
        let mut r = 0usize;
        for c in 0..g.c {
            let xc = xn.index_axis(Axis(0), c);
            let xc_slice = xc.as_slice().expect("standard layout input");
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut row = col.row_mut(r);
                    let row_slice = row.as_slice_mut().expect("col is standard layout");
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue; // col pre-zeroed
                        }
                        let iy = iy as usize;
                        let dst = &mut row_slice[base + oy * g.ow..base + (oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = kx as isize - g.pad as isize;
                            let lo = (-ix0).max(0) as usize;
                            let hi = ((g.w as isize - ix0).min(g.ow as isize)).max(0) as usize;
                            if lo < hi {
                                let src0 = (ix0 + lo as isize) as usize;
                                dst[lo..hi].copy_from_slice(
                                    &xc_slice[iy * g.w + src0..iy * g.w + src0 + (hi - lo)],
                                );
                            }
                        } else {
                            for ox in 0..g.ow {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    dst[ox] = xc_slice[iy * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Scatters `dcol` (ck, cn*oh*ow) back into gradient images [n0, n0+cn).
fn col2im_chunk(dcol: &Array2<f64>, cn: usize, g: &ConvGeom, dx: &mut ArrayViewMut3<f64>) {
    // dx here is the (cn, c, h*w) view of the chunk, flattened spatially.
    let ohw = g.oh * g.ow;
    for ln in 0..cn {
        let base = ln * ohw;
        let mut r = 0usize;
        for c in 0..g.c {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = dcol.row(r);
                    let row_slice = row.as_slice().expect("dcol standard layout");
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let src = &row_slice[base + oy * g.ow..base + (oy + 1) * g.ow];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dx[[ln, c, iy * g.w + ix as usize]] += src[ox];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Row ranges for the stride-1 direct kernels: output rows/cols for
/// which input index `o + k - pad` stays in `[0, limit)`.
#[inline]
fn valid_range(k: usize, pad: usize, out_len: usize, in_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad - k).min(out_len);
    (lo, hi.max(lo))
}

/// Direct stride-1 convolution of one sample: out += w * shift(x).
fn conv_direct_sample(
    xn: &[f64],
    w: &ArrayView4<f64>,
    b: Option<&ArrayView1<f64>>,
    g: &ConvGeom,
    on: &mut [f64],
) {
    let ohw = g.oh * g.ow;
    if let Some(bv) = b {
        for fi in 0..g.f {
            on[fi * ohw..(fi + 1) * ohw].fill(bv[fi]);
        }
    }
    for c in 0..g.c {
        let xc = &xn[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.oh, g.h);
            for kx in 0..g.kw {
                let ix0 = kx as isize - g.pad as isize;
                let lo = (-ix0).max(0) as usize;
                let hi = ((g.w as isize - ix0).min(g.ow as isize)).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                for fi in 0..g.f {
                    let wv = w[[fi, c, ky, kx]];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - g.pad;
                        let src0 = iy * g.w + (ix0 + lo as isize) as usize;
                        let dst0 = fi * ohw + oy * g.ow + lo;
                        let (dst, src) = (&mut on[dst0..dst0 + hi - lo], &xc[src0..src0 + hi - lo]);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: Option<&ArrayView1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let x_std = x.as_standard_layout();
    let x = &x_std.view();
    let g = ConvGeom::infer(x, w, stride, pad);
    let ck = g.ck();
    let ohw = g.oh * g.ow;
    let mut out = Array4::<f64>::zeros((g.n, g.f, g.oh, g.ow));
    if stride == 1 {
        let xs = x_std.as_slice().expect("standard layout input");
        let chw = g.c * g.h * g.w;
        out.axis_chunks_iter_mut(Axis(0), 1)
            .enumerate()
            .par_bridge()
            .for_each(|(ni, mut on)| {
                let on = on.as_slice_mut().unwrap();
                conv_direct_sample(&xs[ni * chw..(ni + 1) * chw], w, b, &g, on);
            });
        return out;
    }
    let w2 = w
        .to_shape((g.f, ck))
        .expect("weight reshape (contiguous)")
        .to_owned();
    let chunk = g.chunk_len();
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .enumerate()
        .par_bridge()
        .for_each(|(ci, mut oc)| {
            let n0 = ci * chunk;
            let cn = oc.len_of(Axis(0));
            let mut col = Array2::<f64>::zeros((ck, cn * ohw));
            im2col_chunk(x, n0, cn, &g, &mut col);
            let og = w2.dot(&col); // (f, cn*ohw)
            for ln in 0..cn {
                for fi in 0..g.f {
                    let src = og.row(fi);
                    let src = &src.as_slice().unwrap()[ln * ohw..(ln + 1) * ohw];
                    let mut dst = oc.index_axis_mut(Axis(0), ln);
                    let mut dst = dst.index_axis_mut(Axis(0), fi);
                    let dst = dst.as_slice_mut().unwrap();
                    let bias = b.map_or(0.0, |bv| bv[fi]);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
        });
    out
}

pub struct ConvGrads {
    pub dx: Option<Array4<f64>>,
    pub dw: Array4<f64>,
    pub db: Array1<f64>,
}

/// Direct stride-1 backward for one sample; accumulates dw/db into the
/// caller's partial buffers and writes dx for the sample.
fn conv_backward_direct_sample(
    xn: &[f64],
    gn: &[f64],
    w: &ArrayView4<f64>,
    g: &ConvGeom,
    dxn: &mut [f64],
    dw: &mut Array4<f64>,
    db: &mut Array1<f64>,
    need_dx: bool,
) {
    let ohw = g.oh * g.ow;
    let hw = g.h * g.w;
    for fi in 0..g.f {
        db[fi] += gn[fi * ohw..(fi + 1) * ohw].iter().sum::<f64>();
    }
    for c in 0..g.c {
        let xc = &xn[c * hw..(c + 1) * hw];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.oh, g.h);
            for kx in 0..g.kw {
                let ix0 = kx as isize - g.pad as isize;
                let lo = (-ix0).max(0) as usize;
                let hi = ((g.w as isize - ix0).min(g.ow as isize)).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                for fi in 0..g.f {
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - g.pad;
                        let src0 = iy * g.w + (ix0 + lo as isize) as usize;
                        let go = &gn[fi * ohw + oy * g.ow + lo..fi * ohw + oy * g.ow + hi];
                        let xs = &xc[src0..src0 + hi - lo];
                        let mut dot = 0.0;
                        for (gv, xv) in go.iter().zip(xs) {
                            dot += gv * xv;
                        }
                        acc += dot;
                    }
                    dw[[fi, c, ky, kx]] += acc;
                    if need_dx {
                        let wv = w[[fi, c, ky, kx]];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.pad;
                            let dst0 = c * hw + iy * g.w + (ix0 + lo as isize) as usize;
                            let go0 = fi * ohw + oy * g.ow + lo;
                            let (dst, src) = (
                                &mut dxn[dst0..dst0 + hi - lo],
                                &gn[go0..go0 + hi - lo],
                            );
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    gout: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> ConvGrads {
    let x_std = x.as_standard_layout();
    let x = &x_std.view();
    let g_std = gout.as_standard_layout();
    let gout = &g_std.view();
    let g = ConvGeom::infer(x, w, stride, pad);
    let ck = g.ck();
    let ohw = g.oh * g.ow;
    assert_eq!(gout.dim(), (g.n, g.f, g.oh, g.ow), "conv2d backward: bad grad shape");
    if stride == 1 {
        return conv2d_backward_direct(x, w, gout, &g, need_dx);
    }
    let w2 = w.to_shape((g.f, ck)).expect("weight reshape").to_owned();
    let chunk = g.chunk_len();
    let n_chunks = g.n.div_ceil(chunk);

    let mut dx = Array4::<f64>::zeros((g.n, g.c, g.h, g.w));
    let mut partials: Vec<(usize, Array2<f64>, Array1<f64>)> = dx
        .axis_chunks_iter_mut(Axis(0), chunk)
        .enumerate()
        .par_bridge()
        .map(|(ci, mut dxc)| {
            let n0 = ci * chunk;
            let cn = dxc.len_of(Axis(0));
            let mut col = Array2::<f64>::zeros((ck, cn * ohw));
            im2col_chunk(x, n0, cn, &g, &mut col);
            // Gather the chunk's output gradients as (f, cn*ohw).
            let mut gc = Array2::<f64>::zeros((g.f, cn * ohw));
            for ln in 0..cn {
                for fi in 0..g.f {
                    let src = gout.index_axis(Axis(0), n0 + ln);
                    let src = src.index_axis(Axis(0), fi);
                    let mut row = gc.row_mut(fi);
                    row.as_slice_mut().unwrap()[ln * ohw..(ln + 1) * ohw]
                        .copy_from_slice(src.as_slice().unwrap());
                }
            }
            let dw_ci = gc.dot(&col.t());
            let db_ci = gc.sum_axis(Axis(1));
            if need_dx {
                let dcol = w2.t().dot(&gc);
                let mut flat = dxc
                    .view_mut()
                    .into_shape_with_order((cn, g.c, g.h * g.w))
                    .expect("chunk reshape");
                col2im_chunk(&dcol, cn, &g, &mut flat);
            }
            (ci, dw_ci, db_ci)
        })
        .collect();
    partials.sort_by_key(|p| p.0);
    debug_assert_eq!(partials.len(), n_chunks);

    let mut dw2 = Array2::<f64>::zeros((g.f, ck));
    let mut db = Array1::<f64>::zeros(g.f);
    for (_, pw, pb) in partials {
        dw2 += &pw;
        db += &pb;
    }
    let dw = dw2
        .into_shape_with_order((g.f, g.c, g.kh, g.kw))
        .expect("dw reshape");
    ConvGrads { dx: need_dx.then_some(dx), dw, db }
}

fn conv2d_backward_direct(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    gout: &ArrayView4<f64>,
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads {
    let xs = x.as_slice().expect("standard layout input");
    let gs = gout.as_slice().expect("standard layout grad");
    let chw = g.c * g.h * g.w;
    let fohw = g.f * g.oh * g.ow;
    let mut dx = Array4::<f64>::zeros((g.n, g.c, g.h, g.w));
    let mut partials: Vec<(usize, Array4<f64>, Array1<f64>)> = dx
        .axis_chunks_iter_mut(Axis(0), 1)
        .enumerate()
        .par_bridge()
        .map(|(ni, mut dxn)| {
            let mut dw_n = Array4::<f64>::zeros((g.f, g.c, g.kh, g.kw));
            let mut db_n = Array1::<f64>::zeros(g.f);
            conv_backward_direct_sample(
                &xs[ni * chw..(ni + 1) * chw],
                &gs[ni * fohw..(ni + 1) * fohw],
                w,
                g,
                dxn.as_slice_mut().unwrap(),
                &mut dw_n,
                &mut db_n,
                need_dx,
            );
            (ni, dw_n, db_n)
        })
        .collect();
    partials.sort_by_key(|p| p.0);
    let mut dw = Array4::<f64>::zeros((g.f, g.c, g.kh, g.kw));
    let mut db = Array1::<f64>::zeros(g.f);
    for (_, pw, pb) in partials {
        dw += &pw;
        db += &pb;
    }
    ConvGrads { dx: need_dx.then_some(dx), dw, db }
}

pub fn relu_forward(x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = v.max(0.0);
    }
}

pub fn relu_backward(x: &[f64], g: &[f64], dx: &mut [f64]) {
    for ((d, v), go) in dx.iter_mut().zip(x).zip(g) {
        *d = if *v > 0.0 { *go } else { 0.0 };
    }
}

/// Per-(sample, group) normalization statistics.
pub fn group_stats(x: &ArrayView4<f64>, groups: usize, eps: f64) -> (Array2<f64>, Array2<f64>) {
    let (n, c, h, w) = x.dim();
    assert!(groups >= 1 && c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
    let cg = c / groups;
    let m = (cg * h * w) as f64;
    let mut mean = Array2::<f64>::zeros((n, groups));
    let mut inv_std = Array2::<f64>::zeros((n, groups));
    for ni in 0..n {
        for gi in 0..groups {
            let sl = x.slice(ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..]);
            let mu = sl.sum() / m;
            let var = sl.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            mean[[ni, gi]] = mu;
            inv_std[[ni, gi]] = 1.0 / (var + eps).sqrt();
        }
    }
    (mean, inv_std)
}

pub fn group_norm_forward(
    x: &ArrayView4<f64>,
    gamma: &ArrayView1<f64>,
    beta: &ArrayView1<f64>,
    groups: usize,
    eps: f64,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let cg = c / groups;
    let (mean, inv_std) = group_stats(x, groups, eps);
    let mut y = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let gi = ci / cg;
            let (mu, is) = (mean[[ni, gi]], inv_std[[ni, gi]]);
            let (ga, be) = (gamma[ci], beta[ci]);
            let xs = x.slice(ndarray::s![ni, ci, .., ..]);
            let mut ys = y.slice_mut(ndarray::s![ni, ci, .., ..]);
            ndarray::Zip::from(&mut ys).and(&xs).for_each(|o, v| *o = (v - mu) * is * ga + be);
        }
    }
    y
}

pub struct GroupNormGrads {
    pub dx: Array4<f64>,
    pub dgamma: Array1<f64>,
    pub dbeta: Array1<f64>,
}

pub fn group_norm_backward(
    x: &ArrayView4<f64>,
    gamma: &ArrayView1<f64>,
    gout: &ArrayView4<f64>,
    groups: usize,
    eps: f64,
) -> GroupNormGrads {
    let (n, c, h, w) = x.dim();
    let cg = c / groups;
    let m = (cg * h * w) as f64;
    let (mean, inv_std) = group_stats(x, groups, eps);
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    let mut dgamma = Array1::<f64>::zeros(c);
    let mut dbeta = Array1::<f64>::zeros(c);
    for ni in 0..n {
        for gi in 0..groups {
            let (mu, is) = (mean[[ni, gi]], inv_std[[ni, gi]]);
            // First pass: accumulate the two group-level reductions.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in gi * cg..(gi + 1) * cg {
                let xs = x.slice(ndarray::s![ni, ci, .., ..]);
                let gs = gout.slice(ndarray::s![ni, ci, .., ..]);
                let ga = gamma[ci];
                let mut dg = 0.0;
                let mut db = 0.0;
                ndarray::Zip::from(&xs).and(&gs).for_each(|xv, gv| {
                    let xh = (xv - mu) * is;
                    dg += gv * xh;
                    db += gv;
                    sum_dxhat += gv * ga;
                    sum_dxhat_xhat += gv * ga * xh;
                });
                dgamma[ci] += dg;
                dbeta[ci] += db;
            }
            // Second pass: dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)).
            for ci in gi * cg..(gi + 1) * cg {
                let ga = gamma[ci];
                let xs = x.slice(ndarray::s![ni, ci, .., ..]);
                let gs = gout.slice(ndarray::s![ni, ci, .., ..]);
                let mut ds = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
                ndarray::Zip::from(&mut ds).and(&xs).and(&gs).for_each(|d, xv, gv| {
                    let xh = (xv - mu) * is;
                    *d = is * (gv * ga - sum_dxhat / m - xh * sum_dxhat_xhat / m);
                });
            }
        }
    }
    GroupNormGrads { dx, dgamma, dbeta }
}

pub fn pixel_shuffle_forward(x: &ArrayView4<f64>, r: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    assert!(c % (r * r) == 0, "pixel_shuffle: {c} channels not divisible by r^2={}", r * r);
    let oc = c / (r * r);
    let mut y = Array4::<f64>::zeros((n, oc, h * r, w * r));
    for ni in 0..n {
        for co in 0..oc {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    for hi in 0..h {
                        for wi in 0..w {
                            y[[ni, co, hi * r + dy, wi * r + dx]] = x[[ni, ci, hi, wi]];
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn pixel_shuffle_backward(gout: &ArrayView4<f64>, r: usize) -> Array4<f64> {
    let (n, oc, ho, wo) = gout.dim();
    let (h, w) = (ho / r, wo / r);
    let mut dx = Array4::<f64>::zeros((n, oc * r * r, h, w));
    for ni in 0..n {
        for co in 0..oc {
            for dy in 0..r {
                for dx_ in 0..r {
                    let ci = co * r * r + dy * r + dx_;
                    for hi in 0..h {
                        for wi in 0..w {
                            dx[[ni, ci, hi, wi]] = gout[[ni, co, hi * r + dy, wi * r + dx_]];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn upsample_nearest_forward(x: &ArrayView4<f64>, r: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((n, c, h * r, w * r));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h * r {
                for ox in 0..w * r {
                    y[[ni, ci, oy, ox]] = x[[ni, ci, oy / r, ox / r]];
                }
            }
        }
    }
    y
}

pub fn upsample_nearest_backward(gout: &ArrayView4<f64>, r: usize) -> Array4<f64> {
    let (n, c, ho, wo) = gout.dim();
    let (h, w) = (ho / r, wo / r);
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    dx[[ni, ci, oy / r, ox / r]] += gout[[ni, ci, oy, ox]];
                }
            }
        }
    }
    dx
}
