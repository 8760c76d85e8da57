//! Hot numeric kernels with sequential and rayon data-parallel paths.
//!
//! Every parallel kernel partitions work over disjoint output slices and runs
//! the exact same per-element arithmetic as its sequential twin, so results
//! are bit-identical with the `parallel` feature on or off and independent of
//! thread count. The `*_seq` variants stay public for the bench suite.

use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub struct ConvShape {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

pub fn conv_shape(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> ConvShape {
    let d = x.dims();
    let wd = w.dims();
    assert_eq!(d.len(), 4, "conv input must be NCHW");
    assert_eq!(wd.len(), 4, "conv weight must be [Co,Ci,k,k]");
    assert_eq!(d[1], wd[1], "conv channel mismatch");
    assert_eq!(wd[2], wd[3], "only square kernels supported");
    ConvShape {
        batch: d[0],
        c_in: d[1],
        c_out: wd[0],
        h_in: d[2],
        w_in: d[3],
        h_out: conv_out_dim(d[2], wd[2], stride, pad),
        w_out: conv_out_dim(d[3], wd[2], stride, pad),
        k: wd[2],
        stride,
        pad,
    }
}

/// Output-column range [lo, hi) for which `wo * stride + kx - pad` lands in
/// [0, w_in). Hoisting this bound out of the inner loops keeps them branch
/// free (and lets them vectorize) without changing which terms are summed.
#[inline]
fn valid_out_range(kx: usize, in_dim: usize, out_dim: usize, stride: usize, pad: usize) -> (usize, usize) {
    if kx > in_dim - 1 + pad {
        return (0, 0);
    }
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = ((in_dim - 1 + pad - kx) / stride + 1).min(out_dim);
    (lo, hi.max(lo))
}

/// One (n, co) output plane. Identical inner loop for both execution paths;
/// per-element accumulation order is (ci, ky, kx), matching the weight
/// layout, and never varies with the range hoisting.
fn conv_fwd_plane(out: &mut [f64], x: &[f64], w: &[f64], b: f64, n: usize, co: usize, s: &ConvShape) {
    out.fill(b);
    let x_img = &x[n * s.c_in * s.h_in * s.w_in..];
    let w_f = &w[co * s.c_in * s.k * s.k..];
    for ci in 0..s.c_in {
        let x_ch = &x_img[ci * s.h_in * s.w_in..(ci + 1) * s.h_in * s.w_in];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let wv = w_f[(ci * s.k + ky) * s.k + kx];
                let (lo, hi) = valid_out_range(kx, s.w_in, s.w_out, s.stride, s.pad);
                for ho in 0..s.h_out {
                    let row = (ho * s.stride + ky) as isize - s.pad as isize;
                    if row < 0 || row >= s.h_in as isize {
                        continue;
                    }
                    let x_row = &x_ch[row as usize * s.w_in..(row as usize + 1) * s.w_in];
                    let o_row = &mut out[ho * s.w_out..(ho + 1) * s.w_out];
                    if s.stride == 1 {
                        let base = lo + kx - s.pad;
                        for (o, xv) in o_row[lo..hi].iter_mut().zip(&x_row[base..base + (hi - lo)]) {
                            *o += wv * xv;
                        }
                    } else {
                        for wo in lo..hi {
                            o_row[wo] += wv * x_row[wo * s.stride + kx - s.pad];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_fwd_seq(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let s = conv_shape(x, w, stride, pad);
    let mut out = Tensor::zeros(&[s.batch, s.c_out, s.h_out, s.w_out]);
    let plane = s.h_out * s.w_out;
    let ob = out.data_mut();
    for n in 0..s.batch {
        for co in 0..s.c_out {
            let bias = b.map_or(0.0, |t| t.data()[co]);
            let off = (n * s.c_out + co) * plane;
            conv_fwd_plane(&mut ob[off..off + plane], x.data(), w.data(), bias, n, co, &s);
        }
    }
    out
}

#[cfg(feature = "parallel")]
pub fn conv2d_fwd_par(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let s = conv_shape(x, w, stride, pad);
    let mut out = Tensor::zeros(&[s.batch, s.c_out, s.h_out, s.w_out]);
    let plane = s.h_out * s.w_out;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(i, chunk)| {
            let (n, co) = (i / s.c_out, i % s.c_out);
            let bias = b.map_or(0.0, |t| t.data()[co]);
            conv_fwd_plane(chunk, x.data(), w.data(), bias, n, co, &s);
        });
    out
}

pub fn conv2d_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    #[cfg(feature = "parallel")]
    {
        conv2d_fwd_par(x, w, b, stride, pad)
    }
    #[cfg(not(feature = "parallel"))]
    {
        conv2d_fwd_seq(x, w, b, stride, pad)
    }
}

/// Gradient w.r.t. the input: one (n, ci) plane per call, scatter form. For
/// any fixed input pixel the contributing terms still arrive in (co, ky, kx)
/// order — the same order the old gather form summed them — so the result is
/// bit-identical while the inner loop stays contiguous.
fn conv_bwd_input_plane(
    dx: &mut [f64],
    dy: &[f64],
    w: &[f64],
    n: usize,
    ci: usize,
    s: &ConvShape,
) {
    dx.fill(0.0);
    let dy_img = &dy[n * s.c_out * s.h_out * s.w_out..];
    for co in 0..s.c_out {
        let dy_ch = &dy_img[co * s.h_out * s.w_out..(co + 1) * s.h_out * s.w_out];
        let w_f = &w[(co * s.c_in + ci) * s.k * s.k..];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let wv = w_f[ky * s.k + kx];
                let (lo, hi) = valid_out_range(kx, s.w_in, s.w_out, s.stride, s.pad);
                for ho in 0..s.h_out {
                    let row = (ho * s.stride + ky) as isize - s.pad as isize;
                    if row < 0 || row >= s.h_in as isize {
                        continue;
                    }
                    let dy_row = &dy_ch[ho * s.w_out..(ho + 1) * s.w_out];
                    let dx_row = &mut dx[row as usize * s.w_in..(row as usize + 1) * s.w_in];
                    if s.stride == 1 {
                        let base = lo + kx - s.pad;
                        for (g, dyv) in dx_row[base..base + (hi - lo)].iter_mut().zip(&dy_row[lo..hi]) {
                            *g += wv * dyv;
                        }
                    } else {
                        for wo in lo..hi {
                            dx_row[wo * s.stride + kx - s.pad] += wv * dy_row[wo];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_bwd_input_seq(dy: &Tensor, w: &Tensor, x_dims: &[usize], stride: usize, pad: usize) -> Tensor {
    let s = shape_from_grad(dy, w, x_dims, stride, pad);
    let mut dx = Tensor::zeros(x_dims);
    let plane = s.h_in * s.w_in;
    let db = dx.data_mut();
    for n in 0..s.batch {
        for ci in 0..s.c_in {
            let off = (n * s.c_in + ci) * plane;
            conv_bwd_input_plane(&mut db[off..off + plane], dy.data(), w.data(), n, ci, &s);
        }
    }
    dx
}

#[cfg(feature = "parallel")]
pub fn conv2d_bwd_input_par(dy: &Tensor, w: &Tensor, x_dims: &[usize], stride: usize, pad: usize) -> Tensor {
    let s = shape_from_grad(dy, w, x_dims, stride, pad);
    let mut dx = Tensor::zeros(x_dims);
    let plane = s.h_in * s.w_in;
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(i, chunk)| {
            let (n, ci) = (i / s.c_in, i % s.c_in);
            conv_bwd_input_plane(chunk, dy.data(), w.data(), n, ci, &s);
        });
    dx
}

pub fn conv2d_bwd_input(dy: &Tensor, w: &Tensor, x_dims: &[usize], stride: usize, pad: usize) -> Tensor {
    #[cfg(feature = "parallel")]
    {
        conv2d_bwd_input_par(dy, w, x_dims, stride, pad)
    }
    #[cfg(not(feature = "parallel"))]
    {
        conv2d_bwd_input_seq(dy, w, x_dims, stride, pad)
    }
}

fn shape_from_grad(dy: &Tensor, w: &Tensor, x_dims: &[usize], stride: usize, pad: usize) -> ConvShape {
    let wd = w.dims();
    let dyd = dy.dims();
    ConvShape {
        batch: x_dims[0],
        c_in: x_dims[1],
        c_out: wd[0],
        h_in: x_dims[2],
        w_in: x_dims[3],
        h_out: dyd[2],
        w_out: dyd[3],
        k: wd[2],
        stride,
        pad,
    }
}

/// Gradient w.r.t. one output-channel slice of the weights (plus its bias).
fn conv_bwd_weight_slice(
    dw: &mut [f64],
    db: Option<&mut f64>,
    dy: &[f64],
    x: &[f64],
    co: usize,
    s: &ConvShape,
) {
    for ci in 0..s.c_in {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let (lo, hi) = valid_out_range(kx, s.w_in, s.w_out, s.stride, s.pad);
                let mut acc = 0.0;
                for n in 0..s.batch {
                    let x_ch = &x[(n * s.c_in + ci) * s.h_in * s.w_in..];
                    let dy_ch = &dy[(n * s.c_out + co) * s.h_out * s.w_out..];
                    for ho in 0..s.h_out {
                        let row = (ho * s.stride + ky) as isize - s.pad as isize;
                        if row < 0 || row >= s.h_in as isize {
                            continue;
                        }
                        let x_row = &x_ch[row as usize * s.w_in..];
                        let dy_row = &dy_ch[ho * s.w_out..];
                        if s.stride == 1 {
                            let base = lo + kx - s.pad;
                            for (dyv, xv) in dy_row[lo..hi].iter().zip(&x_row[base..base + (hi - lo)]) {
                                acc += dyv * xv;
                            }
                        } else {
                            for wo in lo..hi {
                                acc += dy_row[wo] * x_row[wo * s.stride + kx - s.pad];
                            }
                        }
                    }
                }
                dw[(ci * s.k + ky) * s.k + kx] = acc;
            }
        }
    }
    if let Some(db) = db {
        let mut acc = 0.0;
        for n in 0..s.batch {
            let dy_ch = &dy[(n * s.c_out + co) * s.h_out * s.w_out..];
            for v in &dy_ch[..s.h_out * s.w_out] {
                acc += v;
            }
        }
        *db = acc;
    }
}

pub fn conv2d_bwd_weight_seq(
    dy: &Tensor,
    x: &Tensor,
    w_dims: &[usize],
    with_bias: bool,
    stride: usize,
    pad: usize,
) -> (Tensor, Option<Tensor>) {
    let s = weight_shape(dy, x, w_dims, stride, pad);
    let mut dw = Tensor::zeros(w_dims);
    let mut db = with_bias.then(|| Tensor::zeros(&[s.c_out]));
    let slice = s.c_in * s.k * s.k;
    for co in 0..s.c_out {
        let dwb = &mut dw.data_mut()[co * slice..(co + 1) * slice];
        let dbv = db.as_mut().map(|t| &mut t.data_mut()[co]);
        conv_bwd_weight_slice(dwb, dbv, dy.data(), x.data(), co, &s);
    }
    (dw, db)
}

#[cfg(feature = "parallel")]
pub fn conv2d_bwd_weight_par(
    dy: &Tensor,
    x: &Tensor,
    w_dims: &[usize],
    with_bias: bool,
    stride: usize,
    pad: usize,
) -> (Tensor, Option<Tensor>) {
    let s = weight_shape(dy, x, w_dims, stride, pad);
    let mut dw = Tensor::zeros(w_dims);
    let slice = s.c_in * s.k * s.k;
    let mut db_vec = vec![0.0; if with_bias { s.c_out } else { 0 }];

    if with_bias {
        dw.data_mut()
            .par_chunks_mut(slice)
            .zip(db_vec.par_iter_mut())
            .enumerate()
            .for_each(|(co, (dwb, dbv))| {
                conv_bwd_weight_slice(dwb, Some(dbv), dy.data(), x.data(), co, &s);
            });
    } else {
        dw.data_mut()
            .par_chunks_mut(slice)
            .enumerate()
            .for_each(|(co, dwb)| {
                conv_bwd_weight_slice(dwb, None, dy.data(), x.data(), co, &s);
            });
    }
    let db = with_bias.then(|| Tensor::from_vec(&[s.c_out], db_vec).unwrap());
    (dw, db)
}

pub fn conv2d_bwd_weight(
    dy: &Tensor,
    x: &Tensor,
    w_dims: &[usize],
    with_bias: bool,
    stride: usize,
    pad: usize,
) -> (Tensor, Option<Tensor>) {
    #[cfg(feature = "parallel")]
    {
        conv2d_bwd_weight_par(dy, x, w_dims, with_bias, stride, pad)
    }
    #[cfg(not(feature = "parallel"))]
    {
        conv2d_bwd_weight_seq(dy, x, w_dims, with_bias, stride, pad)
    }
}

fn weight_shape(dy: &Tensor, x: &Tensor, w_dims: &[usize], stride: usize, pad: usize) -> ConvShape {
    let xd = x.dims();
    let dyd = dy.dims();
    ConvShape {
        batch: xd[0],
        c_in: xd[1],
        c_out: w_dims[0],
        h_in: xd[2],
        w_in: xd[3],
        h_out: dyd[2],
        w_out: dyd[3],
        k: w_dims[2],
        stride,
        pad,
    }
}

/// Map `f` over an index range, collecting results in order. Parallel when the
/// feature is on; `f` must be pure for the two paths to agree (all callers
/// here derive per-item RNG streams, so they are).
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

pub fn map_indexed_seq<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}
