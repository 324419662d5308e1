//! Structured ops: convolutions, matrix products, attention softmax,
//! pooling, resampling and sparse linear maps.
//!
//! Layout conventions: feature maps and images are `[h, w, c]`,
//! convolution weights `[kh, kw, c_in, c_out]`, biases `[c_out]`,
//! matrices `[rows, cols]`.

use super::Var;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Ix1, Ix2, Ix3, Ix4, IxDyn};
use std::rc::Rc;

fn as3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("expected rank-3 tensor")
}

fn as4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("expected rank-4 tensor")
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("expected rank-1 tensor")
}

/// Strided 2D convolution with zero padding.
pub fn conv2d(x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Var {
    let xv = as3(x.value());
    let wv = as4(w.value());
    let bv = as1(b.value());
    let (h, wd, ci) = xv.dim();
    let (kh, kw, wci, co) = wv.dim();
    assert_eq!(ci, wci, "conv2d: channel mismatch");
    assert_eq!(bv.len(), co, "conv2d: bias mismatch");
    assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel too large");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;

    let mut out = Array3::<f64>::zeros((oh, ow, co));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = bv.to_owned();
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    for c in 0..ci {
                        let xval = xv[(iy as usize, ix as usize, c)];
                        if xval == 0.0 {
                            continue;
                        }
                        for o in 0..co {
                            acc[o] += xval * wv[(ky, kx, c, o)];
                        }
                    }
                }
            }
            out.slice_mut(ndarray::s![oy, ox, ..]).assign(&acc);
        }
    }

    Var::from_op(
        out.into_dyn(),
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g, parents| {
            let gv = as3(g);
            let xv = as3(parents[0].value());
            let wv = as4(parents[1].value());
            let (h, wd, ci) = xv.dim();
            let (kh, kw, _, co) = wv.dim();
            let (oh, ow, _) = gv.dim();

            let need_x = parents[0].needs_grad();
            let need_w = parents[1].needs_grad();
            let need_b = parents[2].needs_grad();

            let mut dx = Array3::<f64>::zeros((h, wd, ci));
            let mut dw = Array4::<f64>::zeros((kh, kw, ci, co));
            let mut db = Array1::<f64>::zeros(co);

            for oy in 0..oh {
                for ox in 0..ow {
                    let grow = gv.slice(ndarray::s![oy, ox, ..]);
                    if need_b {
                        for o in 0..co {
                            db[o] += grow[o];
                        }
                    }
                    if !(need_x || need_w) {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            for c in 0..ci {
                                let mut acc = 0.0;
                                let xval = xv[(iy, ix, c)];
                                for o in 0..co {
                                    let gval = grow[o];
                                    acc += gval * wv[(ky, kx, c, o)];
                                    if need_w {
                                        dw[(ky, kx, c, o)] += gval * xval;
                                    }
                                }
                                if need_x {
                                    dx[(iy, ix, c)] += acc;
                                }
                            }
                        }
                    }
                }
            }
            vec![
                need_x.then(|| dx.into_dyn()),
                need_w.then(|| dw.into_dyn()),
                need_b.then(|| db.into_dyn()),
            ]
        }),
    )
}

/// Strided 2D transposed convolution (adjoint of `conv2d`'s spatial map).
/// Output spatial size is `(h - 1) * stride + kh - 2 * pad`.
pub fn conv2d_transpose(x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Var {
    let xv = as3(x.value());
    let wv = as4(w.value());
    let bv = as1(b.value());
    let (h, wd, ci) = xv.dim();
    let (kh, kw, wci, co) = wv.dim();
    assert_eq!(ci, wci, "conv2d_transpose: channel mismatch");
    assert_eq!(bv.len(), co, "conv2d_transpose: bias mismatch");
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;

    let mut out = Array3::<f64>::zeros((oh, ow, co));
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..co {
                out[(oy, ox, o)] = bv[o];
            }
        }
    }
    for iy in 0..h {
        for ix in 0..wd {
            for ky in 0..kh {
                let oy = (iy * stride + ky) as isize - pad as isize;
                if oy < 0 || oy >= oh as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ox = (ix * stride + kx) as isize - pad as isize;
                    if ox < 0 || ox >= ow as isize {
                        continue;
                    }
                    for c in 0..ci {
                        let xval = xv[(iy, ix, c)];
                        if xval == 0.0 {
                            continue;
                        }
                        for o in 0..co {
                            out[(oy as usize, ox as usize, o)] += xval * wv[(ky, kx, c, o)];
                        }
                    }
                }
            }
        }
    }

    Var::from_op(
        out.into_dyn(),
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g, parents| {
            let gv = as3(g);
            let xv = as3(parents[0].value());
            let wv = as4(parents[1].value());
            let (h, wd, ci) = xv.dim();
            let (kh, kw, _, co) = wv.dim();
            let (oh, ow, _) = gv.dim();

            let need_x = parents[0].needs_grad();
            let need_w = parents[1].needs_grad();
            let need_b = parents[2].needs_grad();

            let mut dx = Array3::<f64>::zeros((h, wd, ci));
            let mut dw = Array4::<f64>::zeros((kh, kw, ci, co));
            let db = if need_b {
                let mut db = Array1::<f64>::zeros(co);
                for oy in 0..oh {
                    for ox in 0..ow {
                        for o in 0..co {
                            db[o] += gv[(oy, ox, o)];
                        }
                    }
                }
                Some(db)
            } else {
                None
            };

            if need_x || need_w {
                for iy in 0..h {
                    for ix in 0..wd {
                        for ky in 0..kh {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let (oy, ox) = (oy as usize, ox as usize);
                                for c in 0..ci {
                                    let mut acc = 0.0;
                                    let xval = xv[(iy, ix, c)];
                                    for o in 0..co {
                                        let gval = gv[(oy, ox, o)];
                                        acc += gval * wv[(ky, kx, c, o)];
                                        if need_w {
                                            dw[(ky, kx, c, o)] += gval * xval;
                                        }
                                    }
                                    if need_x {
                                        dx[(iy, ix, c)] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![
                need_x.then(|| dx.into_dyn()),
                need_w.then(|| dw.into_dyn()),
                db.map(|d| d.into_dyn()),
            ]
        }),
    )
}

/// Broadcast-add a per-channel bias over the last axis.
pub fn add_bias(x: &Var, b: &Var) -> Var {
    let c = *x.shape().last().expect("add_bias: rank >= 1");
    assert_eq!(b.shape(), [c], "add_bias: bias length mismatch");
    let mut value = x.value().clone();
    let bv = as1(b.value());
    for mut lane in value.rows_mut() {
        for (v, bi) in lane.iter_mut().zip(bv.iter()) {
            *v += bi;
        }
    }
    Var::from_op(
        value,
        vec![x.clone(), b.clone()],
        Box::new(move |g, _| {
            let mut db = Array1::<f64>::zeros(c);
            for lane in g.rows() {
                for (o, gi) in lane.iter().enumerate() {
                    db[o] += gi;
                }
            }
            vec![Some(g.clone()), Some(db.into_dyn())]
        }),
    )
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Var, b: &Var) -> Var {
    let av = as2(a.value());
    let bv = as2(b.value());
    assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims");
    let value = av.dot(&bv).into_dyn();
    Var::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, parents| {
            let gv = as2(g);
            let av = as2(parents[0].value());
            let bv = as2(parents[1].value());
            vec![
                Some(gv.dot(&bv.t()).into_dyn()),
                Some(av.t().dot(&gv).into_dyn()),
            ]
        }),
    )
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt(a: &Var, b: &Var) -> Var {
    let av = as2(a.value());
    let bv = as2(b.value());
    assert_eq!(av.ncols(), bv.ncols(), "matmul_nt: inner dims");
    let value = av.dot(&bv.t()).into_dyn();
    Var::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, parents| {
            let gv = as2(g);
            let av = as2(parents[0].value());
            let bv = as2(parents[1].value());
            vec![
                Some(gv.dot(&bv).into_dyn()),
                Some(gv.t().dot(&av).into_dyn()),
            ]
        }),
    )
}

/// Row-wise softmax of a matrix (max-shifted for stability).
pub fn softmax_rows(x: &Var) -> Var {
    let xv = as2(x.value());
    let (n, m) = xv.dim();
    let mut value = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let row = xv.row(i);
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..m {
            let e = (row[j] - mx).exp();
            value[(i, j)] = e;
            sum += e;
        }
        for j in 0..m {
            value[(i, j)] /= sum;
        }
    }
    let cached = value.clone();
    Var::from_op(
        value.into_dyn(),
        vec![x.clone()],
        Box::new(move |g, _| {
            let gv = as2(g);
            let (n, m) = cached.dim();
            let mut dx = Array2::<f64>::zeros((n, m));
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..m {
                    dot += gv[(i, j)] * cached[(i, j)];
                }
                for j in 0..m {
                    dx[(i, j)] = cached[(i, j)] * (gv[(i, j)] - dot);
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Concatenate two `[h,w,c]` maps along the channel axis.
pub fn concat_channels(a: &Var, b: &Var) -> Var {
    let av = as3(a.value());
    let bv = as3(b.value());
    let (h, w, ca) = av.dim();
    let (h2, w2, cb) = bv.dim();
    assert_eq!((h, w), (h2, w2), "concat_channels: spatial mismatch");
    let mut out = Array3::<f64>::zeros((h, w, ca + cb));
    out.slice_mut(ndarray::s![.., .., ..ca]).assign(&av);
    out.slice_mut(ndarray::s![.., .., ca..]).assign(&bv);
    Var::from_op(
        out.into_dyn(),
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let gv = as3(g);
            let da = gv.slice(ndarray::s![.., .., ..ca]).to_owned();
            let db = gv.slice(ndarray::s![.., .., ca..]).to_owned();
            vec![Some(da.into_dyn()), Some(db.into_dyn())]
        }),
    )
}

/// Multiply `[h,w,c]` by a single-channel `[h,w,1]` mask, broadcast over c.
pub fn mul_channel_mask(x: &Var, mask: &Var) -> Var {
    let xv = as3(x.value());
    let mv = as3(mask.value());
    let (h, w, c) = xv.dim();
    assert_eq!(mv.dim(), (h, w, 1), "mul_channel_mask: mask shape");
    let mut out = xv.to_owned();
    for y in 0..h {
        for xcol in 0..w {
            let m = mv[(y, xcol, 0)];
            for ch in 0..c {
                out[(y, xcol, ch)] *= m;
            }
        }
    }
    Var::from_op(
        out.into_dyn(),
        vec![x.clone(), mask.clone()],
        Box::new(|g, parents| {
            let gv = as3(g);
            let xv = as3(parents[0].value());
            let mv = as3(parents[1].value());
            let (h, w, c) = xv.dim();
            let mut dx = Array3::<f64>::zeros((h, w, c));
            let mut dm = Array3::<f64>::zeros((h, w, 1));
            for y in 0..h {
                for xcol in 0..w {
                    let m = mv[(y, xcol, 0)];
                    let mut acc = 0.0;
                    for ch in 0..c {
                        let gval = gv[(y, xcol, ch)];
                        dx[(y, xcol, ch)] = gval * m;
                        acc += gval * xv[(y, xcol, ch)];
                    }
                    dm[(y, xcol, 0)] = acc;
                }
            }
            vec![Some(dx.into_dyn()), Some(dm.into_dyn())]
        }),
    )
}

/// Mean over the spatial axes of `[h,w,c]`, producing `[c]`.
pub fn global_avg_pool(x: &Var) -> Var {
    let xv = as3(x.value());
    let (h, w, c) = xv.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array1::<f64>::zeros(c);
    for y in 0..h {
        for xcol in 0..w {
            for ch in 0..c {
                out[ch] += xv[(y, xcol, ch)] * scale;
            }
        }
    }
    Var::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g, parents| {
            let gv = as1(g);
            let shape = parents[0].shape();
            let (h, w, c) = (shape[0], shape[1], shape[2]);
            let scale = 1.0 / (h * w) as f64;
            let mut dx = Array3::<f64>::zeros((h, w, c));
            for y in 0..h {
                for xcol in 0..w {
                    for ch in 0..c {
                        dx[(y, xcol, ch)] = gv[ch] * scale;
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

fn resize_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    // half-pixel-center mapping, edge clamped
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5)
                .clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let t = src - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear resample of `[h,w,c]` to `[oh,ow,c]`.
pub fn bilinear_resize(x: &Var, oh: usize, ow: usize) -> Var {
    let xv = as3(x.value());
    let (h, w, c) = xv.dim();
    let ys = resize_taps(oh, h);
    let xs = resize_taps(ow, w);
    let mut out = Array3::<f64>::zeros((oh, ow, c));
    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = xv[(y0, x0, ch)] * (1.0 - tx) + xv[(y0, x1, ch)] * tx;
                let bot = xv[(y1, x0, ch)] * (1.0 - tx) + xv[(y1, x1, ch)] * tx;
                out[(oy, ox, ch)] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Var::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g, parents| {
            let gv = as3(g);
            let shape = parents[0].shape();
            let (h, w, c) = (shape[0], shape[1], shape[2]);
            let mut dx = Array3::<f64>::zeros((h, w, c));
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    for ch in 0..c {
                        let gval = gv[(oy, ox, ch)];
                        dx[(y0, x0, ch)] += gval * (1.0 - ty) * (1.0 - tx);
                        dx[(y0, x1, ch)] += gval * (1.0 - ty) * tx;
                        dx[(y1, x0, ch)] += gval * ty * (1.0 - tx);
                        dx[(y1, x1, ch)] += gval * ty * tx;
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// A sparse linear map between the spatial positions of two `[.., c]`
/// tensors, applied independently per channel. Each term contributes
/// `weight * input[in_idx, ch]` to `output[out_idx, ch]`.
#[derive(Debug, Clone)]
pub struct SparseLinear {
    pub in_spatial: usize,
    pub out_spatial: usize,
    pub terms: Vec<(u32, u32, f64)>,
}

/// `base + S · x` where `S` acts on flattened spatial positions and `base`
/// fixes the output shape. Exact derivatives: the Jacobian is `S` itself.
pub fn sparse_affine(x: &Var, map: Rc<SparseLinear>, base: ArrayD<f64>) -> Var {
    let c = *x.shape().last().expect("sparse_affine: rank >= 1");
    assert_eq!(
        x.value().len(),
        map.in_spatial * c,
        "sparse_affine: input size mismatch"
    );
    assert_eq!(
        base.len(),
        map.out_spatial * c,
        "sparse_affine: base size mismatch"
    );
    let xflat = x
        .value()
        .view()
        .into_shape_with_order((map.in_spatial, c))
        .expect("sparse_affine: input not contiguous");
    let mut out = base
        .clone()
        .into_shape_with_order((map.out_spatial, c))
        .expect("sparse_affine: base not contiguous");
    for &(o, i, wgt) in &map.terms {
        let (o, i) = (o as usize, i as usize);
        for ch in 0..c {
            out[(o, ch)] += wgt * xflat[(i, ch)];
        }
    }
    let out = out.into_shape_with_order(base.raw_dim()).unwrap();
    let bmap = Rc::clone(&map);
    Var::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g, parents| {
            let c = *parents[0].shape().last().unwrap();
            let gflat = g
                .view()
                .into_shape_with_order((bmap.out_spatial, c))
                .expect("sparse_affine backward: grad not contiguous");
            let mut dx = Array2::<f64>::zeros((bmap.in_spatial, c));
            for &(o, i, wgt) in &bmap.terms {
                let (o, i) = (o as usize, i as usize);
                for ch in 0..c {
                    dx[(i, ch)] += wgt * gflat[(o, ch)];
                }
            }
            let dx = dx
                .into_shape_with_order(IxDyn(parents[0].shape()))
                .unwrap();
            vec![Some(dx)]
        }),
    )
}
