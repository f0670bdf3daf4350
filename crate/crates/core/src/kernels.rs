//! Raw convolution kernels: im2col/col2im plus forward/backward passes for
//! strided and transposed 2-D convolution over `[C, H, W]` tensors.
//!
//! Everything funnels into one GEMM per pass so the hot path is
//! `matrixmultiply` via `ndarray::dot`. All loops are single-threaded and
//! run in a fixed order, which keeps training bit-reproducible.

use crate::elem::Elem;
use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};

/// Output spatial size of a strided convolution.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn convt_out_dim(input: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (input - 1) * stride + k + out_pad - 2 * pad
}

/// Unfold `x` into a `[C*k*k, Ho*Wo]` patch matrix.
///
/// Row `(ci*k + dy)*k + dx` holds, for every output position `(oy, ox)`,
/// the input value at `(ci, oy*s + dy - p, ox*s + dx - p)`, zero outside.
pub fn im2col<E: Elem>(x: &ArrayView3<E>, k: usize, stride: usize, pad: usize) -> Array2<E> {
    let (c, h, w) = x.dim();
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let l = ho * wo;
    let mut cols = Array2::<E>::zeros((c * k * k, l));
    let xs = x.as_slice().expect("im2col: input must be contiguous");
    let cs = cols.as_slice_mut().unwrap();

    for ci in 0..c {
        let x_ch = &xs[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let out_row = &mut cs[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    let seg = &mut out_row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        continue; // stays zero
                    }
                    let src_row = &x_ch[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // ix = ox + dx - p; valid ox range is a contiguous slice
                        let shift = dx as isize - pad as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = ((w as isize - shift).min(wo as isize)).max(0) as usize;
                        if ox_lo < ox_hi {
                            seg[ox_lo..ox_hi].copy_from_slice(
                                &src_row[(ox_lo as isize + shift) as usize
                                    ..(ox_hi as isize + shift) as usize],
                            );
                        }
                    } else {
                        for (ox, slot) in seg.iter_mut().enumerate() {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *slot = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the inverse of [`im2col`]: accumulate a `[C*k*k, Gh*Gw]`
/// patch matrix back into an image of shape `[C, h, w]`, where the patch
/// grid has `gh * gw` positions laid out with stride/pad over the image.
pub fn col2im<E: Elem>(
    cols: &ArrayView2<E>,
    c: usize,
    h: usize,
    w: usize,
    grid: (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<E> {
    let (gh, gw) = grid;
    let l = gh * gw;
    debug_assert_eq!(cols.dim(), (c * k * k, l));
    let mut img = Array3::<E>::zeros((c, h, w));
    let cs = cols.as_slice().expect("col2im: cols must be contiguous");
    let is = img.as_slice_mut().unwrap();

    for ci in 0..c {
        let img_ch = &mut is[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let col_row = &cs[row * l..(row + 1) * l];
                for oy in 0..gh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut img_ch[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &col_row[oy * gw..(oy + 1) * gw];
                    for (ox, &v) in seg.iter().enumerate() {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
    img
}

/// Forward convolution. `w` is `[Co, Ci*k*k]` (pre-flattened), bias per
/// output channel. Returns the output and the patch matrix for reuse in
/// the backward pass.
pub fn conv2d_fwd<E: Elem>(
    x: &ArrayView3<E>,
    w_flat: &ArrayView2<E>,
    b: &Array1<E>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array3<E>, Array2<E>) {
    let (_, h, win) = x.dim();
    let co = w_flat.dim().0;
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(win, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let mut y = w_flat.dot(&cols); // [Co, Ho*Wo]
    for (mut row, &bias) in y.rows_mut().into_iter().zip(b.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    let y = y.into_shape_with_order((co, ho, wo)).unwrap();
    (y, cols)
}

/// Gradient of a forward convolution w.r.t. its input.
pub fn conv2d_bwd_input<E: Elem>(
    w_flat: &ArrayView2<E>,
    gy: &ArrayView3<E>,
    input_hw: (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<E> {
    let (co, ho, wo) = gy.dim();
    let ci_kk = w_flat.dim().1;
    let ci = ci_kk / (k * k);
    let gy_flat = gy.to_shape((co, ho * wo)).unwrap();
    let gcols = w_flat.t().dot(&gy_flat); // [Ci*k*k, Ho*Wo]
    col2im(
        &gcols.view(),
        ci,
        input_hw.0,
        input_hw.1,
        (ho, wo),
        k,
        stride,
        pad,
    )
}

/// Gradients of a forward convolution w.r.t. flattened weights and bias,
/// reusing the saved patch matrix.
pub fn conv2d_bwd_params<E: Elem>(
    cols: &ArrayView2<E>,
    gy: &ArrayView3<E>,
) -> (Array2<E>, Array1<E>) {
    let (co, ho, wo) = gy.dim();
    let gy_flat = gy.to_shape((co, ho * wo)).unwrap();
    let gw = gy_flat.dot(&cols.t());
    let gb = gy_flat.sum_axis(ndarray::Axis(1));
    (gw, gb)
}

/// Forward transposed convolution. `w` is `[Ci, Co*k*k]` (pre-flattened,
/// torch `ConvTranspose2d` layout flattened over the last three axes).
pub fn convt2d_fwd<E: Elem>(
    x: &ArrayView3<E>,
    w_flat: &ArrayView2<E>,
    b: &Array1<E>,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Array3<E> {
    let (ci, h, w_in) = x.dim();
    let ho = convt_out_dim(h, k, stride, pad, out_pad);
    let wo = convt_out_dim(w_in, k, stride, pad, out_pad);
    let x_flat = x.to_shape((ci, h * w_in)).unwrap();
    let cols = w_flat.t().dot(&x_flat); // [Co*k*k, H*W]
    let mut y = col2im(&cols.view(), co, ho, wo, (h, w_in), k, stride, pad);
    for (mut ch, &bias) in y.outer_iter_mut().zip(b.iter()) {
        ch.mapv_inplace(|v| v + bias);
    }
    y
}

/// Gradients of a transposed convolution w.r.t. input, weights and bias.
pub fn convt2d_bwd<E: Elem>(
    x: &ArrayView3<E>,
    w_flat: &ArrayView2<E>,
    gy: &ArrayView3<E>,
    k: usize,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_params: bool,
) -> (Option<Array3<E>>, Option<(Array2<E>, Array1<E>)>) {
    let (ci, h, w_in) = x.dim();
    let gcols = im2col(gy, k, stride, pad); // grid == x grid: [Co*k*k, H*W]
    debug_assert_eq!(gcols.dim().1, h * w_in);
    let gx = if need_input {
        let gx_flat = w_flat.dot(&gcols); // [Ci, H*W]
        Some(gx_flat.into_shape_with_order((ci, h, w_in)).unwrap())
    } else {
        None
    };
    let gwb = if need_params {
        let x_flat = x.to_shape((ci, h * w_in)).unwrap();
        let gw = x_flat.dot(&gcols.t()); // [Ci, Co*k*k]
        let gb = gy
            .to_shape((gy.dim().0, gy.dim().1 * gy.dim().2))
            .unwrap()
            .sum_axis(ndarray::Axis(1));
        Some((gw, gb))
    } else {
        None
    };
    (gx, gwb)
}
