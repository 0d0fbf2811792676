//! Convolution, padding, upsampling.
//!
//! conv2d lowers to strip-blocked im2col + GEMM (`matrixmultiply::dgemm`),
//! parallelized over batch samples with rayon. Weight gradients are reduced
//! across samples in fixed index order, so results do not depend on the
//! thread count.

use super::tape::{BackwardFn, Var};
use super::Tensor;
use rayon::prelude::*;

/// Geometry of a 2-D convolution. `padding` is symmetric zero padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same-padding needs an odd kernel");
        Conv2dSpec {
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        }
    }

    fn out_dim(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding).checked_sub(kernel).expect("kernel larger than padded input")
            / self.stride
            + 1
    }
}

/// Border handling for the standalone padding op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Mirror without repeating the edge sample (reflect-101); pad must be < dim.
    Reflect,
    /// Mirror including the edge sample; pad may equal the dim.
    Symmetric,
}

fn mirror_index(i: isize, n: usize, mode: PadMode) -> usize {
    let n = n as isize;
    let mut j = i;
    // fold until inside [0, n); converges because each fold shrinks |offset|
    loop {
        if j < 0 {
            j = match mode {
                PadMode::Reflect => -j,
                PadMode::Symmetric => -j - 1,
            };
        } else if j >= n {
            j = match mode {
                PadMode::Reflect => 2 * n - 2 - j,
                PadMode::Symmetric => 2 * n - 1 - j,
            };
        } else {
            return j as usize;
        }
    }
}

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

/// Zero-pad one (C,H,W) sample into `out` sized (C, H+2p, W+2p).
fn pad_zero_sample(x: &[f64], c: usize, h: usize, w: usize, p: usize, out: &mut [f64]) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    out.fill(0.0);
    for ci in 0..c {
        for row in 0..h {
            let src = (ci * h + row) * w;
            let dst = (ci * hp + row + p) * wp + p;
            out[dst..dst + w].copy_from_slice(&x[src..src + w]);
        }
    }
}

/// Fill im2col columns for output rows `row0..row0+rows` of one group.
///
/// `padded` holds the group's `cg` channels, already zero-padded.
/// Layout: cols[(ci*k+ky)*k+kx][r*w_out+ox] = padded[ci][ (row0+r)*s+ky ][ ox*s+kx ].
#[allow(clippy::too_many_arguments)]
fn im2col_strip(
    padded: &[f64],
    cg: usize,
    wp: usize,
    k: usize,
    stride: usize,
    row0: usize,
    rows: usize,
    w_out: usize,
    hp: usize,
    cols: &mut [f64],
) {
    let ns = rows * w_out;
    for ci in 0..cg {
        for ky in 0..k {
            for kx in 0..k {
                let col_row = ((ci * k + ky) * k + kx) * ns;
                for r in 0..rows {
                    let in_row = (row0 + r) * stride + ky;
                    debug_assert!(in_row < hp);
                    let src = (ci * hp + in_row) * wp + kx;
                    let dst = col_row + r * w_out;
                    if stride == 1 {
                        cols[dst..dst + w_out].copy_from_slice(&padded[src..src + w_out]);
                    } else {
                        for ox in 0..w_out {
                            cols[dst + ox] = padded[src + ox * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col_strip`]: scatter-add columns back into the padded buffer.
#[allow(clippy::too_many_arguments)]
fn col2im_strip(
    cols: &[f64],
    cg: usize,
    wp: usize,
    k: usize,
    stride: usize,
    row0: usize,
    rows: usize,
    w_out: usize,
    hp: usize,
    padded: &mut [f64],
) {
    let ns = rows * w_out;
    for ci in 0..cg {
        for ky in 0..k {
            for kx in 0..k {
                let col_row = ((ci * k + ky) * k + kx) * ns;
                for r in 0..rows {
                    let in_row = (row0 + r) * stride + ky;
                    debug_assert!(in_row < hp);
                    let dst = (ci * hp + in_row) * wp + kx;
                    let src = col_row + r * w_out;
                    if stride == 1 {
                        for ox in 0..w_out {
                            padded[dst + ox] += cols[src + ox];
                        }
                    } else {
                        for ox in 0..w_out {
                            padded[dst + ox * stride] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output row strip height keeping the column buffer around 2 MB.
fn strip_rows(ck: usize, w_out: usize, h_out: usize) -> usize {
    let target = 2 * 1024 * 1024 / 8; // elements
    (target / (ck * w_out).max(1)).clamp(1, h_out)
}

struct ConvDims {
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
    cg: usize,
    cog: usize,
}

fn conv_dims(x: &Tensor, weight: &Tensor, spec: &Conv2dSpec) -> ConvDims {
    let [b, c_in, h, w] = x.shape();
    let [c_out, cg, k, k2] = weight.shape();
    assert_eq!(k, k2, "conv2d: non-square kernel");
    assert_eq!(
        c_in % spec.groups,
        0,
        "conv2d: input channels {c_in} not divisible by groups {}",
        spec.groups
    );
    assert_eq!(
        c_out % spec.groups,
        0,
        "conv2d: output channels {c_out} not divisible by groups {}",
        spec.groups
    );
    assert_eq!(
        cg,
        c_in / spec.groups,
        "conv2d: weight group width {} does not match input {}",
        cg,
        c_in / spec.groups
    );
    assert!(
        h + 2 * spec.padding >= k && w + 2 * spec.padding >= k,
        "conv2d: kernel {k} larger than padded input {h}x{w} (pad {})",
        spec.padding
    );
    ConvDims {
        b,
        c_in,
        h,
        w,
        c_out,
        k,
        h_out: spec.out_dim(h, k),
        w_out: spec.out_dim(w, k),
        cg,
        cog: c_out / spec.groups,
    }
}

pub(crate) fn conv2d_raw(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &Conv2dSpec,
) -> Tensor {
    let d = conv_dims(x, weight, spec);
    if let Some(bv) = bias {
        assert_eq!(bv.shape(), [1, d.c_out, 1, 1], "conv2d: bias must be (1,Cout,1,1)");
    }
    let (hp, wp) = (d.h + 2 * spec.padding, d.w + 2 * spec.padding);
    let ck = d.cg * d.k * d.k;
    let strip = strip_rows(ck, d.w_out, d.h_out);
    let out_plane = d.c_out * d.h_out * d.w_out;
    let in_plane = d.c_in * d.h * d.w;
    let mut out = Tensor::zeros([d.b, d.c_out, d.h_out, d.w_out]);
    let wdata = weight.data();
    let bias_data = bias.map(|t| t.data().to_vec());

    let xd = x.data();
    out.data_mut()
        .par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(bi, y)| {
            let xs = &xd[bi * in_plane..(bi + 1) * in_plane];
            let mut padded = vec![0.0f64; d.c_in * hp * wp];
            let mut cols = vec![0.0f64; ck * strip * d.w_out];
            pad_zero_sample(xs, d.c_in, d.h, d.w, spec.padding, &mut padded);
            for g in 0..spec.groups {
                let pg = &padded[g * d.cg * hp * wp..(g + 1) * d.cg * hp * wp];
                let wg = &wdata[g * d.cog * ck..(g + 1) * d.cog * ck];
                let mut row0 = 0;
                while row0 < d.h_out {
                    let rows = strip.min(d.h_out - row0);
                    let ns = rows * d.w_out;
                    im2col_strip(
                        pg, d.cg, wp, d.k, spec.stride, row0, rows, d.w_out, hp,
                        &mut cols[..ck * ns],
                    );
                    // y[g*cog + m][row0.., :] = Wg (cog x ck) * cols (ck x ns)
                    let c_off = (g * d.cog) * d.h_out * d.w_out + row0 * d.w_out;
                    unsafe {
                        matrixmultiply::dgemm(
                            d.cog,
                            ck,
                            ns,
                            1.0,
                            wg.as_ptr(),
                            ck as isize,
                            1,
                            cols.as_ptr(),
                            ns as isize,
                            1,
                            0.0,
                            y.as_mut_ptr().add(c_off),
                            (d.h_out * d.w_out) as isize,
                            1,
                        );
                    }
                    row0 += rows;
                }
            }
            if let Some(bd) = &bias_data {
                for co in 0..d.c_out {
                    let base = co * d.h_out * d.w_out;
                    let bv = bd[co];
                    for v in &mut y[base..base + d.h_out * d.w_out] {
                        *v += bv;
                    }
                }
            }
        });
    out
}

/// Gradients of conv2d w.r.t. input, weight and bias.
pub(crate) fn conv2d_backward_raw(
    x: &Tensor,
    weight: &Tensor,
    spec: &Conv2dSpec,
    grad_out: &Tensor,
    want_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let d = conv_dims(x, weight, spec);
    assert_eq!(grad_out.shape(), [d.b, d.c_out, d.h_out, d.w_out]);
    let (hp, wp) = (d.h + 2 * spec.padding, d.w + 2 * spec.padding);
    let ck = d.cg * d.k * d.k;
    let strip = strip_rows(ck, d.w_out, d.h_out);
    let in_plane = d.c_in * d.h * d.w;
    let out_plane = d.c_out * d.h_out * d.w_out;
    let wdata = weight.data();
    let xd = x.data();
    let gd = grad_out.data();

    let mut dx = Tensor::zeros(x.shape());
    // Per-sample weight/bias partials, reduced afterwards in sample order.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
        .data_mut()
        .par_chunks_mut(in_plane)
        .enumerate()
        .map(|(bi, dx_s)| {
            let xs = &xd[bi * in_plane..(bi + 1) * in_plane];
            let gs = &gd[bi * out_plane..(bi + 1) * out_plane];
            let mut padded = vec![0.0f64; d.c_in * hp * wp];
            let mut dpadded = vec![0.0f64; d.c_in * hp * wp];
            let mut cols = vec![0.0f64; ck * strip * d.w_out];
            let mut dcols = vec![0.0f64; ck * strip * d.w_out];
            let mut dw_s = vec![0.0f64; d.c_out * ck];
            let mut db_s = vec![0.0f64; d.c_out];
            pad_zero_sample(xs, d.c_in, d.h, d.w, spec.padding, &mut padded);
            if want_bias {
                for co in 0..d.c_out {
                    let base = co * d.h_out * d.w_out;
                    db_s[co] = gs[base..base + d.h_out * d.w_out].iter().sum();
                }
            }
            for g in 0..spec.groups {
                let pg = &padded[g * d.cg * hp * wp..(g + 1) * d.cg * hp * wp];
                let dpg = &mut dpadded[g * d.cg * hp * wp..(g + 1) * d.cg * hp * wp];
                let wg = &wdata[g * d.cog * ck..(g + 1) * d.cog * ck];
                let dwg = &mut dw_s[g * d.cog * ck..(g + 1) * d.cog * ck];
                let mut row0 = 0;
                while row0 < d.h_out {
                    let rows = strip.min(d.h_out - row0);
                    let ns = rows * d.w_out;
                    im2col_strip(
                        pg, d.cg, wp, d.k, spec.stride, row0, rows, d.w_out, hp,
                        &mut cols[..ck * ns],
                    );
                    let g_off = (g * d.cog) * d.h_out * d.w_out + row0 * d.w_out;
                    unsafe {
                        // dW_g += dY_strip (cog x ns) * cols^T (ns x ck)
                        matrixmultiply::dgemm(
                            d.cog,
                            ns,
                            ck,
                            1.0,
                            gs.as_ptr().add(g_off),
                            (d.h_out * d.w_out) as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            ns as isize,
                            1.0,
                            dwg.as_mut_ptr(),
                            ck as isize,
                            1,
                        );
                        // dcols (ck x ns) = Wg^T (ck x cog) * dY_strip (cog x ns)
                        matrixmultiply::dgemm(
                            ck,
                            d.cog,
                            ns,
                            1.0,
                            wg.as_ptr(),
                            1,
                            ck as isize,
                            gs.as_ptr().add(g_off),
                            (d.h_out * d.w_out) as isize,
                            1,
                            0.0,
                            dcols.as_mut_ptr(),
                            ns as isize,
                            1,
                        );
                    }
                    col2im_strip(
                        &dcols[..ck * ns],
                        d.cg,
                        wp,
                        d.k,
                        spec.stride,
                        row0,
                        rows,
                        d.w_out,
                        hp,
                        dpg,
                    );
                    row0 += rows;
                }
            }
            // unpad into dx sample
            for ci in 0..d.c_in {
                for row in 0..d.h {
                    let src = (ci * hp + row + spec.padding) * wp + spec.padding;
                    let dst = (ci * d.h + row) * d.w;
                    dx_s[dst..dst + d.w].copy_from_slice(&dpadded[src..src + d.w]);
                }
            }
            (dw_s, db_s)
        })
        .collect();

    let mut dw = Tensor::zeros(weight.shape());
    {
        let acc = dw.data_mut();
        for (dw_s, _) in &partials {
            for (a, v) in acc.iter_mut().zip(dw_s) {
                *a += v;
            }
        }
    }
    let db = want_bias.then(|| {
        let mut db = Tensor::zeros([1, d.c_out, 1, 1]);
        {
            let acc = db.data_mut();
            for (_, db_s) in &partials {
                for (a, v) in acc.iter_mut().zip(db_s) {
                    *a += v;
                }
            }
        }
        db
    });
    (dx, dw, db)
}

fn pad_mirror_raw(x: &Tensor, p: usize, mode: PadMode) -> Tensor {
    let [b, c, h, w] = x.shape();
    match mode {
        PadMode::Reflect => assert!(p < h && p < w, "reflect pad {p} needs dims > {p}"),
        PadMode::Symmetric => assert!(p <= h && p <= w, "symmetric pad {p} needs dims >= {p}"),
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Tensor::zeros([b, c, hp, wp]);
    {
        let o = out.data_mut();
        let d = x.data();
        for plane in 0..b * c {
            let src = plane * h * w;
            let dst = plane * hp * wp;
            for row in 0..hp {
                let sr = mirror_index(row as isize - p as isize, h, mode);
                for col in 0..wp {
                    let sc = mirror_index(col as isize - p as isize, w, mode);
                    o[dst + row * wp + col] = d[src + sr * w + sc];
                }
            }
        }
    }
    out
}

fn pad_mirror_backward_raw(grad: &Tensor, shape: super::Shape, p: usize, mode: PadMode) -> Tensor {
    let [b, c, h, w] = shape;
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut dx = Tensor::zeros(shape);
    {
        let d = dx.data_mut();
        let g = grad.data();
        for plane in 0..b * c {
            let src = plane * hp * wp;
            let dst = plane * h * w;
            for row in 0..hp {
                let sr = mirror_index(row as isize - p as isize, h, mode);
                for col in 0..wp {
                    let sc = mirror_index(col as isize - p as isize, w, mode);
                    d[dst + sr * w + sc] += g[src + row * wp + col];
                }
            }
        }
    }
    dx
}

/// Weights for bilinear x2 interpolation (half-pixel centers): output index i
/// samples source position (i + 0.5)/2 - 0.5, clamped at the borders.
fn up2_taps(n_in: usize, i_out: usize) -> (usize, usize, f64) {
    let src = (i_out as f64 + 0.5) / 2.0 - 0.5;
    if src <= 0.0 {
        return (0, 0, 0.0);
    }
    if src >= (n_in - 1) as f64 {
        return (n_in - 1, n_in - 1, 0.0);
    }
    let floor = src.floor();
    (floor as usize, floor as usize + 1, src - floor)
}

fn upsample_bilinear_x2_raw(x: &Tensor) -> Tensor {
    let [b, c, h, w] = x.shape();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([b, c, h2, w2]);
    {
        let o = out.data_mut();
        let d = x.data();
        for plane in 0..b * c {
            let src = plane * h * w;
            let dst = plane * h2 * w2;
            for oy in 0..h2 {
                let (y0, y1, fy) = up2_taps(h, oy);
                for ox in 0..w2 {
                    let (x0, x1, fx) = up2_taps(w, ox);
                    let v00 = d[src + y0 * w + x0];
                    let v01 = d[src + y0 * w + x1];
                    let v10 = d[src + y1 * w + x0];
                    let v11 = d[src + y1 * w + x1];
                    o[dst + oy * w2 + ox] = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                }
            }
        }
    }
    out
}

fn upsample_bilinear_x2_backward_raw(grad: &Tensor, shape: super::Shape) -> Tensor {
    let [b, c, h, w] = shape;
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(shape);
    {
        let d = dx.data_mut();
        let g = grad.data();
        for plane in 0..b * c {
            let dst = plane * h * w;
            let src = plane * h2 * w2;
            for oy in 0..h2 {
                let (y0, y1, fy) = up2_taps(h, oy);
                for ox in 0..w2 {
                    let (x0, x1, fx) = up2_taps(w, ox);
                    let gv = g[src + oy * w2 + ox];
                    d[dst + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    d[dst + y0 * w + x1] += gv * (1.0 - fy) * fx;
                    d[dst + y1 * w + x0] += gv * fy * (1.0 - fx);
                    d[dst + y1 * w + x1] += gv * fy * fx;
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Var ops
// ---------------------------------------------------------------------------

impl<'t> Var<'t> {
    /// 2-D convolution. `weight` is `(C_out, C_in/groups, k, k)`, optional
    /// bias `(1, C_out, 1, 1)`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, spec: Conv2dSpec) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let out = conv2d_raw(&x, &w, b.as_ref(), &spec);
        let (xi, wi) = (self.idx, weight.idx);
        let bi = bias.map(|b| b.idx);
        let backward: BackwardFn = Box::new(move |g| {
            let (dx, dw, db) = conv2d_backward_raw(&x, &w, &spec, g, bi.is_some());
            let mut grads = vec![(xi, dx), (wi, dw)];
            if let (Some(bi), Some(db)) = (bi, db) {
                grads.push((bi, db));
            }
            grads
        });
        self.tape.push(out, Some(backward))
    }

    /// Mirror-pad spatial dims by `p` on all sides.
    pub fn pad_mirror(self, p: usize, mode: PadMode) -> Var<'t> {
        let x = self.value();
        let out = pad_mirror_raw(&x, p, mode);
        let idx = self.idx;
        let shape = x.shape();
        let backward: BackwardFn =
            Box::new(move |g| vec![(idx, pad_mirror_backward_raw(g, shape, p, mode))]);
        self.tape.push(out, Some(backward))
    }

    /// Bilinear x2 upsampling with half-pixel sampling.
    pub fn upsample_bilinear_x2(self) -> Var<'t> {
        let x = self.value();
        let out = upsample_bilinear_x2_raw(&x);
        let idx = self.idx;
        let shape = x.shape();
        let backward: BackwardFn =
            Box::new(move |g| vec![(idx, upsample_bilinear_x2_backward_raw(g, shape))]);
        self.tape.push(out, Some(backward))
    }
}
