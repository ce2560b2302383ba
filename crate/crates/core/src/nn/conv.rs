//! 3-D convolution via im2col panels and a GEMM inner kernel.
//!
//! Each sample's receptive fields are unrolled into a `(Cin·k³) × panel`
//! matrix a slab of output rows at a time, so the working buffer stays a few
//! megabytes regardless of volume size, and the actual arithmetic runs
//! through `ndarray`'s single-threaded matrix multiply with a fixed reduction
//! order (bit-deterministic across runs). The test suite holds the result to
//! a six-nested-loop direct-summation oracle.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights, bias, and geometry of one convolution layer.
#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    /// Shape `(Cout, Cin, k, k, k)`.
    pub weights: Tensor<T>,
    /// Length `Cout`.
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>, stride: usize, padding: usize) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() != 5 || shape[2] != shape[3] || shape[3] != shape[4] {
            return Err(Error::ShapeMismatch(format!(
                "conv weights must be (Cout, Cin, k, k, k), got {shape:?}"
            )));
        }
        let k = shape[2];
        if k != 1 && k != 3 {
            return Err(Error::InvalidConfig(format!("kernel size {k} not in {{1,3}}")));
        }
        if bias.len() != shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} does not match Cout {}",
                bias.len(),
                shape[0]
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv stride must be positive".into()));
        }
        if weights.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conv weight".into()));
        }
        Ok(ConvParams { weights, bias, stride, padding })
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }
}

/// Saved forward state: the input tensor plus the output geometry.
#[derive(Debug, Clone)]
pub struct Conv3dCache<T> {
    x: Tensor<T>,
    out_spatial: [usize; 3],
}

impl<T: Scalar> Conv3dCache<T> {
    /// The forward input, for callers that moved it into the cache.
    pub fn input(&self) -> &Tensor<T> {
        &self.x
    }
}

#[derive(Debug)]
pub struct Conv3dGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Vec<T>,
}

fn out_extent(d: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = d + 2 * pad;
    if padded < k {
        return Err(Error::ShapeMismatch(format!(
            "input extent {d} with padding {pad} is smaller than kernel {k}"
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::ShapeMismatch(format!(
            "output extent for input {d}, kernel {k}, pad {pad} is not integral at stride {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Columns per im2col panel, chosen as whole output rows and capped so the
/// panel buffer stays near 8 MB.
fn panel_cols(k_rows: usize, w_out: usize, spatial_out: usize) -> usize {
    const BUDGET: usize = 1 << 21;
    let rows_per_panel = (BUDGET / (k_rows * w_out)).max(1);
    (rows_per_panel * w_out).min(spatial_out)
}

pub fn conv3d_forward<T: Scalar>(
    x: Tensor<T>,
    p: &ConvParams<T>,
) -> Result<(Tensor<T>, Conv3dCache<T>)> {
    let [n, c, d, h, w] = x.dims5()?;
    if c != p.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "input has {c} channels, conv expects {}",
            p.c_in()
        )));
    }
    let k = p.kernel();
    let od = out_extent(d, k, p.padding, p.stride)?;
    let oh = out_extent(h, k, p.padding, p.stride)?;
    let ow = out_extent(w, k, p.padding, p.stride)?;
    let (c_out, spatial_in, spatial_out) = (p.c_out(), d * h * w, od * oh * ow);
    let mut y = Tensor::zeros(&[n, c_out, od, oh, ow]);

    let k_rows = p.c_in() * k * k * k;
    let w_mat = ArrayView2::from_shape((c_out, k_rows), p.weights.data()).unwrap();

    if k == 1 && p.stride == 1 && p.padding == 0 {
        // 1x1x1: the unrolled matrix is the input itself.
        for s in 0..n {
            let x_mat =
                ArrayView2::from_shape((c, spatial_in), &x.data()[s * c * spatial_in..][..c * spatial_in])
                    .unwrap();
            let mut y_mat = ArrayViewMut2::from_shape(
                (c_out, spatial_out),
                &mut y.data_mut()[s * c_out * spatial_out..][..c_out * spatial_out],
            )
            .unwrap();
            general_mat_mul(T::one(), &w_mat, &x_mat, T::zero(), &mut y_mat);
        }
    } else {
        let pcols = panel_cols(k_rows, ow, spatial_out);
        let mut col = vec![T::zero(); k_rows * pcols];
        for s in 0..n {
            let x_s = &x.data()[s * c * spatial_in..][..c * spatial_in];
            let y_s = &mut y.data_mut()[s * c_out * spatial_out..][..c_out * spatial_out];
            let mut p0 = 0;
            while p0 < spatial_out {
                let pw = pcols.min(spatial_out - p0);
                im2col_panel(x_s, c, [d, h, w], [od, oh, ow], k, p.padding, p.stride, p0, pw, &mut col);
                let col_mat = ArrayView2::from_shape((k_rows, pw), &col[..k_rows * pw]).unwrap();
                let mut y_mat = ArrayViewMut2::from_shape(
                    (c_out, pw).strides((spatial_out, 1)),
                    &mut y_s[p0..],
                )
                .unwrap();
                general_mat_mul(T::one(), &w_mat, &col_mat, T::zero(), &mut y_mat);
                p0 += pw;
            }
        }
    }

    for s in 0..n {
        for co in 0..c_out {
            let b = p.bias[co];
            for v in &mut y.data_mut()[(s * c_out + co) * spatial_out..][..spatial_out] {
                *v += b;
            }
        }
    }

    Ok((y, Conv3dCache { x, out_spatial: [od, oh, ow] }))
}

pub fn conv3d_backward<T: Scalar>(
    dy: &Tensor<T>,
    p: &ConvParams<T>,
    cache: &Conv3dCache<T>,
) -> Result<Conv3dGrads<T>> {
    let [n, c, d, h, w] = cache.x.dims5()?;
    let [od, oh, ow] = cache.out_spatial;
    let c_out = p.c_out();
    if dy.shape() != [n, c_out, od, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "dy shape {:?} does not match forward output ({n},{c_out},{od},{oh},{ow})",
            dy.shape()
        )));
    }
    let k = p.kernel();
    let (spatial_in, spatial_out) = (d * h * w, od * oh * ow);
    let k_rows = c * k * k * k;

    let mut dx = Tensor::zeros(cache.x.shape());
    let mut dw = Tensor::zeros(p.weights.shape());
    let mut db = vec![T::zero(); c_out];

    for s in 0..n {
        for co in 0..c_out {
            let mut acc = T::zero();
            for &g in &dy.data()[(s * c_out + co) * spatial_out..][..spatial_out] {
                acc += g;
            }
            db[co] += acc;
        }
    }

    let w_mat = ArrayView2::from_shape((c_out, k_rows), p.weights.data()).unwrap();

    if k == 1 && p.stride == 1 && p.padding == 0 {
        for s in 0..n {
            let x_mat =
                ArrayView2::from_shape((c, spatial_in), &cache.x.data()[s * c * spatial_in..][..c * spatial_in])
                    .unwrap();
            let dy_mat = ArrayView2::from_shape(
                (c_out, spatial_out),
                &dy.data()[s * c_out * spatial_out..][..c_out * spatial_out],
            )
            .unwrap();
            {
                let mut dw_mat =
                    ArrayViewMut2::from_shape((c_out, k_rows), dw.data_mut()).unwrap();
                general_mat_mul(T::one(), &dy_mat, &x_mat.t(), T::one(), &mut dw_mat);
            }
            let mut dx_mat = ArrayViewMut2::from_shape(
                (c, spatial_in),
                &mut dx.data_mut()[s * c * spatial_in..][..c * spatial_in],
            )
            .unwrap();
            general_mat_mul(T::one(), &w_mat.t(), &dy_mat, T::zero(), &mut dx_mat);
        }
        return Ok(Conv3dGrads { dx, dw, db });
    }

    let pcols = panel_cols(k_rows, ow, spatial_out);
    let mut col = vec![T::zero(); k_rows * pcols];
    let mut dcol = vec![T::zero(); k_rows * pcols];
    for s in 0..n {
        let x_s = &cache.x.data()[s * c * spatial_in..][..c * spatial_in];
        let dy_s = &dy.data()[s * c_out * spatial_out..][..c_out * spatial_out];
        let dx_s = &mut dx.data_mut()[s * c * spatial_in..][..c * spatial_in];
        let mut p0 = 0;
        while p0 < spatial_out {
            let pw = pcols.min(spatial_out - p0);
            let dy_mat =
                ArrayView2::from_shape((c_out, pw).strides((spatial_out, 1)), &dy_s[p0..]).unwrap();

            im2col_panel(x_s, c, [d, h, w], [od, oh, ow], k, p.padding, p.stride, p0, pw, &mut col);
            let col_mat = ArrayView2::from_shape((k_rows, pw), &col[..k_rows * pw]).unwrap();
            {
                let mut dw_mat =
                    ArrayViewMut2::from_shape((c_out, k_rows), dw.data_mut()).unwrap();
                general_mat_mul(T::one(), &dy_mat, &col_mat.t(), T::one(), &mut dw_mat);
            }

            {
                let mut dcol_mat =
                    ArrayViewMut2::from_shape((k_rows, pw), &mut dcol[..k_rows * pw]).unwrap();
                general_mat_mul(T::one(), &w_mat.t(), &dy_mat, T::zero(), &mut dcol_mat);
            }
            col2im_add(dx_s, c, [d, h, w], [od, oh, ow], k, p.padding, p.stride, p0, pw, &dcol);
            p0 += pw;
        }
    }

    Ok(Conv3dGrads { dx, dw, db })
}

/// Fills `col` (row-major `(Cin·k³) × cols`) with the receptive fields of
/// output positions `[p0, p0+cols)`. Out-of-image taps are zero.
#[allow(clippy::too_many_arguments)]
fn im2col_panel<T: Scalar>(
    x: &[T],
    c_in: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    k: usize,
    pad: usize,
    stride: usize,
    p0: usize,
    cols: usize,
    col: &mut [T],
) {
    let [d, h, w] = in_dims;
    let [_, oh, ow] = out_dims;
    let mut r = 0;
    for ci in 0..c_in {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row_buf = &mut col[r * cols..(r + 1) * cols];
                    // Walk the panel's output positions grouped by (od, oh)
                    // rows so inner copies are contiguous when stride == 1.
                    let mut filled = 0;
                    while filled < cols {
                        let p = p0 + filled;
                        let o_d = p / (oh * ow);
                        let o_h = (p / ow) % oh;
                        let o_w0 = p % ow;
                        let run = (ow - o_w0).min(cols - filled);
                        let dst = &mut row_buf[filled..filled + run];
                        let iz = (o_d * stride + kz) as isize - pad as isize;
                        let iy = (o_h * stride + ky) as isize - pad as isize;
                        if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                        } else {
                            let base = ci * d * h * w + (iz as usize) * h * w + (iy as usize) * w;
                            if stride == 1 {
                                let ix0 = (o_w0 + kx) as isize - pad as isize;
                                // Clip the [ix0, ix0+run) window to the image row.
                                let lo = (-ix0).clamp(0, run as isize) as usize;
                                let hi_src = (w as isize - ix0).clamp(0, run as isize) as usize;
                                dst[..lo].fill(T::zero());
                                if hi_src > lo {
                                    let src0 = (ix0 + lo as isize) as usize;
                                    dst[lo..hi_src]
                                        .copy_from_slice(&x[base + src0..base + src0 + (hi_src - lo)]);
                                }
                                dst[hi_src.max(lo)..].fill(T::zero());
                            } else {
                                for (j, slot) in dst.iter_mut().enumerate() {
                                    let ix = ((o_w0 + j) * stride + kx) as isize - pad as isize;
                                    *slot = if ix < 0 || ix >= w as isize {
                                        T::zero()
                                    } else {
                                        x[base + ix as usize]
                                    };
                                }
                            }
                        }
                        filled += run;
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col_panel`]: accumulates `dcol` back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    dx: &mut [T],
    c_in: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    k: usize,
    pad: usize,
    stride: usize,
    p0: usize,
    cols: usize,
    dcol: &[T],
) {
    let [d, h, w] = in_dims;
    let [_, oh, ow] = out_dims;
    let mut r = 0;
    for ci in 0..c_in {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row_buf = &dcol[r * cols..(r + 1) * cols];
                    let mut filled = 0;
                    while filled < cols {
                        let p = p0 + filled;
                        let o_d = p / (oh * ow);
                        let o_h = (p / ow) % oh;
                        let o_w0 = p % ow;
                        let run = (ow - o_w0).min(cols - filled);
                        let src = &row_buf[filled..filled + run];
                        let iz = (o_d * stride + kz) as isize - pad as isize;
                        let iy = (o_h * stride + ky) as isize - pad as isize;
                        if iz >= 0 && iz < d as isize && iy >= 0 && iy < h as isize {
                            let base = ci * d * h * w + (iz as usize) * h * w + (iy as usize) * w;
                            if stride == 1 {
                                let ix0 = (o_w0 + kx) as isize - pad as isize;
                                let lo = (-ix0).clamp(0, run as isize) as usize;
                                let hi = (w as isize - ix0).clamp(0, run as isize) as usize;
                                if hi > lo {
                                    let dst0 = (ix0 + lo as isize) as usize;
                                    for (dst, &g) in dx[base + dst0..base + dst0 + (hi - lo)]
                                        .iter_mut()
                                        .zip(&src[lo..hi])
                                    {
                                        *dst += g;
                                    }
                                }
                            } else {
                                for (j, &g) in src.iter().enumerate() {
                                    let ix = ((o_w0 + j) * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dx[base + ix as usize] += g;
                                    }
                                }
                            }
                        }
                        filled += run;
                    }
                    r += 1;
                }
            }
        }
    }
}
