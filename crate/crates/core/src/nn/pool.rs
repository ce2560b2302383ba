//! 2×2×2 max pooling (stride 2) and nearest-neighbour 2× upsampling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Argmax positions (flat indices into the forward input) plus the input shape.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

pub fn maxpool3d_forward<T: Scalar>(x: Tensor<T>) -> Result<(Tensor<T>, MaxPoolCache)> {
    let [n, c, d, h, w] = x.dims5()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "max pooling needs even spatial dims, got ({d},{h},{w})"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, od, oh, ow]);
    let mut argmax = vec![0usize; y.len()];
    let xd = x.data();
    let yd = y.data_mut();
    let mut oi = 0;
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * d * h * w;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = base + (2 * oz) * h * w + (2 * oy) * w + 2 * ox;
                        let mut best = xd[best_idx];
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = base
                                        + (2 * oz + dz) * h * w
                                        + (2 * oy + dy) * w
                                        + (2 * ox + dx);
                                    // Strict comparison keeps the lowest flat
                                    // index on ties.
                                    if xd[idx] > best {
                                        best = xd[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        yd[oi] = best;
                        argmax[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
    }
    let in_shape = x.shape().to_vec();
    Ok((y, MaxPoolCache { argmax, in_shape }))
}

pub fn maxpool3d_backward<T: Scalar>(dy: &Tensor<T>, cache: &MaxPoolCache) -> Result<Tensor<T>> {
    if dy.len() != cache.argmax.len() {
        return Err(Error::ShapeMismatch(format!(
            "dy has {} values, pooling cache recorded {}",
            dy.len(),
            cache.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&cache.in_shape);
    let dxd = dx.data_mut();
    for (&g, &idx) in dy.data().iter().zip(&cache.argmax) {
        dxd[idx] += g;
    }
    Ok(dx)
}

pub fn upsample_nearest2x_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5()?;
    let mut y = Tensor::zeros(&[n, c, 2 * d, 2 * h, 2 * w]);
    let xd = x.data();
    let yd = y.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let in_base = (s * c + ch) * d * h * w;
            let out_base = (s * c + ch) * 8 * d * h * w;
            for z in 0..2 * d {
                for yy in 0..2 * h {
                    let src = in_base + (z / 2) * h * w + (yy / 2) * w;
                    let dst = out_base + z * (2 * h) * (2 * w) + yy * (2 * w);
                    for xx in 0..2 * w {
                        yd[dst + xx] = xd[src + xx / 2];
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn upsample_nearest2x_backward<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = dy.dims5()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "upsample backward needs even dims, got ({d},{h},{w})"
        )));
    }
    let (id, ih, iw) = (d / 2, h / 2, w / 2);
    let mut dx = Tensor::zeros(&[n, c, id, ih, iw]);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let out_base = (s * c + ch) * d * h * w;
            let in_base = (s * c + ch) * id * ih * iw;
            for z in 0..d {
                for yy in 0..h {
                    let src = out_base + z * h * w + yy * w;
                    let dst = in_base + (z / 2) * ih * iw + (yy / 2) * iw;
                    for xx in 0..w {
                        dxd[dst + xx / 2] += dyd[src + xx];
                    }
                }
            }
        }
    }
    Ok(dx)
}
