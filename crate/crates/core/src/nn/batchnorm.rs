//! Batch normalization over (N, D, H, W) per channel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(0.1),
            epsilon: T::from_f64(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Normalized activations and the per-channel scale factors the backward
/// pass needs. `train` records whether batch statistics were used.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    train: bool,
}

#[derive(Debug)]
pub struct BatchNormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// Train mode normalizes with batch statistics (population variance) and
/// updates the running estimates in place:
/// `running = (1 - momentum) * running + momentum * batch`.
/// Eval mode normalizes with the stored running estimates and leaves them
/// untouched.
pub fn batchnorm3d_forward<T: Scalar>(
    x: Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    match mode {
        BnMode::Eval => batchnorm3d_eval(x, p),
        BnMode::Train => {
            let [n, c, d, h, w] = x.dims5()?;
            if c != p.channels() {
                return Err(Error::ShapeMismatch(format!(
                    "input has {c} channels, batchnorm has {}",
                    p.channels()
                )));
            }
            let spatial = d * h * w;
            let m = n * spatial;
            if m < 2 {
                return Err(Error::InvalidData(
                    "train-mode batchnorm needs at least 2 values per channel".into(),
                ));
            }
            let mut means = vec![T::zero(); c];
            let mut vars = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum = 0.0f64;
                for s in 0..n {
                    for &v in &x.data()[(s * c + ch) * spatial..][..spatial] {
                        sum += v.to_f64();
                    }
                }
                let mean = sum / m as f64;
                let mut sq = 0.0f64;
                for s in 0..n {
                    for &v in &x.data()[(s * c + ch) * spatial..][..spatial] {
                        let dlt = v.to_f64() - mean;
                        sq += dlt * dlt;
                    }
                }
                let var = sq / m as f64;
                means[ch] = T::from_f64(mean);
                vars[ch] = T::from_f64(var);
                p.running_mean[ch] =
                    (T::one() - p.momentum) * p.running_mean[ch] + p.momentum * means[ch];
                p.running_var[ch] =
                    (T::one() - p.momentum) * p.running_var[ch] + p.momentum * vars[ch];
            }
            apply_norm(x, p, &means, &vars, true)
        }
    }
}

/// Eval-mode normalization with the stored running statistics; read-only on
/// the parameters, so shared inference never needs `&mut`.
pub fn batchnorm3d_eval<T: Scalar>(
    x: Tensor<T>,
    p: &BatchNormParams<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = x.dims5()?[1];
    if c != p.channels() {
        return Err(Error::ShapeMismatch(format!(
            "input has {c} channels, batchnorm has {}",
            p.channels()
        )));
    }
    let means = p.running_mean.clone();
    let vars = p.running_var.clone();
    apply_norm(x, p, &means, &vars, false)
}

fn apply_norm<T: Scalar>(
    mut y: Tensor<T>,
    p: &BatchNormParams<T>,
    means: &[T],
    vars: &[T],
    train: bool,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [n, c, d, h, w] = y.dims5()?;
    let spatial = d * h * w;
    let mut x_hat = vec![T::zero(); y.len()];
    let mut inv_std_per_c = vec![T::zero(); c];
    for ch in 0..c {
        let inv_std = T::one() / (vars[ch] + p.epsilon).sqrt();
        inv_std_per_c[ch] = inv_std;
        let (g, b, mean) = (p.gamma[ch], p.beta[ch], means[ch]);
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                let xh = (y.data()[i] - mean) * inv_std;
                x_hat[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
    }
    let shape = y.shape().to_vec();
    Ok((y, BatchNormCache { x_hat, inv_std: inv_std_per_c, shape, train }))
}

/// Exact gradients. In train mode the batch mean and variance depend on x,
/// giving the full form
/// `dx = gamma * inv_std * (dy - mean(dy) - x_hat * mean(dy * x_hat))`;
/// in eval mode the statistics are constants and the map is affine.
pub fn batchnorm3d_backward<T: Scalar>(
    dy: &Tensor<T>,
    p: &BatchNormParams<T>,
    cache: &BatchNormCache<T>,
) -> Result<BatchNormGrads<T>> {
    if dy.shape() != cache.shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "dy shape {:?} does not match cached {:?}",
            dy.shape(),
            cache.shape
        )));
    }
    let [n, c, d, h, w] = dy.dims5()?;
    let spatial = d * h * w;
    let m = (n * spatial) as f64;

    let mut dx = Tensor::zeros(&cache.shape);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];

    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                let g = dy.data()[i].to_f64();
                sum_dy += g;
                sum_dy_xhat += g * cache.x_hat[i].to_f64();
            }
        }
        dgamma[ch] = T::from_f64(sum_dy_xhat);
        dbeta[ch] = T::from_f64(sum_dy);

        let scale = p.gamma[ch] * cache.inv_std[ch];
        if cache.train {
            let mean_dy = T::from_f64(sum_dy / m);
            let mean_dy_xhat = T::from_f64(sum_dy_xhat / m);
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    let v = dy.data()[i] - mean_dy - cache.x_hat[i] * mean_dy_xhat;
                    dx.data_mut()[i] = scale * v;
                }
            }
        } else {
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    dx.data_mut()[i] = scale * dy.data()[i];
                }
            }
        }
    }

    Ok(BatchNormGrads { dx, dgamma, dbeta })
}
