//! Losses with analytic gradients, the Adam update, and the
//! finite-difference gradient-check harness the test suite is built on.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Predictions are clamped to `[EPS, 1 - EPS]` before the logs so saturated
/// sigmoid outputs keep the loss finite.
pub const BCE_CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Mse,
}

fn check_same_shape<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction shape {:?} vs target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Binary cross-entropy `-[t·ln p + (1-t)·ln(1-p)]` on clamped predictions.
///
/// The loss is accumulated in f64 in element order; the returned gradient is
/// the exact gradient of that reduction with respect to the (clamped)
/// predictions.
pub fn bce_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    reduction: Reduction,
) -> Result<(f64, Tensor<T>)> {
    check_same_shape(pred, target)?;
    let n = pred.len() as f64;
    let scale = match reduction {
        Reduction::Mean => 1.0 / n,
        Reduction::Sum => 1.0,
    };
    let mut sum = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = p.to_f64().clamp(BCE_CLAMP_EPS, 1.0 - BCE_CLAMP_EPS);
        let t = t.to_f64();
        sum += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        grad.push(T::from_f64(scale * (-t / p + (1.0 - t) / (1.0 - p))));
    }
    let loss = match reduction {
        Reduction::Mean => sum / n,
        Reduction::Sum => sum,
    };
    Ok((loss, Tensor::new(pred.shape(), grad)?))
}

/// Squared error `(p - t)²` with the chosen reduction.
pub fn mse_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    reduction: Reduction,
) -> Result<(f64, Tensor<T>)> {
    check_same_shape(pred, target)?;
    let n = pred.len() as f64;
    let scale = match reduction {
        Reduction::Mean => 1.0 / n,
        Reduction::Sum => 1.0,
    };
    let mut sum = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p.to_f64() - t.to_f64();
        sum += d * d;
        grad.push(T::from_f64(scale * 2.0 * d));
    }
    let loss = match reduction {
        Reduction::Mean => sum / n,
        Reduction::Sum => sum,
    };
    Ok((loss, Tensor::new(pred.shape(), grad)?))
}

pub fn loss_by_kind<T: Scalar>(
    kind: LossKind,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    reduction: Reduction,
) -> Result<(f64, Tensor<T>)> {
    match kind {
        LossKind::Bce => bce_loss(pred, target, reduction),
        LossKind::Mse => mse_loss(pred, target, reduction),
    }
}

/// Adam accumulators for a fixed list of parameter arrays.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed state for parameter arrays of the given lengths, with the
    /// hyperparameters used throughout this project (lr 0.008 unless
    /// overridden by the caller).
    pub fn new(lengths: &[usize], lr: f64) -> Self {
        AdamState {
            m: lengths.iter().map(|&l| vec![T::zero(); l]).collect(),
            v: lengths.iter().map(|&l| vec![T::zero(); l]).collect(),
            t: 0,
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
        }
    }
}

/// One Adam update with bias correction across all parameter arrays.
///
/// A non-finite gradient anywhere aborts before any state is touched, so a
/// failed step leaves parameters and moments exactly as they were.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam got {} parameter arrays, {} gradient arrays, state has {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::ShapeMismatch(format!(
                "adam array {i}: param len {}, grad len {}, state len {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient array {i}; step skipped")));
        }
    }

    state.t += 1;
    let bc1 = T::from_f64(1.0 - state.beta1.to_f64().powi(state.t as i32));
    let bc2 = T::from_f64(1.0 - state.beta2.to_f64().powi(state.t as i32));
    let one = T::one();
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = state.beta1 * m[i] + (one - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (one - state.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Central-difference check of an analytic gradient.
///
/// Perturbs each coordinate of `x` by ±eps, evaluates `f`, and returns the
/// worst relative error against `analytic`, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<F>(mut f: F, x: &mut [f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} coordinates but {} analytic gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let hi = f(x)?;
        x[i] = orig - eps;
        let lo = f(x)?;
        x[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!("objective at perturbed coordinate {i}")));
        }
        let numeric = (hi - lo) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((numeric - analytic[i]).abs() / denom);
    }
    Ok(worst)
}
