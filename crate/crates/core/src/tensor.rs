//! Dense row-major tensors.
//!
//! The network stack uses a canonical five-axis layout `(N, C, D, H, W)` with
//! the last axis fastest. A volume's x axis maps onto W, y onto H, z onto D,
//! so wrapping a [`Volume`] is a reinterpretation of the same buffer.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero-sized axis in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "tensor data has {} values, shape {:?} needs {}",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The `(N, C, D, H, W)` extents; errors when the tensor is not 5-axis.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        if self.shape.len() != 5 {
            return Err(Error::ShapeMismatch(format!(
                "expected a 5-axis tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok([
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
            self.shape[4],
        ])
    }

    /// Reinterprets a volume as a `(1, 1, z, y, x)` tensor without changing
    /// the element order.
    pub fn from_volume(vol: &Volume) -> Self {
        Tensor {
            shape: vec![1, 1, vol.dims[2], vol.dims[1], vol.dims[0]],
            data: vol.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        }
    }

    /// Inverse of [`Tensor::from_volume`]; requires shape `(1, 1, D, H, W)`.
    pub fn to_volume(&self, spacing: [f32; 3]) -> Result<Volume> {
        let [n, c, d, h, w] = self.dims5()?;
        if n != 1 || c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "only single-sample single-channel tensors convert to volumes, got {:?}",
                self.shape
            )));
        }
        Volume::new(
            [w, h, d],
            spacing,
            self.data.iter().map(|&v| v.to_f64() as f32).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds `other` elementwise into `self`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise add of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// Joins two 5-axis tensors along the channel axis, `a`'s channels first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let da = a.dims5()?;
    let db = b.dims5()?;
    if da[0] != db[0] || da[2..] != db[2..] {
        return Err(Error::ShapeMismatch(format!(
            "concat_channels needs matching non-channel axes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let spatial = da[2] * da[3] * da[4];
    let (ca, cb) = (da[1], db[1]);
    let mut data = Vec::with_capacity((ca + cb) * da[0] * spatial);
    for n in 0..da[0] {
        data.extend_from_slice(&a.data()[n * ca * spatial..(n + 1) * ca * spatial]);
        data.extend_from_slice(&b.data()[n * cb * spatial..(n + 1) * cb * spatial]);
    }
    Tensor::new(&[da[0], ca + cb, da[2], da[3], da[4]], data)
}

/// Splits a 5-axis tensor into the first `c_first` channels and the rest.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, c_first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, d, h, w] = t.dims5()?;
    if c_first == 0 || c_first >= c {
        return Err(Error::ShapeMismatch(format!(
            "cannot split {c} channels at {c_first}"
        )));
    }
    let spatial = d * h * w;
    let c_rest = c - c_first;
    let mut first = Vec::with_capacity(n * c_first * spatial);
    let mut rest = Vec::with_capacity(n * c_rest * spatial);
    for s in 0..n {
        let base = s * c * spatial;
        first.extend_from_slice(&t.data()[base..base + c_first * spatial]);
        rest.extend_from_slice(&t.data()[base + c_first * spatial..base + c * spatial]);
    }
    Ok((
        Tensor::new(&[n, c_first, d, h, w], first)?,
        Tensor::new(&[n, c_rest, d, h, w], rest)?,
    ))
}
