//! Dense row-major `f64` tensors.
//!
//! Feature maps use `[N, C, H, W]` order. A tensor of rank 0 is a scalar.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        Tensor::from_fn(shape, |_| normal.sample(rng))
    }

    /// Samples i.i.d. entries uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Dimensions of a rank-4 tensor as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected [N, C, H, W], got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let (_, cs, hs, ws) = (0, self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale_in_place(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    /// Copies samples `start..end` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("slice_batch on a scalar"))?;
        if start >= end || end > n {
            return Err(Error::shape(format!(
                "batch slice {start}..{end} out of range for {n}"
            )));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * stride..end * stride].to_vec(),
        ))
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor::from_parts(shape, data))
    }
}
