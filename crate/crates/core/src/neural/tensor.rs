use crate::error::{arg_err, Result};
use crate::scalar::Scalar;

/// Dense row-major array of up to four extents; activations use
/// `(sample, channel, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.len() > 4 {
            return arg_err(format!("tensor rank {} exceeds 4", dims.len()));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return arg_err(format!("tensor dims {dims:?} need {len} values, got {}", data.len()));
        }
        Ok(Tensor { dims: dims.to_vec(), data })
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![value; dims.iter().product()] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    /// Leading extent (batch size for activations).
    pub fn batch(&self) -> usize {
        self.dims.first().copied().unwrap_or(1)
    }

    /// Elements per leading index.
    pub fn sample_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    /// Extents as `(n, c, h, w)`, padding missing trailing axes with 1.
    pub fn nchw(&self) -> (usize, usize, usize, usize) {
        let d = |i: usize| self.dims.get(i).copied().unwrap_or(1);
        (d(0), d(1), d(2), d(3))
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() || dims.len() > 4 {
            return arg_err(format!("cannot reshape {:?} to {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Concatenates equally-shaped single samples along the leading axis.
    pub fn stack(samples: &[&[T]], sample_dims: &[usize]) -> Result<Self> {
        let per: usize = sample_dims.iter().product();
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            if s.len() != per {
                return arg_err("stacked sample has the wrong length");
            }
            data.extend_from_slice(s);
        }
        let mut dims = vec![samples.len()];
        dims.extend_from_slice(sample_dims);
        Tensor::from_vec(&dims, data)
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let per = self.sample_len();
        &self.data[i * per..(i + 1) * per]
    }
}
