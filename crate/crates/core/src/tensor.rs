//! Dense row-major tensors.
//!
//! A [`Tensor`] is a flat buffer plus explicit dimensions. Feature maps are
//! stored `[C, H, W]`, matrices `[rows, cols]`, conv weights
//! `[out_c, in_c, kh, kw]`. A `C×H×W` feature map reinterpreted as a
//! `C×(H·W)` matrix is the same buffer, so flattening for attention is a
//! reshape, not a copy.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "dims {:?} do not match buffer of {} elements",
            dims,
            data.len()
        );
        Tensor { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(dims: Vec<usize>, value: S) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn feature_map(c: usize, h: usize, w: usize, data: Vec<S>) -> Self {
        Self::new(vec![c, h, w], data)
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Same buffer under new dimensions.
    pub fn reshaped(&self, dims: Vec<usize>) -> Tensor<S> {
        assert_eq!(
            dims.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.dims,
            dims
        );
        Tensor {
            dims,
            data: self.data.clone(),
        }
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.dims.len(), 2);
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.dims.len(), 2);
        self.dims[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> S {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[r * self.dims[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: S) {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[r * self.dims[1] + c] = v;
    }

    pub fn channels(&self) -> usize {
        assert_eq!(self.dims.len(), 3, "not a feature map: {:?}", self.dims);
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        assert_eq!(self.dims.len(), 3, "not a feature map: {:?}", self.dims);
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        assert_eq!(self.dims.len(), 3, "not a feature map: {:?}", self.dims);
        self.dims[2]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> S {
        debug_assert_eq!(self.dims.len(), 3);
        self.data[(c * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: S) {
        debug_assert_eq!(self.dims.len(), 3);
        self.data[(c * self.dims[1] + y) * self.dims[2] + x] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
        assert_eq!(self.dims, other.dims, "zip_map shape mismatch");
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: S) -> Tensor<S> {
        self.map(|v| v * factor)
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.dims, other.dims, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(S::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Convert element type (f32 <-> f64) through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64(Scalar::to_f64(v)))
                .collect(),
        }
    }
}
