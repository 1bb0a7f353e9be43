//! Dense row-major tensors.
//!
//! Ensemble tensors use the layout `[member, channel, lat, lon]` with the
//! member axis outermost, so each member is one contiguous slice.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let i = self.flat_index(idx);
        self.data[i] = v;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy conversion to another scalar width.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Number of leading-axis entries (members for ensemble tensors).
    pub fn members(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Values of one leading-axis entry.
    pub fn member(&self, i: usize) -> &[T] {
        let n = self.member_len();
        &self.data[i * n..(i + 1) * n]
    }

    fn member_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Gathers leading-axis entries in the given order; repeats allowed.
    pub fn select_members(&self, indices: &[usize]) -> Result<Self> {
        let k = self.members();
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Usage(format!(
                "member index {bad} out of range for {k} members"
            )));
        }
        let n = self.member_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Extracts channel `c` of a `[k, c, h, w]` tensor as `[k, 1, h, w]`.
    pub fn channel(&self, c: usize) -> Result<Self> {
        if self.rank() != 4 || c >= self.shape[1] {
            return Err(Error::Usage(format!(
                "channel {c} not available in tensor of shape {:?}",
                self.shape
            )));
        }
        let [k, nc, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        let plane = h * w;
        let mut data = Vec::with_capacity(k * plane);
        for i in 0..k {
            let off = (i * nc + c) * plane;
            data.extend_from_slice(&self.data[off..off + plane]);
        }
        Ok(Self {
            shape: vec![k, 1, h, w],
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
