//! Dense 4-axis tensors and a tape-based reverse-mode autodiff engine.
//!
//! Every feature map is a [`Tensor4D`] laid out row-major as
//! `(batch, channel, height, width)`. Differentiable computation is recorded
//! on a [`Tape`]; values are addressed through copyable [`Var`] handles and
//! gradients live on the tape, not on the tensors themselves.

mod gradcheck;
mod kernels;
mod tape;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use tape::{sigmoid, GroupStats, StatAxes, Tape, Var};

/// Extent of a [`Tensor4D`] along its four axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const SCALAR: Dims = Dims { n: 1, c: 1, h: 1, w: 1 };

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    /// Per-channel vector shape used for biases and normalization parameters.
    pub fn vector(len: usize) -> Self {
        Dims::new(len, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn planes(&self) -> usize {
        self.n * self.c
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.n, self.c, self.h, self.w)
    }
}

/// Dense `f64` tensor with `(n, c, h, w)` row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4D {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor4D {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "{} values supplied for dims {dims} ({} expected)",
                data.len(),
                dims.len()
            )));
        }
        Ok(Tensor4D { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f64) -> Self {
        Tensor4D {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Dims::SCALAR, value)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4D { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + y) * self.dims.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    /// The `h·w` slice holding channel `c` of sample `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    /// Single-value accessor for `(1,1,1,1)` tensors.
    pub fn item(&self) -> Result<f64> {
        if self.dims != Dims::SCALAR {
            return Err(Error::shape(format!("item() on non-scalar tensor {}", self.dims)));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies samples `indices` (along the batch axis) into a new tensor.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let per = self.dims.c * self.dims.plane();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.dims.n {
                return Err(Error::shape(format!("batch index {i} out of range for {}", self.dims)));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Ok(Tensor4D {
            dims: Dims::new(indices.len(), self.dims.c, self.dims.h, self.dims.w),
            data,
        })
    }
}

/// Spatial padding mode of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// No padding; output shrinks by `k - 1`.
    Valid,
    /// Zero padding keeping the spatial size. For even kernels the extra
    /// row/column of padding goes to the bottom/right.
    Same,
}

impl Padding {
    /// `(top, left)` zero margins for a kernel of size `k`.
    pub fn leading(self, k: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (k - 1) / 2,
        }
    }

    /// Output extent along one axis, or `None` when the input is too small.
    pub fn output_extent(self, extent: usize, k: usize) -> Option<usize> {
        match self {
            Padding::Same => Some(extent),
            Padding::Valid => extent.checked_sub(k - 1).filter(|&e| e > 0),
        }
    }
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        })
    }
}

impl FromStr for Padding {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "valid" => Ok(Padding::Valid),
            "same" => Ok(Padding::Same),
            other => Err(format!("unknown padding `{other}` (expected valid|same)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor4D::new(Dims::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor4D::from_fn(Dims::new(2, 3, 4, 5), |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.get(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.index(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.plane(1, 1)[0], 1100.0);
    }

    #[test]
    fn valid_extent_requires_room_for_kernel() {
        assert_eq!(Padding::Valid.output_extent(8, 3), Some(6));
        assert_eq!(Padding::Valid.output_extent(2, 3), None);
        assert_eq!(Padding::Same.output_extent(5, 2), Some(5));
        assert_eq!(Padding::Same.leading(2), 0);
        assert_eq!(Padding::Same.leading(3), 1);
    }
}
