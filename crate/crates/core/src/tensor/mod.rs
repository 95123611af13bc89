//! Dense 4-D tensors of `f64` with a small reverse-mode tape.
//!
//! Every value in the pipeline (frames, activations, heatmaps, weights) is a
//! [`Tensor`] with shape `(batch, channels, height, width)` stored row-major.
//! Differentiable computation is recorded on a [`Tape`] and replayed in
//! reverse by [`Tape::backward`].

pub mod gradcheck;
pub mod io;
mod kernels;
mod tape;

pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

#[inline]
pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let [b, c, h, w] = shape;
        let mut data = Vec::with_capacity(numel(shape));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([bi, ci, y, x]));
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf when placed on a tape.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().map_or(true, |g| g.len() == self.data.len()));
        self.grad = grad;
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((b * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `height * width` plane of one (batch, channel) pair.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Copy of batch item `b` as a batch-1 tensor.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        let n = c * h * w;
        Tensor {
            shape: [1, c, h, w],
            data: self.data[b * n..(b + 1) * n].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Stacks tensors along the batch axis. All must share `(C, H, W)`.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut batch = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec([batch, c, h, w], data)
    }

    /// Channels `[start, start + len)` of every batch item.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let [b, c, h, w] = self.shape;
        if start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("[{start}, {}) of {c} channels", start + len),
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let base = (bi * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Tensor::from_vec([b, len, h, w], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self + alpha * other`, shapes must match.
    pub fn axpy(&self, alpha: f64, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "axpy",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Tensor::from_vec(self.shape, data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Value equality down to the bit pattern; ignores gradient state.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::from_vec([1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(0, 1, 1, 0), 6.0);
        assert_eq!(t.plane(0, 1), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn stack_and_slice() {
        let a = Tensor::full([1, 3, 2, 2], 1.0);
        let b = Tensor::full([1, 3, 2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), [2, 3, 2, 2]);
        assert!(s.batch_item(1).bit_eq(&b));
        let sl = s.slice_channels(1, 2).unwrap();
        assert_eq!(sl.shape(), [2, 2, 2, 2]);
        assert!(s.slice_channels(2, 2).is_err());
    }
}
