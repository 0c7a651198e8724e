//! Dense NCHW tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Tensor`] is a plain value: a shape and a contiguous `f64` buffer.
//! Differentiation happens on a [`Graph`], which records every operation of
//! one forward pass; [`Graph::backward`] then walks the tape in reverse.
//! Trainable state lives in [`Param`] handles that outlive any single graph
//! and accumulate gradients across backward calls until zeroed.

mod conv;
mod graph;
mod param;

pub use conv::{conv_call_count, reset_conv_call_count, ConvParams};
pub use graph::{Gradients, Graph, StdLayout, Var};
pub use param::{Param, ParamGroup};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `[N, C, H, W]` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(format!(
                "expected an NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }
}

/// Depth-to-space rearrangement `[N, C·r², H, W] -> [N, C, H·r, W·r]`.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let [n, cr2, h, w] = input.dims4()?;
    if r == 0 || cr2 % (r * r) != 0 {
        return Err(Error::config(format!(
            "pixel_shuffle: {cr2} channels not divisible by r²={}",
            r * r
        )));
    }
    let c = cr2 / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; input.numel()];
    let src = input.data();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let in_c = ci * r * r + i * r + j;
                    for y in 0..h {
                        let src_row = ((ni * cr2 + in_c) * h + y) * w;
                        let dst_row = ((ni * c + ci) * oh + y * r + i) * ow;
                        for x in 0..w {
                            out[dst_row + x * r + j] = src[src_row + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Adjoint (and inverse) of [`pixel_shuffle`].
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, oh, ow] = input.dims4()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::config(format!(
            "pixel_unshuffle: spatial dims {oh}x{ow} not divisible by r={r}"
        )));
    }
    let (h, w) = (oh / r, ow / r);
    let cr2 = c * r * r;
    let mut out = vec![0.0; input.numel()];
    let src = input.data();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let out_c = ci * r * r + i * r + j;
                    for y in 0..h {
                        let dst_row = ((ni * cr2 + out_c) * h + y) * w;
                        let src_row = ((ni * c + ci) * oh + y * r + i) * ow;
                        for x in 0..w {
                            out[dst_row + x] = src[src_row + x * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cr2, h, w], out)
}
