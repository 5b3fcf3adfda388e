//! Dense f64 tensors with a tape-based reverse-mode graph.
//!
//! Forward kernels fix their summation order, so two runs over the same graph
//! produce bit-identical values and gradients.

mod graph;
mod gradcheck;
pub(crate) mod kernels;

pub use graph::{sigmoid, Gradients, Graph, NodeId, LOG_CLAMP};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::ConvGeometry;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Result};

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        ensure!(n == data.len(), ShapeMismatch, "shape {shape:?} needs {n} values, got {}", data.len());
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    /// Independent N(0, std²) entries.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
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
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear resize of the two trailing axes (half-pixel centres).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        ensure!(self.rank() >= 2, ShapeMismatch, "resize needs at least two axes, got {:?}", self.shape);
        ensure!(out_h > 0 && out_w > 0, InvalidArgument, "resize target must be non-empty");
        let r = self.rank();
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        if (h, w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        let planes = self.len() / (h * w);
        let mut shape = self.shape.clone();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Tensor::new(shape, kernels::bilinear_forward(planes, h, w, out_h, out_w, &self.data))
    }

    /// Mirrors the last axis.
    pub fn hflip(&self) -> Tensor {
        let w = *self.shape.last().unwrap_or(&1);
        let mut data = self.data.clone();
        if w > 0 {
            for row in data.chunks_mut(w) {
                row.reverse();
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
