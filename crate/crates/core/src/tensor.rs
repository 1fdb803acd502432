use std::fmt::Debug;

use ndarray::{Array2, Array3, ArrayView2, Ix2};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type used by the network and its tape.
///
/// Everything runs in `f32`; `f64` exists for gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + 'static
{
    fn from_f64c(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LatentShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Diffusion state: an `height x width x channels` array of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Array3<f32>,
}

impl LatentTensor {
    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            data: Array3::zeros((shape.height, shape.width, shape.channels)),
        }
    }

    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent contains non-finite values".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn from_vec(shape: LatentShape, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::shape(shape.len(), values.len()));
        }
        let data = Array3::from_shape_vec((shape.height, shape.width, shape.channels), values)
            .map_err(|e| Error::Numeric(e.to_string()))?;
        Self::from_array(data)
    }

    /// Rebuilds a latent from a `(height*width) x channels` token matrix.
    pub fn from_tokens(shape: LatentShape, tokens: &Array2<f32>) -> Result<Self> {
        if tokens.dim() != (shape.height * shape.width, shape.channels) {
            return Err(Error::shape(
                (shape.height * shape.width, shape.channels),
                tokens.dim(),
            ));
        }
        Self::from_vec(shape, tokens.iter().copied().collect())
    }

    pub fn shape(&self) -> LatentShape {
        let (h, w, c) = self.data.dim();
        LatentShape::new(h, w, c)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }

    /// Row-major token view: one row per spatial cell.
    pub fn tokens(&self) -> ArrayView2<'_, f32> {
        let s = self.shape();
        self.data
            .view()
            .into_shape_with_order((s.height * s.width, s.channels))
            .expect("standard layout")
            .into_dimensionality::<Ix2>()
            .expect("2-d")
    }

    pub fn tokens_as<F: Real>(&self) -> Array2<F> {
        self.tokens().mapv(|v| F::from_f64c(v as f64))
    }

    pub fn check_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mean_abs_diff(&self, other: &LatentTensor) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / n
    }

    /// Bit-level equality (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &LatentTensor) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
