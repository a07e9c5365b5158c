//! Dense channel-major raster of reals.
//!
//! `LatentGrid` is the single array type used for images, latents, noise
//! draws and network activations. Values are stored row-major per channel:
//! index `(c, y, x)` lives at `c * height * width + y * width + x`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {channels}x{height}x{width}")]
    EmptyShape {
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("expected {expected} values for shape, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl LatentGrid {
    fn check_shape(channels: usize, height: usize, width: usize) -> Result<(), GridError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(GridError::EmptyShape {
                channels,
                height,
                width,
            });
        }
        Ok(())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "grid dimensions must be positive"
        );
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    /// Builds a grid from row-major values, rejecting empty shapes and
    /// non-finite entries.
    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, GridError> {
        Self::check_shape(channels, height, width)?;
        let expected = channels * height * width;
        if values.len() != expected {
            return Err(GridError::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    /// I.i.d. standard normal draws.
    pub fn standard_normal<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let mut grid = Self::zeros(channels, height, width);
        for v in &mut grid.values {
            *v = rng.sample(StandardNormal);
        }
        grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Pixels per channel.
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.values[i] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid) -> Result<(), GridError> {
        if self.shape() != other.shape() {
            return Err(GridError::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        LatentGrid {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Elementwise combination of two equally shaped grids.
    pub fn zip_map(
        &self,
        other: &LatentGrid,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<LatentGrid, GridError> {
        self.ensure_same_shape(other)?;
        Ok(LatentGrid {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    /// `a * self + b * other`
    pub fn axpby(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid, GridError> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, k: f64) -> LatentGrid {
        self.map(|v| k * v)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64, GridError> {
        self.ensure_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Stacks channels of `self` followed by channels of `other`.
    pub fn concat_channels(&self, other: &LatentGrid) -> Result<LatentGrid, GridError> {
        if self.height != other.height || self.width != other.width {
            return Err(GridError::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut values = Vec::with_capacity(self.len() + other.len());
        values.extend_from_slice(&self.values);
        values.extend_from_slice(&other.values);
        Ok(LatentGrid {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            values,
        })
    }

    /// Splits channels `[0, at)` and `[at, channels)`.
    pub fn split_channels(&self, at: usize) -> (LatentGrid, LatentGrid) {
        assert!(at > 0 && at < self.channels, "split point out of range");
        let n = at * self.plane_len();
        (
            LatentGrid {
                channels: at,
                height: self.height,
                width: self.width,
                values: self.values[..n].to_vec(),
            },
            LatentGrid {
                channels: self.channels - at,
                height: self.height,
                width: self.width,
                values: self.values[n..].to_vec(),
            },
        )
    }
}
