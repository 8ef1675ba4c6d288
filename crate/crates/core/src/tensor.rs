use crate::error::{Error, Result};

/// Output of a fully convolutional extractor: `channels x height x width`,
/// channel-major, every value nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ActivationTensor {
    /// Negative values are clamped to zero.
    pub fn new(channels: usize, height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "empty activation tensor {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} activations, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite activation".into()));
        }
        for v in &mut data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
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

    /// Number of spatial positions, `w * h`.
    pub fn spatial(&self) -> usize {
        self.height * self.width
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

    pub fn channel(&self, i: usize) -> &[f64] {
        let n = self.spatial();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.spatial() + y * self.width + x]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..self.clone()
        }
    }
}
