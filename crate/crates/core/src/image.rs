//! RGB images with real-valued pixels in `[0, 1]`.
//!
//! Pixels are stored planar (channel-major): all red values row by row, then
//! green, then blue. This is the layout the convolution kernels consume.

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    id: String,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// Build an image from planar data, validating dimensions and range.
    pub fn from_planar(
        id: impl Into<String>,
        width: usize,
        height: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != CHANNELS * width * height {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a {width}x{height} image, got {}",
                CHANNELS * width * height,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            id: id.into(),
            width,
            height,
            data,
        })
    }

    /// Build an image from planar data, clipping every value into `[0, 1]`.
    /// Non-finite values are rejected.
    pub fn from_planar_clipped(
        id: impl Into<String>,
        width: usize,
        height: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pixel value".into()));
        }
        clip_unit(&mut data);
        Self::from_planar(id, width, height, data)
    }

    pub fn constant(id: impl Into<String>, width: usize, height: usize, value: f64) -> Result<Self> {
        Self::from_planar(id, width, height, vec![value; CHANNELS * width * height])
    }

    /// Build from interleaved 8-bit RGB.
    pub fn from_rgb8(id: impl Into<String>, width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        Self::from_interleaved(id, width, height, rgb, 255.0)
    }

    /// Build from interleaved 16-bit RGB.
    pub fn from_rgb16(id: impl Into<String>, width: usize, height: usize, rgb: &[u16]) -> Result<Self> {
        Self::from_interleaved(id, width, height, rgb, 65535.0)
    }

    fn from_interleaved<T: Copy + Into<f64>>(
        id: impl Into<String>,
        width: usize,
        height: usize,
        rgb: &[T],
        full_scale: f64,
    ) -> Result<Self> {
        if rgb.len() != CHANNELS * width * height {
            return Err(Error::ShapeMismatch(format!(
                "expected {} interleaved values, got {}",
                CHANNELS * width * height,
                rgb.len()
            )));
        }
        let plane = width * height;
        let mut data = vec![0.0; CHANNELS * plane];
        for (p, px) in rgb.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[c * plane + p] = px[c].into() / full_scale;
            }
        }
        Self::from_planar(id, width, height, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.to_interleaved(255.0)
            .into_iter()
            .map(|v| v as u8)
            .collect()
    }

    pub fn to_rgb16(&self) -> Vec<u16> {
        self.to_interleaved(65535.0)
            .into_iter()
            .map(|v| v as u16)
            .collect()
    }

    fn to_interleaved(&self, full_scale: f64) -> Vec<f64> {
        let plane = self.plane_len();
        let mut out = vec![0.0; CHANNELS * plane];
        for p in 0..plane {
            for c in 0..CHANNELS {
                out[p * CHANNELS + c] = (self.data[c * plane + p] * full_scale).round();
            }
        }
        out
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn max_dim(&self) -> usize {
        self.width.max(self.height)
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    /// Number of scalar values, `W * H * 3`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[channel * self.plane_len() + y * self.width + x]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copy of the rectangle `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::DegenerateCrop(format!(
                "crop {w}x{h}+{x0}+{y0} does not fit a {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(CHANNELS * w * h);
        for c in 0..CHANNELS {
            let base = c * self.plane_len();
            for y in y0..y0 + h {
                let row = base + y * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(Image {
            id: self.id.clone(),
            width: w,
            height: h,
            data,
        })
    }
}

pub(crate) fn clip_unit(values: &mut [f64]) {
    for v in values {
        *v = v.clamp(0.0, 1.0);
    }
}
