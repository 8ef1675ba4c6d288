//! Separable Gaussian blur with reflect padding.

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Reflect an index into `[0, n)` without repeating the edge sample
/// (`... c b | a b c d | c b ...`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalized, sampled 1-D Gaussian truncated at `ceil(4 sigma)`.
#[derive(Debug, Clone)]
pub struct GaussianBlur {
    sigma: f64,
    kernel: Vec<f64>,
}

impl GaussianBlur {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!("blur sigma must be positive, got {sigma}")));
        }
        let radius = (4.0 * sigma).ceil().max(1.0) as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        Ok(Self { sigma, kernel })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.kernel.len() / 2
    }

    /// Kernel weights for offsets `-radius..=radius`.
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    fn pass(&self, src: &[f64], dst: &mut [f64], n: usize, stride: usize, count: usize, lane: usize, adjoint: bool) {
        // One 1-D convolution along an axis of length `n` with element stride
        // `stride`, repeated for `count` lanes spaced `lane` apart.
        let r = self.radius() as isize;
        for l in 0..count {
            let base = l * lane;
            for o in 0..n {
                for (t, k) in self.kernel.iter().enumerate() {
                    let i = reflect(o as isize + t as isize - r, n);
                    if adjoint {
                        dst[base + i * stride] += k * src[base + o * stride];
                    } else {
                        dst[base + o * stride] += k * src[base + i * stride];
                    }
                }
            }
        }
    }

    /// Blur planar 3-channel data of size `width x height`.
    pub fn apply(&self, data: &[f64], width: usize, height: usize) -> Vec<f64> {
        self.run(data, width, height, false)
    }

    /// Transpose of [`apply`](Self::apply). Reflect padding makes the
    /// operator non-symmetric near the borders.
    pub fn adjoint(&self, data: &[f64], width: usize, height: usize) -> Vec<f64> {
        self.run(data, width, height, true)
    }

    fn run(&self, data: &[f64], width: usize, height: usize, adjoint: bool) -> Vec<f64> {
        let plane = width * height;
        let mut tmp = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for c in 0..CHANNELS {
            let s = &data[c * plane..(c + 1) * plane];
            let t = &mut tmp[c * plane..(c + 1) * plane];
            // rows: along x, stride 1, one lane per row
            self.pass(s, t, width, 1, height, width, adjoint);
            let t = &tmp[c * plane..(c + 1) * plane];
            let o = &mut out[c * plane..(c + 1) * plane];
            // columns: along y, stride width, one lane per column
            self.pass(t, o, height, width, width, 1, adjoint);
        }
        out
    }
}

pub fn gaussian_blur(image: &Image, sigma_b: f64) -> Result<Image> {
    let blur = GaussianBlur::new(sigma_b)?;
    let data = blur.apply(image.data(), image.width(), image.height());
    Image::from_planar_clipped(image.id().to_string(), image.width(), image.height(), data)
}
