//! Bilinear resampling and the blur-then-resample view used for
//! multi-resolution losses.
//!
//! Sampling follows the half-pixel-centre convention without corner
//! alignment: output pixel `o` reads the input at `(o + 0.5) * in / out - 0.5`,
//! clamped to the valid range. No anti-aliasing is applied; that is the job of
//! [`blur_resample`].

use crate::blur::{gaussian_blur, GaussianBlur};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Smallest accepted resolution (largest image side after resampling).
pub const MIN_RESOLUTION: usize = 32;

/// Blur strength used before downsampling to `s`: `0.3 * max(W, H) / s`.
pub fn blur_sigma(reference_dim: usize, s: usize) -> f64 {
    0.3 * reference_dim as f64 / s as f64
}

/// Output dimensions when an image of `width x height` is rescaled so that
/// `reference` pixels become `s` pixels.
pub fn scaled_dims(width: usize, height: usize, s: usize, reference: usize) -> (usize, usize) {
    let factor = s as f64 / reference as f64;
    let w = ((width as f64 * factor).round() as usize).max(1);
    let h = ((height as f64 * factor).round() as usize).max(1);
    (w, h)
}

pub fn check_resolution(s: usize) -> Result<()> {
    if s < MIN_RESOLUTION {
        Err(Error::InvalidResolution(s))
    } else {
        Ok(())
    }
}

/// Resample so that the largest side equals `s`, preserving aspect ratio.
pub fn resample(image: &Image, s: usize) -> Result<Image> {
    check_resolution(s)?;
    let (w, h) = scaled_dims(image.width(), image.height(), s, image.max_dim());
    Ok(resize(image, w, h))
}

/// Gaussian blur with `sigma = 0.3 * max(W, H) / s`, then [`resample`] to `s`.
pub fn blur_resample(image: &Image, s: usize) -> Result<Image> {
    check_resolution(s)?;
    let blurred = gaussian_blur(image, blur_sigma(image.max_dim(), s))?;
    resample(&blurred, s)
}

/// Bilinear resize to exact dimensions.
pub fn resize(image: &Image, width: usize, height: usize) -> Image {
    let r = Resampler::new(image.width(), image.height(), width, height);
    let data = r.apply(image.data());
    Image::from_planar_clipped(image.id().to_string(), width, height, data)
        .expect("bilinear interpolation of valid pixels is valid")
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let w_hi = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, w_hi }
        })
        .collect()
}

/// Separable bilinear resize as an explicit linear operator, with its adjoint.
#[derive(Debug, Clone)]
pub struct Resampler {
    in_w: usize,
    in_h: usize,
    out_w: usize,
    out_h: usize,
    xs: Vec<Tap>,
    ys: Vec<Tap>,
}

impl Resampler {
    pub fn new(in_w: usize, in_h: usize, out_w: usize, out_h: usize) -> Self {
        Self {
            in_w,
            in_h,
            out_w,
            out_h,
            xs: taps(in_w, out_w),
            ys: taps(in_h, out_h),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.in_w == self.out_w && self.in_h == self.out_h
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.out_w, self.out_h)
    }

    /// Apply to planar 3-channel data.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return input.to_vec();
        }
        let (iw, ih, ow, oh) = (self.in_w, self.in_h, self.out_w, self.out_h);
        let mut rows = vec![0.0; ow * ih];
        let mut out = vec![0.0; CHANNELS * ow * oh];
        for c in 0..CHANNELS {
            let src = &input[c * iw * ih..(c + 1) * iw * ih];
            for y in 0..ih {
                let line = &src[y * iw..(y + 1) * iw];
                let dst = &mut rows[y * ow..(y + 1) * ow];
                for (d, t) in dst.iter_mut().zip(&self.xs) {
                    *d = line[t.lo] + t.w_hi * (line[t.hi] - line[t.lo]);
                }
            }
            let dst = &mut out[c * ow * oh..(c + 1) * ow * oh];
            for (oy, t) in self.ys.iter().enumerate() {
                let lo = &rows[t.lo * ow..(t.lo + 1) * ow];
                let hi = &rows[t.hi * ow..(t.hi + 1) * ow];
                for ((d, a), b) in dst[oy * ow..(oy + 1) * ow].iter_mut().zip(lo).zip(hi) {
                    *d = a + t.w_hi * (b - a);
                }
            }
        }
        out
    }

    /// Transpose of [`apply`](Self::apply): maps a gradient on the output to
    /// the gradient on the input.
    pub fn adjoint(&self, grad_out: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return grad_out.to_vec();
        }
        let (iw, ih, ow, oh) = (self.in_w, self.in_h, self.out_w, self.out_h);
        let mut rows = vec![0.0; ow * ih];
        let mut out = vec![0.0; CHANNELS * iw * ih];
        for c in 0..CHANNELS {
            rows.iter_mut().for_each(|v| *v = 0.0);
            let g = &grad_out[c * ow * oh..(c + 1) * ow * oh];
            for (oy, t) in self.ys.iter().enumerate() {
                let line = &g[oy * ow..(oy + 1) * ow];
                for (x, gv) in line.iter().enumerate() {
                    rows[t.lo * ow + x] += (1.0 - t.w_hi) * gv;
                    rows[t.hi * ow + x] += t.w_hi * gv;
                }
            }
            let dst = &mut out[c * iw * ih..(c + 1) * iw * ih];
            for y in 0..ih {
                let line = &rows[y * ow..(y + 1) * ow];
                let d = &mut dst[y * iw..(y + 1) * iw];
                for (gv, t) in line.iter().zip(&self.xs) {
                    d[t.lo] += (1.0 - t.w_hi) * gv;
                    d[t.hi] += t.w_hi * gv;
                }
            }
        }
        out
    }
}

/// The differentiable view of an image at one attack resolution: optional
/// Gaussian blur followed by bilinear resampling.
#[derive(Debug, Clone)]
pub struct ResolutionView {
    width: usize,
    height: usize,
    blur: Option<GaussianBlur>,
    resampler: Resampler,
}

impl ResolutionView {
    /// View of a `width x height` image at resolution `s`, where `reference`
    /// pixels of the image map to `s` pixels. `reference` is normally
    /// `max(width, height)`; cropped queries use the uncropped image's size.
    pub fn new(width: usize, height: usize, s: usize, reference: usize, blur: bool) -> Result<Self> {
        check_resolution(s)?;
        let (ow, oh) = scaled_dims(width, height, s, reference);
        let blur = if blur {
            Some(GaussianBlur::new(blur_sigma(reference, s))?)
        } else {
            None
        };
        Ok(Self {
            width,
            height,
            blur,
            resampler: Resampler::new(width, height, ow, oh),
        })
    }

    /// The identity view (original resolution, no blur).
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            blur: None,
            resampler: Resampler::new(width, height, width, height),
        }
    }

    pub fn output_dims(&self) -> (usize, usize) {
        self.resampler.output_dims()
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        if image.width() != self.width || image.height() != self.height {
            return Err(Error::ShapeMismatch(format!(
                "view built for {}x{}, got {}x{}",
                self.width,
                self.height,
                image.width(),
                image.height()
            )));
        }
        let data = match &self.blur {
            Some(b) => self.resampler.apply(&b.apply(image.data(), self.width, self.height)),
            None => self.resampler.apply(image.data()),
        };
        let (w, h) = self.output_dims();
        Image::from_planar_clipped(image.id().to_string(), w, h, data)
    }

    pub fn adjoint(&self, grad: &[f64]) -> Vec<f64> {
        let g = self.resampler.adjoint(grad);
        match &self.blur {
            Some(b) => b.adjoint(&g, self.width, self.height),
            None => g,
        }
    }
}
