//! Soft channel histograms with RBF assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ActivationTensor;

pub const DEFAULT_BIN_STEP: f64 = 0.05;
pub const DEFAULT_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bin_centers: Vec<f64>,
    pub sigma: f64,
    /// Divide soft counts by the number of spatial positions before
    /// comparing histograms in the loss.
    #[serde(default = "default_true")]
    pub normalize_counts: bool,
}

fn default_true() -> bool {
    true
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self::uniform(DEFAULT_BIN_STEP, DEFAULT_SIGMA).expect("default histogram spec is valid")
    }
}

impl HistogramSpec {
    /// Bin centres `0, step, 2 step, ...` up to 1 inclusive.
    pub fn uniform(step: f64, sigma: f64) -> Result<Self> {
        if !(step > 0.0) || step > 1.0 {
            return Err(Error::Config(format!("histogram bin step must be in (0, 1], got {step}")));
        }
        let count = (1.0 / step + 1e-9).floor() as usize + 1;
        let spec = Self {
            bin_centers: (0..count).map(|k| k as f64 * step).collect(),
            sigma,
            normalize_counts: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_centers.is_empty() {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        if self.bin_centers.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("histogram bin centres must be strictly increasing".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("histogram sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.bin_centers.len()
    }

    fn kernel(&self, x: f64, b: f64) -> f64 {
        let d = x - b;
        (-d * d / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Per-channel soft histograms, `channels x bins` row-major. Entry `(i, k)`
/// sums `exp(-(a / max - b_k)^2 / (2 sigma^2))` over the activations `a` of
/// channel `i`.
pub fn soft_histogram(tensor: &ActivationTensor, spec: &HistogramSpec, max: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::InvalidInput(format!("histogram normalizer must be positive, got {max}")));
    }
    let k = spec.bins();
    let mut out = vec![0.0; tensor.channels() * k];
    for i in 0..tensor.channels() {
        let row = &mut out[i * k..(i + 1) * k];
        for a in tensor.channel(i) {
            let x = a / max;
            for (h, b) in row.iter_mut().zip(&spec.bin_centers) {
                *h += spec.kernel(x, *b);
            }
        }
    }
    Ok(out)
}

/// Gradient with respect to the tensor given the gradient with respect to
/// the histogram matrix.
pub(crate) fn soft_histogram_backward(
    tensor: &ActivationTensor,
    spec: &HistogramSpec,
    max: f64,
    grad: &[f64],
) -> Vec<f64> {
    let k = spec.bins();
    let s = tensor.spatial();
    let inv_var = 1.0 / (spec.sigma * spec.sigma);
    let mut out = vec![0.0; tensor.len()];
    for i in 0..tensor.channels() {
        let g = &grad[i * k..(i + 1) * k];
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        for (o, a) in out[i * s..(i + 1) * s].iter_mut().zip(tensor.channel(i)) {
            let x = a / max;
            let mut acc = 0.0;
            for (gk, b) in g.iter().zip(&spec.bin_centers) {
                acc += gk * spec.kernel(x, *b) * (-(x - b) * inv_var);
            }
            *o = acc / max;
        }
    }
    out
}

/// `(1/d) Σ_i ‖u_i − v_i‖₂` between the histograms of two equally shaped
/// tensors, both normalized by `max`; also returns the gradient with respect
/// to the first tensor when asked.
pub(crate) fn histogram_loss(
    x: &ActivationTensor,
    target_hist: &[f64],
    spec: &HistogramSpec,
    max: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let k = spec.bins();
    let d = x.channels();
    let scale = if spec.normalize_counts { 1.0 / x.spatial() as f64 } else { 1.0 };
    let hx = soft_histogram(x, spec, max)?;
    if target_hist.len() != hx.len() {
        return Err(Error::ShapeMismatch(format!(
            "histogram sizes differ: {} vs {}",
            hx.len(),
            target_hist.len()
        )));
    }
    let mut value = 0.0;
    let mut grad_hist = want_grad.then(|| vec![0.0; hx.len()]);
    for i in 0..d {
        let diff: Vec<f64> = (0..k)
            .map(|b| (hx[i * k + b] - target_hist[i * k + b]) * scale)
            .collect();
        let n = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        value += n / d as f64;
        if let Some(g) = grad_hist.as_mut() {
            if n > 0.0 {
                for b in 0..k {
                    g[i * k + b] = diff[b] / n * scale / d as f64;
                }
            }
        }
    }
    let grad = grad_hist.map(|g| soft_histogram_backward(x, spec, max, &g));
    Ok((value, grad))
}
