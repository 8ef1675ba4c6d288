//! Performance losses between a candidate and a target image, and the
//! distortion term to the carrier.
//!
//! Every loss is evaluated through [`TargetedObjective`], which caches the
//! target side (descriptors, tensors, histograms and normalizers) for each
//! backend and attack resolution, and returns analytic gradients with respect
//! to the full-resolution candidate pixels.

mod histogram;
mod spec;

use std::sync::Arc;

use rayon::prelude::*;

pub use histogram::{soft_histogram, HistogramSpec, DEFAULT_BIN_STEP, DEFAULT_SIGMA};
pub use spec::{
    rescale, LossSpecDocument, PerformanceLossKind, PerformanceLossSpec, ResolutionChoice, ResolutionPreset,
    ResolutionSet, PRESET_REFERENCE,
};

use crate::backend::FeatureBackend;
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pooling::{pool, pool_backward, PoolingKind};
use crate::resample::ResolutionView;
use crate::tensor::ActivationTensor;

/// Cached target-side quantities for one (backend, resolution) pair.
#[derive(Debug, Clone)]
enum TargetFeatures {
    /// One descriptor per pooling of the loss kind, in order.
    Descriptors(Vec<Descriptor>),
    Tensor { tensor: ActivationTensor, max: f64 },
    Histogram { hist: Vec<f64>, max: f64, shape: (usize, usize, usize) },
}

#[derive(Debug, Clone)]
struct Term {
    backend: Arc<FeatureBackend>,
    view: ResolutionView,
    target: TargetFeatures,
}

/// The performance loss towards one fixed target image.
#[derive(Debug, Clone)]
pub struct TargetedObjective {
    kind: PerformanceLossKind,
    width: usize,
    height: usize,
    terms: Vec<Term>,
    weight: f64,
}

impl TargetedObjective {
    /// Objective for `target`, with resolutions relative to its largest side.
    pub fn new(target: &Image, spec: &PerformanceLossSpec) -> Result<Self> {
        Self::with_reference(target, spec, target.max_dim())
    }

    /// Objective where `reference` pixels map to each attack resolution.
    pub fn with_reference(target: &Image, spec: &PerformanceLossSpec, reference: usize) -> Result<Self> {
        spec.validate()?;
        let (w, h) = (target.width(), target.height());
        let mut terms = Vec::with_capacity(spec.backends.len() * spec.resolutions.len());
        for backend in &spec.backends {
            for &s in spec.resolutions.resolutions() {
                let view = ResolutionView::new(w, h, s, reference, spec.resolutions.blur())?;
                let tensor = backend.forward(&view.apply(target)?)?;
                let target = target_features(&spec.kind, tensor)?;
                terms.push(Term {
                    backend: backend.clone(),
                    view,
                    target,
                });
            }
        }
        let weight = 1.0 / terms.len() as f64;
        Ok(Self {
            kind: spec.kind.clone(),
            width: w,
            height: h,
            terms,
            weight,
        })
    }

    pub fn kind(&self) -> &PerformanceLossKind {
        &self.kind
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Mean over resolutions, then over backends, of the base loss.
    pub fn value(&self, x: &Image) -> Result<f64> {
        Ok(self.evaluate(x, false)?.0)
    }

    /// Loss and its gradient with respect to the pixels of `x`.
    pub fn value_and_gradient(&self, x: &Image) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.evaluate(x, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn evaluate(&self, x: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        if x.width() != self.width || x.height() != self.height {
            return Err(Error::ShapeMismatch(format!(
                "objective built for {}x{}, got {}x{}",
                self.width,
                self.height,
                x.width(),
                x.height()
            )));
        }
        let parts: Vec<Result<(f64, Option<Vec<f64>>)>> =
            self.terms.par_iter().map(|t| self.term(t, x, want_grad)).collect();
        // fixed-order reduction
        let mut value = 0.0;
        let mut grad = want_grad.then(|| vec![0.0; x.len()]);
        for part in parts {
            let (v, g) = part?;
            value += self.weight * v;
            if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += self.weight * b);
            }
        }
        Ok((value, grad))
    }

    fn term(&self, term: &Term, x: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let xv = term.view.apply(x)?;
        if !want_grad {
            let t = term.backend.forward(&xv)?;
            return Ok((base_loss(&self.kind, &term.target, &t, false)?.0, None));
        }
        let (t, trace) = term.backend.forward_traced(&xv)?;
        let (v, gt) = base_loss(&self.kind, &term.target, &t, true)?;
        let g_view = term.backend.backward(&trace, &gt.expect("gradient requested"))?;
        Ok((v, Some(term.view.adjoint(&g_view))))
    }
}

fn target_features(kind: &PerformanceLossKind, tensor: ActivationTensor) -> Result<TargetFeatures> {
    Ok(match kind {
        PerformanceLossKind::Desc(_) | PerformanceLossKind::PoolEnsemble(_) => {
            TargetFeatures::Descriptors(kind.poolings().iter().map(|p| pool(&tensor, *p)).collect::<Result<_>>()?)
        }
        PerformanceLossKind::Tensor => {
            let max = positive_max(&tensor)?;
            TargetFeatures::Tensor { tensor, max }
        }
        PerformanceLossKind::Hist(spec) => {
            let max = positive_max(&tensor)?;
            TargetFeatures::Histogram {
                hist: soft_histogram(&tensor, spec, max)?,
                max,
                shape: (tensor.channels(), tensor.height(), tensor.width()),
            }
        }
    })
}

fn positive_max(t: &ActivationTensor) -> Result<f64> {
    let m = t.max();
    if m > 0.0 {
        Ok(m)
    } else {
        Err(Error::DegenerateTarget("target activation tensor is all zero".into()))
    }
}

fn base_loss(
    kind: &PerformanceLossKind,
    target: &TargetFeatures,
    x: &ActivationTensor,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    match (kind, target) {
        (PerformanceLossKind::Desc(_) | PerformanceLossKind::PoolEnsemble(_), TargetFeatures::Descriptors(ds)) => {
            let n = ds.len() as f64;
            let mut value = 0.0;
            let mut grad = want_grad.then(|| vec![0.0; x.len()]);
            for (p, dt) in kind.poolings().iter().zip(ds) {
                let h = pool(x, *p)?;
                value += (1.0 - h.dot(dt)).max(0.0) / n;
                if let Some(g) = grad.as_mut() {
                    let neg: Vec<f64> = dt.values().iter().map(|v| -v / n).collect();
                    let gp = pool_backward(x, *p, &neg)?;
                    g.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
                }
            }
            Ok((value, grad))
        }
        (PerformanceLossKind::Tensor, TargetFeatures::Tensor { tensor, max }) => {
            check_shape(x, (tensor.channels(), tensor.height(), tensor.width()))?;
            let scale = 1.0 / (max * max * x.len() as f64);
            let value = x
                .data()
                .iter()
                .zip(tensor.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                * scale;
            let grad = want_grad.then(|| {
                x.data()
                    .iter()
                    .zip(tensor.data())
                    .map(|(a, b)| 2.0 * (a - b) * scale)
                    .collect()
            });
            Ok((value, grad))
        }
        (PerformanceLossKind::Hist(spec), TargetFeatures::Histogram { hist, max, shape }) => {
            check_shape(x, *shape)?;
            histogram::histogram_loss(x, hist, spec, *max, want_grad)
        }
        _ => unreachable!("target features are built from the same loss kind"),
    }
}

fn check_shape(x: &ActivationTensor, shape: (usize, usize, usize)) -> Result<()> {
    if (x.channels(), x.height(), x.width()) != shape {
        return Err(Error::ShapeMismatch(format!(
            "tensor {}x{}x{} vs target {}x{}x{}",
            x.channels(),
            x.height(),
            x.width(),
            shape.0,
            shape.1,
            shape.2
        )));
    }
    Ok(())
}

/// `1 − cos` between the pooled descriptors of two tensors.
pub fn descriptor_loss(x: &ActivationTensor, target: &ActivationTensor, pooling: PoolingKind) -> Result<f64> {
    let kind = PerformanceLossKind::Desc(pooling);
    Ok(base_loss(&kind, &target_features(&kind, target.clone())?, x, false)?.0)
}

/// Mean squared difference of two tensors, both divided by the target's
/// maximum activation.
pub fn tensor_loss(x: &ActivationTensor, target: &ActivationTensor) -> Result<f64> {
    let kind = PerformanceLossKind::Tensor;
    Ok(base_loss(&kind, &target_features(&kind, target.clone())?, x, false)?.0)
}

/// Mean per-channel ℓ2 distance between soft histograms, both normalized by
/// the target's maximum activation.
pub fn histogram_loss(x: &ActivationTensor, target: &ActivationTensor, spec: &HistogramSpec) -> Result<f64> {
    let kind = PerformanceLossKind::Hist(spec.clone());
    Ok(base_loss(&kind, &target_features(&kind, target.clone())?, x, false)?.0)
}

fn single_resolution(
    x_t: &Image,
    kind: PerformanceLossKind,
    backend: &Arc<FeatureBackend>,
) -> Result<TargetedObjective> {
    let spec = PerformanceLossSpec::new(kind, ResolutionSet::single(x_t.max_dim())?, vec![backend.clone()])?;
    TargetedObjective::new(x_t, &spec)
}

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::ShapeMismatch(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `1 − h(x)ᵀ h(x_t)` at the images' own resolution.
pub fn loss_desc(x: &Image, x_t: &Image, backend: &Arc<FeatureBackend>, pooling: PoolingKind) -> Result<f64> {
    same_dims(x, x_t)?;
    single_resolution(x_t, PerformanceLossKind::Desc(pooling), backend)?.value(x)
}

pub fn loss_tensor(x: &Image, x_t: &Image, backend: &Arc<FeatureBackend>) -> Result<f64> {
    same_dims(x, x_t)?;
    single_resolution(x_t, PerformanceLossKind::Tensor, backend)?.value(x)
}

pub fn loss_hist(x: &Image, x_t: &Image, backend: &Arc<FeatureBackend>, spec: &HistogramSpec) -> Result<f64> {
    same_dims(x, x_t)?;
    single_resolution(x_t, PerformanceLossKind::Hist(spec.clone()), backend)?.value(x)
}

pub fn loss_pool_ensemble(
    x: &Image,
    x_t: &Image,
    backend: &Arc<FeatureBackend>,
    poolings: &[PoolingKind],
) -> Result<f64> {
    same_dims(x, x_t)?;
    single_resolution(x_t, PerformanceLossKind::PoolEnsemble(poolings.to_vec()), backend)?.value(x)
}

pub fn loss_multiresolution(x: &Image, x_t: &Image, spec: &PerformanceLossSpec) -> Result<f64> {
    same_dims(x, x_t)?;
    TargetedObjective::new(x_t, spec)?.value(x)
}

/// `‖x − x_c‖² / (3 W H)`.
pub fn distortion(x: &Image, x_c: &Image) -> Result<f64> {
    same_dims(x, x_c)?;
    Ok(x.data().iter().zip(x_c.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Gradient of [`distortion`] with respect to `x`.
pub fn distortion_gradient(x: &Image, x_c: &Image) -> Result<Vec<f64>> {
    same_dims(x, x_c)?;
    let scale = 2.0 / x.len() as f64;
    Ok(x.data().iter().zip(x_c.data()).map(|(a, b)| scale * (a - b)).collect())
}

/// Performance loss plus `lambda` times the distortion at original resolution.
pub fn total_loss(x: &Image, x_t: &Image, x_c: &Image, spec: &PerformanceLossSpec, lambda: f64) -> Result<f64> {
    Ok(loss_multiresolution(x, x_t, spec)? + lambda * distortion(x, x_c)?)
}

/// `h(x)ᵀ h(x_c) + λ · distortion(x, x_c)`, with its gradient.
pub fn loss_nontargeted_with_gradient(
    x: &Image,
    x_c: &Image,
    backend: &FeatureBackend,
    pooling: PoolingKind,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    same_dims(x, x_c)?;
    let hc = pool(&backend.forward(x_c)?, pooling)?;
    let (t, trace) = backend.forward_traced(x)?;
    let h = pool(&t, pooling)?;
    let gt = pool_backward(&t, pooling, hc.values())?;
    let mut grad = backend.backward(&trace, &gt)?;
    let dg = distortion_gradient(x, x_c)?;
    grad.iter_mut().zip(&dg).for_each(|(a, b)| *a += lambda * b);
    Ok((h.dot(&hc) + lambda * distortion(x, x_c)?, grad))
}

pub fn loss_nontargeted(
    x: &Image,
    x_c: &Image,
    backend: &FeatureBackend,
    pooling: PoolingKind,
    lambda: f64,
) -> Result<f64> {
    same_dims(x, x_c)?;
    let h = pool(&backend.forward(x)?, pooling)?;
    let hc = pool(&backend.forward(x_c)?, pooling)?;
    Ok(h.dot(&hc) + lambda * distortion(x, x_c)?)
}

#[cfg(test)]
mod tests;
