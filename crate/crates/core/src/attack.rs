//! Adversarial optimization: Adam on the pixels, clipping to `[0, 1]` after
//! every step, restarts with a smaller learning rate and a larger budget, and
//! a per-iteration trace under a monitoring test-model.

use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::image::{clip_unit, Image};
use crate::losses::{distortion, distortion_gradient, PerformanceLossSpec, TargetedObjective};
use crate::model::RetrievalModel;
use crate::resample::resize;

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_MAX_RESTARTS: usize = 3;
/// Learning-rate divisor applied at each restart.
pub const RESTART_LR_DIVISOR: f64 = 5.0;
/// Iteration-budget multiplier applied at each restart.
pub const RESTART_BUDGET_FACTOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub loss: PerformanceLossSpec,
    pub lambda: f64,
    pub learning_rate: f64,
    /// Iteration budget of the first run; doubled at every restart.
    pub iterations: usize,
    pub max_restarts: usize,
    /// Performance loss at or below which the attack stops as converged.
    pub convergence_threshold: f64,
    /// Recorded with every run; the optimizer itself draws no random numbers.
    pub seed: u64,
    pub adam: AdamSettings,
    /// Side length that maps to each attack resolution. Defaults to the
    /// target's largest side; cropped queries pass the uncropped image's.
    pub reference_dim: Option<usize>,
}

impl AttackConfig {
    /// Defaults for the loss kind: budget, threshold, learning rate, restarts.
    pub fn new(loss: PerformanceLossSpec) -> Self {
        Self {
            iterations: loss.kind.default_iterations(),
            convergence_threshold: loss.kind.default_convergence_threshold(),
            loss,
            lambda: 0.0,
            learning_rate: DEFAULT_LEARNING_RATE,
            max_restarts: DEFAULT_MAX_RESTARTS,
            seed: 0,
            adam: AdamSettings::default(),
            reference_dim: None,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.convergence_threshold > 0.0) {
            return Err(Error::Config(format!(
                "convergence threshold must be positive, got {}",
                self.convergence_threshold
            )));
        }
        let AdamSettings { beta1, beta2, epsilon } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {:?}", self.adam)));
        }
        Ok(())
    }

    /// Learning rate of restart `k` (0 = first run).
    pub fn learning_rate_at(&self, restart: usize) -> f64 {
        self.learning_rate / RESTART_LR_DIVISOR.powi(restart as i32)
    }

    /// Iteration budget of restart `k` (0 = first run).
    pub fn iterations_at(&self, restart: usize) -> usize {
        self.iterations * RESTART_BUDGET_FACTOR.pow(restart as u32)
    }

    /// Serializable echo of everything except the backends' weights.
    pub fn echo(&self) -> AttackConfigEcho {
        AttackConfigEcho {
            loss: self.loss.label(),
            loss_kind: self.loss.kind.to_string(),
            resolutions: self.loss.resolutions.resolutions().to_vec(),
            blur: self.loss.resolutions.blur(),
            backends: self.loss.backends.iter().map(|b| b.label().to_string()).collect(),
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            iterations: self.iterations,
            max_restarts: self.max_restarts,
            convergence_threshold: self.convergence_threshold,
            seed: self.seed,
            adam: self.adam,
            reference_dim: self.reference_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfigEcho {
    pub loss: String,
    pub loss_kind: String,
    pub resolutions: Vec<usize>,
    pub blur: bool,
    pub backends: Vec<String>,
    pub lambda: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub max_restarts: usize,
    pub convergence_threshold: f64,
    pub seed: u64,
    pub adam: AdamSettings,
    pub reference_dim: Option<usize>,
}

/// Quantities monitored under the test-model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub distortion: f64,
    /// `1 − sim_target` under the monitor.
    pub perf_loss: f64,
    pub sim_target: f64,
    pub sim_carrier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Index over all runs, starting at 0.
    pub iteration: usize,
    pub restart: usize,
    #[serde(flatten)]
    pub metrics: TraceMetrics,
    /// Performance loss under the attack specification.
    pub attack_loss: f64,
    /// `attack_loss + λ · distortion`.
    pub total_loss: f64,
}

/// One run between restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSegment {
    pub restart: usize,
    pub learning_rate: f64,
    pub budget: usize,
    pub performed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub adam: AdamSettings,
    pub segments: Vec<TraceSegment>,
    pub records: Vec<TraceRecord>,
}

impl AttackTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Image,
    pub trace: AttackTrace,
    pub converged: bool,
    pub restarts_used: usize,
    /// Trace index of the returned image.
    pub best_iteration: usize,
    /// Monitor metrics of the returned image.
    pub metrics: TraceMetrics,
    /// Attack performance loss of the returned image.
    pub attack_loss: f64,
    pub total_loss: f64,
}

/// Central crop of `carrier` with the aspect ratio of `target`, resized to
/// the target's dimensions.
pub fn crop_to_aspect(carrier: &Image, target: &Image) -> Result<Image> {
    let (cw, ch) = (carrier.width() as f64, carrier.height() as f64);
    let target_aspect = target.width() as f64 / target.height() as f64;
    let (w, h) = if cw / ch > target_aspect {
        ((ch * target_aspect).round() as usize, carrier.height())
    } else {
        (carrier.width(), (cw / target_aspect).round() as usize)
    };
    if w == 0 || h == 0 {
        return Err(Error::DegenerateCrop(format!(
            "{}x{} carrier has no {}x{}-aspect region",
            carrier.width(),
            carrier.height(),
            target.width(),
            target.height()
        )));
    }
    let cropped = carrier.crop((carrier.width() - w) / 2, (carrier.height() - h) / 2, w, h)?;
    if (w, h) == (target.width(), target.height()) {
        return Ok(cropped);
    }
    Ok(resize(&cropped, target.width(), target.height()))
}

/// Monitor-side descriptors of the target and carrier.
struct Monitor<'a> {
    model: &'a RetrievalModel,
    reference: usize,
    target: Descriptor,
    carrier: Descriptor,
}

impl<'a> Monitor<'a> {
    fn new(model: &'a RetrievalModel, target: &Image, carrier: &Image, reference: usize) -> Result<Self> {
        Ok(Self {
            model,
            reference,
            target: model.describe_scaled(target, reference)?,
            carrier: model.describe_scaled(carrier, reference)?,
        })
    }

    fn metrics(&self, x: &Image, carrier: &Image) -> Result<TraceMetrics> {
        let h = self.model.describe_scaled(x, self.reference)?;
        let sim_target = h.dot(&self.target);
        Ok(TraceMetrics {
            distortion: distortion(x, carrier)?,
            perf_loss: 1.0 - sim_target,
            sim_target,
            sim_carrier: h.dot(&self.carrier),
        })
    }
}

/// The four monitored quantities of `x` under `monitor`.
pub fn trace_metrics(x: &Image, target: &Image, carrier: &Image, monitor: &RetrievalModel) -> Result<TraceMetrics> {
    Monitor::new(monitor, target, carrier, target.max_dim())?.metrics(x, carrier)
}

struct Adam {
    settings: AdamSettings,
    lr: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(settings: AdamSettings, lr: f64, n: usize) -> Self {
        Self {
            settings,
            lr,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64]) {
        let AdamSettings { beta1, beta2, epsilon } = self.settings;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            x[i] -= self.lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// Optimize an image that looks like `carrier` and matches `target` under
/// the attack loss. The returned image is the one with the lowest total loss
/// seen over all runs.
pub fn run_attack(
    target: &Image,
    carrier: &Image,
    config: &AttackConfig,
    monitor: &RetrievalModel,
) -> Result<AttackResult> {
    config.validate()?;
    if !target.same_dims(carrier) {
        return Err(Error::ShapeMismatch(format!(
            "target is {}x{} but carrier is {}x{}; crop the carrier to the target's aspect first",
            target.width(),
            target.height(),
            carrier.width(),
            carrier.height()
        )));
    }
    let (w, h) = (carrier.width(), carrier.height());
    let reference = config.reference_dim.unwrap_or_else(|| target.max_dim());
    let objective = TargetedObjective::with_reference(target, &config.loss, reference)?;
    let monitor = Monitor::new(monitor, target, carrier, reference)?;
    let adv_id = format!("{}-adv", target.id());

    let mut records = Vec::new();
    let mut segments = Vec::new();
    let mut best: Option<(f64, f64, usize, Image)> = None;
    let mut converged = false;

    for restart in 0..=config.max_restarts {
        let lr = config.learning_rate_at(restart);
        let budget = config.iterations_at(restart);
        let mut x = carrier.data().to_vec();
        let mut adam = Adam::new(config.adam, lr, x.len());
        let mut performed = 0;
        for step in 0..budget {
            let img = Image::from_planar(adv_id.clone(), w, h, x.clone())?;
            let (perf, mut grad) = objective.value_and_gradient(&img)?;
            let dist_grad = distortion_gradient(&img, carrier)?;
            grad.iter_mut().zip(&dist_grad).for_each(|(g, d)| *g += config.lambda * d);
            let bad = grad.iter().filter(|g| !g.is_finite()).count();
            if bad > 0 || !perf.is_finite() {
                return Err(Error::NonFiniteGradient {
                    restart,
                    iteration: step,
                    loss: perf,
                    bad,
                });
            }
            let metrics = monitor.metrics(&img, carrier)?;
            let total = perf + config.lambda * metrics.distortion;
            let index = records.len();
            records.push(TraceRecord {
                iteration: index,
                restart,
                metrics,
                attack_loss: perf,
                total_loss: total,
            });
            performed += 1;
            if best.as_ref().is_none_or(|b| total < b.0) {
                best = Some((total, perf, index, img));
            }
            if perf <= config.convergence_threshold {
                converged = true;
                break;
            }
            adam.step(&mut x, &grad);
            clip_unit(&mut x);
        }
        segments.push(TraceSegment {
            restart,
            learning_rate: lr,
            budget,
            performed,
        });
        if converged {
            break;
        }
    }

    let (total_loss, attack_loss, best_iteration, adversarial) = best.expect("at least one iteration runs");
    Ok(AttackResult {
        metrics: records[best_iteration].metrics,
        adversarial,
        restarts_used: segments.len() - 1,
        trace: AttackTrace {
            adam: config.adam,
            segments,
            records,
        },
        converged,
        best_iteration,
        attack_loss,
        total_loss,
    })
}
