//! Loss specifications and their JSON document form.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::histogram::{HistogramSpec, DEFAULT_BIN_STEP, DEFAULT_SIGMA};
use crate::backend::FeatureBackend;
use crate::error::{Error, Result};
use crate::pooling::PoolingKind;
use crate::resample::check_resolution;

/// Side length the resolution presets are expressed in.
pub const PRESET_REFERENCE: usize = 1024;

/// Named attack-resolution presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResolutionPreset {
    /// The original resolution only.
    S0,
    /// S0 plus 300..=900 in steps of 100.
    S1,
    /// S1 plus 350..=950 in steps of 100.
    S2,
    /// S0 plus fourteen roughly geometric steps from 262 to 929.
    S3,
}

impl ResolutionPreset {
    pub fn resolutions(self) -> Vec<usize> {
        let mut v = vec![PRESET_REFERENCE];
        match self {
            ResolutionPreset::S0 => {}
            ResolutionPreset::S1 => v.extend((300..=900).step_by(100)),
            ResolutionPreset::S2 => {
                v.extend((300..=900).step_by(100));
                v.extend((350..=950).step_by(100));
            }
            ResolutionPreset::S3 => v.extend([262, 289, 319, 351, 387, 427, 470, 518, 571, 630, 694, 765, 843, 929]),
        }
        v
    }
}

impl fmt::Display for ResolutionPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResolutionPreset::S0 => "s0",
            ResolutionPreset::S1 => "s1",
            ResolutionPreset::S2 => "s2",
            ResolutionPreset::S3 => "s3",
        };
        f.write_str(s)
    }
}

impl FromStr for ResolutionPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s0" => Ok(ResolutionPreset::S0),
            "s1" => Ok(ResolutionPreset::S1),
            "s2" => Ok(ResolutionPreset::S2),
            "s3" => Ok(ResolutionPreset::S3),
            _ => Err(Error::Config(format!("unknown resolution preset '{s}'"))),
        }
    }
}

/// Attack resolutions (largest image side after resampling), optionally with
/// a Gaussian prefilter before downsampling. Stored sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ResolutionSetRepr", into = "ResolutionSetRepr")]
pub struct ResolutionSet {
    resolutions: Vec<usize>,
    blur: bool,
}

#[derive(Serialize, Deserialize)]
struct ResolutionSetRepr {
    resolutions: Vec<usize>,
    #[serde(default)]
    blur: bool,
}

impl TryFrom<ResolutionSetRepr> for ResolutionSet {
    type Error = Error;

    fn try_from(r: ResolutionSetRepr) -> Result<Self> {
        ResolutionSet::new(r.resolutions, r.blur)
    }
}

impl From<ResolutionSet> for ResolutionSetRepr {
    fn from(r: ResolutionSet) -> Self {
        Self {
            resolutions: r.resolutions,
            blur: r.blur,
        }
    }
}

impl ResolutionSet {
    pub fn new(resolutions: impl IntoIterator<Item = usize>, blur: bool) -> Result<Self> {
        let mut resolutions: Vec<usize> = resolutions.into_iter().collect();
        resolutions.sort_unstable();
        resolutions.dedup();
        if resolutions.is_empty() {
            return Err(Error::Config("resolution set is empty".into()));
        }
        for &s in &resolutions {
            check_resolution(s)?;
        }
        Ok(Self { resolutions, blur })
    }

    /// A single resolution without blur.
    pub fn single(s: usize) -> Result<Self> {
        Self::new([s], false)
    }

    /// Preset scaled so that its 1024 entry becomes `original`.
    pub fn preset(preset: ResolutionPreset, original: usize, blur: bool) -> Result<Self> {
        Self::new(
            preset.resolutions().into_iter().map(|s| rescale(s, original)),
            blur,
        )
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn blur(&self) -> bool {
        self.blur
    }

    pub fn len(&self) -> usize {
        self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolutions.is_empty()
    }
}

/// `s * original / 1024`, rounded.
pub fn rescale(s: usize, original: usize) -> usize {
    ((s * original) as f64 / PRESET_REFERENCE as f64).round() as usize
}

/// Which performance loss to minimize.
#[derive(Debug, Clone, PartialEq)]
pub enum PerformanceLossKind {
    /// `1 − cos` between pooled descriptors.
    Desc(PoolingKind),
    /// Mean squared difference of max-normalized activation tensors.
    Tensor,
    /// Mean per-channel distance between soft histograms.
    Hist(HistogramSpec),
    /// Mean descriptor loss over several poolings.
    PoolEnsemble(Vec<PoolingKind>),
}

impl PerformanceLossKind {
    pub fn name(&self) -> &'static str {
        match self {
            PerformanceLossKind::Desc(_) => "desc",
            PerformanceLossKind::Tensor => "tensor",
            PerformanceLossKind::Hist(_) => "hist",
            PerformanceLossKind::PoolEnsemble(_) => "pool_ensemble",
        }
    }

    /// Poolings entering a descriptor loss; empty for tensor and histogram losses.
    pub fn poolings(&self) -> &[PoolingKind] {
        match self {
            PerformanceLossKind::Desc(p) => std::slice::from_ref(p),
            PerformanceLossKind::PoolEnsemble(ps) => ps,
            _ => &[],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PerformanceLossKind::PoolEnsemble(ps) if ps.is_empty() => {
                Err(Error::Config("pooling ensemble is empty".into()))
            }
            PerformanceLossKind::Hist(spec) => spec.validate(),
            _ => Ok(()),
        }
    }

    /// Iteration budget per attack run before any restart.
    pub fn default_iterations(&self) -> usize {
        match self {
            PerformanceLossKind::Tensor => 1000,
            _ => 100,
        }
    }

    /// Performance loss at or below which an attack counts as converged.
    pub fn default_convergence_threshold(&self) -> f64 {
        match self {
            PerformanceLossKind::Desc(_) | PerformanceLossKind::PoolEnsemble(_) => 1e-3,
            PerformanceLossKind::Hist(_) | PerformanceLossKind::Tensor => 1e-2,
        }
    }
}

impl fmt::Display for PerformanceLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerformanceLossKind::Desc(p) => write!(f, "desc({p})"),
            PerformanceLossKind::PoolEnsemble(ps) => {
                let names: Vec<String> = ps.iter().map(|p| p.to_string()).collect();
                write!(f, "pool_ensemble({})", names.join(","))
            }
            k => f.write_str(k.name()),
        }
    }
}

/// A performance loss over a resolution set and a backend ensemble.
#[derive(Debug, Clone)]
pub struct PerformanceLossSpec {
    pub kind: PerformanceLossKind,
    pub resolutions: ResolutionSet,
    pub backends: Vec<Arc<FeatureBackend>>,
}

impl PerformanceLossSpec {
    pub fn new(
        kind: PerformanceLossKind,
        resolutions: ResolutionSet,
        backends: Vec<Arc<FeatureBackend>>,
    ) -> Result<Self> {
        let spec = Self {
            kind,
            resolutions,
            backends,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        if self.backends.is_empty() {
            return Err(Error::Config("loss needs at least one backend".into()));
        }
        Ok(())
    }

    /// Compact label, e.g. `hist@[256,..](blur)/A-random-w0.25-s1`.
    pub fn label(&self) -> String {
        let res: Vec<String> = self.resolutions.resolutions().iter().map(|s| s.to_string()).collect();
        let backends: Vec<&str> = self.backends.iter().map(|b| b.label()).collect();
        format!(
            "{}@[{}]{}/{}",
            self.kind,
            res.join(","),
            if self.resolutions.blur() { "(blur)" } else { "" },
            backends.join("+")
        )
    }
}

/// Either an explicit resolution list or a preset name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResolutionChoice {
    List(Vec<usize>),
    Preset(String),
}

fn default_kind() -> String {
    "desc".into()
}
fn default_resolutions() -> ResolutionChoice {
    ResolutionChoice::Preset("s0".into())
}
fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}
fn default_bin_step() -> f64 {
    DEFAULT_BIN_STEP
}
fn default_true() -> bool {
    true
}
fn default_backends() -> Vec<String> {
    vec!["A".into()]
}

/// Serialized loss configuration.
///
/// ```json
/// {
///   "kind": "hist",
///   "poolings": ["gem"],
///   "resolutions": "s2",
///   "original": 1024,
///   "blur": true,
///   "sigma": 0.1,
///   "bin_step": 0.05,
///   "normalize_counts": true,
///   "lambda": 0.0,
///   "backends": ["A"]
/// }
/// ```
///
/// `kind` is one of `desc`, `tensor`, `hist`, `pool_ensemble`. `desc` takes
/// exactly one pooling. `resolutions` is a list of sides or a preset name
/// (`s0`..`s3`) scaled so that 1024 maps to `original`. Backend names are
/// resolved by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpecDocument {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default)]
    pub poolings: Vec<PoolingKind>,
    #[serde(default = "default_resolutions")]
    pub resolutions: ResolutionChoice,
    #[serde(default = "default_original")]
    pub original: usize,
    #[serde(default)]
    pub blur: bool,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_bin_step")]
    pub bin_step: f64,
    #[serde(default = "default_true")]
    pub normalize_counts: bool,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_backends")]
    pub backends: Vec<String>,
}

fn default_original() -> usize {
    PRESET_REFERENCE
}

impl Default for LossSpecDocument {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            poolings: vec![PoolingKind::gem()],
            resolutions: default_resolutions(),
            original: PRESET_REFERENCE,
            blur: false,
            sigma: DEFAULT_SIGMA,
            bin_step: DEFAULT_BIN_STEP,
            normalize_counts: true,
            lambda: 0.0,
            backends: default_backends(),
        }
    }
}

impl LossSpecDocument {
    pub fn loss_kind(&self) -> Result<PerformanceLossKind> {
        let kind = match self.kind.trim().to_ascii_lowercase().as_str() {
            "desc" => match self.poolings.as_slice() {
                [p] => PerformanceLossKind::Desc(*p),
                [] => PerformanceLossKind::Desc(PoolingKind::gem()),
                _ => return Err(Error::Config("'desc' loss takes exactly one pooling".into())),
            },
            "tensor" | "tens" => PerformanceLossKind::Tensor,
            "hist" => {
                let mut spec = HistogramSpec::uniform(self.bin_step, self.sigma)?;
                spec.normalize_counts = self.normalize_counts;
                PerformanceLossKind::Hist(spec)
            }
            "pool_ensemble" | "ensemble" => PerformanceLossKind::PoolEnsemble(self.poolings.clone()),
            other => return Err(Error::Config(format!("unknown loss kind '{other}'"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn resolution_set(&self) -> Result<ResolutionSet> {
        match &self.resolutions {
            ResolutionChoice::List(v) => ResolutionSet::new(v.iter().copied(), self.blur),
            ResolutionChoice::Preset(name) => ResolutionSet::preset(name.parse()?, self.original, self.blur),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_kind()?;
        self.resolution_set()?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.backends.is_empty() {
            return Err(Error::Config("loss needs at least one backend".into()));
        }
        Ok(())
    }

    /// Build the spec, resolving each backend name with `resolve`.
    pub fn build<F>(&self, mut resolve: F) -> Result<PerformanceLossSpec>
    where
        F: FnMut(&str) -> Result<Arc<FeatureBackend>>,
    {
        self.validate()?;
        let backends = self.backends.iter().map(|n| resolve(n)).collect::<Result<Vec<_>>>()?;
        PerformanceLossSpec::new(self.loss_kind()?, self.resolution_set()?, backends)
    }
}
