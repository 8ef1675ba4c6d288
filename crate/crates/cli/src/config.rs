//! Run configuration: built-in defaults, then a flat JSON file, then flag
//! overrides, resolved into one [`RunConfig`] before anything runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Result;
use conceal_core::attack::AttackConfig;
use conceal_core::backend::{Architecture, FeatureBackend};
use conceal_core::benchmark::{AttackPlan, QuerySubset};
use conceal_core::losses::{LossSpecDocument, PerformanceLossSpec, ResolutionChoice};
use conceal_core::model::{Resolution, RetrievalModel};
use conceal_core::pooling::PoolingKind;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// A problem with the configuration or the artifacts it names. Exits with 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Either a pooling list or a named set (`all`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoolingChoice {
    List(Vec<PoolingKind>),
    Preset(String),
}

impl PoolingChoice {
    pub fn resolve(&self) -> Result<Vec<PoolingKind>> {
        match self {
            PoolingChoice::List(v) => Ok(v.clone()),
            PoolingChoice::Preset(name) => match name.to_ascii_lowercase().as_str() {
                "all" => Ok(PoolingKind::all().to_vec()),
                single => Ok(vec![single.parse()?]),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Optimize,
    Null,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory with `alexnet.safetensors`, `resnet18.safetensors`,
    /// `vgg16.safetensors`. Without it backends get random weights.
    pub weights_dir: Option<PathBuf>,
    pub backend_width: f64,
    pub backend_seed: u64,
    /// Largest side every input is normalized to.
    pub original_dim: usize,

    pub loss: String,
    pub poolings: PoolingChoice,
    pub attack_resolutions: ResolutionChoice,
    pub blur: bool,
    pub sigma: f64,
    pub bin_step: f64,
    pub normalize_counts: bool,
    pub lambda: f64,
    pub attack_backends: Vec<String>,
    pub learning_rate: f64,
    /// Loss-kind default when absent.
    pub iterations: Option<usize>,
    pub max_restarts: usize,
    /// Loss-kind default when absent.
    pub convergence_threshold: Option<f64>,
    pub seed: u64,

    pub test_backend: String,
    pub test_pooling: PoolingKind,
    pub test_resolution: Resolution,
    /// Whitening file written by `conceal whiten`.
    pub whitening: Option<PathBuf>,

    /// Carrier image; the built-in synthetic flower when absent.
    pub carrier: Option<PathBuf>,
    pub attack_mode: AttackMode,
    pub perturbation_amplitude: f64,
    /// Dataset default when absent.
    pub query_subset: Option<QuerySubset>,
    pub cache_dir: Option<PathBuf>,
    pub save_8bit: bool,

    pub lambdas: Vec<f64>,
    /// Test resolutions of `sweep-resolution`; a grid over the original
    /// dimension when empty.
    pub test_resolutions: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossSpecDocument::default();
        Self {
            weights_dir: None,
            backend_width: 0.25,
            backend_seed: 0,
            original_dim: 1024,
            loss: loss.kind,
            poolings: PoolingChoice::List(loss.poolings),
            attack_resolutions: loss.resolutions,
            blur: loss.blur,
            sigma: loss.sigma,
            bin_step: loss.bin_step,
            normalize_counts: loss.normalize_counts,
            lambda: 0.0,
            attack_backends: vec!["A".into()],
            learning_rate: conceal_core::attack::DEFAULT_LEARNING_RATE,
            iterations: None,
            max_restarts: conceal_core::attack::DEFAULT_MAX_RESTARTS,
            convergence_threshold: None,
            seed: 0,
            test_backend: "A".into(),
            test_pooling: PoolingKind::gem(),
            test_resolution: Resolution::Original,
            whitening: None,
            carrier: None,
            attack_mode: AttackMode::Optimize,
            perturbation_amplitude: 0.03,
            query_subset: None,
            cache_dir: None,
            save_8bit: true,
            lambdas: vec![0.0, 0.1, 1.0, 10.0],
            test_resolutions: Vec::new(),
        }
    }
}

/// Merge `defaults <- file <- overrides` at the JSON level and deserialize.
pub fn resolve(file: Option<&Path>, overrides: Map<String, Value>) -> Result<RunConfig> {
    let mut merged = match serde_json::to_value(RunConfig::default())? {
        Value::Object(m) => m,
        _ => unreachable!("RunConfig serializes to an object"),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let Value::Object(m) = serde_json::from_str::<Value>(&text)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?
        else {
            return Err(config_error(format!("{}: config must be a JSON object", path.display())));
        };
        merged.extend(m);
    }
    merged.extend(overrides);
    let config: RunConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| config_error(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Parse a `--set key=value` pair; the value is JSON, or a bare string.
pub fn parse_set(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_error(format!("--set expects key=value, got '{s}'")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    pub fn loss_document(&self) -> Result<LossSpecDocument> {
        Ok(LossSpecDocument {
            kind: self.loss.clone(),
            poolings: self.poolings.resolve()?,
            resolutions: self.attack_resolutions.clone(),
            original: self.original_dim,
            blur: self.blur,
            sigma: self.sigma,
            bin_step: self.bin_step,
            normalize_counts: self.normalize_counts,
            lambda: self.lambda,
            backends: self.attack_backends.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_document()?.validate()?;
        if self.original_dim < conceal_core::resample::MIN_RESOLUTION {
            return Err(config_error(format!("original_dim {} is below the minimum resolution", self.original_dim)));
        }
        if !(self.perturbation_amplitude >= 0.0) {
            return Err(config_error("perturbation_amplitude must be nonnegative"));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(config_error("lambdas must be nonnegative"));
        }
        self.test_backend.parse::<Architecture>()?;
        for b in &self.attack_backends {
            b.parse::<Architecture>()?;
        }
        Ok(())
    }

    /// Resolutions swept by `sweep-resolution`.
    pub fn sweep_resolutions(&self) -> Vec<usize> {
        if !self.test_resolutions.is_empty() {
            return self.test_resolutions.clone();
        }
        let d = self.original_dim as f64;
        let mut v: Vec<usize> = (2..=10)
            .map(|i| (d * i as f64 / 10.0).round() as usize)
            .filter(|&s| s >= conceal_core::resample::MIN_RESOLUTION)
            .collect();
        v.dedup();
        v
    }
}

/// Backends by letter, built once and shared between attack and test models.
pub struct Backends {
    config: RunConfig,
    cache: BTreeMap<Architecture, Arc<FeatureBackend>>,
}

impl Backends {
    /// Checks the weights directory up front.
    pub fn new(config: &RunConfig) -> Result<Self> {
        if let Some(dir) = &config.weights_dir {
            if !dir.is_dir() {
                return Err(config_error(format!("weights directory {} not found", dir.display())));
            }
        }
        Ok(Self {
            config: config.clone(),
            cache: BTreeMap::new(),
        })
    }

    pub fn get(&mut self, name: &str) -> Result<Arc<FeatureBackend>> {
        let arch: Architecture = name.parse()?;
        if let Some(b) = self.cache.get(&arch) {
            return Ok(b.clone());
        }
        let backend = match &self.config.weights_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.safetensors", arch.weights_stem()));
                if !path.is_file() {
                    return Err(config_error(format!("missing weights {}", path.display())));
                }
                FeatureBackend::load(arch, &path)?
            }
            None => FeatureBackend::random(arch, self.config.backend_width, self.config.backend_seed)?,
        };
        let backend = Arc::new(backend);
        self.cache.insert(arch, backend.clone());
        Ok(backend)
    }

    pub fn loss(&mut self, config: &RunConfig) -> Result<PerformanceLossSpec> {
        Ok(config.loss_document()?.build(|name| self.get(name).map_err(into_core))?)
    }

    pub fn attack_config(&mut self, config: &RunConfig) -> Result<AttackConfig> {
        let mut a = AttackConfig::new(self.loss(config)?).with_lambda(config.lambda);
        a.learning_rate = config.learning_rate;
        a.max_restarts = config.max_restarts;
        a.seed = config.seed;
        if let Some(n) = config.iterations {
            a.iterations = n;
        }
        if let Some(t) = config.convergence_threshold {
            a.convergence_threshold = t;
        }
        a.validate()?;
        Ok(a)
    }

    pub fn test_model(&mut self, config: &RunConfig) -> Result<RetrievalModel> {
        let mut m = RetrievalModel::new(self.get(&config.test_backend)?, config.test_resolution, config.test_pooling);
        if let Some(path) = &config.whitening {
            if !path.is_file() {
                return Err(config_error(format!("whitening file {} not found", path.display())));
            }
            let doc: crate::output::WhiteningDocument = conceal_core::persist::read_json(path)?;
            doc.transform.validate()?;
            m = m.with_whitening(Arc::new(doc.transform));
        }
        Ok(m)
    }

    pub fn attack_plan(&mut self, config: &RunConfig) -> Result<AttackPlan> {
        Ok(match config.attack_mode {
            AttackMode::Optimize => AttackPlan::Optimize(self.attack_config(config)?),
            AttackMode::Null => AttackPlan::Null,
            AttackMode::Random => AttackPlan::RandomPerturbation {
                amplitude: config.perturbation_amplitude,
                seed: config.seed,
            },
        })
    }
}

fn into_core(e: anyhow::Error) -> conceal_core::Error {
    match e.downcast::<conceal_core::Error>() {
        Ok(c) => c,
        Err(e) => conceal_core::Error::Config(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_layers_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"lambda": 0.5, "loss": "hist", "poolings": "all"}"#).unwrap();
        let mut o = Map::new();
        o.insert("lambda".into(), Value::from(2.0));
        let c = resolve(Some(&p), o).unwrap();
        assert_eq!(c.lambda, 2.0);
        assert_eq!(c.loss, "hist");
        assert_eq!(c.poolings.resolve().unwrap().len(), 5);
    }

    #[test]
    fn unknown_keys_are_configuration_errors() {
        let mut o = Map::new();
        o.insert("lamda".into(), Value::from(1.0));
        let e = resolve(None, o).unwrap_err();
        assert!(e.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn set_values_parse_as_json_or_string() {
        assert_eq!(parse_set("lambda=0.1").unwrap(), ("lambda".into(), Value::from(0.1)));
        assert_eq!(parse_set("loss=hist").unwrap(), ("loss".into(), Value::from("hist")));
        assert_eq!(parse_set("attack_resolutions=[64,96]").unwrap().1, serde_json::json!([64, 96]));
        assert!(parse_set("novalue").is_err());
    }

    #[test]
    fn presets_resolve() {
        let mut o = Map::new();
        o.insert("attack_resolutions".into(), Value::from("s2"));
        o.insert("original_dim".into(), Value::from(256));
        o.insert("blur".into(), Value::from(true));
        let c = resolve(None, o).unwrap();
        let set = c.loss_document().unwrap().resolution_set().unwrap();
        assert!(set.blur());
        assert_eq!(*set.resolutions().last().unwrap(), 256);
    }

    #[test]
    fn missing_weights_dir_is_a_configuration_error() {
        let c = RunConfig {
            weights_dir: Some("/nonexistent/weights".into()),
            ..Default::default()
        };
        let e = Backends::new(&c).err().unwrap();
        assert!(e.downcast_ref::<ConfigError>().is_some());
    }
}
