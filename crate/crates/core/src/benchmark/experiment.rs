//! Attack every query of a dataset, rank the database with the original and
//! the adversarial descriptors under a test-model, and report mAP and
//! descriptor similarities.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ap::{average_precision, rank_database, ApConvention};
use super::dataset::{QueryRecord, QuerySubset, RetrievalDataset};
use crate::attack::{crop_to_aspect, run_attack, AttackConfig, AttackResult};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::distortion;
use crate::model::{Resolution, RetrievalModel};
use crate::persist::{load_image, read_descriptors, save_png16, write_descriptors, DescriptorMeta};
use crate::resample::check_resolution;

/// How each query is turned into the image submitted for retrieval.
#[derive(Debug, Clone)]
pub enum AttackPlan {
    /// Submit the target itself.
    Null,
    Optimize(AttackConfig),
    /// Target plus uniform noise in `[-amplitude, amplitude]`, clipped.
    RandomPerturbation { amplitude: f64, seed: u64 },
}

impl AttackPlan {
    /// Triplet-style label, e.g. `(desc(gem)@[256]/A-random-w0.25-s0, 0)`.
    pub fn label(&self) -> String {
        match self {
            AttackPlan::Null => "null".into(),
            AttackPlan::Optimize(c) => format!("({}, {})", c.loss.label(), c.lambda),
            AttackPlan::RandomPerturbation { amplitude, seed } => format!("random({amplitude}, seed {seed})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub attack: AttackPlan,
    pub test: RetrievalModel,
    pub subset: QuerySubset,
    /// Largest side every image is normalized to.
    pub original_dim: usize,
    pub carrier: Image,
    /// Where database descriptors are cached; `None` disables the cache.
    pub cache_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        check_resolution(self.original_dim).map_err(|_| {
            Error::Config(format!("original dimension {} below the minimum resolution", self.original_dim))
        })?;
        match &self.attack {
            AttackPlan::Optimize(c) => c.validate(),
            AttackPlan::RandomPerturbation { amplitude, .. } if !(*amplitude >= 0.0) => {
                Err(Error::Config(format!("perturbation amplitude must be nonnegative, got {amplitude}")))
            }
            _ => Ok(()),
        }
    }
}

/// The image submitted for one query.
#[derive(Debug, Clone)]
pub struct QueryAttack {
    pub query: String,
    pub adversarial: Image,
    /// Present for optimized attacks.
    pub result: Option<AttackResult>,
}

/// Database descriptors under one test-model.
#[derive(Debug, Clone)]
pub struct DatabaseIndex {
    pub ids: Vec<String>,
    pub descriptors: Vec<Descriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query: String,
    /// Empty when the query has no relevant images.
    pub ap_original: Option<f64>,
    pub ap_attacked: Option<f64>,
    pub sim_target: f64,
    pub sim_carrier: f64,
    pub distortion: f64,
}

/// Aggregate columns; mAP values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub experiment: String,
    pub dataset: String,
    pub attack: String,
    pub test_model: String,
    pub ap_convention: ApConvention,
    pub queries: usize,
    pub skipped: Vec<String>,
    pub original_map: f64,
    pub attacked_map: f64,
    pub delta_map: f64,
    pub mean_sim_target: f64,
    pub mean_sim_carrier: f64,
    pub mean_distortion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub rows: Vec<QueryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub query: String,
    pub sim_target: f64,
    pub sim_carrier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub rows: Vec<SimilarityRow>,
    pub mean_sim_target: f64,
    pub mean_sim_carrier: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Rounded through `f32` so that fresh and cached descriptors agree bitwise.
fn storage_precision(d: &Descriptor) -> Result<Descriptor> {
    Descriptor::from_unnormalized(d.values().iter().map(|v| *v as f32 as f64).collect())
}

fn cache_path(dir: &Path, dataset: &str, model: &RetrievalModel, original: usize) -> PathBuf {
    let key = format!("{dataset}|{}|{original}", model.label());
    let digest = hex::encode(&Sha256::digest(key.as_bytes())[..8]);
    let stem: String = dataset
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    dir.join(format!("{stem}-{digest}.desc"))
}

fn descriptor_meta(dataset: &str, model: &RetrievalModel, ids: Vec<String>, dim: usize) -> DescriptorMeta {
    DescriptorMeta {
        model: model.label(),
        backend: model.backend.label().to_string(),
        pooling: model.pooling.to_string(),
        resolution: model.resolution.to_string(),
        whitening: model.whitening.as_ref().map(|w| w.id.clone()),
        dim,
        ids,
        dataset: Some(dataset.to_string()),
        config_hash: None,
    }
}

/// Database descriptors of `ds` under `model`, read from or written to the
/// cache in `cache_dir` when given.
pub fn database_descriptors(
    ds: &RetrievalDataset,
    model: &RetrievalModel,
    original: usize,
    cache_dir: Option<&Path>,
) -> Result<DatabaseIndex> {
    let ids = ds.database_ids();
    let path = cache_dir.map(|d| cache_path(d, ds.name(), model, original));
    if let Some(p) = path.as_deref().filter(|p| p.is_file()) {
        let (meta, descriptors) = read_descriptors(p)?;
        if meta.ids == ids && meta.model == model.label() {
            return Ok(DatabaseIndex { ids, descriptors });
        }
    }
    let descriptors = (0..ids.len())
        .into_par_iter()
        .map(|i| storage_precision(&model.describe(&ds.database_image(i, original)?)?))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = &path {
        let dim = descriptors.first().map_or(0, Descriptor::dim);
        write_descriptors(p, &descriptor_meta(ds.name(), model, ids.clone(), dim), &descriptors)?;
    }
    Ok(DatabaseIndex { ids, descriptors })
}

fn perturb(target: &Image, amplitude: f64, seed: u64) -> Result<Image> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = target.data().iter().map(|v| v + amplitude * r.gen_range(-1.0..=1.0)).collect();
    Image::from_planar_clipped(format!("{}-adv", target.id()), target.width(), target.height(), data)
}

struct PreparedQuery<'a> {
    record: &'a QueryRecord,
    target: Image,
    carrier: Image,
}

fn prepare_queries<'a>(ds: &'a RetrievalDataset, spec: &ExperimentSpec) -> Result<Vec<PreparedQuery<'a>>> {
    ds.queries(spec.subset)
        .par_iter()
        .map(|record| {
            let target = ds.prepare_query(record, Resolution::Original, spec.original_dim)?;
            let carrier = crop_to_aspect(&spec.carrier, &target)?.with_id(format!("{}-carrier", record.id));
            Ok(PreparedQuery { record, target, carrier })
        })
        .collect()
}

/// Build the submitted image for every query of the subset, in query order.
pub fn attack_queries(ds: &RetrievalDataset, spec: &ExperimentSpec) -> Result<Vec<QueryAttack>> {
    spec.validate()?;
    let prepared = prepare_queries(ds, spec)?;
    prepared
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (adversarial, result) = match &spec.attack {
                AttackPlan::Null => (p.target.clone(), None),
                AttackPlan::RandomPerturbation { amplitude, seed } => {
                    (perturb(&p.target, *amplitude, seed.wrapping_add(i as u64))?, None)
                }
                AttackPlan::Optimize(config) => {
                    let mut config = config.clone();
                    config.reference_dim = Some(spec.original_dim);
                    let r = run_attack(&p.target, &p.carrier, &config, &spec.test)?;
                    (r.adversarial.clone(), Some(r))
                }
            };
            Ok(QueryAttack {
                query: p.record.id.clone(),
                adversarial,
                result,
            })
        })
        .collect()
}

/// Save every adversarial image as `dir/<query>.png` (16-bit).
pub fn save_attacks(dir: &Path, attacks: &[QueryAttack]) -> Result<()> {
    attacks
        .par_iter()
        .try_for_each(|a| save_png16(&a.adversarial, &dir.join(format!("{}.png", a.query))))
}

/// Reload images written by [`save_attacks`] for the experiment's queries.
pub fn load_attacks(ds: &RetrievalDataset, spec: &ExperimentSpec, dir: &Path) -> Result<Vec<QueryAttack>> {
    ds.queries(spec.subset)
        .iter()
        .map(|q| {
            let path = dir.join(format!("{}.png", q.id));
            if !path.is_file() {
                return Err(Error::Config(format!("missing adversarial image {}", path.display())));
            }
            Ok(QueryAttack {
                query: q.id.clone(),
                adversarial: load_image(&path)?.with_id(format!("{}-adv", q.id)),
                result: None,
            })
        })
        .collect()
}

struct Measured {
    target: Descriptor,
    adversarial: Descriptor,
    sim_target: f64,
    sim_carrier: f64,
    distortion: f64,
}

fn measure(
    spec: &ExperimentSpec,
    prepared: &[PreparedQuery<'_>],
    attacks: &[QueryAttack],
) -> Result<Vec<Measured>> {
    if attacks.len() != prepared.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} submitted images for {} queries",
            attacks.len(),
            prepared.len()
        )));
    }
    let d = spec.original_dim;
    prepared
        .par_iter()
        .zip(attacks)
        .map(|(p, a)| {
            if a.query != p.record.id {
                return Err(Error::ShapeMismatch(format!("image for '{}' where '{}' was expected", a.query, p.record.id)));
            }
            let target = spec.test.describe_scaled(&p.target, d)?;
            let adversarial = spec.test.describe_scaled(&a.adversarial, d)?;
            let carrier = spec.test.describe_scaled(&p.carrier, d)?;
            Ok(Measured {
                sim_target: adversarial.dot(&target),
                sim_carrier: adversarial.dot(&carrier),
                distortion: distortion(&a.adversarial, &p.carrier)?,
                target,
                adversarial,
            })
        })
        .collect()
}

/// Per-query and mean similarities of the submitted images to their targets
/// and carriers under the test-model.
pub fn similarity_report(ds: &RetrievalDataset, spec: &ExperimentSpec, attacks: &[QueryAttack]) -> Result<SimilarityReport> {
    let prepared = prepare_queries(ds, spec)?;
    let measured = measure(spec, &prepared, attacks)?;
    let rows: Vec<SimilarityRow> = prepared
        .iter()
        .zip(&measured)
        .map(|(p, m)| SimilarityRow {
            query: p.record.id.clone(),
            sim_target: m.sim_target,
            sim_carrier: m.sim_carrier,
        })
        .collect();
    Ok(SimilarityReport {
        mean_sim_target: mean(rows.iter().map(|r| r.sim_target)),
        mean_sim_carrier: mean(rows.iter().map(|r| r.sim_carrier)),
        rows,
    })
}

fn query_ap(
    ds: &RetrievalDataset,
    record: &QueryRecord,
    index: &DatabaseIndex,
    query: &Descriptor,
    convention: ApConvention,
) -> Option<f64> {
    let own = record.image.as_deref().filter(|_| ds.excludes_self());
    let ranking: Vec<&str> = rank_database(query, &index.ids, &index.descriptors)
        .into_iter()
        .map(|i| index.ids[i].as_str())
        .filter(|id| Some(*id) != own)
        .collect();
    let relevant: HashSet<&str> = record.relevant.iter().map(String::as_str).filter(|id| Some(*id) != own).collect();
    let junk: HashSet<&str> = record.junk.iter().map(String::as_str).collect();
    average_precision(&ranking, &relevant, &junk, convention)
}

/// Score previously built submissions.
pub fn evaluate_attacks(ds: &RetrievalDataset, spec: &ExperimentSpec, attacks: &[QueryAttack]) -> Result<EvalReport> {
    spec.validate()?;
    let prepared = prepare_queries(ds, spec)?;
    let measured = measure(spec, &prepared, attacks)?;
    let index = database_descriptors(ds, &spec.test, spec.original_dim, spec.cache_dir.as_deref())?;
    let convention = ds.ap_convention();
    let rows: Vec<QueryRow> = prepared
        .par_iter()
        .zip(&measured)
        .map(|(p, m)| QueryRow {
            query: p.record.id.clone(),
            ap_original: query_ap(ds, p.record, &index, &m.target, convention),
            ap_attacked: query_ap(ds, p.record, &index, &m.adversarial, convention),
            sim_target: m.sim_target,
            sim_carrier: m.sim_carrier,
            distortion: m.distortion,
        })
        .collect();
    let skipped: Vec<String> = rows.iter().filter(|r| r.ap_original.is_none()).map(|r| r.query.clone()).collect();
    let original_map = 100.0 * mean(rows.iter().filter_map(|r| r.ap_original));
    let attacked_map = 100.0 * mean(rows.iter().filter_map(|r| r.ap_attacked));
    let summary = EvalSummary {
        experiment: spec.name.clone(),
        dataset: ds.name().to_string(),
        attack: spec.attack.label(),
        test_model: spec.test.label(),
        ap_convention: convention,
        queries: rows.len(),
        skipped,
        original_map,
        attacked_map,
        delta_map: attacked_map - original_map,
        mean_sim_target: mean(rows.iter().map(|r| r.sim_target)),
        mean_sim_carrier: mean(rows.iter().map(|r| r.sim_carrier)),
        mean_distortion: mean(rows.iter().map(|r| r.distortion)),
    };
    Ok(EvalReport { summary, rows })
}

/// Attack every query, then score. Returns the submissions alongside the
/// report so callers can persist them.
pub fn run_experiment(ds: &RetrievalDataset, spec: &ExperimentSpec) -> Result<(EvalReport, Vec<QueryAttack>)> {
    spec.validate()?;
    let attacks = attack_queries(ds, spec)?;
    let report = evaluate_attacks(ds, spec, &attacks)?;
    Ok((report, attacks))
}
