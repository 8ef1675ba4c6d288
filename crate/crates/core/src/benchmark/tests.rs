use std::path::Path;
use std::sync::Arc;

use super::*;
use crate::backend::{Architecture, FeatureBackend};
use crate::descriptor::Descriptor;
use crate::model::{Resolution, RetrievalModel};
use crate::persist::load_image;
use crate::pooling::PoolingKind;
use crate::resample::resample;
use crate::synthetic;

const D: usize = 64;

fn model(pooling: PoolingKind) -> RetrievalModel {
    let b = Arc::new(FeatureBackend::random(Architecture::AlexNet, 0.125, 11).unwrap());
    RetrievalModel::new(b, Resolution::Original, pooling)
}

fn dataset(dir: &Path, separate: bool) -> RetrievalDataset {
    let spec = SyntheticDatasetSpec {
        groups: 4,
        views: 3,
        size: D,
        separate_queries: separate,
        seed: 5,
        ..Default::default()
    };
    RetrievalDataset::load(&write_synthetic_dataset(dir, &spec).unwrap()).unwrap()
}

fn experiment(attack: AttackPlan) -> ExperimentSpec {
    ExperimentSpec {
        name: "test".into(),
        attack,
        test: model(PoolingKind::gem()),
        subset: QuerySubset::All,
        original_dim: D,
        carrier: synthetic::flower(96, 80),
        cache_dir: None,
    }
}

/// Precision at every relevant position, written out longhand.
fn oracle_ap(scores: &[(String, f64)], relevant: &[String]) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut hits = 0;
    let mut total = 0.0;
    for (k, (id, _)) in sorted.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    total / relevant.len() as f64
}

fn f32_rounded(d: Descriptor) -> Descriptor {
    Descriptor::from_unnormalized(d.values().iter().map(|v| *v as f32 as f64).collect()).unwrap()
}

#[test]
fn null_attack_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), true);
    let (report, _) = run_experiment(&ds, &experiment(AttackPlan::Null)).unwrap();
    assert_eq!(report.summary.delta_map, 0.0);
    assert_eq!(report.summary.original_map, report.summary.attacked_map);
    assert!((report.summary.mean_sim_target - 1.0).abs() < 1e-6);
    for r in &report.rows {
        assert!((r.sim_target - 1.0).abs() < 1e-6);
        assert_eq!(r.ap_original, r.ap_attacked);
    }
}

#[test]
fn unattacked_map_matches_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), true);
    let spec = experiment(AttackPlan::Null);
    let report = run_experiment(&ds, &spec).unwrap().0;

    let root = dir.path().join("images");
    let db: Vec<(String, Descriptor)> = ds
        .truth
        .database
        .iter()
        .map(|e| {
            let img = resample(&load_image(&root.join(&e.file)).unwrap(), D).unwrap();
            (e.id.clone(), f32_rounded(spec.test.describe(&img).unwrap()))
        })
        .collect();
    let mut aps = Vec::new();
    for q in &ds.truth.queries {
        let img = load_image(&root.join(q.file.as_ref().unwrap())).unwrap();
        let qd = spec.test.describe(&resample(&img, D).unwrap()).unwrap();
        let scores: Vec<(String, f64)> = db.iter().map(|(id, d)| (id.clone(), d.dot(&qd))).collect();
        aps.push(oracle_ap(&scores, &q.relevant));
    }
    let map = 100.0 * aps.iter().sum::<f64>() / aps.len() as f64;
    assert_eq!(report.summary.original_map, map);
    for (row, ap) in report.rows.iter().zip(&aps) {
        assert_eq!(row.ap_original, Some(*ap));
    }
}

#[test]
fn query_is_excluded_from_its_own_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), false);
    assert!(ds.excludes_self());
    let report = run_experiment(&ds, &experiment(AttackPlan::Null)).unwrap().0;
    // with itself excluded the query cannot earn a free hit at rank 1
    assert_eq!(report.rows.len(), 4);
    for r in &report.rows {
        let ap = r.ap_original.unwrap();
        assert!((0.0..=1.0).contains(&ap));
    }
}

#[test]
fn random_perturbation_similarity_matches_saved_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), true);
    let spec = experiment(AttackPlan::RandomPerturbation { amplitude: 0.05, seed: 3 });
    let attacks = attack_queries(&ds, &spec).unwrap();
    let out = dir.path().join("adv");
    save_attacks(&out, &attacks).unwrap();
    let reloaded = load_attacks(&ds, &spec, &out).unwrap();
    let report = similarity_report(&ds, &spec, &reloaded).unwrap();

    for (row, q) in report.rows.iter().zip(&ds.truth.queries) {
        let target = ds.prepare_query(q, Resolution::Original, D).unwrap();
        let adv = load_image(&out.join(format!("{}.png", q.id))).unwrap();
        let direct = spec.test.describe(&adv).unwrap().dot(&spec.test.describe(&target).unwrap());
        assert_eq!(row.sim_target, direct);
        assert!(row.sim_target < 1.0);
    }
}

#[test]
fn persisted_attacks_reproduce_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), true);
    let mut spec = experiment(AttackPlan::RandomPerturbation { amplitude: 0.2, seed: 9 });
    spec.cache_dir = Some(dir.path().join("cache"));
    let out = dir.path().join("adv");
    save_attacks(&out, &attack_queries(&ds, &spec).unwrap()).unwrap();
    let a = evaluate_attacks(&ds, &spec, &load_attacks(&ds, &spec, &out).unwrap()).unwrap();
    let b = evaluate_attacks(&ds, &spec, &load_attacks(&ds, &spec, &out).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn descriptor_cache_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), true);
    let m = model(PoolingKind::Spoc);
    let cache = dir.path().join("cache");
    let fresh = database_descriptors(&ds, &m, D, Some(&cache)).unwrap();
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 2);
    let cached = database_descriptors(&ds, &m, D, Some(&cache)).unwrap();
    let uncached = database_descriptors(&ds, &m, D, None).unwrap();
    assert_eq!(fresh.descriptors, cached.descriptors);
    assert_eq!(fresh.descriptors, uncached.descriptors);
    // another pooling gets its own entry
    database_descriptors(&ds, &model(PoolingKind::Mac), D, Some(&cache)).unwrap();
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 4);
}

#[test]
fn scaling_database_keeps_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), true);
    let m = model(PoolingKind::gem());
    let index = database_descriptors(&ds, &m, D, None).unwrap();
    let q = &index.descriptors[0];
    let base = rank_database(q, &index.ids, &index.descriptors);
    // scores under a positive rescale, ranked by the same rule
    let scores: Vec<f64> = index.descriptors.iter().map(|d| 7.5 * d.dot(q)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(index.ids[a].cmp(&index.ids[b])));
    assert_eq!(base, order);
}

#[test]
fn missing_dataset_is_a_configuration_error() {
    let err = RetrievalDataset::load(Path::new("/nonexistent/gt.json")).unwrap_err();
    assert!(err.is_configuration(), "{err}");

    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), true);
    std::fs::remove_file(dir.path().join("images/g001v2.png")).unwrap();
    let err = RetrievalDataset::load(&dir.path().join("gt.json")).unwrap_err();
    assert!(err.is_configuration(), "{err}");
}

#[test]
fn bad_ground_truth_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), true);
    let images = dir.path().join("images");

    let mut t = ds.truth.clone();
    t.queries[0].relevant.push("nope".into());
    assert!(RetrievalDataset::new(t, images.clone()).unwrap_err().is_configuration());

    let mut t = ds.truth.clone();
    t.queries[0].bbox = Some([0, 0, D + 1, 10]);
    assert!(RetrievalDataset::new(t, images.clone()).unwrap_err().is_configuration());

    let mut t = ds.truth.clone();
    t.queries[1].image = Some("g000v0".into());
    assert!(RetrievalDataset::new(t, images).unwrap_err().is_configuration());
}

#[test]
fn empty_relevant_set_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), true);
    let mut t = ds.truth.clone();
    t.queries[2].relevant.clear();
    let ds = RetrievalDataset::new(t, dir.path().join("images")).unwrap();
    let report = run_experiment(&ds, &experiment(AttackPlan::Null)).unwrap().0;
    assert_eq!(report.summary.skipped, vec!["q002".to_string()]);
    assert_eq!(report.rows[2].ap_original, None);
    assert!(report.summary.original_map.is_finite());
}

#[test]
fn subset_limits_queries() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), true);
    let mut spec = experiment(AttackPlan::Null);
    spec.subset = QuerySubset::First(2);
    let report = run_experiment(&ds, &spec).unwrap().0;
    assert_eq!(report.rows.len(), 2);
}
