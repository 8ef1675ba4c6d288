use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use conceal_core::attack::{crop_to_aspect, run_attack, AttackConfig, AttackResult, TraceMetrics};
use conceal_core::benchmark::{
    attack_queries, database_descriptors, evaluate_attacks, load_attacks, prepare_query, EvalSummary,
    ExperimentSpec, QueryAttack, QuerySubset, RetrievalDataset,
};
use conceal_core::image::Image;
use conceal_core::losses::distortion;
use conceal_core::model::{Resolution, RetrievalModel};
use conceal_core::persist::{load_image, read_descriptors, read_json, read_trace_csv, write_descriptors, PngDepth};
use conceal_core::synthetic;
use conceal_core::whitening::WhiteningTransform;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{config_error, AttackMode, Backends, RunConfig};
use crate::output::{Document, Output, Provenance, WhiteningDocument};
use crate::plot::{line_chart, trace_charts, Panel, Series, SweepReport};

fn provenance(command: &str, config: &RunConfig, inputs: &[(&str, Option<&Path>)]) -> Provenance {
    let inputs = inputs
        .iter()
        .filter_map(|(k, v)| v.map(|p| (k.to_string(), p.display().to_string())))
        .collect();
    provenance_from(command, config, inputs)
}

fn provenance_from(command: &str, config: &RunConfig, inputs: BTreeMap<String, String>) -> Provenance {
    Provenance {
        command: command.into(),
        inputs,
        config: config.clone(),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!(config_error(format!("{what} {} not found", path.display())));
    }
    Ok(())
}

fn normalized(image: &Image, original: usize) -> Result<Image> {
    Ok(prepare_query(image, None, Resolution::Original, original)?)
}

fn carrier(config: &RunConfig) -> Result<Image> {
    match &config.carrier {
        Some(p) => {
            require_file(p, "carrier")?;
            normalized(&load_image(p)?, config.original_dim)
        }
        None => Ok(synthetic::flower(config.original_dim, config.original_dim * 3 / 4)),
    }
}

fn similarity(model: &RetrievalModel, a: &Image, b: &Image, reference: usize) -> Result<f64> {
    Ok(model.describe_scaled(a, reference)?.dot(&model.describe_scaled(b, reference)?))
}

#[derive(Serialize)]
struct AttackSummary {
    converged: bool,
    restarts_used: usize,
    best_iteration: usize,
    iterations_run: usize,
    attack_loss: f64,
    total_loss: f64,
    metrics: TraceMetrics,
}

impl From<&AttackResult> for AttackSummary {
    fn from(r: &AttackResult) -> Self {
        Self {
            converged: r.converged,
            restarts_used: r.restarts_used,
            best_iteration: r.best_iteration,
            iterations_run: r.trace.len(),
            attack_loss: r.attack_loss,
            total_loss: r.total_loss,
            metrics: r.metrics,
        }
    }
}

/// Test-model similarity to the target of the in-memory result and of the
/// images as written.
#[derive(Serialize)]
struct Quantization {
    sim_target: f64,
    sim_target_png16: f64,
    sim_target_png8: Option<f64>,
}

#[derive(Serialize)]
struct AttackMetadata {
    attack: conceal_core::attack::AttackConfigEcho,
    test_model: String,
    result: AttackSummary,
    quantization: Quantization,
    files: BTreeMap<String, String>,
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn attack(config: &RunConfig, target_path: &Path, out_dir: &Path) -> Result<()> {
    let out = Output::new(
        out_dir,
        provenance("attack", config, &[("target", Some(target_path)), ("carrier", config.carrier.as_deref())]),
    )?;
    let mut backends = Backends::new(config)?;
    let attack_config = backends.attack_config(config)?;
    let test = backends.test_model(config)?;
    let d = config.original_dim;
    let target = normalized(&load_image(target_path)?, d)?;
    let carrier = crop_to_aspect(&carrier(config)?, &target)?;

    let started = Instant::now();
    let result = run_attack(&target, &carrier, &attack_config, &test)?;
    eprintln!(
        "attack finished in {:.1}s: {} iterations, sim_target {:.4}, distortion {:.5}",
        started.elapsed().as_secs_f64(),
        result.trace.len(),
        result.metrics.sim_target,
        result.metrics.distortion
    );

    let stem = target.id().to_string();
    let mut files = BTreeMap::new();
    let png16 = out.png(&format!("{stem}-adv.png"), &result.adversarial, PngDepth::Sixteen)?;
    files.insert("adversarial".into(), file_name(&png16));
    let sim_target_png16 = similarity(&test, &load_image(&png16)?, &target, d)?;
    let sim_target_png8 = if config.save_8bit {
        let p = out.png(&format!("{stem}-adv-8bit.png"), &result.adversarial, PngDepth::Eight)?;
        files.insert("adversarial_8bit".into(), file_name(&p));
        Some(similarity(&test, &load_image(&p)?, &target, d)?)
    } else {
        None
    };
    let trace = out.trace("trace.csv", &result.trace)?;
    files.insert("trace".into(), file_name(&trace));
    out.json(
        "metadata.json",
        AttackMetadata {
            attack: attack_config.echo(),
            test_model: test.label(),
            result: AttackSummary::from(&result),
            quantization: Quantization {
                sim_target: result.metrics.sim_target,
                sim_target_png16,
                sim_target_png8,
            },
            files,
        },
    )?;
    Ok(())
}

fn experiment(config: &RunConfig, ds: &RetrievalDataset, backends: &mut Backends, subset: QuerySubset) -> Result<ExperimentSpec> {
    Ok(ExperimentSpec {
        name: format!("{}-{:?}", ds.name(), config.attack_mode).to_lowercase(),
        attack: backends.attack_plan(config)?,
        test: backends.test_model(config)?,
        subset,
        original_dim: config.original_dim,
        carrier: carrier(config)?,
        cache_dir: config.cache_dir.clone(),
    })
}

fn load_dataset(path: &Path) -> Result<RetrievalDataset> {
    RetrievalDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn subset(config: &RunConfig, ds: &RetrievalDataset) -> QuerySubset {
    config.query_subset.unwrap_or_else(|| QuerySubset::standard(ds.name()))
}

#[derive(Serialize)]
struct SummaryBody<'a> {
    summary: &'a EvalSummary,
}

fn save_submissions(out: &Output, attacks: &[QueryAttack]) -> Result<()> {
    attacks.par_iter().try_for_each(|a| -> Result<()> {
        out.png(&format!("adversarial/{}.png", a.query), &a.adversarial, PngDepth::Sixteen)?;
        if let Some(r) = &a.result {
            out.trace(&format!("traces/{}.csv", a.query), &r.trace)?;
        }
        Ok(())
    })
}

pub fn evaluate(config: &RunConfig, dataset: &Path, adversarial_dir: Option<&Path>, out_dir: &Path) -> Result<()> {
    let out = Output::new(
        out_dir,
        provenance(
            "evaluate",
            config,
            &[("dataset", Some(dataset)), ("adversarial_dir", adversarial_dir), ("carrier", config.carrier.as_deref())],
        ),
    )?;
    let ds = load_dataset(dataset)?;
    let mut backends = Backends::new(config)?;
    let spec = experiment(config, &ds, &mut backends, subset(config, &ds))?;
    let attacks = match adversarial_dir {
        Some(dir) => load_attacks(&ds, &spec, dir)?,
        None => attack_queries(&ds, &spec)?,
    };
    let report = evaluate_attacks(&ds, &spec, &attacks)?;
    if adversarial_dir.is_none() && config.attack_mode != AttackMode::Null {
        save_submissions(&out, &attacks)?;
    }
    out.csv("queries.csv", &report.rows)?;
    out.json("report.json", SummaryBody { summary: &report.summary })?;
    let s = &report.summary;
    eprintln!(
        "{}: mAP {:.1} -> {:.1} (delta {:+.1}), sim_target {:.3}",
        s.dataset, s.original_map, s.attacked_map, s.delta_map, s.mean_sim_target
    );
    Ok(())
}

pub fn extract(config: &RunConfig, dataset: &Path, out_path: &Path) -> Result<()> {
    let dir = out_path.parent().unwrap_or(Path::new("."));
    let out = Output::new(dir, provenance("extract", config, &[("dataset", Some(dataset))]))?;
    let ds = load_dataset(dataset)?;
    let model = Backends::new(config)?.test_model(config)?;
    let index = database_descriptors(&ds, &model, config.original_dim, config.cache_dir.as_deref())?;
    let dim = index.descriptors.first().map_or(0, |d| d.dim());
    let meta = conceal_core::persist::DescriptorMeta {
        model: model.label(),
        backend: model.backend.label().to_string(),
        pooling: model.pooling.to_string(),
        resolution: model.resolution.to_string(),
        whitening: model.whitening.as_ref().map(|w| w.id.clone()),
        dim,
        ids: index.ids,
        dataset: Some(ds.name().to_string()),
        config_hash: Some(out.hash.clone()),
    };
    write_descriptors(out_path, &meta, &index.descriptors)?;
    Ok(())
}

pub fn whiten(config: &RunConfig, descriptors: &Path, out_path: &Path) -> Result<()> {
    require_file(descriptors, "descriptor file")?;
    let dir = out_path.parent().unwrap_or(Path::new("."));
    let out = Output::new(dir, provenance("whiten", config, &[("descriptors", Some(descriptors))]))?;
    let (meta, descs) = read_descriptors(descriptors)?;
    let stem = descriptors.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let transform = WhiteningTransform::learn(&descs, format!("pcaw-{stem}"))?;
    out.json(
        &file_name(out_path),
        WhiteningDocument {
            source: descriptors.display().to_string(),
            source_model: meta.model,
            descriptors: descs.len(),
            transform,
        },
    )?;
    Ok(())
}

#[derive(Deserialize, Serialize)]
struct SweepBody {
    sweep: SweepReport,
}

pub fn plot(config: &RunConfig, input: &Path, out_dir: &Path) -> Result<()> {
    require_file(input, "plot input")?;
    let out = Output::new(out_dir, provenance("plot", config, &[("input", Some(input))]))?;
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let charts: Vec<(String, String)> = match input.extension().and_then(|e| e.to_str()) {
        Some("csv") => trace_charts(&read_trace_csv(input)?)?
            .into_iter()
            .map(|(name, svg)| (name.to_string(), svg))
            .collect(),
        Some("json") => {
            let doc: Document<SweepBody> = read_json(input)?;
            let sweep = doc.body.sweep;
            if sweep.panels.is_empty() {
                bail!("sweep report {} has no panels", input.display());
            }
            sweep
                .panels
                .iter()
                .map(|p| Ok((p.name.clone(), line_chart(&p.y_label, &sweep.x_label, &p.y_label, &p.series)?)))
                .collect::<Result<_>>()?
        }
        _ => bail!(config_error(format!("cannot plot {}: expected a trace .csv or a sweep .json", input.display()))),
    };
    for (name, svg) in &charts {
        out.svg(&format!("{stem}-{name}.svg"), svg)?;
    }
    Ok(())
}

/// Targets for the sweeps: explicit files, or the queries of a dataset.
enum Targets {
    Files(Vec<Image>),
    Dataset(Box<RetrievalDataset>, QuerySubset),
}

fn targets(config: &RunConfig, files: &[PathBuf], dataset: Option<&Path>, limit: Option<usize>) -> Result<Targets> {
    match (files.is_empty(), dataset) {
        (false, None) => Ok(Targets::Files(
            files
                .iter()
                .map(|p| normalized(&load_image(p)?, config.original_dim))
                .collect::<Result<_>>()?,
        )),
        (true, Some(path)) => {
            let ds = load_dataset(path)?;
            let s = match limit {
                Some(n) => QuerySubset::First(n),
                None => subset(config, &ds),
            };
            Ok(Targets::Dataset(Box::new(ds), s))
        }
        _ => bail!(config_error("give either --target files or --dataset")),
    }
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    series: String,
    x: f64,
    target: String,
    sim_target: f64,
    sim_carrier: f64,
    distortion: f64,
}

/// Mean test-model numbers of one sweep point.
struct Point {
    rows: Vec<SweepRow>,
    map: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Attacks for every target under `attack`, each paired with its carrier.
fn build_attacks(
    targets: &Targets,
    config: &RunConfig,
    backends: &mut Backends,
    attack: &AttackConfig,
) -> Result<Vec<(Image, Image, Image)>> {
    let base = carrier(config)?;
    let test = backends.test_model(config)?;
    match targets {
        Targets::Files(images) => images
            .par_iter()
            .map(|t| {
                let c = crop_to_aspect(&base, t)?;
                let mut a = attack.clone();
                a.reference_dim = Some(config.original_dim);
                let r = run_attack(t, &c, &a, &test)?;
                Ok((t.clone(), c, r.adversarial))
            })
            .collect(),
        Targets::Dataset(ds, subset) => {
            let spec = ExperimentSpec {
                name: "sweep".into(),
                attack: conceal_core::benchmark::AttackPlan::Optimize(attack.clone()),
                test,
                subset: *subset,
                original_dim: config.original_dim,
                carrier: base.clone(),
                cache_dir: None,
            };
            let attacks = attack_queries(ds, &spec)?;
            ds.queries(*subset)
                .iter()
                .zip(attacks)
                .map(|(q, a)| {
                    let t = ds.prepare_query(q, Resolution::Original, config.original_dim)?;
                    let c = crop_to_aspect(&base, &t)?;
                    Ok((t, c, a.adversarial))
                })
                .collect()
        }
    }
}

fn measure_point(
    series: &str,
    x: f64,
    triples: &[(Image, Image, Image)],
    model: &RetrievalModel,
    config: &RunConfig,
    targets: &Targets,
) -> Result<Point> {
    let d = config.original_dim;
    let rows = triples
        .par_iter()
        .map(|(t, c, a)| {
            let ha = model.describe_scaled(a, d)?;
            Ok(SweepRow {
                series: series.to_string(),
                x,
                target: t.id().to_string(),
                sim_target: ha.dot(&model.describe_scaled(t, d)?),
                sim_carrier: ha.dot(&model.describe_scaled(c, d)?),
                distortion: distortion(a, c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let map = match targets {
        Targets::Files(_) => None,
        Targets::Dataset(ds, subset) => {
            let spec = ExperimentSpec {
                name: "sweep".into(),
                attack: conceal_core::benchmark::AttackPlan::Null,
                test: model.clone(),
                subset: *subset,
                original_dim: d,
                carrier: carrier(config)?,
                cache_dir: config.cache_dir.clone(),
            };
            let attacks: Vec<QueryAttack> = ds
                .queries(*subset)
                .iter()
                .zip(triples)
                .map(|(q, (_, _, a))| QueryAttack {
                    query: q.id.clone(),
                    adversarial: a.clone(),
                    result: None,
                })
                .collect();
            Some(evaluate_attacks(ds, &spec, &attacks)?.summary.attacked_map)
        }
    };
    Ok(Point { rows, map })
}

fn panels(points: &[(String, f64, Point)], with_distortion: bool) -> Vec<Panel> {
    let mut names: Vec<&str> = Vec::new();
    for (s, _, _) in points {
        if !names.contains(&s.as_str()) {
            names.push(s);
        }
    }
    let series = |f: &dyn Fn(&Point) -> Option<f64>| -> Vec<Series> {
        names
            .iter()
            .map(|n| Series {
                label: n.to_string(),
                points: points
                    .iter()
                    .filter(|(s, _, _)| s == n)
                    .filter_map(|(_, x, p)| f(p).map(|y| (*x, y)))
                    .collect(),
            })
            .collect()
    };
    let mut out = vec![Panel {
        name: "similarity".into(),
        y_label: "mean similarity to target".into(),
        series: series(&|p| Some(mean(p.rows.iter().map(|r| r.sim_target)))),
    }];
    if with_distortion {
        out.push(Panel {
            name: "distortion".into(),
            y_label: "mean distortion".into(),
            series: series(&|p| Some(mean(p.rows.iter().map(|r| r.distortion)))),
        });
    }
    if points.iter().any(|(_, _, p)| p.map.is_some()) {
        out.push(Panel {
            name: "map".into(),
            y_label: "mAP of attacked queries".into(),
            series: series(&|p| p.map),
        });
    }
    out
}

fn write_sweep(out: &Output, name: &str, x_label: &str, points: Vec<(String, f64, Point)>, with_distortion: bool) -> Result<()> {
    let sweep = SweepReport {
        kind: name.into(),
        x_label: x_label.into(),
        panels: panels(&points, with_distortion),
    };
    let rows: Vec<SweepRow> = points.into_iter().flat_map(|(_, _, p)| p.rows).collect();
    out.csv(&format!("{name}.csv"), &rows)?;
    out.json(&format!("{name}.json"), SweepBody { sweep })?;
    Ok(())
}

pub struct SweepInputs<'a> {
    pub targets: &'a [PathBuf],
    pub dataset: Option<&'a Path>,
    pub limit: Option<usize>,
    pub out_dir: &'a Path,
}

fn sweep_output(command: &str, config: &RunConfig, inputs: &SweepInputs<'_>) -> Result<Output> {
    let mut named: BTreeMap<String, String> = inputs
        .targets
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("target{i}"), p.display().to_string()))
        .collect();
    if let Some(d) = inputs.dataset {
        named.insert("dataset".into(), d.display().to_string());
    }
    if let Some(c) = &config.carrier {
        named.insert("carrier".into(), c.display().to_string());
    }
    if let Some(n) = inputs.limit {
        named.insert("limit".into(), n.to_string());
    }
    Output::new(inputs.out_dir, provenance_from(command, config, named))
}

pub fn sweep_lambda(config: &RunConfig, inputs: SweepInputs<'_>) -> Result<()> {
    let out = sweep_output("sweep-lambda", config, &inputs)?;
    let targets = targets(config, inputs.targets, inputs.dataset, inputs.limit)?;
    let mut backends = Backends::new(config)?;
    let test = backends.test_model(config)?;
    let base = backends.attack_config(config)?;
    let mut points = Vec::new();
    for &lambda in &config.lambdas {
        let attack = base.clone().with_lambda(lambda);
        let triples = build_attacks(&targets, config, &mut backends, &attack)?;
        let p = measure_point("attack", lambda, &triples, &test, config, &targets)?;
        eprintln!(
            "lambda {lambda}: sim_target {:.4}, distortion {:.5}",
            mean(p.rows.iter().map(|r| r.sim_target)),
            mean(p.rows.iter().map(|r| r.distortion))
        );
        points.push(("attack".to_string(), lambda, p));
    }
    write_sweep(&out, "sweep-lambda", "lambda", points, true)
}

pub fn sweep_resolution(config: &RunConfig, inputs: SweepInputs<'_>) -> Result<()> {
    let out = sweep_output("sweep-resolution", config, &inputs)?;
    let targets = targets(config, inputs.targets, inputs.dataset, inputs.limit)?;
    let mut backends = Backends::new(config)?;
    let test = backends.test_model(config)?;
    let mut points = Vec::new();
    for blur in [false, true] {
        let label = if blur { "blur" } else { "no blur" };
        let variant = RunConfig { blur, ..config.clone() };
        let attack = backends.attack_config(&variant)?;
        let triples = build_attacks(&targets, config, &mut backends, &attack)?;
        for s in config.sweep_resolutions() {
            let model = RetrievalModel {
                resolution: Resolution::fixed(s)?,
                ..test.clone()
            };
            let p = measure_point(label, s as f64, &triples, &model, config, &targets)?;
            points.push((label.to_string(), s as f64, p));
        }
    }
    write_sweep(&out, "sweep-resolution", "test resolution", points, false)
}
