//! `conceal`: build adversarial queries that hide a target image from a
//! CNN retrieval system, and evaluate how well they still retrieve.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use config::{parse_set, resolve, ConfigError};

#[derive(Parser)]
#[command(name = "conceal", version, about = "Concealed-query adversarial images for CNN image retrieval")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of `--config`, in this order, then `--set`.
#[derive(Args)]
struct GlobalArgs {
    /// Flat JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key; the value is parsed as JSON when possible,
    /// so quote strings that read as JSON literals (`attack_mode='"null"'`).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory holding `<arch>.safetensors` weights.
    #[arg(long, global = true, env = "CONCEAL_WEIGHTS_DIR")]
    weights_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    original_dim: Option<usize>,
    /// desc, tensor, hist or pool_ensemble.
    #[arg(long, global = true)]
    loss: Option<String>,
    /// Comma-separated poolings, or `all`.
    #[arg(long, global = true)]
    poolings: Option<String>,
    /// Preset (s0..s3) or comma-separated resolutions.
    #[arg(long, global = true)]
    attack_resolutions: Option<String>,
    #[arg(long, global = true)]
    blur: Option<bool>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Comma-separated backend letters (A, R, V).
    #[arg(long, global = true)]
    attack_backends: Option<String>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    test_backend: Option<String>,
    #[arg(long, global = true)]
    test_pooling: Option<String>,
    #[arg(long, global = true)]
    test_resolution: Option<String>,
    #[arg(long, global = true)]
    carrier: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build one adversarial image.
    Attack {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack every query of a dataset and report mAP and similarities.
    Evaluate {
        /// Ground-truth JSON of the dataset.
        #[arg(long)]
        dataset: PathBuf,
        /// Score images saved by an earlier run instead of attacking.
        #[arg(long)]
        adversarial_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write database descriptors under the test-model.
    Extract {
        #[arg(long)]
        dataset: PathBuf,
        /// Descriptor file; a JSON sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn PCA whitening from a descriptor file.
    Whiten {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a trace CSV or a sweep JSON as SVG figures.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Similarity and distortion across the configured lambdas.
    SweepLambda(SweepArgs),
    /// Similarity across test resolutions, for attacks with and without blur.
    SweepResolution(SweepArgs),
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long = "target")]
    targets: Vec<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Use only the first N dataset queries.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn list(s: &str) -> Value {
    Value::Array(s.split(',').map(|p| Value::String(p.trim().to_string())).collect())
}

fn overrides(g: &GlobalArgs) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    let mut put = |k: &str, v: Value| {
        m.insert(k.to_string(), v);
    };
    if let Some(p) = &g.weights_dir {
        put("weights_dir", Value::String(p.display().to_string()));
    }
    if let Some(v) = g.seed {
        put("seed", v.into());
    }
    if let Some(v) = g.original_dim {
        put("original_dim", v.into());
    }
    if let Some(v) = &g.loss {
        put("loss", v.as_str().into());
    }
    if let Some(v) = &g.poolings {
        put("poolings", if v.contains(',') { list(v) } else { v.as_str().into() });
    }
    if let Some(v) = &g.attack_resolutions {
        let value = if v.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            let parsed: Result<Vec<usize>, _> = v.split(',').map(|s| s.trim().parse()).collect();
            Value::from(parsed.map_err(|_| ConfigError(format!("bad resolution list '{v}'")))?)
        } else {
            v.as_str().into()
        };
        put("attack_resolutions", value);
    }
    if let Some(v) = g.blur {
        put("blur", v.into());
    }
    if let Some(v) = g.lambda {
        put("lambda", v.into());
    }
    if let Some(v) = &g.attack_backends {
        put("attack_backends", list(v));
    }
    if let Some(v) = g.iterations {
        put("iterations", v.into());
    }
    if let Some(v) = &g.test_backend {
        put("test_backend", v.as_str().into());
    }
    if let Some(v) = &g.test_pooling {
        put("test_pooling", v.as_str().into());
    }
    if let Some(v) = &g.test_resolution {
        put("test_resolution", v.as_str().into());
    }
    if let Some(p) = &g.carrier {
        put("carrier", Value::String(p.display().to_string()));
    }
    for s in &g.set {
        let (k, v) = parse_set(s)?;
        m.insert(k, v);
    }
    Ok(m)
}

fn run(cli: Cli) -> Result<()> {
    let config = resolve(cli.global.config.as_deref(), overrides(&cli.global)?)?;
    match cli.command {
        Command::Attack { target, out } => commands::attack(&config, &target, &out),
        Command::Evaluate {
            dataset,
            adversarial_dir,
            out,
        } => commands::evaluate(&config, &dataset, adversarial_dir.as_deref(), &out),
        Command::Extract { dataset, out } => commands::extract(&config, &dataset, &out),
        Command::Whiten { descriptors, out } => commands::whiten(&config, &descriptors, &out),
        Command::Plot { input, out } => commands::plot(&config, &input, &out),
        Command::SweepLambda(a) => commands::sweep_lambda(&config, sweep_inputs(&a)),
        Command::SweepResolution(a) => commands::sweep_resolution(&config, sweep_inputs(&a)),
    }
}

fn sweep_inputs(a: &SweepArgs) -> commands::SweepInputs<'_> {
    commands::SweepInputs {
        targets: &a.targets,
        dataset: a.dataset.as_deref(),
        limit: a.limit,
        out_dir: &a.out,
    }
}

fn is_configuration(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || c.downcast_ref::<conceal_core::Error>().is_some_and(|e| e.is_configuration())
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_configuration(&e) { 1 } else { 2 })
        }
    }
}
