//! Subcommand arguments and their implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use evroute_core::bench::{bench_csv, bench_grid, BenchConfig};
use evroute_core::eval::{build_report, Level};
use evroute_core::io::{meta_path, read_dataset, routes_path, schema_path, write_dataset};
use evroute_core::models::{DistanceBaseline, PhysicsBaseline, Predictor};
use evroute_core::scaling::sizing_report;
use evroute_core::simgen::{export_soc_scatter, generate_dataset, GeneratorConfig};
use evroute_core::{Dataset, Estimator, ModelKind, Route, Split, TrainConfig};

use crate::config::{required, resolve, usage};
use crate::manifest::{beside, RunManifest};

fn dataset_files(dir: &Path) -> Vec<PathBuf> {
    vec![routes_path(dir), schema_path(dir), meta_path(dir)]
}

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    read_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Args, Serialize, Deserialize, Default, Debug, Clone)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Generator seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of routes [default: 1000].
    #[arg(long)]
    pub routes: Option<usize>,
    /// Fewest segments per route [default: 20].
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Most segments per route [default: 100].
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Log-normal noise sigma on segment energy [default: 0.05].
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Fraction of segments flagged stem at each end [default: 0.05].
    #[arg(long)]
    pub stem_fraction: Option<f64>,
    /// Worker threads; the output does not depend on it [default: 1].
    #[arg(long)]
    pub threads: Option<usize>,
}

pub fn generate(args: GenerateArgs, config: Option<&Path>) -> anyhow::Result<()> {
    let a = resolve(&args, config)?;
    let out = required(&a.out, "out")?;
    let d = GeneratorConfig::default();
    let gen = GeneratorConfig {
        seed: a.seed.unwrap_or(d.seed),
        n_routes: a.routes.unwrap_or(d.n_routes),
        route_length_range: (a.min_len.unwrap_or(d.route_length_range.0), a.max_len.unwrap_or(d.route_length_range.1)),
        noise_sigma: a.noise_sigma.unwrap_or(d.noise_sigma),
        stem_fraction: a.stem_fraction.unwrap_or(d.stem_fraction),
        threads: a.threads.unwrap_or(d.threads),
        ..d
    };
    gen.validate().map_err(|e| usage(e.to_string()))?;
    let resolved = GenerateArgs {
        out: Some(out.clone()),
        seed: Some(gen.seed),
        routes: Some(gen.n_routes),
        min_len: Some(gen.route_length_range.0),
        max_len: Some(gen.route_length_range.1),
        noise_sigma: Some(gen.noise_sigma),
        stem_fraction: Some(gen.stem_fraction),
        threads: Some(gen.threads),
    };

    let dataset = generate_dataset(&gen)?;
    write_dataset(&dataset, &out)?;
    RunManifest::new("generate", &resolved)?
        .seed("generator", gen.seed)
        .output(&dataset_files(&out))?
        .write(&out.join("manifest.json"))?;
    println!(
        "wrote {} routes ({} segments) to {}: {} train / {} val / {} test",
        dataset.routes.len(),
        dataset.num_segments(),
        out.display(),
        dataset.routes_in(Split::Train).len(),
        dataset.routes_in(Split::Val).len(),
        dataset.routes_in(Split::Test).len()
    );
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default, Debug, Clone)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainArgs {
    /// distance|physics|ffn|rnn|ret-20k|ret-300k|ret-3m
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Dataset directory written by `generate`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Directory for `<model>.ckpt`, `<model>.history.csv` and the manifest.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Initialization and shuffling seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Routes per step [default: 32].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epoch limit [default: 100].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 10].
    #[arg(long)]
    pub patience: Option<usize>,
    /// Per-epoch learning-rate multiplier [default: 1].
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Run every epoch and keep the final weights.
    #[arg(long)]
    pub no_early_stop: bool,
}

pub fn train(args: TrainArgs, config: Option<&Path>) -> anyhow::Result<()> {
    let a = resolve(&args, config)?;
    let kind = required(&a.model, "model")?;
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        epochs: a.epochs.unwrap_or(d.epochs),
        patience: a.patience.unwrap_or(d.patience),
        seed: a.seed.unwrap_or(d.seed),
        early_stopping: !a.no_early_stop,
        lr_decay: a.lr_decay.unwrap_or(d.lr_decay),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let resolved = TrainArgs {
        model: Some(kind),
        data: Some(data.clone()),
        out: Some(out.clone()),
        seed: Some(cfg.seed),
        lr: Some(cfg.lr),
        batch_size: Some(cfg.batch_size),
        epochs: Some(cfg.epochs),
        patience: Some(cfg.patience),
        lr_decay: Some(cfg.lr_decay),
        no_early_stop: !cfg.early_stopping,
    };

    let dataset = load_dataset(&data)?;
    let outcome = evroute_core::models::train(kind, &dataset, &cfg)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt = out.join(format!("{kind}.ckpt"));
    outcome.estimator.save(&ckpt)?;
    let mut history = String::from("epoch,train_loss,val_mape\n");
    for h in &outcome.history {
        let val = h.val_mape.map(|v| v.to_string()).unwrap_or_default();
        writeln!(history, "{},{},{val}", h.epoch, h.train_loss)?;
    }
    let history_path = out.join(format!("{kind}.history.csv"));
    write_text(&history_path, &history)?;
    RunManifest::new("train", &resolved)?
        .seed("train", cfg.seed)
        .seed("generator", dataset.generator_seed)
        .input(&dataset_files(&data))?
        .output(&[ckpt.clone(), history_path])?
        .write(&out.join(format!("{kind}.manifest.json")))?;
    println!(
        "{kind}: {} parameters, {} epochs, best epoch {}, final train loss {:.6} kWh -> {}",
        outcome.estimator.num_params(),
        outcome.history.len(),
        outcome.best_epoch,
        outcome.final_loss,
        ckpt.display()
    );
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default, Debug, Clone)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalArgs {
    /// Dataset directory; its test split is scored.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Checkpoints to compare (repeat the flag or separate with commas).
    #[arg(long, value_name = "PATH", value_delimiter = ',')]
    pub checkpoints: Vec<PathBuf>,
    /// route|segment [default: route].
    #[arg(long)]
    pub level: Option<Level>,
    /// Leave out the basis-point columns, so no FFN checkpoint is needed.
    #[arg(long)]
    pub no_bps: bool,
    /// Report CSV path; printed to stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

pub fn eval(args: EvalArgs, config: Option<&Path>) -> anyhow::Result<()> {
    let a = resolve(&args, config)?;
    let data = required(&a.data, "data")?;
    if a.checkpoints.is_empty() {
        return Err(usage("no --checkpoints given"));
    }
    let level = a.level.unwrap_or_default();
    let resolved = EvalArgs { level: Some(level), ..a.clone() };

    let dataset = load_dataset(&data)?;
    let models: Vec<Estimator> = a
        .checkpoints
        .iter()
        .map(|p| Estimator::load(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .collect::<anyhow::Result<_>>()?;
    let refs: Vec<&Estimator> = models.iter().collect();
    let report = build_report(&refs, &dataset, level, !a.no_bps)?;
    log::info!("test slices: {} cold, {} hot; {} near-zero pairs skipped", report.n_cold, report.n_hot, report.skipped_pairs);
    let csv = report.to_csv();
    match &a.out {
        Some(out) => {
            write_text(out, &csv)?;
            let mut inputs = dataset_files(&data);
            inputs.extend(a.checkpoints.iter().cloned());
            RunManifest::new("eval", &resolved)?.input(&inputs)?.output(&[out.clone()])?.write(&beside(out))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default, Debug, Clone)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct BenchArgs {
    /// Trained checkpoints to time.
    #[arg(long, value_name = "PATH", value_delimiter = ',')]
    pub checkpoints: Vec<PathBuf>,
    /// Model kinds to time with fresh weights (distance is fitted on the batch's train split).
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<ModelKind>,
    /// Time on this dataset's routes instead of a generated batch.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Routes in the generated batch [default: 10000].
    #[arg(long)]
    pub routes: Option<usize>,
    /// Fewest segments per generated route [default: 20].
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Most segments per generated route [default: 100].
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Seed for the generated batch and fresh weights [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Untimed passes before timing [default: 2].
    #[arg(long)]
    pub warmups: Option<usize>,
    /// Timed passes [default: 5].
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Inference threads [default: 1].
    #[arg(long)]
    pub threads: Option<usize>,
    /// Routes per padded batch [default: 64].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Timing CSV path; printed to stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

fn fresh(kind: ModelKind, dataset: &Dataset, seed: u64) -> evroute_core::Result<Estimator> {
    let schema = dataset.schema.clone();
    match kind {
        ModelKind::Distance => {
            let mut fit_on = dataset.routes_in(Split::Train);
            if fit_on.len() < 2 {
                fit_on = dataset.routes.iter().collect();
            }
            Estimator::new(kind, schema, Predictor::Distance(DistanceBaseline::fit(&fit_on)?))
        }
        ModelKind::Physics => Estimator::new(kind, schema, Predictor::Physics(PhysicsBaseline { fleet: dataset.fleet.clone() })),
        _ => Estimator::untrained(kind, schema, seed),
    }
}

pub fn bench(args: BenchArgs, config: Option<&Path>) -> anyhow::Result<()> {
    let a = resolve(&args, config)?;
    if a.checkpoints.is_empty() && a.models.is_empty() {
        return Err(usage("nothing to time: give --checkpoints and/or --models"));
    }
    let d = BenchConfig::default();
    let g = GeneratorConfig::default();
    let cfg = BenchConfig {
        warmups: a.warmups.unwrap_or(d.warmups),
        repeats: a.repeats.unwrap_or(d.repeats),
        threads: a.threads.unwrap_or(d.threads),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
    };
    if cfg.repeats == 0 || cfg.threads == 0 || cfg.batch_size == 0 {
        return Err(usage("--repeats, --threads and --batch-size must be at least 1"));
    }
    let seed = a.seed.unwrap_or(g.seed);
    let mut resolved = BenchArgs { seed: Some(seed), warmups: Some(cfg.warmups), repeats: Some(cfg.repeats), threads: Some(cfg.threads), batch_size: Some(cfg.batch_size), ..a.clone() };

    let dataset = match &a.data {
        Some(dir) => load_dataset(dir)?,
        None => {
            let gen = GeneratorConfig {
                seed,
                n_routes: a.routes.unwrap_or(10_000),
                route_length_range: (a.min_len.unwrap_or(g.route_length_range.0), a.max_len.unwrap_or(g.route_length_range.1)),
                ..g
            };
            gen.validate().map_err(|e| usage(e.to_string()))?;
            resolved.routes = Some(gen.n_routes);
            resolved.min_len = Some(gen.route_length_range.0);
            resolved.max_len = Some(gen.route_length_range.1);
            generate_dataset(&gen)?
        }
    };
    let routes: Vec<&Route> = dataset.routes.iter().collect();
    if routes.is_empty() {
        return Err(usage("the benchmark batch is empty"));
    }

    let mut rows = Vec::new();
    for &kind in &a.models {
        rows.extend(bench_grid(vec![(kind.to_string(), fresh(kind, &dataset, seed))], &routes, &dataset.schema, &cfg));
    }
    for path in &a.checkpoints {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string());
        let loaded = Estimator::load(path);
        // A generated batch carries its own normalization; checkpoints are
        // timed against theirs.
        let schema = match (&loaded, &a.data) {
            (Ok(m), None) => m.schema().clone(),
            _ => dataset.schema.clone(),
        };
        let name = loaded.as_ref().map(|m| m.kind().to_string()).unwrap_or(name);
        rows.extend(bench_grid(vec![(name, loaded)], &routes, &schema, &cfg));
    }
    let failed = rows.iter().filter(|r| r.failed.is_some()).count();
    let csv = bench_csv(&rows);
    match &a.out {
        Some(out) => {
            write_text(out, &csv)?;
            let mut inputs = a.checkpoints.clone();
            if let Some(dir) = &a.data {
                inputs.extend(dataset_files(dir));
            }
            let inputs: Vec<PathBuf> = inputs.into_iter().filter(|p| p.exists()).collect();
            RunManifest::new("bench", &resolved)?.seed("bench", seed).input(&inputs)?.output(&[out.clone()])?.write(&beside(out))?;
        }
        None => print!("{csv}"),
    }
    if failed > 0 {
        log::warn!("{failed} of {} benchmark rows failed", rows.len());
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default, Debug, Clone)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ScaleArgs {
    /// Training data size D in segments.
    #[arg(long)]
    pub segments: Option<f64>,
    /// Count D from this dataset's train split instead.
    #[arg(long, value_name = "DIR", conflicts_with = "segments")]
    pub data: Option<PathBuf>,
    /// Feature width used to count preset parameters [default: 9].
    #[arg(long)]
    pub input: Option<usize>,
    /// Also write the printout here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

pub fn scale(args: ScaleArgs, config: Option<&Path>) -> anyhow::Result<()> {
    let a = resolve(&args, config)?;
    let segments = match (&a.segments, &a.data) {
        (Some(d), None) => *d,
        (None, Some(dir)) => {
            let ds = load_dataset(dir)?;
            ds.routes_in(Split::Train).iter().map(|r| r.len()).sum::<usize>() as f64
        }
        (Some(_), Some(_)) => return Err(usage("give either --segments or --data, not both")),
        (None, None) => return Err(usage("missing --segments (or --data)")),
    };
    let input = a.input.unwrap_or(9);
    let report = sizing_report(segments, input).map_err(|e| usage(e.to_string()))?;
    let text = report.render();
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
        let resolved = ScaleArgs { segments: Some(segments), data: None, input: Some(input), out: Some(out.clone()) };
        let inputs = a.data.as_deref().map(dataset_files).unwrap_or_default();
        RunManifest::new("scale", &resolved)?.input(&inputs)?.output(&[out.clone()])?.write(&beside(out))?;
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default, Debug, Clone)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExportArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// CSV path.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

pub fn export_fig(args: ExportArgs, config: Option<&Path>) -> anyhow::Result<()> {
    let a = resolve(&args, config)?;
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let dataset = load_dataset(&data)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    export_soc_scatter(&dataset, &out)?;
    RunManifest::new("export-fig", &a)?
        .seed("generator", dataset.generator_seed)
        .input(&dataset_files(&data))?
        .output(&[out.clone()])?
        .write(&beside(&out))?;
    println!("wrote {} rows to {}", dataset.routes.len(), out.display());
    Ok(())
}
