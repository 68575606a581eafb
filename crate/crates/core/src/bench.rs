//! Inference latency: untimed warm-ups, then timed full passes over one
//! pre-encoded set of routes.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Route;
use crate::error::{CoreError, Result};
use crate::models::{Estimator, Prepared, INFERENCE_BATCH};
use crate::schema::FeatureSchema;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmups: usize,
    pub repeats: usize,
    pub threads: usize,
    /// Routes per padded batch inside one pass.
    pub batch_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { warmups: 2, repeats: 5, threads: 1, batch_size: INFERENCE_BATCH }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub model: String,
    pub n_routes: usize,
    pub mean_len: f64,
    pub threads: usize,
    pub warmups: usize,
    pub repeats: usize,
    pub batch_size: usize,
    /// Wall time of each timed pass.
    pub times_s: Vec<f64>,
    pub mean_s: f64,
    pub throughput_routes_per_s: f64,
    /// Passes actually executed, warm-ups included.
    pub forward_passes: usize,
    pub failed: Option<String>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs `pass` `warmups` times untimed, then `repeats` times timed.
pub fn run_protocol(warmups: usize, repeats: usize, mut pass: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    if repeats == 0 {
        return Err(CoreError::Validation("repeats must be >= 1".into()));
    }
    for _ in 0..warmups {
        pass()?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        pass()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(times)
}

/// Times `model` on `routes`. Encoding happens once, before any pass.
pub fn time_inference(model: &Estimator, routes: &[&Route], schema: &FeatureSchema, config: &BenchConfig) -> Result<BenchResult> {
    if routes.is_empty() {
        return Err(CoreError::Validation("benchmark needs at least one route".into()));
    }
    if config.threads == 0 || config.batch_size == 0 {
        return Err(CoreError::Validation("threads and batch_size must be >= 1".into()));
    }
    let prepared = model.prepare(routes, schema, config.batch_size)?;
    let passes = AtomicUsize::new(0);
    let sink = std::cell::Cell::new(0.0f64);

    let times = if config.threads == 1 {
        run_protocol(config.warmups, config.repeats, || {
            passes.fetch_add(1, Ordering::Relaxed);
            sink.set(sink.get() + model.run_prepared(&prepared)?);
            Ok(())
        })?
    } else {
        let parts = partition(prepared, config.threads);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| CoreError::Validation(format!("thread pool: {e}")))?;
        run_protocol(config.warmups, config.repeats, || {
            passes.fetch_add(1, Ordering::Relaxed);
            let totals: Vec<f64> = pool.install(|| parts.par_iter().map(|p| model.run_prepared(p)).collect::<Result<_>>())?;
            sink.set(sink.get() + totals.iter().sum::<f64>());
            Ok(())
        })?
    };
    std::hint::black_box(sink.get());

    let mean_s = mean(&times);
    Ok(BenchResult {
        model: model.kind().to_string(),
        n_routes: routes.len(),
        mean_len: routes.iter().map(|r| r.len()).sum::<usize>() as f64 / routes.len() as f64,
        threads: config.threads,
        warmups: config.warmups,
        repeats: config.repeats,
        batch_size: config.batch_size,
        times_s: times,
        mean_s,
        throughput_routes_per_s: routes.len() as f64 / mean_s,
        forward_passes: passes.into_inner(),
        failed: None,
    })
}

/// Splits prepared inputs into `n` interleaved parts for the threaded mode.
fn partition(prepared: Prepared, n: usize) -> Vec<Prepared> {
    match prepared {
        Prepared::Encoded(batches) => {
            let mut parts: Vec<Vec<_>> = (0..n).map(|_| Vec::new()).collect();
            for (i, b) in batches.into_iter().enumerate() {
                parts[i % n].push(b);
            }
            parts.into_iter().filter(|p| !p.is_empty()).map(Prepared::Encoded).collect()
        }
        Prepared::Raw(routes) => {
            let size = routes.len().div_ceil(n);
            routes.chunks(size).map(|c| Prepared::Raw(c.to_vec())).collect()
        }
    }
}

/// One row per entry; entries whose model failed to load become failed rows.
pub fn bench_grid(
    models: Vec<(String, Result<Estimator>)>,
    routes: &[&Route],
    schema: &FeatureSchema,
    config: &BenchConfig,
) -> Vec<BenchResult> {
    models
        .into_iter()
        .map(|(name, model)| {
            let outcome = model.and_then(|m| time_inference(&m, routes, schema, config));
            match outcome {
                Ok(mut r) => {
                    r.model = name;
                    r
                }
                Err(e) => {
                    log::error!("benchmark for `{name}` failed: {e}");
                    BenchResult {
                        model: name,
                        n_routes: routes.len(),
                        mean_len: 0.0,
                        threads: config.threads,
                        warmups: config.warmups,
                        repeats: config.repeats,
                        batch_size: config.batch_size,
                        times_s: vec![],
                        mean_s: f64::NAN,
                        throughput_routes_per_s: f64::NAN,
                        forward_passes: 0,
                        failed: Some(e.to_string()),
                    }
                }
            }
        })
        .collect()
}

pub const BENCH_HEADER: &str = "model,n_routes,threads,warmups,repeats,mean_s,throughput_routes_per_s";

pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in results {
        let (mean_s, tput) = if r.failed.is_some() {
            ("failed".to_string(), "failed".to_string())
        } else {
            (format!("{:.3}", r.mean_s), format!("{:.1}", r.throughput_routes_per_s))
        };
        writeln!(out, "{},{},{},{},{},{mean_s},{tput}", r.model, r.n_routes, r.threads, r.warmups, r.repeats).expect("string write");
    }
    out
}
