//! Central finite-difference check of analytic gradients.
//!
//! Runs in `f64`: the analytic side is the ordinary backward pass at double
//! precision, the numeric side only ever calls forward.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference half step.
    pub step: f64,
    /// Number of coordinates to probe (all of them if the model is smaller).
    pub samples: usize,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that coordinates whose
    /// true gradient is zero compare on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, samples: 256, tolerance: 1e-4, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Picks `(param, index)` coordinates: at least one from every tensor, the
/// rest uniformly over all weights.
fn pick_coordinates<R: Rng>(params: &ParamStore<f64>, samples: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params.iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for &s in &sizes {
        offsets.push(acc);
        acc += s;
    }
    let mut chosen = BTreeSet::new();
    for (p, &s) in sizes.iter().enumerate() {
        if s > 0 {
            chosen.insert(offsets[p] + rng.random_range(0..s));
        }
    }
    let want = samples.min(total);
    if chosen.len() < want {
        if want == total {
            chosen.extend(0..total);
        } else {
            // oversample, then keep unseen indices until the target is met
            for flat in sample(rng, total, want).into_iter() {
                if chosen.len() >= want {
                    break;
                }
                chosen.insert(flat);
            }
        }
    }
    chosen
        .into_iter()
        .map(|flat| {
            let p = offsets.partition_point(|&o| o <= flat) - 1;
            (p, flat - offsets[p])
        })
        .collect()
}

/// Compares backward-pass gradients of the scalar built by `forward` against
/// central differences `(f(θ+h) − f(θ−h)) / 2h`.
pub fn grad_check<F>(params: &ParamStore<f64>, forward: F, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(params);
        let loss = forward(&mut tape)?;
        tape.backward(loss)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let coords = pick_coordinates(params, config.samples, &mut rng);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::inference(store);
        let loss = forward(&mut tape)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance: config.tolerance,
    };
    for (p, i) in coords {
        let id = crate::ParamId(p);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
        let orig = work.get(id).value.data()[i];
        work.get_mut(id).value.data_mut()[i] = orig + config.step;
        let plus = eval(&work)?;
        work.get_mut(id).value.data_mut()[i] = orig - config.step;
        let minus = eval(&work)?;
        work.get_mut(id).value.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * config.step);
        let rel = relative_error(analytic, numeric, config.floor);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(CoordinateError {
                param: params.get(id).name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}
