//! Fitting estimators to a dataset.

use evroute_nn::{AdamConfig, AdamState, NnError, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::baselines::{DistanceBaseline, PhysicsBaseline};
use super::batch::{encode_routes, length_bucketed, EncodedBatch, EncodedRoute};
use super::estimator::{Estimator, Predictor, INFERENCE_BATCH};
use super::net::Net;
use super::ModelKind;
use crate::domain::{Dataset, Route, Split, VehicleModel};
use crate::error::{CoreError, Result};
use crate::eval::mape;
use crate::schema::FeatureSchema;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Routes per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// When off, all epochs run and the last weights are kept.
    pub early_stopping: bool,
    /// Learning rate is multiplied by this after every epoch. 1 keeps it fixed.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 32, epochs: 100, patience: 10, seed: 0, early_stopping: true, lr_decay: 1.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.epochs == 0 || self.patience == 0 || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(CoreError::Validation(format!("training settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Segment-weighted masked MAE in kWh.
    pub train_loss: f64,
    /// Route-level MAPE (%) on the validation routes.
    pub val_mape: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub estimator: Estimator,
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were kept (0 for baselines).
    pub best_epoch: usize,
    /// Training loss of the last epoch run.
    pub final_loss: f64,
}

/// Fits `kind` on the dataset's train split, early-stopping on its val split.
pub fn train(kind: ModelKind, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let train = dataset.routes_in(Split::Train);
    let val = dataset.routes_in(Split::Val);
    if train.is_empty() {
        return Err(CoreError::Validation("training split is empty".into()));
    }
    if kind.is_neural() && config.early_stopping && val.is_empty() {
        return Err(CoreError::Validation("validation split is empty but early stopping is on".into()));
    }
    fit(kind, &dataset.schema, &dataset.fleet, &train, &val, config)
}

/// Like [`train`] with explicit route lists.
pub fn fit(
    kind: ModelKind,
    schema: &FeatureSchema,
    fleet: &[VehicleModel],
    train: &[&Route],
    val: &[&Route],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let baseline = |predictor| {
        Ok(TrainOutcome { estimator: Estimator::new(kind, schema.clone(), predictor)?, history: vec![], best_epoch: 0, final_loss: 0.0 })
    };
    match kind {
        ModelKind::Distance => baseline(Predictor::Distance(DistanceBaseline::fit(train)?)),
        ModelKind::Physics => baseline(Predictor::Physics(PhysicsBaseline { fleet: fleet.to_vec() })),
        _ => fit_network(kind, schema, train, val, config),
    }
}

fn fit_network(kind: ModelKind, schema: &FeatureSchema, train: &[&Route], val: &[&Route], config: &TrainConfig) -> Result<TrainOutcome> {
    let net_config = kind.net_config(schema.width()).expect("neural kind");
    let width = schema.width();
    let train_enc = encode_routes(train, schema)?;
    if let Some(r) = train.iter().find(|r| r.actual_energy.is_none()) {
        return Err(CoreError::Validation(format!("training route `{}` has no measured energy", r.route_id)));
    }
    let val_batches = length_bucketed(&encode_routes(val, schema)?, INFERENCE_BATCH, width)?;
    let val_actual: Vec<f64> = val
        .iter()
        .map(|r| r.total_energy().ok_or_else(|| CoreError::Validation(format!("validation route `{}` has no measured energy", r.route_id))))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (net, mut params) = Net::build::<f32, _>(&net_config, &mut rng)?;
    let adam_cfg = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(&params, adam_cfg);
    log::info!("training {kind}: {} parameters, {} train / {} val routes", params.num_weights(), train.len(), val.len());

    let mut order: Vec<usize> = (0..train_enc.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 1..=config.epochs {
        // Length-bucketed batches in random order: a shuffle, a stable sort by
        // length (so ties stay shuffled), then a shuffle of the batches.
        order.shuffle(&mut rng);
        order.sort_by_key(|&i| train_enc[i].len);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        batches.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut weight = 0.0f64;
        for chunk in batches {
            let refs: Vec<&EncodedRoute> = chunk.iter().map(|&i| &train_enc[i]).collect();
            let batch = EncodedBatch::<f32>::assemble(&refs, width)?;
            let (loss, grads) = step_gradients(&net, &params, &batch).map_err(|source| CoreError::Diverged { epoch, source })?;
            let n: usize = batch.lengths.iter().sum();
            loss_sum += loss as f64 * n as f64;
            weight += n as f64;
            params.accumulate(&grads);
            adam.step(&mut params);
        }
        adam.config.lr *= config.lr_decay;
        let train_loss = loss_sum / weight;
        let val_mape = if val.is_empty() { None } else { Some(validation_mape(&net, &params, &val_batches, &val_actual)?) };
        history.push(EpochRecord { epoch, train_loss, val_mape });
        log::info!("{kind} epoch {epoch}: train MAE {train_loss:.5} kWh, val MAPE {val_mape:?}");

        if config.early_stopping {
            if let Some(v) = val_mape {
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, epoch, params.clone()));
                } else if epoch - best.as_ref().map_or(0, |b| b.1) >= config.patience {
                    log::info!("{kind}: no validation improvement for {} epochs, stopping", config.patience);
                    break;
                }
            }
        }
    }
    let final_loss = history.last().map_or(f64::NAN, |h| h.train_loss);
    let (best_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (history.len(), params),
    };
    let estimator = Estimator::new(kind, schema.clone(), Predictor::Neural { net, params })?;
    Ok(TrainOutcome { estimator, history, best_epoch, final_loss })
}

fn step_gradients(
    net: &Net,
    params: &ParamStore<f32>,
    batch: &EncodedBatch<f32>,
) -> std::result::Result<(f32, evroute_nn::Gradients<f32>), NnError> {
    let mut tape = Tape::new(params);
    let pred = net.forward(&mut tape, batch).map_err(|e| match e {
        CoreError::Nn(n) => n,
        other => NnError::Invalid { op: "forward", msg: other.to_string() },
    })?;
    let targets = batch.targets.clone().ok_or(NnError::Invalid { op: "train", msg: "batch has no targets".into() })?;
    let target = tape.input(targets)?;
    let mask = tape.input(batch.mask.clone())?;
    let loss = tape.mae_loss(pred, target, mask)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss)?))
}

fn validation_mape(net: &Net, params: &ParamStore<f32>, batches: &[(EncodedBatch<f32>, Vec<usize>)], actual: &[f64]) -> Result<f64> {
    let mut pred = vec![0.0; actual.len()];
    for (batch, idx) in batches {
        for (kwh, &i) in net.predict_kwh(params, batch)?.iter().zip(idx) {
            pred[i] = kwh.iter().map(|&v| v as f64).sum::<f64>() * 1000.0;
        }
    }
    mape(&pred, actual)
}
