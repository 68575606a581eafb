//! A fitted estimator bound to the feature schema it was trained on.

use std::path::Path;

use evroute_nn::{Checkpoint, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::baselines::{DistanceBaseline, PhysicsBaseline};
use super::batch::{encode_routes, length_bucketed, EncodedBatch};
use super::net::{Net, NetConfig};
use super::ModelKind;
use crate::domain::{Route, VehicleModel};
use crate::error::{CoreError, Result};
use crate::schema::FeatureSchema;

pub const MODEL_FORMAT_VERSION: &str = "evroute-model/1";

/// Routes per padded inference batch.
pub const INFERENCE_BATCH: usize = 64;

#[derive(Clone, Debug)]
pub enum Predictor {
    Distance(DistanceBaseline),
    Physics(PhysicsBaseline),
    Neural { net: Net, params: ParamStore<f32> },
}

#[derive(Clone, Debug)]
pub struct Estimator {
    kind: ModelKind,
    schema: FeatureSchema,
    predictor: Predictor,
}

/// Route total in Wh: `raw_wh` feeds metrics, `reported_wh` is floored at 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouteEnergy {
    pub raw_wh: f64,
    pub reported_wh: f64,
}

impl RouteEnergy {
    pub fn from_segments(segment_wh: &[f64]) -> Self {
        let raw_wh: f64 = segment_wh.iter().sum();
        Self { raw_wh, reported_wh: raw_wh.max(0.0) }
    }
}

/// Inputs staged ahead of timing: padded `f32` batches for networks, the
/// routes themselves for baselines.
#[derive(Clone, Debug)]
pub enum Prepared {
    Encoded(Vec<EncodedBatch<f32>>),
    Raw(Vec<Route>),
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    kind: ModelKind,
    schema: FeatureSchema,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    net: Option<NetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distance: Option<DistanceBaseline>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fleet: Option<Vec<VehicleModel>>,
}

impl Estimator {
    pub fn new(kind: ModelKind, schema: FeatureSchema, predictor: Predictor) -> Result<Self> {
        let ok = match (&predictor, kind) {
            (Predictor::Distance(_), ModelKind::Distance) | (Predictor::Physics(_), ModelKind::Physics) => true,
            (Predictor::Neural { net, .. }, k) => k.net_config(schema.width()).as_ref() == Some(net.config()),
            _ => false,
        };
        if !ok {
            return Err(CoreError::Validation(format!("predictor does not match model kind `{kind}`")));
        }
        Ok(Self { kind, schema, predictor })
    }

    /// A network with freshly initialized weights.
    pub fn untrained(kind: ModelKind, schema: FeatureSchema, seed: u64) -> Result<Self> {
        let config = kind
            .net_config(schema.width())
            .ok_or_else(|| CoreError::Validation(format!("`{kind}` has no network to initialize")))?;
        let (net, params) = Net::build(&config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Self::new(kind, schema, Predictor::Neural { net, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn num_params(&self) -> usize {
        match &self.predictor {
            Predictor::Neural { params, .. } => params.num_weights(),
            Predictor::Distance(_) => 2,
            Predictor::Physics(_) => 0,
        }
    }

    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        let (model, data) = (self.schema.fingerprint(), schema.fingerprint());
        if model != data {
            return Err(CoreError::SchemaMismatch { model, data });
        }
        Ok(())
    }

    /// Raw per-segment Wh for each route, in input order.
    pub fn predict_segments(&self, routes: &[&Route], schema: &FeatureSchema) -> Result<Vec<Vec<f64>>> {
        self.check_schema(schema)?;
        match &self.predictor {
            Predictor::Distance(b) => Ok(routes.iter().map(|r| b.predict_segments(r)).collect()),
            Predictor::Physics(b) => routes.iter().map(|r| b.predict_segments(r)).collect(),
            Predictor::Neural { net, params } => {
                let encoded = encode_routes(routes, &self.schema)?;
                let mut out = vec![Vec::new(); routes.len()];
                for (batch, idx) in length_bucketed(&encoded, INFERENCE_BATCH, self.schema.width())? {
                    for (kwh, i) in net.predict_kwh(params, &batch)?.into_iter().zip(idx) {
                        out[i] = kwh.into_iter().map(|v| v as f64 * 1000.0).collect();
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn route_energy(&self, route: &Route, schema: &FeatureSchema) -> Result<RouteEnergy> {
        let seg = self.predict_segments(&[route], schema)?;
        Ok(RouteEnergy::from_segments(&seg[0]))
    }

    /// Encodes `routes` into the batches [`run_prepared`](Self::run_prepared) consumes.
    pub fn prepare(&self, routes: &[&Route], schema: &FeatureSchema, batch_size: usize) -> Result<Prepared> {
        self.check_schema(schema)?;
        if routes.is_empty() {
            return Err(CoreError::Validation("no routes to prepare".into()));
        }
        match &self.predictor {
            Predictor::Neural { .. } => {
                let encoded = encode_routes(routes, &self.schema)?;
                let batches = length_bucketed(&encoded, batch_size, self.schema.width())?;
                Ok(Prepared::Encoded(batches.into_iter().map(|(b, _)| b).collect()))
            }
            _ => Ok(Prepared::Raw(routes.iter().map(|r| (*r).clone()).collect())),
        }
    }

    /// One full forward pass over prepared inputs. Returns the sum of all
    /// raw predictions in Wh.
    pub fn run_prepared(&self, prepared: &Prepared) -> Result<f64> {
        match (prepared, &self.predictor) {
            (Prepared::Encoded(batches), Predictor::Neural { net, params }) => {
                let mut total = 0.0f64;
                for b in batches {
                    for r in net.predict_kwh(params, b)? {
                        total += r.iter().map(|&v| v as f64).sum::<f64>() * 1000.0;
                    }
                }
                Ok(total)
            }
            (Prepared::Raw(routes), Predictor::Distance(b)) => Ok(routes.iter().map(|r| b.predict_route(r)).sum()),
            (Prepared::Raw(routes), Predictor::Physics(b)) => {
                let mut total = 0.0;
                for r in routes {
                    total += b.predict_segments(r)?.iter().sum::<f64>();
                }
                Ok(total)
            }
            _ => Err(CoreError::Validation(format!("prepared inputs do not fit model `{}`", self.kind))),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = ModelHeader {
            format: MODEL_FORMAT_VERSION.into(),
            kind: self.kind,
            schema: self.schema.clone(),
            net: None,
            distance: None,
            fleet: None,
        };
        let empty = ParamStore::<f32>::new();
        let params = match &self.predictor {
            Predictor::Distance(b) => {
                header.distance = Some(*b);
                &empty
            }
            Predictor::Physics(b) => {
                header.fleet = Some(b.fleet.clone());
                &empty
            }
            Predictor::Neural { net, params } => {
                header.net = Some(net.config().clone());
                params
            }
        };
        let config = serde_json::to_value(&header).expect("plain data serializes");
        Checkpoint::from_params(config, self.schema.fingerprint(), params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let format = ckpt.config.get("format").and_then(|v| v.as_str()).unwrap_or("<missing>");
        if format != MODEL_FORMAT_VERSION {
            return Err(CoreError::Version { what: "model", found: format.into(), expected: MODEL_FORMAT_VERSION.into() });
        }
        let header: ModelHeader = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| CoreError::Parse { line: 0, msg: format!("checkpoint header: {e}") })?;
        header.schema.validate()?;
        if header.schema.fingerprint() != ckpt.fingerprint {
            return Err(CoreError::SchemaMismatch { model: ckpt.fingerprint.clone(), data: header.schema.fingerprint() });
        }
        let missing = |what: &str| CoreError::Validation(format!("`{}` checkpoint lacks {what}", header.kind));
        let predictor = match header.kind {
            ModelKind::Distance => Predictor::Distance(header.distance.ok_or_else(|| missing("slope and intercept"))?),
            ModelKind::Physics => Predictor::Physics(PhysicsBaseline { fleet: header.fleet.ok_or_else(|| missing("a fleet"))? }),
            _ => {
                let config = header.net.ok_or_else(|| missing("a network config"))?;
                let (net, mut params) = Net::build::<f32, _>(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
                ckpt.restore_into(&mut params)?;
                Predictor::Neural { net, params }
            }
        };
        Self::new(header.kind, header.schema, predictor)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
