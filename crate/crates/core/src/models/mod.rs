//! Estimators: distance and physics baselines, the segment FFN, the GRU
//! route model and the transformer, plus training.

pub mod baselines;
pub mod batch;
pub mod estimator;
pub mod ffn;
pub mod net;
pub mod ret;
pub mod rnn;
pub mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use baselines::{DistanceBaseline, PhysicsBaseline};
pub use batch::{encode_routes, length_bucketed, EncodedBatch, EncodedRoute};
pub use estimator::{Estimator, Predictor, Prepared, RouteEnergy, INFERENCE_BATCH};
pub use ffn::{Ffn, FfnConfig};
pub use net::{param_count, Net, NetConfig};
pub use ret::{Ret, RetConfig, RetPreset, HEAD_DIM};
pub use rnn::{Rnn, RnnConfig};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

use crate::error::{CoreError, Result};

/// Every selectable estimator, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelKind {
    Distance,
    Physics,
    Ffn,
    Rnn,
    Ret(RetPreset),
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Distance,
        ModelKind::Physics,
        ModelKind::Ffn,
        ModelKind::Rnn,
        ModelKind::Ret(RetPreset::Ret20k),
        ModelKind::Ret(RetPreset::Ret300k),
        ModelKind::Ret(RetPreset::Ret3m),
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Distance => "distance",
            ModelKind::Physics => "physics",
            ModelKind::Ffn => "ffn",
            ModelKind::Rnn => "rnn",
            ModelKind::Ret(p) => p.name(),
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|k| k.name()).join("|")
    }

    pub fn is_neural(self) -> bool {
        !matches!(self, ModelKind::Distance | ModelKind::Physics)
    }

    /// Network layout for a feature width of `input`; `None` for baselines.
    pub fn net_config(self, input: usize) -> Option<NetConfig> {
        match self {
            ModelKind::Distance | ModelKind::Physics => None,
            ModelKind::Ffn => Some(NetConfig::Ffn(FfnConfig::new(input))),
            ModelKind::Rnn => Some(NetConfig::Rnn(RnnConfig::new(input))),
            ModelKind::Ret(p) => Some(NetConfig::Ret(p.config(input))),
        }
    }

    /// Position in the report ordering.
    pub fn rank(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| CoreError::UnknownModel { name: s.into(), valid: Self::valid_names() })
    }
}

impl TryFrom<String> for ModelKind {
    type Error = CoreError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelKind> for String {
    fn from(k: ModelKind) -> String {
        k.name().to_string()
    }
}
