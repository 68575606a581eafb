//! Segment-wise feed-forward network.

use evroute_nn::{Linear, ParamStore, Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::EncodedBatch;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
}

impl FfnConfig {
    pub fn new(input: usize) -> Self {
        Self { input, hidden: vec![32, 32] }
    }

    pub fn param_count(&self) -> usize {
        let mut widths = vec![self.input];
        widths.extend(&self.hidden);
        widths.push(1);
        widths.windows(2).map(|w| Linear::num_weights(w[0], w[1])).sum()
    }
}

/// Relu hidden layers and a linear head; each segment is scored on its own.
#[derive(Clone, Debug)]
pub struct Ffn {
    hidden: Vec<Linear>,
    head: Linear,
}

impl Ffn {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, config: &FfnConfig) -> Result<Self> {
        let mut hidden = Vec::with_capacity(config.hidden.len());
        let mut fan_in = config.input;
        for (i, &w) in config.hidden.iter().enumerate() {
            hidden.push(Linear::new(store, rng, &format!("ffn.hidden{i}"), fan_in, w)?);
            fan_in = w;
        }
        let head = Linear::new(store, rng, "ffn.head", fan_in, 1)?;
        Ok(Self { hidden, head })
    }

    /// `[N, F]` rows to `[N, 1]`.
    pub fn forward_rows<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.hidden {
            let a = layer.forward(tape, h)?;
            h = tape.relu(a)?;
        }
        Ok(self.head.forward(tape, h)?)
    }

    /// `[B, L]` predictions in kWh.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, batch: &EncodedBatch<S>) -> Result<Var> {
        let x = tape.input(batch.features.clone())?;
        let y = self.forward_rows(tape, x)?;
        Ok(tape.reshape(y, &[batch.batch_size(), batch.padded_len])?)
    }
}
