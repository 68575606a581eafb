//! Route-level recurrent network.

use evroute_nn::{Gru, Linear, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::EncodedBatch;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub input: usize,
    pub embed: usize,
    pub hidden: usize,
    pub output: usize,
}

impl RnnConfig {
    pub fn new(input: usize) -> Self {
        Self { input, embed: 32, hidden: 64, output: 32 }
    }

    pub fn param_count(&self) -> usize {
        Linear::num_weights(self.input, self.embed)
            + Gru::num_weights(self.embed, self.hidden)
            + Linear::num_weights(self.hidden, self.output)
            + Linear::num_weights(self.output, 1)
    }
}

/// Relu feature embedding, a unidirectional GRU, a relu output embedding and
/// a linear head, applied at every step.
#[derive(Clone, Debug)]
pub struct Rnn {
    embed: Linear,
    gru: Gru,
    out: Linear,
    head: Linear,
}

impl Rnn {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, config: &RnnConfig) -> Result<Self> {
        Ok(Self {
            embed: Linear::new(store, rng, "rnn.embed", config.input, config.embed)?,
            gru: Gru::new(store, rng, "rnn.gru", config.embed, config.hidden)?,
            out: Linear::new(store, rng, "rnn.out", config.hidden, config.output)?,
            head: Linear::new(store, rng, "rnn.head", config.output, 1)?,
        })
    }

    /// `[B, L]` predictions in kWh. Runs time-major internally so each step
    /// is one contiguous row block.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, batch: &EncodedBatch<S>) -> Result<Var> {
        let (b, l) = (batch.batch_size(), batch.padded_len);
        let x = tape.input(batch.time_major_features())?;
        let e = self.embed.forward(tape, x)?;
        let e = tape.relu(e)?;
        let gates = self.gru.input_gates(tape, e)?;
        let mut h = tape.input(Tensor::zeros(vec![b, self.gru.hidden]))?;
        let mut states = Vec::with_capacity(l);
        for t in 0..l {
            let g = tape.slice_rows(gates, t * b, b)?;
            h = self.gru.step(tape, g, h)?;
            states.push(h);
        }
        let hs = tape.concat_rows(&states)?;
        let o = self.out.forward(tape, hs)?;
        let o = tape.relu(o)?;
        let y = self.head.forward(tape, o)?;
        let y = tape.reshape(y, &[l, b])?;
        Ok(tape.transpose(y)?)
    }
}
