//! The trainable networks behind one interface.

use evroute_nn::{ParamStore, Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::EncodedBatch;
use super::ffn::{Ffn, FfnConfig};
use super::ret::{Ret, RetConfig};
use super::rnn::{Rnn, RnnConfig};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum NetConfig {
    Ffn(FfnConfig),
    Rnn(RnnConfig),
    Ret(RetConfig),
}

impl NetConfig {
    pub fn input(&self) -> usize {
        match self {
            NetConfig::Ffn(c) => c.input,
            NetConfig::Rnn(c) => c.input,
            NetConfig::Ret(c) => c.input,
        }
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        match self {
            NetConfig::Ffn(c) => c.param_count(),
            NetConfig::Rnn(c) => c.param_count(),
            NetConfig::Ret(c) => c.param_count(),
        }
    }
}

pub fn param_count(config: &NetConfig) -> usize {
    config.param_count()
}

#[derive(Clone, Debug)]
enum Arch {
    Ffn(Ffn),
    Rnn(Rnn),
    Ret(Ret),
}

/// Layer layout of a network. Parameter values live in a separate
/// [`ParamStore`], so the same layout serves `f32` and `f64` stores.
#[derive(Clone, Debug)]
pub struct Net {
    config: NetConfig,
    arch: Arch,
}

impl Net {
    pub fn build<S: Scalar, R: Rng>(config: &NetConfig, rng: &mut R) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let arch = match config {
            NetConfig::Ffn(c) => Arch::Ffn(Ffn::new(&mut store, rng, c)?),
            NetConfig::Rnn(c) => Arch::Rnn(Rnn::new(&mut store, rng, c)?),
            NetConfig::Ret(c) => Arch::Ret(Ret::new(&mut store, rng, c)?),
        };
        Ok((Self { config: config.clone(), arch }, store))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// `[B, L]` per-segment predictions in kWh.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, batch: &EncodedBatch<S>) -> Result<Var> {
        if batch.width != self.config.input() {
            return Err(CoreError::Validation(format!(
                "batch has {} features per segment, network expects {}",
                batch.width,
                self.config.input()
            )));
        }
        match &self.arch {
            Arch::Ffn(m) => m.forward(tape, batch),
            Arch::Rnn(m) => m.forward(tape, batch),
            Arch::Ret(m) => m.forward(tape, batch),
        }
    }

    /// Attention weights of every block for a RET network; empty otherwise.
    pub fn attention_maps<S: Scalar>(&self, tape: &mut Tape<'_, S>, batch: &EncodedBatch<S>) -> Result<Vec<Var>> {
        match &self.arch {
            Arch::Ret(m) => Ok(m.forward_traced(tape, batch, true)?.1),
            _ => Ok(Vec::new()),
        }
    }

    /// Inference in `f32`; returns unpadded kWh per route.
    pub fn predict_kwh(&self, params: &ParamStore<f32>, batch: &EncodedBatch<f32>) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::inference(params);
        let y = self.forward(&mut tape, batch)?;
        Ok(batch.split_rows(tape.value(y)))
    }
}
