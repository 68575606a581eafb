//! Decoder-only transformer over route segments.

use std::fmt;
use std::str::FromStr;

use evroute_nn::{Embedding, LayerNorm, Linear, ParamStore, Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::EncodedBatch;
use crate::domain::MAX_LEN;
use crate::error::{CoreError, Result};

pub const HEAD_DIM: usize = 32;
pub const MLP_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetConfig {
    pub input: usize,
    pub blocks: usize,
    pub dim: usize,
    pub context: usize,
}

impl RetConfig {
    pub fn new(input: usize, blocks: usize, dim: usize) -> Result<Self> {
        let c = Self { input, blocks, dim, context: MAX_LEN };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % HEAD_DIM != 0 {
            return Err(CoreError::Validation(format!("model dimension {} is not a positive multiple of {HEAD_DIM}", self.dim)));
        }
        if self.blocks == 0 || self.context == 0 || self.input == 0 {
            return Err(CoreError::Validation("blocks, context and input width must be positive".into()));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.dim / HEAD_DIM
    }

    /// Weights inside the transformer blocks alone.
    pub fn block_param_count(&self) -> usize {
        let d = self.dim;
        let h = MLP_EXPANSION * d;
        let per_block = 2 * 2 * d
            + Linear::num_weights(d, 3 * d)
            + Linear::num_weights(d, d)
            + Linear::num_weights(d, h)
            + Linear::num_weights(h, d);
        self.blocks * per_block
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim;
        Linear::num_weights(self.input, d) + self.context * d + self.block_param_count() + 2 * d + Linear::num_weights(d, 1)
    }
}

/// The three named sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RetPreset {
    Ret20k,
    Ret300k,
    Ret3m,
}

impl RetPreset {
    pub const ALL: [RetPreset; 3] = [RetPreset::Ret20k, RetPreset::Ret300k, RetPreset::Ret3m];

    pub fn blocks(self) -> usize {
        match self {
            RetPreset::Ret20k => 1,
            RetPreset::Ret300k => 3,
            RetPreset::Ret3m => 6,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            RetPreset::Ret20k => 32,
            RetPreset::Ret300k => 96,
            RetPreset::Ret3m => 192,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RetPreset::Ret20k => "ret-20k",
            RetPreset::Ret300k => "ret-300k",
            RetPreset::Ret3m => "ret-3m",
        }
    }

    pub fn config(self, input: usize) -> RetConfig {
        RetConfig::new(input, self.blocks(), self.dim()).expect("presets are valid")
    }
}

impl fmt::Display for RetPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RetPreset {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| CoreError::UnknownModel {
            name: s.into(),
            valid: Self::ALL.map(|p| p.name()).join(", "),
        })
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    qkv: Linear,
    attn_out: Linear,
    ln_mlp: LayerNorm,
    fc: Linear,
    fc_out: Linear,
}

/// Feature projection, learned positions, pre-norm causal blocks, final
/// layer norm and a scalar head.
#[derive(Clone, Debug)]
pub struct Ret {
    config: RetConfig,
    proj: Linear,
    pos: Embedding,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    head: Linear,
}

impl Ret {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, config: &RetConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let proj = Linear::new(store, rng, "ret.proj", config.input, d)?;
        let pos = Embedding::new(store, rng, "ret.pos", config.context, d)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let p = format!("ret.block{i}");
            blocks.push(Block {
                ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d)?,
                qkv: Linear::new(store, rng, &format!("{p}.qkv"), d, 3 * d)?,
                attn_out: Linear::new(store, rng, &format!("{p}.attn_out"), d, d)?,
                ln_mlp: LayerNorm::new(store, &format!("{p}.ln_mlp"), d)?,
                fc: Linear::new(store, rng, &format!("{p}.fc"), d, MLP_EXPANSION * d)?,
                fc_out: Linear::new(store, rng, &format!("{p}.fc_out"), MLP_EXPANSION * d, d)?,
            });
        }
        let ln_final = LayerNorm::new(store, "ret.ln_final", d)?;
        let head = Linear::new(store, rng, "ret.head", d, 1)?;
        Ok(Self { config: config.clone(), proj, pos, blocks, ln_final, head })
    }

    /// `[B, L]` predictions in kWh.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, batch: &EncodedBatch<S>) -> Result<Var> {
        Ok(self.forward_traced(tape, batch, false)?.0)
    }

    /// Also returns each block's attention weights, `[B·heads, L, L]`.
    pub fn forward_traced<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        batch: &EncodedBatch<S>,
        keep_attention: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let (b, l) = (batch.batch_size(), batch.padded_len);
        if l > self.config.context {
            return Err(CoreError::Length { len: l, max: self.config.context });
        }
        let heads = self.config.heads();
        let d = self.config.dim;
        let x = tape.input(batch.features.clone())?;
        let x = self.proj.forward(tape, x)?;
        let pos = self.pos.prefix(tape, l)?;
        let mut h = tape.add_tiled(x, pos)?;
        let mut maps = Vec::new();
        for blk in &self.blocks {
            let a = blk.ln_attn.forward(tape, h)?;
            let qkv = blk.qkv.forward(tape, a)?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k = tape.slice_cols(qkv, d, d)?;
            let v = tape.slice_cols(qkv, 2 * d, d)?;
            let q = tape.split_heads(q, b, l, heads)?;
            let k = tape.split_heads(k, b, l, heads)?;
            let v = tape.split_heads(v, b, l, heads)?;
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, 1.0 / (HEAD_DIM as f64).sqrt())?;
            let scores = tape.causal_masked_fill(scores)?;
            let p = tape.softmax_last_dim(scores)?;
            if keep_attention {
                maps.push(p);
            }
            let ctx = tape.bmm(p, v, false)?;
            let ctx = tape.merge_heads(ctx, b, l, heads)?;
            let o = blk.attn_out.forward(tape, ctx)?;
            h = tape.add(h, o)?;

            let m = blk.ln_mlp.forward(tape, h)?;
            let m = blk.fc.forward(tape, m)?;
            let m = tape.gelu(m)?;
            let m = blk.fc_out.forward(tape, m)?;
            h = tape.add(h, m)?;
        }
        let h = self.ln_final.forward(tape, h)?;
        let y = self.head.forward(tape, h)?;
        Ok((tape.reshape(y, &[b, l])?, maps))
    }
}
