//! Parameterized building blocks shared by the networks.

use rand::Rng;

use crate::error::Result;
use crate::params::{normal, xavier_uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fully connected layer `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, fan_in, fan_out, vec![fan_in, fan_out]),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?;
        Ok(Self { weight, bias, fan_in, fan_out })
    }

    pub fn num_weights(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.affine(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![dim], S::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b)
    }
}

/// Learned lookup table, initialized `N(0, 0.02²)`.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
}

impl Embedding {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        rows: usize,
        dim: usize,
    ) -> Result<Self> {
        let table = store.add(format!("{name}.table"), normal(rng, 0.02, vec![rows, dim]))?;
        Ok(Self { table, rows })
    }

    /// Rows `0..n` of the table.
    pub fn prefix<S: Scalar>(&self, tape: &mut Tape<'_, S>, n: usize) -> Result<Var> {
        let t = tape.param(self.table);
        tape.slice_rows(t, 0, n)
    }
}

/// GRU with one bias per gate; the reset gate is applied to the hidden
/// state before the candidate's recurrent product:
///
/// ```text
/// r = σ(x·Wr + h·Ur + br)
/// z = σ(x·Wz + h·Uz + bz)
/// n = tanh(x·Wn + (r⊙h)·Un + bn)
/// h' = (1 − z)⊙n + z⊙h
/// ```
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    /// `[input, 3·hidden]`, gate order r, z, n.
    pub input_weight: ParamId,
    /// `[hidden, 2·hidden]` for r and z.
    pub recurrent_rz: ParamId,
    /// `[hidden, hidden]` for the candidate.
    pub recurrent_n: ParamId,
    /// `[3·hidden]`.
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        // each gate block gets its own fan-based bound
        let mut w = Vec::with_capacity(input * 3 * hidden);
        let blocks: Vec<Tensor<S>> =
            (0..3).map(|_| xavier_uniform(rng, input, hidden, vec![input, hidden])).collect();
        for r in 0..input {
            for b in &blocks {
                w.extend_from_slice(b.row(r));
            }
        }
        let input_weight = store.add(format!("{name}.w_input"), Tensor::new(vec![input, 3 * hidden], w)?)?;
        let ur: Tensor<S> = xavier_uniform(rng, hidden, hidden, vec![hidden, hidden]);
        let uz: Tensor<S> = xavier_uniform(rng, hidden, hidden, vec![hidden, hidden]);
        let mut rz = Vec::with_capacity(hidden * 2 * hidden);
        for r in 0..hidden {
            rz.extend_from_slice(ur.row(r));
            rz.extend_from_slice(uz.row(r));
        }
        let recurrent_rz = store.add(format!("{name}.u_rz"), Tensor::new(vec![hidden, 2 * hidden], rz)?)?;
        let recurrent_n = store.add(format!("{name}.u_n"), xavier_uniform(rng, hidden, hidden, vec![hidden, hidden]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![3 * hidden]))?;
        Ok(Self { input_weight, recurrent_rz, recurrent_n, bias, input, hidden })
    }

    pub fn num_weights(input: usize, hidden: usize) -> usize {
        3 * (input * hidden + hidden * hidden + hidden)
    }

    /// Input contribution for every step at once: `[rows, 3·hidden]`.
    pub fn input_gates<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.input_weight), tape.param(self.bias));
        tape.affine(x, w, b)
    }

    /// One recurrence step given precomputed input gates `[batch, 3·hidden]`.
    pub fn step<S: Scalar>(&self, tape: &mut Tape<'_, S>, gates_x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let u_rz = tape.param(self.recurrent_rz);
        let u_n = tape.param(self.recurrent_n);
        let x_rz = tape.slice_cols(gates_x, 0, 2 * hd)?;
        let x_n = tape.slice_cols(gates_x, 2 * hd, hd)?;
        let h_rz = tape.matmul(h, u_rz)?;
        let pre_rz = tape.add(x_rz, h_rz)?;
        let rz = tape.sigmoid(pre_rz)?;
        let r = tape.slice_cols(rz, 0, hd)?;
        let z = tape.slice_cols(rz, hd, hd)?;
        let rh = tape.mul(r, h)?;
        let rh_n = tape.matmul(rh, u_n)?;
        let pre_n = tape.add(x_n, rh_n)?;
        let n = tape.tanh(pre_n)?;
        // (1 − z)⊙n + z⊙h = n + z⊙(h − n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}
