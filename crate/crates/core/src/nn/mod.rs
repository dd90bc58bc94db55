//! Reusable layers. Each layer owns only [`ParamId`] handles; values live in
//! a [`ParamStore`] and every forward pass records onto a caller-supplied
//! [`Tape`].

mod attention;
mod block;
mod encoder;
mod gcn;

pub use attention::MultiHeadAttention;
pub use block::{BlockShape, GraphTransformerBlock};
pub use encoder::{LayerNorm, ModifiedEncoder, SeBlock};
pub use gcn::{Activation, Adjacency, GcnLayer};

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Creates named parameters with deterministic initial values.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Init { store, rng }
    }

    pub fn glorot(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let value = self.rng.glorot(fan_in, fan_out);
        self.store.add(name, value, true)
    }

    /// Glorot-initialized `rows × cols` matrix that maps `cols` inputs to
    /// `rows` outputs (left-multiplying token mixers).
    pub fn glorot_left(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let value = self
            .rng
            .glorot(cols, rows)
            .reshape(&[rows, cols])
            .expect("same element count");
        self.store.add(name, value, true)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape), true)
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, 1.0), true)
    }

    pub fn tensor(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.store.add(name, value, trainable)
    }
}

/// `x · W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = init.glorot(format!("{prefix}.weight"), in_dim, out_dim);
        let bias = bias.then(|| init.zeros(format!("{prefix}.bias"), &[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(&tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add_row(&tape.param(store, b)),
            None => Ok(y),
        }
    }
}

/// 1×1 convolution over token channels: `W · X + b` with `W: out×in` mixing
/// rows (tokens) and `b` one offset per output token.
#[derive(Clone, Debug)]
pub struct PointwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_tokens: usize,
    pub out_tokens: usize,
}

impl PointwiseConv {
    pub fn new(init: &mut Init<'_>, prefix: &str, in_tokens: usize, out_tokens: usize) -> Self {
        let weight = init.glorot_left(format!("{prefix}.weight"), out_tokens, in_tokens);
        let bias = init.zeros(format!("{prefix}.bias"), &[out_tokens]);
        PointwiseConv {
            weight,
            bias,
            in_tokens,
            out_tokens,
        }
    }

    pub fn with_weight(init: &mut Init<'_>, prefix: &str, weight: Tensor) -> Self {
        let (out_tokens, in_tokens) = (weight.rows(), weight.cols());
        let weight = init.tensor(format!("{prefix}.weight"), weight, true);
        let bias = init.zeros(format!("{prefix}.bias"), &[out_tokens]);
        PointwiseConv {
            weight,
            bias,
            in_tokens,
            out_tokens,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        tape.param(store, self.weight)
            .matmul(&x)?
            .add_col(&tape.param(store, self.bias))
    }
}
