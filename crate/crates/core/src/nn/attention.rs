use crate::error::{GtrsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{concat_cols, Tape, Var};
use crate::tensor::Tensor;

use super::Init;

/// Multi-head scaled dot-product self-attention with output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_out: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(GtrsError::Config(format!(
                "embedding dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            w_q: init.glorot(format!("{prefix}.w_q"), dim, dim),
            w_k: init.glorot(format!("{prefix}.w_k"), dim, dim),
            w_v: init.glorot(format!("{prefix}.w_v"), dim, dim),
            w_out: init.glorot(format!("{prefix}.w_out"), dim, dim),
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(tape, store, x)?.0)
    }

    /// Also returns the per-head attention matrices (`n×n`, rows sum to 1).
    pub fn forward_with_weights<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
    ) -> Result<(Var<'t>, Vec<Tensor>)> {
        let (n, d_model) = x.value().dims2()?;
        if d_model != self.dim || n == 0 {
            return Err(GtrsError::shape("mha_forward", &[n, d_model], &[n, self.dim]));
        }
        let q = x.matmul(&tape.param(store, self.w_q))?;
        let k = x.matmul(&tape.param(store, self.w_k))?;
        let v = x.matmul(&tape.param(store, self.w_v))?;
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * d, d)?;
            let kh = k.slice_cols(h * d, d)?;
            let vh = v.slice_cols(h * d, d)?;
            let attn = qh.matmul_nt(&kh)?.scale(scale).softmax_rows()?;
            weights.push(attn.tensor());
            heads.push(attn.matmul(&vh)?);
        }
        let out = concat_cols(&heads)?.matmul(&tape.param(store, self.w_out))?;
        Ok((out, weights))
    }
}
