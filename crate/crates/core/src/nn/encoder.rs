use crate::error::{GtrsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

use super::{Init, Linear, MultiHeadAttention, PointwiseConv};

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gain: init.ones(format!("{prefix}.gain"), &[dim]),
            bias: init.zeros(format!("{prefix}.bias"), &[dim]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&tape.param(store, self.gain), &tape.param(store, self.bias))
    }
}

/// Squeeze-and-excitation channel gating.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub down: Linear,
    pub up: Linear,
}

impl SeBlock {
    pub fn new(init: &mut Init<'_>, prefix: &str, dim: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || dim / reduction == 0 {
            return Err(GtrsError::Config(format!(
                "SE reduction {reduction} is invalid for dimension {dim}"
            )));
        }
        let hidden = dim / reduction;
        Ok(SeBlock {
            down: Linear::new(init, &format!("{prefix}.down"), dim, hidden, true),
            up: Linear::new(init, &format!("{prefix}.up"), hidden, dim, true),
        })
    }

    /// Channel gate `1×D`, every entry in (0, 1).
    pub fn gate<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let squeeze = x.mean_rows()?;
        let hidden = self.down.forward(tape, store, squeeze)?.gelu();
        Ok(self.up.forward(tape, store, hidden)?.sigmoid())
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let gate = self.gate(tape, store, x)?;
        x.mul_row(&gate)
    }
}

/// Pre-norm transformer encoder with a token-mixing convolution branch in
/// parallel to attention and SE gating in place of the feed-forward layer:
///
/// ```text
/// X' = MHA(LN₁(X)) + Conv(LN₁(X)) + X
/// Y  = SE(LN₂(X')) + X'
/// ```
#[derive(Clone, Debug)]
pub struct ModifiedEncoder {
    pub norm1: LayerNorm,
    pub mha: MultiHeadAttention,
    pub conv: PointwiseConv,
    pub norm2: LayerNorm,
    pub se: SeBlock,
    pub tokens: usize,
    pub dim: usize,
}

impl ModifiedEncoder {
    pub fn new(
        init: &mut Init<'_>,
        prefix: &str,
        tokens: usize,
        dim: usize,
        heads: usize,
        se_reduction: usize,
    ) -> Result<Self> {
        Ok(ModifiedEncoder {
            norm1: LayerNorm::new(init, &format!("{prefix}.norm1"), dim),
            mha: MultiHeadAttention::new(init, &format!("{prefix}.mha"), dim, heads)?,
            conv: PointwiseConv::new(init, &format!("{prefix}.conv"), tokens, tokens),
            norm2: LayerNorm::new(init, &format!("{prefix}.norm2"), dim),
            se: SeBlock::new(init, &format!("{prefix}.se"), dim, se_reduction)?,
            tokens,
            dim,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape != [self.tokens, self.dim] {
            return Err(GtrsError::shape("encoder_forward", &shape, &[self.tokens, self.dim]));
        }
        let n1 = self.norm1.forward(tape, store, x)?;
        let attn = self.mha.forward(tape, store, n1)?;
        let conv = self.conv.forward(tape, store, n1)?;
        let mid = attn.add(&conv)?.add(&x)?;
        let n2 = self.norm2.forward(tape, store, mid)?;
        self.se.forward(tape, store, n2)?.add(&mid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, Probe};
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn encoder(tokens: usize, dim: usize, seed: u64) -> (ParamStore, ModifiedEncoder) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let enc = ModifiedEncoder::new(&mut Init::new(&mut store, &mut rng), "enc", tokens, dim, 4, 4).unwrap();
        (store, enc)
    }

    #[test]
    fn se_param_count() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        SeBlock::new(&mut Init::new(&mut store, &mut rng), "se", 128, 4).unwrap();
        assert_eq!(store.trainable_scalars(), 8352);
    }

    #[test]
    fn se_with_zero_up_halves_input() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let se = SeBlock::new(&mut Init::new(&mut store, &mut rng), "se", 8, 4).unwrap();
        *store.value_mut(se.up.weight) = Tensor::zeros(&[2, 8]);
        let x = Rng::new(2).normal_tensor(&[3, 8], 1.0);
        let tape = Tape::new();
        let y = se.forward(&tape, &store, tape.constant(x.clone())).unwrap().tensor();
        assert_eq!(y, x.scale(0.5));
        let zero = tape.constant(Tensor::zeros(&[3, 8]));
        assert_eq!(se.forward(&tape, &store, zero).unwrap().tensor(), Tensor::zeros(&[3, 8]));
    }

    #[test]
    fn se_gate_in_open_unit_interval() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let se = SeBlock::new(&mut Init::new(&mut store, &mut rng), "se", 16, 4).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Rng::new(4).normal_tensor(&[5, 16], 2.0));
        let gate = se.gate(&tape, &store, x).unwrap().tensor();
        assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn zeroed_encoder_is_identity() {
        let (mut store, enc) = encoder(6, 16, 5);
        for id in store.trainable_ids() {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(&shape);
        }
        let x = Rng::new(6).normal_tensor(&[6, 16], 1.0);
        let tape = Tape::new();
        let y = enc.forward(&tape, &store, tape.constant(x.clone())).unwrap().tensor();
        assert_eq!(y, x);
    }

    #[test]
    fn encoder_preserves_shape_and_checks_tokens() {
        let (store, enc) = encoder(17, 32, 7);
        let tape = Tape::new();
        let x = tape.constant(Rng::new(8).normal_tensor(&[17, 32], 1.0));
        assert_eq!(enc.forward(&tape, &store, x).unwrap().shape(), vec![17, 32]);
        let bad = tape.constant(Tensor::zeros(&[16, 32]));
        assert!(enc.forward(&tape, &store, bad).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut store, enc) = encoder(5, 16, 9);
        let x = Rng::new(10).normal_tensor(&[5, 16], 1.0);
        let target = Rng::new(11).normal_tensor(&[5, 16], 1.0);
        let loss = |tape: &Tape, store: &ParamStore| -> Result<f64> {
            let y = enc.forward(tape, store, tape.constant(x.clone()))?;
            let d = y.sub(&tape.constant(target.clone()))?;
            let l = d.mul(&d)?.sum();
            Ok(l.item())
        };
        let tape = Tape::new();
        let y = enc.forward(&tape, &store, tape.constant(x.clone())).unwrap();
        let d = y.sub(&tape.constant(target.clone())).unwrap();
        let l = d.mul(&d).unwrap().sum();
        let grads = tape.backward(l, &store).unwrap();
        let report = check_gradients(
            |s| {
                let t = Tape::new();
                Ok(Probe {
                    value: loss(&t, s)?,
                    piece: Vec::new(),
                })
            },
            &grads,
            &mut store,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.checked > 1000);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
