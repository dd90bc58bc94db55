use crate::error::{GtrsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::skeleton::{init_learnable_logits, SkeletonGraph};
use crate::tape::{Tape, Var};

use super::Init;

/// Propagation matrix of a GCN layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Adjacency {
    /// Normalized structural prior, stored frozen.
    Fixed(ParamId),
    /// Trainable logits; the effective matrix is their row softmax.
    Learnable(ParamId),
}

impl Adjacency {
    pub fn fixed(init: &mut Init<'_>, prefix: &str, skel: &SkeletonGraph) -> Self {
        let id = init.tensor(format!("{prefix}.adjacency"), skel.normalized_adjacency(), false);
        Adjacency::Fixed(id)
    }

    pub fn learnable(init: &mut Init<'_>, prefix: &str, skel: &SkeletonGraph, noise_scale: f64) -> Result<Self> {
        let logits = init_learnable_logits(skel, init.rng, noise_scale)?;
        let id = init.tensor(format!("{prefix}.adjacency_logits"), logits, true);
        Ok(Adjacency::Learnable(id))
    }

    pub fn param(&self) -> ParamId {
        match *self {
            Adjacency::Fixed(id) | Adjacency::Learnable(id) => id,
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, Adjacency::Learnable(_))
    }

    pub fn matrix<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        match *self {
            Adjacency::Fixed(id) => Ok(tape.param(store, id)),
            Adjacency::Learnable(id) => tape.param(store, id).softmax_rows(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

/// `σ((Â · X · W) ⊙ G)` where `G` is an optional per-node, per-channel
/// modulation gain (initialized to ones).
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub adjacency: Adjacency,
    pub modulation: Option<ParamId>,
    pub activation: Activation,
    pub joints: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GcnLayer {
    pub fn new(
        init: &mut Init<'_>,
        prefix: &str,
        adjacency: Adjacency,
        joints: usize,
        in_dim: usize,
        out_dim: usize,
        modulation: bool,
    ) -> Self {
        let weight = init.glorot(format!("{prefix}.weight"), in_dim, out_dim);
        let modulation = modulation.then(|| init.ones(format!("{prefix}.modulation"), &[joints, out_dim]));
        GcnLayer {
            weight,
            adjacency,
            modulation,
            activation: Activation::Gelu,
            joints,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape != [self.joints, self.in_dim] {
            return Err(GtrsError::shape("gcn_forward", &shape, &[self.joints, self.in_dim]));
        }
        let a = self.adjacency.matrix(tape, store)?;
        let mut h = a.matmul(&x.matmul(&tape.param(store, self.weight))?)?;
        if let Some(m) = self.modulation {
            h = h.mul(&tape.param(store, m))?;
        }
        Ok(match self.activation {
            Activation::Gelu => h.gelu(),
            Activation::Identity => h,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::Rng;
    use crate::tape::gelu;
    use crate::tensor::Tensor;

    fn identity_layer(store: &mut ParamStore, skel: &SkeletonGraph, d: usize) -> GcnLayer {
        let mut rng = Rng::new(0);
        let mut init = Init::new(store, &mut rng);
        let adj = Adjacency::fixed(&mut init, "g", skel);
        let mut layer = GcnLayer::new(&mut init, "g", adj, skel.joint_count(), d, d, false);
        *init.store.value_mut(layer.weight) = Tensor::eye(d);
        layer.activation = Activation::Gelu;
        layer
    }

    #[test]
    fn identity_propagation_applies_gelu() {
        let skel = SkeletonGraph::isolated(4);
        let mut store = ParamStore::new();
        let layer = identity_layer(&mut store, &skel, 3);
        let tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[4, 3]));
        assert_eq!(layer.forward(&tape, &store, zero).unwrap().tensor(), Tensor::zeros(&[4, 3]));
        let x = Rng::new(3).normal_tensor(&[4, 3], 1.0);
        let y = layer.forward(&tape, &store, tape.constant(x.clone())).unwrap().tensor();
        assert_eq!(y, x.map(gelu));
    }

    #[test]
    fn path_graph_propagates_basis_vector() {
        let skel = SkeletonGraph::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1), (1, 2)],
        )
        .unwrap();
        let mut store = ParamStore::new();
        let mut layer = identity_layer(&mut store, &skel, 3);
        layer.activation = Activation::Identity;
        let tape = Tape::new();
        // X = e₁ placed on joint 0, feature 0
        let mut x = Tensor::zeros(&[3, 3]);
        x.set(0, 0, 1.0);
        let y = layer.forward(&tape, &store, tape.constant(x)).unwrap().tensor();
        let a = skel.normalized_adjacency();
        for i in 0..3 {
            assert!((y.get(i, 0) - a.get(i, 0)).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let skel = SkeletonGraph::isolated(4);
        let mut store = ParamStore::new();
        let layer = identity_layer(&mut store, &skel, 3);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 3]));
        assert!(layer.forward(&tape, &store, x).is_err());
    }
}
