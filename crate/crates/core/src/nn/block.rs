use crate::error::Result;
use crate::params::ParamStore;
use crate::skeleton::SkeletonGraph;
use crate::tape::{Tape, Var};

use super::{Adjacency, GcnLayer, Init, ModifiedEncoder};

/// Hyper-parameters shared by every graph-transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub se_reduction: usize,
    pub modulation: bool,
}

/// GCN layer followed by a [`ModifiedEncoder`] over the joint tokens.
#[derive(Clone, Debug)]
pub struct GraphTransformerBlock {
    pub gcn: GcnLayer,
    pub encoder: ModifiedEncoder,
}

impl GraphTransformerBlock {
    pub fn new(
        init: &mut Init<'_>,
        prefix: &str,
        skel: &SkeletonGraph,
        adjacency: Adjacency,
        shape: BlockShape,
    ) -> Result<Self> {
        let j = skel.joint_count();
        let gcn = GcnLayer::new(
            init,
            &format!("{prefix}.gcn"),
            adjacency,
            j,
            shape.dim,
            shape.dim,
            shape.modulation,
        );
        let encoder = ModifiedEncoder::new(
            init,
            &format!("{prefix}.encoder"),
            j,
            shape.dim,
            shape.heads,
            shape.se_reduction,
        )?;
        Ok(GraphTransformerBlock { gcn, encoder })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.gcn.forward(tape, store, x)?;
        self.encoder.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    const SHAPE: BlockShape = BlockShape {
        dim: 128,
        heads: 4,
        se_reduction: 4,
        modulation: true,
    };

    #[test]
    fn default_block_shape() {
        let skel = SkeletonGraph::h36m();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let mut init = Init::new(&mut store, &mut rng);
        let adj = Adjacency::fixed(&mut init, "b", &skel);
        let block = GraphTransformerBlock::new(&mut init, "b", &skel, adj, SHAPE).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Rng::new(1).normal_tensor(&[17, 128], 1.0));
        assert_eq!(block.forward(&tape, &store, x).unwrap().shape(), vec![17, 128]);
        let zero = tape.constant(Tensor::zeros(&[17, 128]));
        assert_eq!(block.forward(&tape, &store, zero).unwrap().tensor(), Tensor::zeros(&[17, 128]));
    }

    #[test]
    fn gradient_reaches_learnable_adjacency_only() {
        let skel = SkeletonGraph::h36m();
        let shape = BlockShape { dim: 16, ..SHAPE };
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let mut init = Init::new(&mut store, &mut rng);
        let fixed = Adjacency::fixed(&mut init, "f", &skel);
        let learn = Adjacency::learnable(&mut init, "l", &skel, 0.01).unwrap();
        let bf = GraphTransformerBlock::new(&mut init, "f", &skel, fixed, shape).unwrap();
        let bl = GraphTransformerBlock::new(&mut init, "l", &skel, learn, shape).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Rng::new(3).normal_tensor(&[17, 16], 1.0));
        let y = bf.forward(&tape, &store, x).unwrap().add(&bl.forward(&tape, &store, x).unwrap()).unwrap();
        let loss = y.mul(&y).unwrap().sum();
        let grads = tape.backward(loss, &store).unwrap();
        assert!(grads.get(fixed.param()).is_none());
        let g = grads.get(learn.param()).unwrap();
        assert!(g.max_abs() > 0.0);
    }
}
