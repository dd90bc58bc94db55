//! Pose analysis: embed the 2D pose, run parallel graph-transformer blocks on
//! the same embedding, fuse them with a token-mixing convolution and regress
//! an intermediate root-relative 3D pose.

use crate::error::{GtrsError, Result};
use crate::model::ModelConfig;
use crate::nn::{Adjacency, BlockShape, GraphTransformerBlock, Init, Linear, PointwiseConv};
use crate::params::ParamStore;
use crate::skeleton::SkeletonGraph;
use crate::tape::{concat_rows, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Pam {
    pub embed: Linear,
    pub blocks: Vec<GraphTransformerBlock>,
    pub fusion: PointwiseConv,
    pub pose_head: Vec<Linear>,
    pub joints: usize,
    pub dim: usize,
}

pub struct PamOutput<'t> {
    pub feature: Var<'t>,
    pub pose3d: Var<'t>,
}

/// `J × (B·J)` selector averaging the `B` stacked block outputs joint-wise.
pub fn averaging_fusion_weight(joints: usize, blocks: usize) -> Tensor {
    let mut w = Tensor::zeros(&[joints, blocks * joints]);
    for b in 0..blocks {
        for j in 0..joints {
            w.set(j, b * joints + j, 1.0 / blocks as f64);
        }
    }
    w
}

impl Pam {
    pub fn new(init: &mut Init<'_>, config: &ModelConfig, skel: &SkeletonGraph) -> Result<Self> {
        let (j, d) = (config.joints, config.dim);
        if skel.joint_count() != j {
            return Err(GtrsError::Config(format!(
                "skeleton has {} joints but the model expects {j}",
                skel.joint_count()
            )));
        }
        let shape = BlockShape {
            dim: d,
            heads: config.heads,
            se_reduction: config.se_reduction,
            modulation: config.gcn_modulation,
        };
        let embed = Linear::new(init, "pam.embed", 2, d, true);
        let total = config.fixed_blocks + config.learnable_blocks;
        let mut blocks = Vec::with_capacity(total);
        for b in 0..total {
            let prefix = format!("pam.block{b}");
            let adjacency = if b < config.fixed_blocks {
                Adjacency::fixed(init, &prefix, skel)
            } else {
                Adjacency::learnable(init, &prefix, skel, config.adjacency_noise)?
            };
            blocks.push(GraphTransformerBlock::new(init, &prefix, skel, adjacency, shape)?);
        }
        let fusion = PointwiseConv::with_weight(init, "pam.fusion", averaging_fusion_weight(j, total));
        let pose_head = match config.pose_head_hidden {
            0 => vec![Linear::new(init, "pam.pose_head", d, 3, true)],
            h => vec![
                Linear::new(init, "pam.pose_head.0", d, h, true),
                Linear::new(init, "pam.pose_head.1", h, 3, true),
            ],
        };
        Ok(Pam {
            embed,
            blocks,
            fusion,
            pose_head,
            joints: j,
            dim: d,
        })
    }

    pub fn embed_pose<'t>(&self, tape: &'t Tape, store: &ParamStore, pose2d: Var<'t>) -> Result<Var<'t>> {
        let shape = pose2d.shape();
        if shape != [self.joints, 2] {
            return Err(GtrsError::shape("embed_pose", &shape, &[self.joints, 2]));
        }
        let _scope = tape.scope("pam.embed");
        self.embed.forward(tape, store, pose2d)
    }

    /// Stacks the block outputs along the token axis (declaration order) and
    /// mixes them back down to `J` tokens.
    pub fn fuse<'t>(&self, tape: &'t Tape, store: &ParamStore, outputs: &[Var<'t>]) -> Result<Var<'t>> {
        if outputs.len() != self.blocks.len() {
            return Err(GtrsError::Contract(format!(
                "fusion expects {} block outputs, got {}",
                self.blocks.len(),
                outputs.len()
            )));
        }
        let _scope = tape.scope("pam.fusion");
        self.fusion.forward(tape, store, concat_rows(outputs)?)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, pose2d: Var<'t>) -> Result<PamOutput<'t>> {
        let order: Vec<usize> = (0..self.blocks.len()).collect();
        self.forward_in_order(tape, store, pose2d, &order)
    }

    /// Same as [`Pam::forward`] but evaluates the parallel blocks in the
    /// given order. The result does not depend on `order`.
    pub fn forward_in_order<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        pose2d: Var<'t>,
        order: &[usize],
    ) -> Result<PamOutput<'t>> {
        let x = self.embed_pose(tape, store, pose2d)?;
        let mut outputs: Vec<Option<Var<'t>>> = vec![None; self.blocks.len()];
        for &b in order {
            let _scope = tape.scope(&format!("pam.block{b}"));
            outputs[b] = Some(self.blocks[b].forward(tape, store, x)?);
        }
        let outputs = outputs
            .into_iter()
            .enumerate()
            .map(|(b, o)| o.ok_or_else(|| GtrsError::Contract(format!("block {b} missing from evaluation order"))))
            .collect::<Result<Vec<_>>>()?;
        let feature = self.fuse(tape, store, &outputs)?;
        let pose3d = self.regress_pose(tape, store, feature)?;
        Ok(PamOutput { feature, pose3d })
    }

    pub fn regress_pose<'t>(&self, tape: &'t Tape, store: &ParamStore, feature: Var<'t>) -> Result<Var<'t>> {
        let _scope = tape.scope("pam.pose_head");
        let mut h = feature;
        for (i, layer) in self.pose_head.iter().enumerate() {
            if i > 0 {
                h = h.gelu();
            }
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 16,
            fixed_blocks: 1,
            learnable_blocks: 2,
            ..ModelConfig::default()
        }
    }

    fn build(config: &ModelConfig, seed: u64) -> (ParamStore, Pam) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let pam = Pam::new(&mut Init::new(&mut store, &mut rng), config, &SkeletonGraph::h36m()).unwrap();
        (store, pam)
    }

    #[test]
    fn default_shapes() {
        let (store, pam) = build(&ModelConfig::default(), 0);
        assert_eq!(pam.blocks.len(), 6);
        assert_eq!(pam.blocks.iter().filter(|b| b.gcn.adjacency.is_learnable()).count(), 5);
        assert!(!pam.blocks[0].gcn.adjacency.is_learnable());
        let tape = Tape::new();
        let pose = tape.constant(Rng::new(1).normal_tensor(&[17, 2], 1.0));
        let out = pam.forward(&tape, &store, pose).unwrap();
        assert_eq!(out.feature.shape(), vec![17, 128]);
        assert_eq!(out.pose3d.shape(), vec![17, 3]);
    }

    #[test]
    fn embedding_is_shared_per_joint() {
        let (store, pam) = build(&tiny(), 2);
        let tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[17, 2]));
        assert_eq!(pam.embed_pose(&tape, &store, zero).unwrap().tensor(), Tensor::zeros(&[17, 16]));
        let mut pose = Rng::new(3).normal_tensor(&[17, 2], 1.0);
        let (a, b) = (pose.get(4, 0), pose.get(4, 1));
        pose.set(9, 0, a);
        pose.set(9, 1, b);
        let e = pam.embed_pose(&tape, &store, tape.constant(pose)).unwrap().tensor();
        assert_eq!(e.row(4), e.row(9));
        let wrong = tape.constant(Tensor::zeros(&[16, 2]));
        assert!(pam.embed_pose(&tape, &store, wrong).is_err());
    }

    #[test]
    fn single_block_fusion_is_identity_selector() {
        let config = ModelConfig {
            learnable_blocks: 0,
            ..tiny()
        };
        let (store, pam) = build(&config, 4);
        let tape = Tape::new();
        let x = Rng::new(5).normal_tensor(&[17, 16], 1.0);
        let y = pam.fuse(&tape, &store, &[tape.constant(x.clone())]).unwrap().tensor();
        assert_eq!(y, x);
        assert!(pam.fuse(&tape, &store, &[]).is_err());
    }

    #[test]
    fn evaluation_order_does_not_change_output() {
        let (store, pam) = build(&tiny(), 6);
        let pose = Rng::new(7).normal_tensor(&[17, 2], 1.0);
        let tape = Tape::new();
        let fwd = pam.forward(&tape, &store, tape.constant(pose.clone())).unwrap();
        let rev = pam.forward_in_order(&tape, &store, tape.constant(pose), &[2, 0, 1]).unwrap();
        assert_eq!(fwd.feature.tensor(), rev.feature.tensor());
        assert_eq!(fwd.pose3d.tensor(), rev.pose3d.tensor());
    }

    #[test]
    fn swapping_blocks_with_fusion_columns_is_invariant() {
        let (mut store, pam) = build(&tiny(), 8);
        let pose = Rng::new(9).normal_tensor(&[17, 2], 1.0);
        // random fusion weights so the swap is not trivially symmetric
        *store.value_mut(pam.fusion.weight) = Rng::new(10).normal_tensor(&[17, 51], 0.3);
        let tape = Tape::new();
        let before = pam.forward(&tape, &store, tape.constant(pose.clone())).unwrap().feature.tensor();

        let swap = |store: &mut ParamStore, a: &str, b: &str| {
            let ia = store.id(a).unwrap();
            let ib = store.id(b).unwrap();
            let va = store.value(ia).clone();
            let vb = std::mem::replace(store.value_mut(ib), va);
            *store.value_mut(ia) = vb;
        };
        let names: Vec<String> = store
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|n| n.starts_with("pam.block1."))
            .collect();
        for n in names {
            swap(&mut store, &n, &n.replacen("pam.block1.", "pam.block2.", 1));
        }
        let w = store.value_mut(pam.fusion.weight);
        for r in 0..17 {
            for j in 0..17 {
                let (c1, c2) = (17 + j, 34 + j);
                let (a, b) = (w.get(r, c1), w.get(r, c2));
                w.set(r, c1, b);
                w.set(r, c2, a);
            }
        }
        let after = pam.forward(&tape, &store, tape.constant(pose)).unwrap().feature.tensor();
        let diff = before.sub(&after).unwrap().max_abs();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn gradient_reaches_learnable_logits_not_fixed_matrix() {
        let (store, pam) = build(&tiny(), 11);
        let tape = Tape::new();
        let pose = tape.constant(Rng::new(12).normal_tensor(&[17, 2], 1.0));
        let out = pam.forward(&tape, &store, pose).unwrap();
        let loss = out.pose3d.mul(&out.pose3d).unwrap().sum();
        let grads = tape.backward(loss, &store).unwrap();
        for (id, p) in store.iter() {
            if p.trainable {
                assert!(grads.get(id).is_some_and(|g| g.max_abs() > 0.0), "{} has no gradient", p.name);
            } else {
                assert!(grads.get(id).is_none());
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (store, pam) = build(&tiny(), 13);
        let (store2, pam2) = build(&tiny(), 13);
        let pose = Rng::new(14).normal_tensor(&[17, 2], 1.0);
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = pam.forward(&t1, &store, t1.constant(pose.clone())).unwrap().pose3d.tensor();
        let b = pam2.forward(&t2, &store2, t2.constant(pose)).unwrap().pose3d.tensor();
        assert_eq!(a, b);
    }
}
