use serde::{Deserialize, Serialize};

use crate::error::{GtrsError, Result};
use crate::mrm::Mrm;
use crate::nn::Init;
use crate::pam::Pam;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::skeleton::SkeletonGraph;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub dim: usize,
    pub template_tokens: usize,
    pub mrm_blocks: usize,
    pub vertices: usize,
    pub fixed_blocks: usize,
    pub learnable_blocks: usize,
    pub heads: usize,
    pub se_reduction: usize,
    pub gcn_modulation: bool,
    /// Hidden width of the pose head; 0 means a single linear layer.
    pub pose_head_hidden: usize,
    pub adjacency_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 17,
            dim: 128,
            template_tokens: 15,
            mrm_blocks: 4,
            vertices: 6890,
            fixed_blocks: 1,
            learnable_blocks: 5,
            heads: 4,
            se_reduction: 4,
            gcn_modulation: true,
            pose_head_hidden: 0,
            adjacency_noise: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(GtrsError::Config(msg));
        if self.joints == 0 || self.template_tokens == 0 || self.mrm_blocks == 0 || self.vertices == 0 {
            return fail("joints, template_tokens, mrm_blocks and vertices must be positive".into());
        }
        if self.fixed_blocks + self.learnable_blocks == 0 {
            return fail("the pose module needs at least one block".into());
        }
        if self.dim < 2 {
            return fail(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.se_reduction == 0 || self.dim / self.se_reduction == 0 {
            return fail(format!("se_reduction {} is invalid for dim {}", self.se_reduction, self.dim));
        }
        if !(self.adjacency_noise >= 0.0 && self.adjacency_noise.is_finite()) {
            return fail(format!("adjacency_noise must be finite and >= 0, got {}", self.adjacency_noise));
        }
        Ok(())
    }
}

/// Layer structure of the full network; parameter values live in a
/// separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gtrs {
    pub pam: Pam,
    pub mrm: Mrm,
}

pub struct Forward<'t> {
    pub pose_feature: Var<'t>,
    pub pose3d: Var<'t>,
    pub template_feature: Var<'t>,
    pub fused: Var<'t>,
    pub mesh: Var<'t>,
}

impl Gtrs {
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        pose2d: &Tensor,
        template: &Tensor,
    ) -> Result<Forward<'t>> {
        let pam = self.pam.forward(tape, store, tape.constant(pose2d.clone()))?;
        let mrm = self.mrm.forward(tape, store, pam.feature, tape.constant(template.clone()))?;
        Ok(Forward {
            pose_feature: pam.feature,
            pose3d: pam.pose3d,
            template_feature: mrm.template_feature,
            fused: mrm.fused,
            mesh: mrm.mesh,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GtrsModel {
    pub config: ModelConfig,
    pub skeleton: SkeletonGraph,
    pub net: Gtrs,
    pub store: ParamStore,
}

impl GtrsModel {
    pub fn new(config: ModelConfig, skeleton: SkeletonGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let pam = Pam::new(&mut init, &config, &skeleton)?;
        let mrm = Mrm::new(&mut init, &config)?;
        Ok(GtrsModel {
            config,
            skeleton,
            net: Gtrs { pam, mrm },
            store,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, pose2d: &Tensor, template: &Tensor) -> Result<Forward<'t>> {
        self.net.forward(tape, &self.store, pose2d, template)
    }

    /// Mesh prediction without keeping the tape around.
    pub fn predict(&self, pose2d: &Tensor, template: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let out = self.forward(&tape, pose2d, template)?;
        Ok((out.pose3d.tensor(), out.mesh.tensor()))
    }
}
