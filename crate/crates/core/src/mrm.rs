//! Mesh regression: embed the template into a few tokens, run dual-branch
//! blocks over pose and template tokens, then upsample to vertices.

use crate::error::{GtrsError, Result};
use crate::model::ModelConfig;
use crate::nn::{Init, Linear, ModifiedEncoder};
use crate::params::{ParamId, ParamStore};
use crate::tape::{concat_rows, Tape, Var};

/// `token_map · (template · W + b)`, computed as
/// `(token_map · template) · W + rowsum(token_map) ⊗ b`.
#[derive(Clone, Debug)]
pub struct TemplateEmbed {
    pub token_map: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub tokens: usize,
    pub vertices: usize,
}

impl TemplateEmbed {
    pub fn new(init: &mut Init<'_>, prefix: &str, tokens: usize, vertices: usize, dim: usize) -> Self {
        TemplateEmbed {
            token_map: init.glorot_left(format!("{prefix}.token_map"), tokens, vertices),
            weight: init.glorot(format!("{prefix}.channel.weight"), 3, dim),
            bias: init.zeros(format!("{prefix}.channel.bias"), &[1, dim]),
            tokens,
            vertices,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, template: Var<'t>) -> Result<Var<'t>> {
        let shape = template.shape();
        if shape != [self.vertices, 3] {
            return Err(GtrsError::shape("embed_template", &shape, &[self.vertices, 3]));
        }
        let map = tape.param(store, self.token_map);
        let mixed = map.matmul(&template)?.matmul(&tape.param(store, self.weight))?;
        let offset = map.sum_cols()?.matmul(&tape.param(store, self.bias))?;
        mixed.add(&offset)
    }
}

/// Separate pose and template encoders followed by a fusion encoder over
/// the concatenated tokens (pose tokens first).
#[derive(Clone, Debug)]
pub struct DualBranchBlock {
    pub pose_encoder: ModifiedEncoder,
    pub temp_encoder: ModifiedEncoder,
    pub fusion_encoder: ModifiedEncoder,
    pub joints: usize,
    pub tokens: usize,
}

pub struct DualBranchOutput<'t> {
    pub pose: Var<'t>,
    pub template: Var<'t>,
    pub fused: Var<'t>,
}

impl DualBranchBlock {
    pub fn new(init: &mut Init<'_>, prefix: &str, config: &ModelConfig) -> Result<Self> {
        let (j, t, d) = (config.joints, config.template_tokens, config.dim);
        let enc = |init: &mut Init<'_>, name: &str, n: usize| {
            ModifiedEncoder::new(init, &format!("{prefix}.{name}"), n, d, config.heads, config.se_reduction)
        };
        Ok(DualBranchBlock {
            pose_encoder: enc(init, "pose_encoder", j)?,
            temp_encoder: enc(init, "temp_encoder", t)?,
            fusion_encoder: enc(init, "fusion_encoder", j + t)?,
            joints: j,
            tokens: t,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        pose: Var<'t>,
        template: Var<'t>,
    ) -> Result<DualBranchOutput<'t>> {
        let p = self.pose_encoder.forward(tape, store, pose)?;
        let t = self.temp_encoder.forward(tape, store, template)?;
        let fused = self.fusion_encoder.forward(tape, store, concat_rows(&[p, t])?)?;
        Ok(DualBranchOutput {
            pose: fused.slice_rows(0, self.joints)?,
            template: fused.slice_rows(self.joints, self.tokens)?,
            fused,
        })
    }
}

/// `token_up · (X · W) + b`: tokens are upsampled to vertices and channels
/// projected to coordinates.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub token_up: ParamId,
    pub channel_down: Linear,
    pub vertices: usize,
}

impl RegressionHead {
    pub fn new(init: &mut Init<'_>, prefix: &str, tokens: usize, vertices: usize, dim: usize) -> Self {
        RegressionHead {
            token_up: init.glorot_left(format!("{prefix}.token_up"), vertices, tokens),
            channel_down: Linear::new(init, &format!("{prefix}.channel_down"), dim, 3, true),
            vertices,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let projected = x.matmul(&tape.param(store, self.channel_down.weight))?;
        let mesh = tape.param(store, self.token_up).matmul(&projected)?;
        match self.channel_down.bias {
            Some(b) => mesh.add_row(&tape.param(store, b)),
            None => Ok(mesh),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mrm {
    pub template_embed: TemplateEmbed,
    pub blocks: Vec<DualBranchBlock>,
    pub head: RegressionHead,
}

pub struct MrmOutput<'t> {
    pub template_feature: Var<'t>,
    /// Concatenated `(J+T)×D` tokens of the last block.
    pub fused: Var<'t>,
    pub mesh: Var<'t>,
}

impl Mrm {
    pub fn new(init: &mut Init<'_>, config: &ModelConfig) -> Result<Self> {
        let (j, t, d, m) = (config.joints, config.template_tokens, config.dim, config.vertices);
        let template_embed = TemplateEmbed::new(init, "mrm.template_embed", t, m, d);
        let blocks = (0..config.mrm_blocks)
            .map(|i| DualBranchBlock::new(init, &format!("mrm.block{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        let head = RegressionHead::new(init, "mrm.head", j + t, m, d);
        Ok(Mrm {
            template_embed,
            blocks,
            head,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        pose_feature: Var<'t>,
        template: Var<'t>,
    ) -> Result<MrmOutput<'t>> {
        let template_feature = {
            let _scope = tape.scope("mrm.template_embed");
            self.template_embed.forward(tape, store, template)?
        };
        let (mut pose, mut temp) = (pose_feature, template_feature);
        let mut fused = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let _scope = tape.scope(&format!("mrm.block{i}"));
            let out = block.forward(tape, store, pose, temp)?;
            (pose, temp, fused) = (out.pose, out.template, Some(out.fused));
        }
        let fused = match fused {
            Some(f) => f,
            None => concat_rows(&[pose, temp])?,
        };
        let _scope = tape.scope("mrm.head");
        let mesh = self.head.forward(tape, store, fused)?;
        Ok(MrmOutput {
            template_feature,
            fused,
            mesh,
        })
    }
}
