//! Fixtures shared by the benchmarks.

use gtrs_core::data::{gen_template, CylinderSpec, MeshAsset};
use gtrs_core::{GtrsModel, ModelConfig, Rng, Tensor};
use gtrs_core::skeleton::SkeletonGraph;

pub struct Fixture {
    pub model: GtrsModel,
    pub asset: MeshAsset,
    pub pose2d: Tensor,
}

/// Default-architecture model at the given vertex count with a random pose.
pub fn fixture(vertices: usize) -> Fixture {
    let config = ModelConfig {
        vertices,
        ..ModelConfig::default()
    };
    let asset = gen_template(vertices, config.joints, &CylinderSpec::default(), 0).expect("template");
    let pose2d = Rng::new(1).normal_tensor(&[config.joints, 2], 0.3);
    let model = GtrsModel::new(config, SkeletonGraph::h36m(), 0).expect("model");
    Fixture { model, asset, pose2d }
}
