//! Synthetic meshes and poses, perturbation, and file formats.

pub mod io;
pub mod mesh;
pub mod synth;

pub use mesh::{gen_template, CylinderSpec, MeshAsset};
pub use synth::{gen_dataset, perturb_pose, project, Sample, SyntheticWorld, WorldSpec};
