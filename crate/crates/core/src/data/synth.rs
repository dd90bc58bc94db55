use serde::{Deserialize, Serialize};

use crate::error::{GtrsError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::mesh::MeshAsset;

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pose2d: Tensor,
    pub gt_pose3d: Tensor,
    pub gt_mesh: Tensor,
}

/// Parameters of the smooth deformation field that turns a latent vector
/// into a mesh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Peak displacement of one latent unit at its anchor.
    pub amplitude: f64,
    /// Gaussian falloff radius around each anchor.
    pub falloff: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            amplitude: 0.03,
            falloff: 0.25,
        }
    }
}

/// Linear generator `mesh = template + zᵀ·B` with one latent per
/// (joint, axis) pair: latent `(k, c)` moves the neighborhood of joint
/// `k`'s heaviest vertex along axis `c`.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub asset: MeshAsset,
    /// `(K·3) × (M·3)`.
    pub basis: Tensor,
    pub seed: u64,
}

impl SyntheticWorld {
    pub fn new(asset: MeshAsset, spec: &WorldSpec, seed: u64) -> Result<Self> {
        if !(spec.amplitude >= 0.0 && spec.falloff > 0.0) {
            return Err(GtrsError::Config(format!("invalid world parameters {spec:?}")));
        }
        let (k, m) = (asset.joint_count(), asset.vertex_count());
        let mut basis = Tensor::zeros(&[k * 3, m * 3]);
        let inv = 1.0 / (2.0 * spec.falloff * spec.falloff);
        for j in 0..k {
            let row = asset.regressor.row(j);
            let anchor = (0..m).fold(0, |best, v| if row[v] > row[best] { v } else { best });
            let pa = asset.vertices.row(anchor).to_vec();
            for v in 0..m {
                let p = asset.vertices.row(v);
                let d2 = (p[0] - pa[0]).powi(2) + (p[1] - pa[1]).powi(2) + (p[2] - pa[2]).powi(2);
                let w = spec.amplitude * (-inv * d2).exp();
                for c in 0..3 {
                    basis.set(j * 3 + c, v * 3 + c, w);
                }
            }
        }
        Ok(SyntheticWorld { asset, basis, seed })
    }

    pub fn latent_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn mesh(&self, z: &[f64]) -> Result<Tensor> {
        if z.len() != self.latent_dim() {
            return Err(GtrsError::shape("world_mesh", &[z.len()], &[self.latent_dim()]));
        }
        let mut mesh = self.asset.vertices.clone();
        let cols = self.basis.cols();
        for (i, &zi) in z.iter().enumerate() {
            if zi == 0.0 {
                continue;
            }
            let row = &self.basis.data()[i * cols..(i + 1) * cols];
            for (v, b) in mesh.data_mut().iter_mut().zip(row) {
                *v += zi * b;
            }
        }
        Ok(mesh)
    }

    pub fn sample(&self, z: &[f64]) -> Result<Sample> {
        let gt_mesh = self.mesh(z)?;
        let gt_pose3d = self.asset.regress(&gt_mesh)?;
        Ok(Sample {
            pose2d: project(&gt_pose3d),
            gt_pose3d,
            gt_mesh,
        })
    }
}

/// Orthographic projection onto the xy plane.
pub fn project(pose3d: &Tensor) -> Tensor {
    let data = pose3d.data().chunks(3).flat_map(|r| [r[0], r[1]]).collect();
    Tensor::new(&[pose3d.rows(), 2], data).expect("K×2")
}

/// `n` samples with standard-normal latents drawn from `seed`.
pub fn gen_dataset(world: &SyntheticWorld, n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(GtrsError::Config("dataset size must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..world.latent_dim()).map(|_| rng.normal()).collect();
            world.sample(&z)
        })
        .collect()
}

/// Zeroes each joint with probability `drop_prob` and adds `N(0, σ²)` noise
/// to the coordinates of the joints that survive.
pub fn perturb_pose(pose2d: &Tensor, drop_prob: f64, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&drop_prob) || !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(GtrsError::Config(format!(
            "perturbation needs 0 <= p <= 1 and sigma >= 0, got p={drop_prob}, sigma={sigma}"
        )));
    }
    let mut out = pose2d.clone();
    let n = pose2d.cols();
    for row in out.data_mut().chunks_mut(n) {
        if rng.bernoulli(drop_prob) {
            row.fill(0.0);
        } else if sigma > 0.0 {
            for v in row.iter_mut() {
                *v += sigma * rng.normal();
            }
        }
    }
    Ok(out)
}
