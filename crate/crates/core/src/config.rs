//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::io::{load_asset, load_dataset, read_json, validate_dataset};
use crate::data::{gen_dataset, gen_template, CylinderSpec, MeshAsset, Sample, SyntheticWorld, WorldSpec};
use crate::error::{GtrsError, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::skeleton::SkeletonGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub pretrain_steps: u64,
    pub train_steps: u64,
    /// Held-out metrics are logged every this many steps (and after the last).
    pub eval_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        OptimConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 16,
            pretrain_steps: 500,
            train_steps: 500,
            eval_every: 50,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON-lines dataset; required when `generate` is false.
    pub dataset: Option<PathBuf>,
    pub generate: bool,
    /// Number of generated samples (before the train/held-out split).
    pub samples: usize,
    /// Template asset JSON; a procedural cylinder is generated when absent.
    pub template: Option<PathBuf>,
    pub seed: u64,
    pub cylinder: CylinderSpec,
    pub world: WorldSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: None,
            generate: true,
            samples: 20,
            template: None,
            seed: 0,
            cylinder: CylinderSpec::default(),
            world: WorldSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub drop_probs: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Pose-coordinate length of one `sigmas` unit.
    pub noise_unit: f64,
    /// Perturbation trials averaged per grid point (the unperturbed point
    /// always uses one).
    pub trials: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            drop_probs: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            sigmas: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            noise_unit: 0.01,
            trials: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Skeleton JSON; the 17-joint Human3.6M layout when absent.
    pub skeleton: Option<PathBuf>,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub robustness: RobustnessConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: RunConfig = read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(GtrsError::Config(format!("invalid optimizer settings {o:?}")));
        }
        if o.batch_size == 0 || o.eval_every == 0 {
            return Err(GtrsError::Config("batch_size and eval_every must be positive".into()));
        }
        if self.data.generate && self.data.samples == 0 {
            return Err(GtrsError::Config("data.samples must be positive".into()));
        }
        if !self.data.generate && self.data.dataset.is_none() {
            return Err(GtrsError::Config(
                "data.dataset is required when data.generate is false".into(),
            ));
        }
        let r = &self.robustness;
        if !(r.noise_unit > 0.0 && r.noise_unit.is_finite()) {
            return Err(GtrsError::Config("robustness.noise_unit must be positive".into()));
        }
        if r.trials == 0 || r.drop_probs.is_empty() || r.sigmas.is_empty() {
            return Err(GtrsError::Config("robustness grid and trials must be non-empty".into()));
        }
        if r.drop_probs.iter().any(|p| !(0.0..=1.0).contains(p)) || r.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(GtrsError::Config("robustness needs 0 <= p <= 1 and sigma >= 0".into()));
        }
        Ok(())
    }

    pub fn skeleton(&self) -> Result<SkeletonGraph> {
        let skel = match &self.skeleton {
            Some(path) => read_json(path)?,
            None => SkeletonGraph::h36m(),
        };
        if skel.joint_count() != self.model.joints {
            return Err(GtrsError::Config(format!(
                "skeleton has {} joints, model.joints is {}",
                skel.joint_count(),
                self.model.joints
            )));
        }
        Ok(skel)
    }

    /// The template asset, checked against the model's vertex and joint
    /// counts (the regressor must produce one joint per skeleton joint).
    pub fn asset(&self) -> Result<MeshAsset> {
        let asset = match &self.data.template {
            Some(path) => load_asset(path)?,
            None => gen_template(self.model.vertices, self.model.joints, &self.data.cylinder, self.data.seed)?,
        };
        if asset.vertex_count() != self.model.vertices || asset.joint_count() != self.model.joints {
            return Err(GtrsError::Config(format!(
                "template has {} vertices and {} regressed joints; model expects {} and {}",
                asset.vertex_count(),
                asset.joint_count(),
                self.model.vertices,
                self.model.joints
            )));
        }
        Ok(asset)
    }

    /// Samples from `data.dataset` if set, otherwise generated.
    pub fn dataset(&self, asset: &MeshAsset) -> Result<Vec<Sample>> {
        self.dataset_from(self.data.dataset.as_deref(), asset)
    }

    pub fn dataset_from(&self, path: Option<&Path>, asset: &MeshAsset) -> Result<Vec<Sample>> {
        let samples = match path {
            Some(p) => load_dataset(p)?,
            None if self.data.generate => {
                let world = SyntheticWorld::new(asset.clone(), &self.data.world, self.data.seed)?;
                gen_dataset(&world, self.data.samples, self.data.seed.wrapping_add(1))?
            }
            None => {
                return Err(GtrsError::Config(
                    "no dataset path given and data.generate is false".into(),
                ))
            }
        };
        validate_dataset(&samples, asset, self.model.joints, 1e-9)?;
        Ok(samples)
    }
}

/// Deterministic 80/20 split by index: the first `ceil(0.8 n)` samples train.
pub fn split_index(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
    All,
}

impl std::str::FromStr for Split {
    type Err = GtrsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            "all" => Ok(Split::All),
            other => Err(GtrsError::Config(format!(
                "unknown split {other:?} (expected train, heldout or all)"
            ))),
        }
    }
}

impl Split {
    pub fn select(self, samples: &[Sample]) -> &[Sample] {
        let k = split_index(samples.len());
        match self {
            Split::Train => &samples[..k],
            Split::Heldout => &samples[k..],
            Split::All => samples,
        }
    }
}
