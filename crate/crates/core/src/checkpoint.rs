//! Saved training state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::io::{read_json, write_text};
use crate::error::{GtrsError, Result};
use crate::model::GtrsModel;
use crate::optim::Adam;
use crate::params::Param;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Pretrain,
    Train,
}

/// Config snapshot, named parameters, optimizer moments, step counter and
/// the run's random stream. Floats are written in shortest round-trip form,
/// so loading reproduces every parameter bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub phase: Phase,
    pub step: u64,
    pub config: RunConfig,
    pub rng: Rng,
    pub params: Vec<Param>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(
        phase: Phase,
        step: u64,
        config: &RunConfig,
        rng: &Rng,
        model: &GtrsModel,
        adam: Option<&Adam>,
    ) -> Self {
        Checkpoint {
            phase,
            step,
            config: config.clone(),
            rng: rng.clone(),
            params: model
                .store
                .iter()
                .map(|(_, p)| Param {
                    grad: None,
                    ..p.clone()
                })
                .collect(),
            adam: adam.cloned(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &(serde_json::to_string(self)? + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = read_json(path)?;
        ckpt.config.validate()?;
        Ok(ckpt)
    }

    /// Rebuilds the model described by the checkpoint's own config.
    pub fn model(&self) -> Result<GtrsModel> {
        let mut model = GtrsModel::new(self.config.model.clone(), self.config.skeleton()?, self.config.seed)?;
        self.restore_into(&mut model, |_| true)?;
        Ok(model)
    }

    /// Copies the parameters accepted by `filter` into `model`. Every
    /// parameter of `model` that passes the filter must be present with the
    /// same shape and trainability.
    pub fn restore_into(&self, model: &mut GtrsModel, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let wanted: Vec<&Param> = self.params.iter().filter(|p| filter(&p.name)).collect();
        let expected = model.store.iter().filter(|(_, p)| filter(&p.name)).count();
        if wanted.len() != expected {
            return Err(GtrsError::Config(format!(
                "checkpoint has {} matching parameters, model has {expected}",
                wanted.len()
            )));
        }
        for p in &wanted {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| GtrsError::Config(format!("checkpoint parameter {} not in model", p.name)))?;
            if model.store.get(id).trainable != p.trainable {
                return Err(GtrsError::Config(format!("parameter {} changed trainability", p.name)));
            }
        }
        model
            .store
            .load_values(wanted.iter().map(|p| (p.name.as_str(), &p.value)))
    }
}
