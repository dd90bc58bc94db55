//! Pose-to-mesh graph-transformer network built on a small reverse-mode
//! autodiff tape.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mrm;
pub mod nn;
pub mod optim;
pub mod pam;
pub mod params;
pub mod profiler;
pub mod rng;
pub mod skeleton;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{GtrsError, Result};
pub use params::{Gradients, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use checkpoint::{Checkpoint, Phase};
pub use config::RunConfig;
pub use model::{GtrsModel, ModelConfig};
pub use tensor::Tensor;
pub use train::{Context, Metrics, Trainer};
