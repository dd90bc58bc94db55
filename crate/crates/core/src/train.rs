//! Pretraining, end-to-end training, evaluation and robustness sweeps.

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Phase};
use crate::config::{split_index, RobustnessConfig, RunConfig};
use crate::data::{perturb_pose, MeshAsset, Sample};
use crate::error::{GtrsError, Result};
use crate::losses::{loss_pose, mesh_losses, root_relative};
use crate::metrics::{mpjpe, mpve, pa_mpjpe};
use crate::model::GtrsModel;
use crate::optim::Adam;
use crate::params::Gradients;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

const BATCH_STREAM: u64 = 1;
const ROBUSTNESS_STREAM: u64 = 2;

/// Worker pool for per-sample work, sized by `GTRS_THREADS` when set.
/// Results are always combined in sample order, so the thread count never
/// changes any output bit.
pub fn thread_pool() -> Result<ThreadPool> {
    let threads = match std::env::var("GTRS_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| GtrsError::Config(format!("GTRS_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| GtrsError::Config(format!("thread pool: {e}")))
}

/// Everything a run needs besides the model: validated config, template
/// asset, samples and a worker pool.
pub struct Context {
    pub config: RunConfig,
    pub asset: MeshAsset,
    pub samples: Vec<Sample>,
    pool: ThreadPool,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let asset = config.asset()?;
        let samples = config.dataset(&asset)?;
        Self::with_samples(config, asset, samples)
    }

    pub fn with_samples(config: RunConfig, asset: MeshAsset, samples: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        Ok(Context {
            config,
            asset,
            samples,
            pool: thread_pool()?,
        })
    }

    pub fn train_set(&self) -> &[Sample] {
        &self.samples[..split_index(self.samples.len())]
    }

    pub fn heldout_set(&self) -> &[Sample] {
        &self.samples[split_index(self.samples.len())..]
    }

    pub fn pool(&self) -> &ThreadPool {
        &self.pool
    }

    /// A freshly initialized model for this config.
    pub fn init_model(&self) -> Result<GtrsModel> {
        GtrsModel::new(self.config.model.clone(), self.config.skeleton()?, self.config.seed)
    }
}

/// `[vertex, joint, normal, edge, total]` averaged over one batch, measured
/// before the update of that step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub step: u64,
    pub terms: [f64; 5],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpve: f64,
}

pub struct Trainer<'c> {
    pub ctx: &'c Context,
    pub model: GtrsModel,
    pub adam: Adam,
    pub rng: Rng,
    pub step: u64,
    pub phase: Phase,
}

impl<'c> Trainer<'c> {
    pub fn new(ctx: &'c Context) -> Result<Self> {
        let model = ctx.init_model()?;
        let adam = Adam::new(&model.store, ctx.config.optim.adam());
        Ok(Trainer {
            ctx,
            model,
            adam,
            rng: Rng::new(ctx.config.seed).fork(BATCH_STREAM),
            step: 0,
            phase: Phase::Init,
        })
    }

    /// Continues an end-to-end run saved by [`Trainer::checkpoint`].
    pub fn resume(ctx: &'c Context, ckpt: &Checkpoint) -> Result<Self> {
        let adam = match (ckpt.phase, &ckpt.adam) {
            (Phase::Train, Some(adam)) => adam.clone(),
            _ => {
                return Err(GtrsError::Config(
                    "resume needs a checkpoint written by train".into(),
                ))
            }
        };
        let mut trainer = Trainer::new(ctx)?;
        ckpt.restore_into(&mut trainer.model, |_| true)?;
        if !adam.matches(&trainer.model.store) {
            return Err(GtrsError::Config("optimizer state does not match the model".into()));
        }
        trainer.adam = adam;
        trainer.rng = ckpt.rng.clone();
        trainer.step = ckpt.step;
        trainer.phase = Phase::Train;
        Ok(trainer)
    }

    /// Replaces the PAM parameters with those of a pretraining checkpoint.
    pub fn load_pam(&mut self, ckpt: &Checkpoint) -> Result<usize> {
        ckpt.restore_into(&mut self.model, |name| name.starts_with("pam."))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.phase, self.step, &self.ctx.config, &self.rng, &self.model, Some(&self.adam))
    }

    /// Training-set indices for a step: the whole split when it fits in one
    /// batch, otherwise a draw without replacement keyed by the step number.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let n = self.ctx.train_set().len();
        let b = self.ctx.config.optim.batch_size.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        if b < n {
            let mut r = self.rng.fork(step);
            for i in 0..b {
                let j = i + r.below(n - i);
                idx.swap(i, j);
            }
            idx.truncate(b);
        }
        idx
    }

    fn begin(&mut self, phase: Phase) {
        if self.phase != phase {
            self.adam = Adam::new(&self.model.store, self.ctx.config.optim.adam());
            self.step = 0;
            self.phase = phase;
        }
    }

    /// Averages per-sample losses and gradients over the batch, then takes
    /// one Adam step.
    fn update<const K: usize>(
        &mut self,
        per_sample: impl Fn(&GtrsModel, &Sample) -> Result<([f64; K], Gradients)> + Sync,
    ) -> Result<[f64; K]> {
        self.step += 1;
        let idx = self.batch(self.step);
        let train = self.ctx.train_set();
        let model = &self.model;
        let results: Vec<Result<([f64; K], Gradients)>> = self
            .ctx
            .pool
            .install(|| idx.par_iter().map(|&i| per_sample(model, &train[i])).collect());
        let w = 1.0 / idx.len() as f64;
        let mut loss = [0.0; K];
        let mut grads = Gradients::default();
        for r in results {
            let (l, g) = r?;
            for (acc, v) in loss.iter_mut().zip(l) {
                *acc += w * v;
            }
            grads.add_scaled(&g, w);
        }
        self.model.store.set_grads(&grads);
        self.adam.step(&mut self.model.store)?;
        Ok(loss)
    }

    /// One PAM-only step on the root-relative pose loss.
    pub fn pretrain_step(&mut self) -> Result<f64> {
        self.begin(Phase::Pretrain);
        let [loss] = self.update(|model, s| {
            let tape = Tape::new();
            let out = model.net.pam.forward(&tape, &model.store, tape.constant(s.pose2d.clone()))?;
            let loss = loss_pose(out.pose3d, &root_relative(&s.gt_pose3d))?;
            Ok(([loss.item()], tape.backward(loss, &model.store)?))
        })?;
        Ok(loss)
    }

    /// One end-to-end step on the weighted mesh loss.
    pub fn train_step(&mut self) -> Result<StepLoss> {
        self.begin(Phase::Train);
        let asset = &self.ctx.asset;
        let weights = self.ctx.config.loss;
        let terms = self.update(|model, s| {
            let tape = Tape::new();
            let out = model.forward(&tape, &s.pose2d, &asset.vertices)?;
            let l = mesh_losses(out.mesh, &s.gt_mesh, &s.gt_pose3d, &asset.regressor, &asset.faces, &weights)?;
            Ok((l.values(), tape.backward(l.total, &model.store)?))
        })?;
        Ok(StepLoss { step: self.step, terms })
    }

    /// Mean `[vertex, joint, normal, edge, total]` over `samples` at the
    /// current parameters.
    pub fn mesh_loss(&self, samples: &[Sample]) -> Result<[f64; 5]> {
        mean_over(self.ctx.pool(), samples, |s| {
            let tape = Tape::new();
            let out = self.model.forward(&tape, &s.pose2d, &self.ctx.asset.vertices)?;
            let l = mesh_losses(
                out.mesh,
                &s.gt_mesh,
                &s.gt_pose3d,
                &self.ctx.asset.regressor,
                &self.ctx.asset.faces,
                &self.ctx.config.loss,
            )?;
            Ok(l.values())
        })
    }

    /// Mean root-relative pose loss of the PAM over `samples`.
    pub fn pose_loss(&self, samples: &[Sample]) -> Result<f64> {
        let [l] = mean_over(self.ctx.pool(), samples, |s| {
            let tape = Tape::new();
            let out = self.model.net.pam.forward(&tape, &self.model.store, tape.constant(s.pose2d.clone()))?;
            Ok([loss_pose(out.pose3d, &root_relative(&s.gt_pose3d))?.item()])
        })?;
        Ok(l)
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<Metrics> {
        evaluate(&self.model, &self.ctx.asset, samples, self.ctx.pool())
    }
}

fn mean_over<const K: usize>(
    pool: &ThreadPool,
    samples: &[Sample],
    f: impl Fn(&Sample) -> Result<[f64; K]> + Sync,
) -> Result<[f64; K]> {
    if samples.is_empty() {
        return Err(GtrsError::Data("no samples to average over".into()));
    }
    let rows: Vec<Result<[f64; K]>> = pool.install(|| samples.par_iter().map(&f).collect());
    let mut acc = [0.0; K];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r?) {
            *a += v;
        }
    }
    Ok(acc.map(|a| a / samples.len() as f64))
}

/// Joint metrics on the regressed prediction `R · mesh` against the
/// ground-truth 3D pose; MPVE on the mesh itself.
pub fn sample_metrics(asset: &MeshAsset, mesh: &Tensor, sample: &Sample) -> Result<[f64; 3]> {
    let joints = asset.regress(mesh)?;
    Ok([
        mpjpe(&joints, &sample.gt_pose3d, true)?,
        pa_mpjpe(&joints, &sample.gt_pose3d)?,
        mpve(mesh, &sample.gt_mesh)?,
    ])
}

fn to_metrics([mpjpe, pa_mpjpe, mpve]: [f64; 3]) -> Metrics {
    Metrics { mpjpe, pa_mpjpe, mpve }
}

/// Metrics of the model over `samples`, with the network input produced by
/// `input` from each sample's index and clean 2D pose.
pub fn evaluate_with(
    model: &GtrsModel,
    asset: &MeshAsset,
    samples: &[Sample],
    pool: &ThreadPool,
    input: impl Fn(usize, &Sample) -> Result<Tensor> + Sync,
) -> Result<Metrics> {
    let indexed: Vec<(usize, &Sample)> = samples.iter().enumerate().collect();
    if indexed.is_empty() {
        return Err(GtrsError::Data("cannot evaluate an empty dataset".into()));
    }
    let rows: Vec<Result<[f64; 3]>> = pool.install(|| {
        indexed
            .par_iter()
            .map(|&(i, s)| {
                let (_, mesh) = model.predict(&input(i, s)?, &asset.vertices)?;
                sample_metrics(asset, &mesh, s)
            })
            .collect()
    });
    let mut acc = [0.0; 3];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r?) {
            *a += v;
        }
    }
    Ok(to_metrics(acc.map(|a| a / samples.len() as f64)))
}

pub fn evaluate(model: &GtrsModel, asset: &MeshAsset, samples: &[Sample], pool: &ThreadPool) -> Result<Metrics> {
    evaluate_with(model, asset, samples, pool, |_, s| Ok(s.pose2d.clone()))
}

/// Metrics of the ground truth scored against itself; a harness check that
/// must give all zeros.
pub fn evaluate_oracle(asset: &MeshAsset, samples: &[Sample]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(GtrsError::Data("cannot evaluate an empty dataset".into()));
    }
    let mut acc = [0.0; 3];
    for s in samples {
        for (a, v) in acc.iter_mut().zip(sample_metrics(asset, &s.gt_mesh, s)?) {
            *a += v;
        }
    }
    Ok(to_metrics(acc.map(|a| a / samples.len() as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub p: f64,
    pub sigma: f64,
    pub mpjpe: f64,
    pub mpve: f64,
}

/// Metrics over a `drop_probs × sigmas` grid (drop probability major).
/// Each perturbed point averages `trials` runs, each with its own random
/// stream per sample; the unperturbed point is a plain evaluation.
pub fn robustness(
    model: &GtrsModel,
    asset: &MeshAsset,
    samples: &[Sample],
    grid: &RobustnessConfig,
    seed: u64,
    pool: &ThreadPool,
) -> Result<Vec<RobustnessRow>> {
    let base = Rng::new(seed).fork(ROBUSTNESS_STREAM);
    let mut rows = Vec::with_capacity(grid.drop_probs.len() * grid.sigmas.len());
    for (pi, &p) in grid.drop_probs.iter().enumerate() {
        for (si, &sigma) in grid.sigmas.iter().enumerate() {
            let m = if p == 0.0 && sigma == 0.0 {
                evaluate(model, asset, samples, pool)?
            } else {
                let point = base.fork((pi * grid.sigmas.len() + si) as u64);
                let noise = sigma * grid.noise_unit;
                let mut acc = [0.0; 3];
                for t in 0..grid.trials {
                    let trial = point.fork(t as u64);
                    let m = evaluate_with(model, asset, samples, pool, |i, s| {
                        perturb_pose(&s.pose2d, p, noise, &mut trial.fork(i as u64))
                    })?;
                    acc[0] += m.mpjpe;
                    acc[1] += m.pa_mpjpe;
                    acc[2] += m.mpve;
                }
                to_metrics(acc.map(|a| a / grid.trials as f64))
            };
            rows.push(RobustnessRow {
                p,
                sigma,
                mpjpe: m.mpjpe,
                mpve: m.mpve,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::model::ModelConfig;

    fn tiny_context(samples: usize) -> Context {
        let config = RunConfig {
            model: ModelConfig {
                dim: 16,
                template_tokens: 4,
                vertices: 30,
                mrm_blocks: 2,
                fixed_blocks: 1,
                learnable_blocks: 2,
                ..ModelConfig::default()
            },
            data: DataConfig {
                samples,
                ..DataConfig::default()
            },
            ..RunConfig::default()
        };
        Context::new(config).unwrap()
    }

    #[test]
    fn pretraining_leaves_the_mesh_module_alone() {
        let ctx = tiny_context(5);
        let mut t = Trainer::new(&ctx).unwrap();
        let before = t.model.store.clone();
        t.pretrain_step().unwrap();
        for ((_, a), (_, b)) in before.iter().zip(t.model.store.iter()) {
            if a.name.starts_with("mrm.") || !a.trainable {
                assert_eq!(a.value, b.value, "{}", a.name);
            } else if a.name.starts_with("pam.") && !a.name.contains("adjacency") {
                assert_ne!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let ctx = tiny_context(10);
        let mut straight = Trainer::new(&ctx).unwrap();
        for _ in 0..4 {
            straight.train_step().unwrap();
        }
        let mut first = Trainer::new(&ctx).unwrap();
        for _ in 0..2 {
            first.train_step().unwrap();
        }
        let text = serde_json::to_string(&first.checkpoint()).unwrap();
        let ckpt: Checkpoint = serde_json::from_str(&text).unwrap();
        let mut resumed = Trainer::resume(&ctx, &ckpt).unwrap();
        assert_eq!(resumed.step, 2);
        for _ in 0..2 {
            resumed.train_step().unwrap();
        }
        assert_eq!(resumed.step, 4);
        for ((_, a), (_, b)) in straight.model.store.iter().zip(resumed.model.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn batches_without_replacement() {
        let mut ctx = tiny_context(20);
        ctx.config.optim.batch_size = 5;
        let t = Trainer::new(&ctx).unwrap();
        let mut b = t.batch(3);
        assert_eq!(b, t.batch(3));
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 5);
        assert!(b.iter().all(|&i| i < 16));
        ctx.config.optim.batch_size = 16;
        assert_eq!(Trainer::new(&ctx).unwrap().batch(1), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn oracle_scores_zero_and_empty_is_an_error() {
        let ctx = tiny_context(3);
        let m = evaluate_oracle(&ctx.asset, &ctx.samples).unwrap();
        assert_eq!((m.mpjpe, m.mpve), (0.0, 0.0));
        // The SVD inside the alignment leaves rounding residue.
        assert!(m.pa_mpjpe < 1e-12, "{}", m.pa_mpjpe);
        assert!(matches!(evaluate_oracle(&ctx.asset, &[]), Err(GtrsError::Data(_))));
        let model = ctx.init_model().unwrap();
        assert!(evaluate(&model, &ctx.asset, &[], ctx.pool()).is_err());
    }

    #[test]
    fn clean_robustness_point_equals_evaluation() {
        let ctx = tiny_context(4);
        let model = ctx.init_model().unwrap();
        let grid = RobustnessConfig {
            drop_probs: vec![0.0, 0.5],
            sigmas: vec![0.0, 2.0],
            trials: 2,
            ..RobustnessConfig::default()
        };
        let rows = robustness(&model, &ctx.asset, &ctx.samples, &grid, 0, ctx.pool()).unwrap();
        assert_eq!(rows.len(), 4);
        let clean = evaluate(&model, &ctx.asset, &ctx.samples, ctx.pool()).unwrap();
        assert_eq!((rows[0].mpjpe, rows[0].mpve), (clean.mpjpe, clean.mpve));
        assert_ne!(rows[3].mpjpe, clean.mpjpe);
        let again = robustness(&model, &ctx.asset, &ctx.samples, &grid, 0, ctx.pool()).unwrap();
        assert_eq!(rows, again);
    }
}
