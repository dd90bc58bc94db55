use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gtrs_core::config::Split;
use gtrs_core::data::io::{export_obj, load_pose2d, write_text};
use gtrs_core::profiler::{profile, ReportFormat};
use gtrs_core::train::{evaluate, evaluate_oracle, robustness, Context, Metrics, Trainer};
use gtrs_core::{Checkpoint, GtrsError, GtrsModel, RunConfig};

#[derive(Parser)]
#[command(name = "gtrs", version, about = "Pose-to-mesh graph-transformer network")]
struct Cli {
    /// Run configuration (JSON); defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the pose analysis module alone on the 3D pose loss.
    Pretrain {
        /// Overrides `optim.pretrain_steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the whole network on the mesh losses.
    Train {
        /// Initialize the pose analysis module from a pretraining checkpoint.
        #[arg(long, conflicts_with = "resume")]
        pam_checkpoint: Option<PathBuf>,
        /// Continue a previous `train` run for another `steps` steps.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `optim.train_steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Report MPJPE, PA-MPJPE and MPVE of a checkpoint.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Score the ground truth against itself (harness check).
        #[arg(long)]
        oracle: bool,
    },
    /// Metrics under joint dropout and input noise over the configured grid.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Count parameters and forward FLOPs per module.
    Profile {
        #[arg(long, default_value = "table")]
        format: String,
        /// Exit with status 4 if the totals exceed the budget.
        #[arg(long)]
        assert_budget: bool,
    },
    /// Run one 2D pose through a checkpoint and write the mesh as OBJ.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON array of `[x, y]` joint positions.
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        obj: PathBuf,
    },
}

#[derive(clap::Args)]
struct DataArgs {
    /// JSON-lines dataset instead of the configured one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// train, heldout or all.
    #[arg(long, default_value = "all")]
    split: String,
}

enum Failure {
    Error(GtrsError),
    Budget(Vec<String>),
}

impl From<GtrsError> for Failure {
    fn from(e: GtrsError) -> Self {
        Failure::Error(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Budget(violations)) => {
            for v in violations {
                eprintln!("budget exceeded: {v}");
            }
            ExitCode::from(4)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                GtrsError::Io { .. } => 3,
                GtrsError::Contract(_) => 1,
                _ => 2,
            })
        }
    }
}

fn base_config(cli: &Cli) -> gtrs_core::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// The config for a command that reads a checkpoint: `--config` when given
/// (its model section must match the checkpoint), else the checkpoint's own.
fn checkpoint_config(cli: &Cli, ckpt: &Checkpoint) -> gtrs_core::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(_) => base_config(cli)?,
        None => ckpt.config.clone(),
    };
    if config.model != ckpt.config.model {
        return Err(GtrsError::Config(
            "checkpoint model dimensions differ from the config".into(),
        ));
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Pretrain { steps } => pretrain(&cli, *steps),
        Command::Train {
            pam_checkpoint,
            resume,
            steps,
        } => train(&cli, pam_checkpoint.as_deref(), resume.as_deref(), *steps),
        Command::Eval {
            checkpoint,
            data,
            oracle,
        } => eval(&cli, checkpoint.as_deref(), data, *oracle),
        Command::Robustness { checkpoint, data } => robust(&cli, checkpoint, data),
        Command::Profile { format, assert_budget } => prof(&cli, format, *assert_budget),
        Command::Export { checkpoint, pose, obj } => export(checkpoint, pose, obj),
    }
}

fn pretrain(cli: &Cli, steps: Option<u64>) -> Outcome {
    let mut config = base_config(cli)?;
    if let Some(s) = steps {
        config.optim.pretrain_steps = s;
    }
    let ctx = Context::new(config)?;
    let mut trainer = Trainer::new(&ctx)?;
    let mut csv = String::from("step,loss\n");
    for _ in 0..ctx.config.optim.pretrain_steps {
        let loss = trainer.pretrain_step()?;
        let _ = writeln!(csv, "{},{loss}", trainer.step);
    }
    write_text(&cli.out.join("pretrain_loss.csv"), &csv)?;
    let final_loss = trainer.pose_loss(ctx.train_set())?;
    write_text(
        &cli.out.join("pretrain_summary.json"),
        &format!("{}\n", serde_json::json!({ "steps": trainer.step, "final_loss": final_loss })),
    )?;
    trainer.checkpoint().save(&cli.out.join("pam.ckpt.json"))?;
    println!("pretrain: {} steps, final pose loss {final_loss}", trainer.step);
    Ok(())
}

fn train(cli: &Cli, pam: Option<&Path>, resume: Option<&Path>, steps: Option<u64>) -> Outcome {
    let resume_ckpt = resume.map(Checkpoint::load).transpose()?;
    let mut config = match &resume_ckpt {
        Some(ckpt) => checkpoint_config(cli, ckpt)?,
        None => base_config(cli)?,
    };
    if let Some(s) = steps {
        config.optim.train_steps = s;
    }
    let ctx = Context::new(config)?;
    let mut trainer = match &resume_ckpt {
        Some(ckpt) => Trainer::resume(&ctx, ckpt)?,
        None => Trainer::new(&ctx)?,
    };
    if let Some(path) = pam {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.config.model != ctx.config.model {
            return Err(GtrsError::Config("PAM checkpoint model dimensions differ from the config".into()).into());
        }
        trainer.load_pam(&ckpt)?;
    }
    let optim = ctx.config.optim.clone();
    let initial = trainer.mesh_loss(ctx.train_set())?;
    let mut loss_csv = String::from("step,vertex,joint,normal,edge,total\n");
    let mut metrics_csv = String::from("step,split,mpjpe,pa_mpjpe,mpve\n");
    let log_metrics = |csv: &mut String, t: &Trainer| -> gtrs_core::Result<()> {
        let mut splits = vec![("train", ctx.train_set())];
        if !ctx.heldout_set().is_empty() {
            splits.push(("heldout", ctx.heldout_set()));
        }
        for (name, samples) in splits {
            let m = t.evaluate(samples)?;
            let _ = writeln!(csv, "{},{name},{},{},{}", t.step, m.mpjpe, m.pa_mpjpe, m.mpve);
        }
        Ok(())
    };
    let start = trainer.step;
    for i in 1..=optim.train_steps {
        let l = trainer.train_step()?;
        let [v, j, n, e, t] = l.terms;
        let _ = writeln!(loss_csv, "{},{v},{j},{n},{e},{t}", l.step);
        if i % optim.eval_every == 0 || i == optim.train_steps {
            log_metrics(&mut metrics_csv, &trainer)?;
        }
    }
    let final_loss = trainer.mesh_loss(ctx.train_set())?;
    let summary = serde_json::json!({
        "start_step": start,
        "end_step": trainer.step,
        "initial_loss_total": initial[4],
        "final_loss_total": final_loss[4],
        "final_train": trainer.evaluate(ctx.train_set())?,
        "template_bbox_diagonal": ctx.asset.bbox_diagonal(),
    });
    write_text(&cli.out.join("train_loss.csv"), &loss_csv)?;
    write_text(&cli.out.join("train_metrics.csv"), &metrics_csv)?;
    write_text(&cli.out.join("train_summary.json"), &format!("{summary}\n"))?;
    trainer.checkpoint().save(&cli.out.join("model.ckpt.json"))?;
    println!(
        "train: steps {start}..{}, loss_total {} -> {}",
        trainer.step, initial[4], final_loss[4]
    );
    Ok(())
}

/// Context and model for commands that read a checkpoint.
fn load(cli: &Cli, checkpoint: &Path, data: &DataArgs) -> gtrs_core::Result<(Context, GtrsModel, Split)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = checkpoint_config(cli, &ckpt)?;
    let split: Split = data.split.parse()?;
    let asset = config.asset()?;
    let samples = config.dataset_from(data.dataset.as_deref().or(config.data.dataset.as_deref()), &asset)?;
    let model = ckpt.model()?;
    Ok((Context::with_samples(config, asset, samples)?, model, split))
}

fn metrics_json(m: &Metrics) -> gtrs_core::Result<String> {
    Ok(serde_json::to_string_pretty(m)? + "\n")
}

fn eval(cli: &Cli, checkpoint: Option<&Path>, data: &DataArgs, oracle: bool) -> Outcome {
    let metrics = match checkpoint {
        Some(path) if !oracle => {
            let (ctx, model, split) = load(cli, path, data)?;
            evaluate(&model, &ctx.asset, split.select(&ctx.samples), ctx.pool())?
        }
        _ => {
            let config = base_config(cli)?;
            let split: Split = data.split.parse()?;
            let asset = config.asset()?;
            let samples = config.dataset_from(data.dataset.as_deref().or(config.data.dataset.as_deref()), &asset)?;
            evaluate_oracle(&asset, split.select(&samples))?
        }
    };
    let text = metrics_json(&metrics)?;
    write_text(&cli.out.join("eval.json"), &text)?;
    print!("{text}");
    Ok(())
}

fn robust(cli: &Cli, checkpoint: &Path, data: &DataArgs) -> Outcome {
    let (ctx, model, split) = load(cli, checkpoint, data)?;
    let rows = robustness(
        &model,
        &ctx.asset,
        split.select(&ctx.samples),
        &ctx.config.robustness,
        ctx.config.seed,
        ctx.pool(),
    )?;
    let mut csv = String::from("p,sigma,mpjpe,mpve\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.p, r.sigma, r.mpjpe, r.mpve);
    }
    write_text(&cli.out.join("robustness.csv"), &csv)?;
    println!("robustness: {} grid points", rows.len());
    Ok(())
}

fn prof(cli: &Cli, format: &str, assert_budget: bool) -> Outcome {
    let format: ReportFormat = format.parse()?;
    let config = base_config(cli)?;
    let model = GtrsModel::new(config.model.clone(), config.skeleton()?, config.seed)?;
    let report = profile(&model)?;
    let text = report.render(format)?;
    let name = match format {
        ReportFormat::Json => "profile.json",
        ReportFormat::Table => "profile.txt",
    };
    write_text(&cli.out.join(name), &text)?;
    print!("{text}");
    let violations = report.budget_violations();
    if assert_budget && !violations.is_empty() {
        return Err(Failure::Budget(violations));
    }
    Ok(())
}

fn export(checkpoint: &Path, pose: &Path, obj: &Path) -> Outcome {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let asset = ckpt.config.asset()?;
    let pose2d = load_pose2d(pose)?;
    if pose2d.rows() != model.config.joints {
        return Err(GtrsError::shape("export pose", pose2d.shape(), &[model.config.joints, 2]).into());
    }
    let (_, mesh) = model.predict(&pose2d, &asset.vertices)?;
    export_obj(obj, &mesh, &asset.faces)?;
    println!("export: {} vertices -> {}", mesh.rows(), obj.display());
    Ok(())
}
