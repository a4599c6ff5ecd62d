use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use densepan::assignment::{build_targets, AssignMode};
use densepan::fields::LevelSpec;
use densepan::losses::{compute_losses, LossConfig};
use densepan::metrics::evaluate;
use densepan::pipeline::{run_pipeline, Assembly, PipelineConfig};
use densepan::selection::NmsConfig;
use densepan::synth::{generate_scene, ideal_predictions_with_mode, perturb, NoiseConfig, SceneConfig, Shape};
use serde::Serialize;

use crate::bench::{run_bench, BenchConfig};
use crate::bundle::TensorBundle;
use crate::codec::{
    predictions_from_bundle, predictions_to_bundle, read_panoptic, scene_from_bundle, scene_to_bundle,
    targets_from_bundle, targets_to_bundle, write_archive,
};

#[derive(Debug, Parser)]
#[command(name = "densepan", version, about = "Panoptic segmentation from dense detections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene and optionally ideal or noisy predictions.
    Synth(SynthArgs),
    /// Build training targets for a scene.
    Targets(TargetsArgs),
    /// Run query selection, mask construction and fusion on predictions.
    Construct(ConstructArgs),
    /// Compare a panoptic result with ground truth.
    Evaluate(EvaluateArgs),
    /// Evaluate every training loss of predictions against targets.
    Loss(LossArgs),
    /// Time the inference stages.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Full,
    Weak,
}

impl From<ModeArg> for AssignMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => AssignMode::Full,
            ModeArg::Weak => AssignMode::Weak,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShapeArg {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AssemblyArg {
    Levelness,
    MaxIou,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
    #[arg(long, default_value_t = 3)]
    pub things: u16,
    #[arg(long, default_value_t = 3)]
    pub stuff: u16,
    /// Largest IoU allowed between boxes of the same class.
    #[arg(long, default_value_t = 0.3)]
    pub max_same_class_iou: f32,
    /// Largest IoU allowed between any two boxes.
    #[arg(long, default_value_t = 1.0)]
    pub max_any_iou: f32,
    #[arg(long, value_enum, default_value = "rectangle")]
    pub shape: ShapeArg,
    #[arg(long, value_delimiter = ',', default_values_t = [8u32, 16, 32, 64, 128])]
    pub strides: Vec<u32>,
    /// Output directory; the scene goes to `<out>/scene`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write ideal predictions to `<out>/ideal`.
    #[arg(long)]
    pub ideal: bool,
    /// Also write perturbed ideal predictions to `<out>/noisy`.
    #[arg(long)]
    pub noisy: bool,
    /// Supervision the ideal predictions mimic.
    #[arg(long, value_enum, default_value = "full")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.0)]
    pub offset_std: f32,
    #[arg(long, default_value_t = 0.0)]
    pub semantic_flip: f64,
    #[arg(long, default_value_t = 0.0)]
    pub centerness_std: f32,
    #[arg(long, default_value_t = 0.0)]
    pub levelness_flip: f64,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
}

#[derive(Debug, Args)]
pub struct TargetsArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    pub mode: ModeArg,
    #[arg(long, value_delimiter = ',', default_values_t = [8u32, 16, 32, 64, 128])]
    pub strides: Vec<u32>,
}

#[derive(Debug, Args)]
pub struct ConstructArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub sigma: f32,
    #[arg(long, default_value_t = 0.6)]
    pub nms_iou: f32,
    #[arg(long, default_value_t = 0.05)]
    pub score_thresh: f32,
    #[arg(long, default_value_t = 1000)]
    pub topk: usize,
    #[arg(long, value_enum, default_value = "levelness")]
    pub assembly: AssemblyArg,
    #[arg(long, default_value_t = 4096)]
    pub stuff_area_min: u64,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Also write a colour rendering.
    #[arg(long)]
    pub image: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth scene or panoptic archive.
    #[arg(long)]
    pub gt: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Quarter-resolution grid width.
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 50)]
    pub queries: usize,
    #[arg(long, default_value_t = 4)]
    pub threads: usize,
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn emit(report: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, &text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn read_bundle(dir: &Path) -> Result<TensorBundle> {
    TensorBundle::read(dir).with_context(|| format!("reading {}", dir.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Targets(a) => targets(a),
        Command::Construct(a) => construct(a),
        Command::Evaluate(a) => {
            let (pred, _) = read_panoptic(&a.pred).with_context(|| format!("reading {}", a.pred.display()))?;
            let (gt, layout) = read_panoptic(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
            emit(&evaluate(&pred, &gt, &layout)?, a.out.as_deref())
        }
        Command::Loss(a) => {
            let preds = predictions_from_bundle(&read_bundle(&a.preds)?)?;
            let targets = targets_from_bundle(&read_bundle(&a.targets)?)?;
            let cfg = LossConfig { lambda: a.lambda, ..Default::default() };
            emit(&compute_losses(&preds, &targets, &cfg)?, a.out.as_deref())
        }
        Command::Bench(a) => {
            let cfg = BenchConfig {
                width: a.width,
                height: a.height,
                queries: a.queries,
                threads: a.threads,
                repeat: a.repeat,
                seed: a.seed,
            };
            emit(&run_bench(&cfg)?, a.out.as_deref())
        }
    }
}

#[derive(Serialize)]
struct SynthSummary {
    scene: PathBuf,
    instances: usize,
    predictions: Vec<PathBuf>,
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SceneConfig {
        width: a.width,
        height: a.height,
        instances: a.instances,
        num_things: a.things,
        num_stuff: a.stuff,
        max_same_class_iou: a.max_same_class_iou,
        max_any_iou: a.max_any_iou,
        shape: match a.shape {
            ShapeArg::Rectangle => Shape::Rectangle,
            ShapeArg::Ellipse => Shape::Ellipse,
        },
        seed: a.seed,
        ..Default::default()
    };
    let scene = generate_scene(&cfg)?;
    let scene_dir = a.out.join("scene");
    scene_to_bundle(&scene)?.write(&scene_dir)?;
    let mut predictions = Vec::new();
    if a.ideal || a.noisy {
        let specs = LevelSpec::pyramid(&a.strides)?;
        let ideal = ideal_predictions_with_mode(&scene, &specs, a.mode.into())?;
        if a.ideal {
            let dir = a.out.join("ideal");
            predictions_to_bundle(&ideal)?.write(&dir)?;
            predictions.push(dir);
        }
        if a.noisy {
            let noise = NoiseConfig {
                offset_std: a.offset_std,
                semantic_flip: a.semantic_flip,
                centerness_std: a.centerness_std,
                levelness_flip: a.levelness_flip,
                seed: a.noise_seed,
            };
            let dir = a.out.join("noisy");
            predictions_to_bundle(&perturb(&ideal, &noise)?)?.write(&dir)?;
            predictions.push(dir);
        }
    }
    emit(
        &SynthSummary {
            scene: scene_dir,
            instances: scene.instances.len(),
            predictions,
        },
        None,
    )
}

#[derive(Serialize)]
struct TargetsSummary {
    out: PathBuf,
    foreground_per_level: Vec<usize>,
}

fn targets(a: TargetsArgs) -> Result<()> {
    let scene = scene_from_bundle(&read_bundle(&a.scene)?)?;
    let specs = LevelSpec::pyramid(&a.strides)?;
    let mode: AssignMode = a.mode.into();
    let t = build_targets(&scene, &specs, mode)?;
    targets_to_bundle(&t, mode)?.write(&a.out)?;
    emit(
        &TargetsSummary {
            out: a.out,
            foreground_per_level: t.levels.iter().map(|l| l.foreground_count()).collect(),
        },
        None,
    )
}

#[derive(Serialize)]
struct ConstructSummary {
    out: PathBuf,
    queries: usize,
    segments: usize,
}

fn construct(a: ConstructArgs) -> Result<()> {
    let preds = predictions_from_bundle(&read_bundle(&a.preds)?)?;
    let cfg = PipelineConfig {
        sigma: a.sigma,
        nms: NmsConfig {
            iou_threshold: a.nms_iou,
            score_threshold: a.score_thresh,
            topk_per_level: a.topk,
        },
        assembly: match a.assembly {
            AssemblyArg::Levelness => Assembly::Levelness,
            AssemblyArg::MaxIou => Assembly::MaxIou,
        },
        stuff_area_min: a.stuff_area_min,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = a.threads {
        anyhow::ensure!(n > 0, "--threads must be at least 1");
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("cannot build the worker pool")?;
    let out = pool.install(|| run_pipeline(&preds, &cfg))?;
    write_archive(&a.out, &out.panoptic, &preds.layout, a.image)?;
    emit(
        &ConstructSummary {
            out: a.out,
            queries: out.queries.len(),
            segments: out.panoptic.segments().len(),
        },
        None,
    )
}
