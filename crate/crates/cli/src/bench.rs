//! Timing harness for the inference stages.

use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use densepan::fields::{LevelSpec, GLOBAL_STRIDE};
use densepan::maskcons::{construct_masks, construct_masks_dense, fuse_panoptic, BoxSource, FusionParams, DEFAULT_SIGMA};
use densepan::selection::{assemble_global_boxes, select_queries, NmsConfig, QuerySet};
use densepan::synth::{generate_scene, ideal_predictions, perturb, NoiseConfig, SceneConfig};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchConfig {
    /// Global (quarter-resolution) grid width.
    pub width: usize,
    pub height: usize,
    pub queries: usize,
    pub threads: usize,
    pub repeat: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            width: 512,
            height: 256,
            queries: 50,
            threads: 4,
            repeat: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub threads: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub queries: usize,
    pub stages: Vec<StageTiming>,
    /// Dense single-threaded mask construction over the sparse single-threaded one.
    pub speedup_vs_naive: f64,
    /// Sparse mask construction at 1 thread over `threads` threads.
    pub thread_speedup: f64,
    /// Whether the dense, sparse and multi-threaded masks were identical.
    pub outputs_identical: bool,
}

fn time<T>(repeat: usize, mut f: impl FnMut() -> T) -> (Vec<Duration>, T) {
    let mut out = f();
    let mut times = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let t = Instant::now();
        out = f();
        times.push(t.elapsed());
    }
    (times, out)
}

fn summarize(stage: &str, threads: usize, times: &[Duration]) -> StageTiming {
    let mut ms: Vec<f64> = times.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    let mid = ms.len() / 2;
    let median = if ms.len().is_multiple_of(2) { (ms[mid - 1] + ms[mid]) / 2.0 } else { ms[mid] };
    StageTiming {
        stage: stage.to_string(),
        threads,
        mean_ms: mean,
        median_ms: median,
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("cannot build the worker pool")
}

/// Runs every stage on a seeded synthetic scene with `queries` instances and
/// mildly perturbed ideal predictions. Each stage runs once to warm up, then
/// `repeat` timed times.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    ensure!(cfg.repeat > 0, "repeat must be at least 1");
    ensure!(cfg.threads > 0, "threads must be at least 1");
    let s = GLOBAL_STRIDE as usize;
    let scene = generate_scene(&SceneConfig {
        width: cfg.width * s,
        height: cfg.height * s,
        instances: cfg.queries,
        seed: cfg.seed,
        ..Default::default()
    })
    .context("cannot build the benchmark scene")?;
    let preds = ideal_predictions(&scene, &LevelSpec::default_pyramid())?;
    let preds = perturb(
        &preds,
        &NoiseConfig {
            offset_std: 1.0,
            semantic_flip: 0.05,
            seed: cfg.seed,
            ..Default::default()
        },
    )?;

    let single = pool(1)?;
    let multi = pool(cfg.threads)?;
    let nms = NmsConfig::default();
    let mut stages = Vec::new();

    let (t, queries) = time(cfg.repeat, || single.install(|| select_queries(&preds.levels, &preds.layout, &nms)));
    stages.push(summarize("select_queries", 1, &t));
    let queries = QuerySet::from_boxes(queries.boxes().iter().take(cfg.queries).copied().collect());

    let (t, boxes) = time(cfg.repeat, || single.install(|| assemble_global_boxes(&preds.levels, &preds.levelness)));
    stages.push(summarize("assemble_boxes", 1, &t));
    let boxes = boxes?;
    let source = BoxSource::Assembled(&boxes);
    let (sem, layout) = (&preds.semantics, &preds.layout);

    let (t_naive, naive) = time(cfg.repeat, || {
        single.install(|| construct_masks_dense(source, sem, layout, &queries, DEFAULT_SIGMA))
    });
    stages.push(summarize("masks_naive", 1, &t_naive));
    let (t_fast1, fast1) =
        time(cfg.repeat, || single.install(|| construct_masks(source, sem, layout, &queries, DEFAULT_SIGMA)));
    stages.push(summarize("masks", 1, &t_fast1));
    let (t_fastn, fastn) =
        time(cfg.repeat, || multi.install(|| construct_masks(source, sem, layout, &queries, DEFAULT_SIGMA)));
    stages.push(summarize("masks", cfg.threads, &t_fastn));
    let (naive, fast1, fastn) = (naive?, fast1?, fastn?);

    let (t, _) = time(cfg.repeat, || single.install(|| fuse_panoptic(&fast1, sem, layout, &FusionParams::default())));
    stages.push(summarize("fuse", 1, &t));

    let median = |name: &str, threads: usize| {
        stages
            .iter()
            .find(|s| s.stage == name && s.threads == threads)
            .map_or(f64::NAN, |s| s.median_ms)
    };
    Ok(BenchReport {
        config: *cfg,
        queries: queries.len(),
        speedup_vs_naive: median("masks_naive", 1) / median("masks", 1),
        thread_speedup: median("masks", 1) / median("masks", cfg.threads),
        outputs_identical: naive == fast1 && fast1 == fastn,
        stages,
    })
}
