//! Forward values of the training losses.
//!
//! All sums run in `f64` in row-major order so results are bitwise
//! reproducible regardless of the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{InstanceInfo, TrainingTargets};
use crate::error::{Error, Result};
use crate::fields::{ClassLayout, GlobalBoxField, Grid, LevelnessField, Planes, Predictions, SemanticField, VOID_CLASS};
use crate::geometry::{iou, offsets_to_box, receptive_center_f32, BoundingBox};
use crate::maskcons::BoxSource;
use crate::selection::{assemble_global_boxes, select_queries, NmsConfig, QuerySet};

/// Lower bound on IoU before taking its log.
pub const IOU_EPS: f64 = 1e-6;
/// Lower bound on any probability before taking its log.
pub const PROB_EPS: f64 = 1e-7;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const BOOTSTRAP_FRACTION: f64 = 0.3;

#[inline]
fn ln_clamped(p: f64) -> f64 {
    p.max(PROB_EPS).ln()
}

/// Binary cross-entropy; a zero-weight term contributes exactly 0.
#[inline]
pub fn bce(pred: f64, target: f64) -> f64 {
    let mut v = 0.0;
    if target > 0.0 {
        v -= target * ln_clamped(pred);
    }
    if target < 1.0 {
        v -= (1.0 - target) * ln_clamped(1.0 - pred);
    }
    v
}

#[inline]
pub fn focal_term(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    if positive {
        -alpha * (1.0 - p).powf(gamma) * ln_clamped(p)
    } else {
        -(1.0 - alpha) * p.powf(gamma) * ln_clamped(1.0 - p)
    }
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(what, expected, got))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouLoss {
    pub value: f64,
    /// Foreground pairs whose IoU fell below [`IOU_EPS`].
    pub clamped: usize,
}

pub fn iou_loss(pred: &[BoundingBox], target: &[BoundingBox], foreground: &[bool]) -> Result<IouLoss> {
    check_len("predicted boxes", target.len(), pred.len())?;
    check_len("foreground flags", target.len(), foreground.len())?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    let mut clamped = 0;
    for ((p, t), &fg) in pred.iter().zip(target).zip(foreground) {
        if !fg {
            continue;
        }
        let v = iou(p, t) as f64;
        if v < IOU_EPS {
            clamped += 1;
        }
        sum -= v.max(IOU_EPS).ln();
        n += 1;
    }
    let value = if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(IouLoss { value, clamped })
}

pub fn centerness_loss(pred: &[f32], target: &[f32], foreground: &[bool]) -> Result<f64> {
    check_len("centerness predictions", target.len(), pred.len())?;
    check_len("foreground flags", target.len(), foreground.len())?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((&p, &t), &fg) in pred.iter().zip(target).zip(foreground) {
        if fg {
            sum += bce(p as f64, t as f64);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean cross-entropy of the levelness logits against 0-based targets.
pub fn levelness_loss(levelness: &LevelnessField, target: &Grid<u16>) -> Result<f64> {
    let logits = levelness.logits();
    let n = logits.plane_len();
    check_len("levelness targets", n, target.len())?;
    let channels = logits.channels();
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0f64;
    for (i, &t) in target.data().iter().enumerate() {
        if t as usize >= channels {
            return Err(Error::InvalidValue(format!("levelness target {t} >= {channels}")));
        }
        let v = |c: usize| logits.data()[c * n + i] as f64;
        let m = (0..channels).map(v).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..channels).map(|c| (v(c) - m).exp()).sum::<f64>().ln();
        sum += lse - v(t as usize);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: FOCAL_ALPHA,
            gamma: FOCAL_GAMMA,
        }
    }
}

/// Sigmoid focal loss over every location of every level, divided by the
/// total number of locations.
///
/// `probs[k]` holds per-thing sigmoid probabilities of level `k`; `targets[k]`
/// holds the assigned class id per location, 0 for background.
pub fn focal_classification_loss(
    probs: &[&Planes<f32>],
    targets: &[&Grid<u16>],
    layout: &ClassLayout,
    params: FocalParams,
) -> Result<f64> {
    check_len("focal target levels", probs.len(), targets.len())?;
    let mut sum = 0.0f64;
    let mut locations = 0usize;
    for (p, t) in probs.iter().zip(targets) {
        let n = p.plane_len();
        check_len("focal targets", n, t.len())?;
        check_len("focal class channels", layout.num_things as usize, p.channels())?;
        for (i, &cls) in t.data().iter().enumerate() {
            let positive = match cls {
                VOID_CLASS => None,
                c => Some(layout.thing_index(c).ok_or(Error::NotThingClass(c))?),
            };
            for k in 0..p.channels() {
                let v = p.data()[k * n + i] as f64;
                sum += focal_term(v, positive == Some(k), params.alpha, params.gamma);
            }
        }
        locations += n;
    }
    Ok(if locations == 0 { 0.0 } else { sum / locations as f64 })
}

/// Bootstrapped cross-entropy: the mean of the worst `ceil(fraction * P)`
/// per-pixel losses over the `P` non-void pixels.
pub fn semantic_loss(semantics: &SemanticField, target: &Grid<u16>, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("bootstrap fraction must lie in (0, 1], got {fraction}")));
    }
    check_len("semantic targets", semantics.probs().plane_len(), target.len())?;
    let classes = semantics.num_classes();
    let mut losses = Vec::with_capacity(target.len());
    for (i, &t) in target.data().iter().enumerate() {
        if t == VOID_CLASS {
            continue;
        }
        if t as usize > classes {
            return Err(Error::InvalidValue(format!("semantic target {t} > {classes}")));
        }
        // 0 - x keeps a perfect pixel at +0 rather than -0
        losses.push(0.0 - ln_clamped(semantics.class_plane(t)[i] as f64));
    }
    Ok(bootstrap_mean(losses, fraction))
}

/// Mean of the largest `ceil(fraction * len)` values.
pub fn bootstrap_mean(mut losses: Vec<f64>, fraction: f64) -> f64 {
    if losses.is_empty() {
        return 0.0;
    }
    let k = ((fraction * losses.len() as f64).ceil() as usize).clamp(1, losses.len());
    losses.sort_unstable_by(|a, b| b.total_cmp(a));
    losses[..k].iter().sum::<f64>() / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskLoss {
    pub value: f64,
    pub matched: usize,
    /// Queries without any overlapping ground-truth box; left out of the mean.
    pub unmatched: usize,
}

/// Ground-truth instance for a query: the visible instance whose box has the
/// highest positive IoU with it, lower id on ties.
pub fn match_query(query: &BoundingBox, gt: &[InstanceInfo], visible: impl Fn(u16) -> bool) -> Option<(u16, f32)> {
    let mut best: Option<(u16, f32)> = None;
    for inst in gt {
        if !visible(inst.id) {
            continue;
        }
        let v = iou(query, &inst.bbox);
        if v <= 0.0 {
            continue;
        }
        match best {
            Some((id, b)) if b > v || (b == v && id < inst.id) => {}
            _ => best = Some((inst.id, v)),
        }
    }
    best
}

/// Explicit mask loss on the global grid.
///
/// Each query is matched to a ground-truth instance; the term is
/// `(beta / n) * (E_FP + E_FN)` where `beta` is the query/gt box IoU, `n` the
/// number of gt mask pixels, and the soft error counts sum the location
/// probability outside the mask and its complement inside it.
pub fn mask_loss(
    source: BoxSource<'_>,
    queries: &QuerySet,
    gt_instances: &Grid<u16>,
    gt: &[InstanceInfo],
) -> Result<MaskLoss> {
    let (h, w) = source.dims();
    if gt_instances.dims() != (h, w) {
        return Err(Error::shape(
            "gt instance map",
            format!("{h}x{w}"),
            format!("{}x{}", gt_instances.height(), gt_instances.width()),
        ));
    }
    let max_id = gt.iter().map(|g| g.id as usize).max().unwrap_or(0);
    let mut counts = vec![0u64; max_id + 1];
    for &id in gt_instances.data() {
        if id != 0 && (id as usize) <= max_id {
            counts[id as usize] += 1;
        }
    }
    let visible = |id: u16| counts[id as usize] > 0;

    let terms: Vec<Option<f64>> = queries
        .boxes()
        .par_iter()
        .map(|q| {
            let (id, beta) = match_query(&q.bbox, gt, visible)?;
            let mut fp = 0.0f64;
            let mut fn_ = 0.0f64;
            for (i, &g) in gt_instances.data().iter().enumerate() {
                let p = source.p_loc(i, q) as f64;
                if g == id {
                    fn_ += 1.0 - p;
                } else {
                    fp += p;
                }
            }
            Some(beta as f64 / counts[id as usize] as f64 * (fp + fn_))
        })
        .collect();

    let mut sum = 0.0;
    let mut matched = 0;
    for t in terms.iter().flatten() {
        sum += t;
        matched += 1;
    }
    Ok(MaskLoss {
        value: if matched == 0 { 0.0 } else { sum / matched as f64 },
        matched,
        unmatched: terms.len() - matched,
    })
}

/// The six loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub box_reg: f64,
    pub center: f64,
    pub levelness: f64,
    pub box_cls: f64,
    pub semantics: f64,
    pub mask: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub box_reg: f64,
    pub center: f64,
    pub levelness: f64,
    pub box_cls: f64,
    pub semantics: f64,
    pub mask: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            box_reg: self.box_reg,
            center: self.center,
            levelness: self.levelness,
            box_cls: self.box_cls,
            semantics: self.semantics,
            mask: self.mask,
        }
    }
}

pub fn total_loss(c: LossComponents, lambda: f64) -> LossReport {
    LossReport {
        box_reg: c.box_reg,
        center: c.center,
        levelness: c.levelness,
        box_cls: c.box_cls,
        semantics: c.semantics,
        mask: c.mask,
        total: c.box_reg + c.center + c.levelness + c.box_cls + lambda * c.semantics + c.mask,
        lambda,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub focal: FocalParams,
    pub bootstrap: f64,
    /// Query selection for the mask term.
    pub nms: NmsConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            focal: FocalParams::default(),
            bootstrap: BOOTSTRAP_FRACTION,
            nms: NmsConfig::default(),
        }
    }
}

/// Everything [`compute_losses`] measured, including the side counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDetails {
    pub report: LossReport,
    pub foreground: usize,
    pub clamped_iou: usize,
    pub queries: usize,
    pub unmatched_queries: usize,
}

/// All losses of one image. The mask term uses queries selected from the
/// predictions and the levelness-assembled box field.
pub fn compute_losses(preds: &Predictions, targets: &TrainingTargets, cfg: &LossConfig) -> Result<LossDetails> {
    if (preds.image_height, preds.image_width) != (targets.image_height, targets.image_width)
        || preds.specs != targets.specs
        || preds.layout != targets.layout
    {
        return Err(Error::Config("predictions and targets describe different setups".into()));
    }

    let mut pred_boxes = Vec::new();
    let mut target_boxes = Vec::new();
    let mut pred_ctr = Vec::new();
    let mut target_ctr = Vec::new();
    for (lp, lt) in preds.levels.iter().zip(&targets.levels) {
        let w = lt.foreground.width();
        for (i, &fg) in lt.foreground.data().iter().enumerate() {
            if !fg {
                continue;
            }
            let (y, x) = (i / w, i % w);
            let c = receptive_center_f32(lp.stride, x, y);
            pred_boxes.push(offsets_to_box(&lp.offsets_at(y, x), c));
            target_boxes.push(offsets_to_box(&lt.offsets_at(y, x), c));
            pred_ctr.push(lp.centerness().data()[i]);
            target_ctr.push(lt.centerness.data()[i]);
        }
    }
    let fg = vec![true; pred_boxes.len()];
    let box_reg = iou_loss(&pred_boxes, &target_boxes, &fg)?;
    let center = centerness_loss(&pred_ctr, &target_ctr, &fg)?;
    let levelness = levelness_loss(&preds.levelness, &targets.global.levelness)?;
    let probs: Vec<&Planes<f32>> = preds.levels.iter().map(|l| l.class_prob()).collect();
    let classes: Vec<&Grid<u16>> = targets.levels.iter().map(|l| &l.class).collect();
    let box_cls = focal_classification_loss(&probs, &classes, &preds.layout, cfg.focal)?;
    let semantics = semantic_loss(&preds.semantics, &targets.global.semantics, cfg.bootstrap)?;

    let queries = select_queries(&preds.levels, &preds.layout, &cfg.nms);
    let boxes: GlobalBoxField = assemble_global_boxes(&preds.levels, &preds.levelness)?;
    let mask = mask_loss(BoxSource::Assembled(&boxes), &queries, &targets.global.instances, &targets.boxes)?;

    let report = total_loss(
        LossComponents {
            box_reg: box_reg.value,
            center,
            levelness,
            box_cls,
            semantics,
            mask: mask.value,
        },
        cfg.lambda,
    );
    Ok(LossDetails {
        report,
        foreground: fg.len(),
        clamped_iou: box_reg.clamped,
        queries: queries.len(),
        unmatched_queries: mask.unmatched,
    })
}
