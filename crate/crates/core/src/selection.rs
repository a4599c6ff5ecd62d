//! From per-level dense predictions to query boxes and the global box field.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ClassLayout, DenseBoxLevel, GlobalBoxField, Grid, LevelnessField, GLOBAL_STRIDE};
use crate::geometry::{iou, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    /// Semantic class id (a thing class).
    pub class: u16,
    pub score: f32,
    /// Pyramid level the box was decoded from.
    pub level: usize,
}

/// Total order used everywhere boxes are ranked: higher score first, then
/// lower class, then lexicographic corners, then lower level.
pub fn rank_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class.cmp(&b.class))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
        .then(a.level.cmp(&b.level))
}

/// NMS survivors in descending score order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySet {
    boxes: Vec<ScoredBox>,
}

impl QuerySet {
    /// Wraps already-selected boxes, putting them in rank order.
    pub fn from_boxes(mut boxes: Vec<ScoredBox>) -> Self {
        boxes.sort_by(rank_order);
        QuerySet { boxes }
    }

    pub fn boxes(&self) -> &[ScoredBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ScoredBox> {
        self.boxes.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub iou_threshold: f32,
    pub score_threshold: f32,
    pub topk_per_level: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: 0.6,
            score_threshold: 0.05,
            topk_per_level: 1000,
        }
    }
}

/// Scores every location/class pair as class probability times centerness
/// and keeps those at or above `score_threshold`, at most `topk_per_level`
/// per level.
pub fn decode_candidates(
    levels: &[DenseBoxLevel],
    layout: &ClassLayout,
    score_threshold: f32,
    topk_per_level: usize,
) -> Vec<ScoredBox> {
    let mut out = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        let w = level.width();
        let mut cands: Vec<ScoredBox> = (0..level.height())
            .into_par_iter()
            .flat_map_iter(|y| {
                let mut row = Vec::new();
                for x in 0..w {
                    let i = y * w + x;
                    let ctr = level.centerness().data()[i];
                    for t in 0..level.num_things() {
                        let score = level.class_prob().plane(t)[i] * ctr;
                        if score >= score_threshold {
                            row.push(ScoredBox {
                                bbox: level.box_at(y, x),
                                class: layout.thing_class(t),
                                score,
                                level: li,
                            });
                        }
                    }
                }
                row
            })
            .collect();
        cands.sort_by(rank_order);
        cands.truncate(topk_per_level);
        out.extend(cands);
    }
    out
}

/// Greedy class-wise suppression: walking boxes in rank order, a box is
/// kept unless a kept box of the same class overlaps it with IoU above
/// `iou_threshold`.
pub fn nms(candidates: &[ScoredBox], iou_threshold: f32) -> QuerySet {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<ScoredBox> = Vec::new();
    // kept boxes bucketed by class, so suppression only scans one class
    let mut by_class: std::collections::BTreeMap<u16, Vec<BoundingBox>> = Default::default();
    for cand in sorted {
        let same = by_class.entry(cand.class).or_default();
        if same.iter().any(|k| iou(k, &cand.bbox) > iou_threshold) {
            continue;
        }
        same.push(cand.bbox);
        kept.push(cand);
    }
    QuerySet { boxes: kept }
}

/// Decode followed by NMS.
pub fn select_queries(levels: &[DenseBoxLevel], layout: &ClassLayout, cfg: &NmsConfig) -> QuerySet {
    let cands = decode_candidates(levels, layout, cfg.score_threshold, cfg.topk_per_level);
    nms(&cands, cfg.iou_threshold)
}

/// Grid cell of a level that covers global-grid column/row `q`.
#[inline]
fn level_cell(stride: u32, q: usize, cells: usize) -> usize {
    ((q * GLOBAL_STRIDE as usize) / stride as usize).min(cells - 1)
}

/// Picks, at each global pixel, the box of the level chosen by the
/// levelness argmax (index 0 means background).
pub fn assemble_global_boxes(
    levels: &[DenseBoxLevel],
    levelness: &LevelnessField,
) -> Result<GlobalBoxField> {
    if levelness.num_levels() != levels.len() {
        return Err(Error::shape(
            "levelness channels",
            levels.len() + 1,
            levelness.num_levels() + 1,
        ));
    }
    let (h, w) = (levelness.height(), levelness.width());
    Ok(GlobalBoxField::from_fn(h, w, |qy, qx| {
        let k = levelness.argmax_at(qy * w + qx);
        if k == 0 {
            return None;
        }
        let lvl = &levels[k - 1];
        let cx = level_cell(lvl.stride, qx, lvl.width());
        let cy = level_cell(lvl.stride, qy, lvl.height());
        Some(lvl.box_at(cy, cx))
    }))
}

/// One level's boxes sampled onto the global grid (nearest cell).
pub fn resample_level_boxes(level: &DenseBoxLevel, height: usize, width: usize) -> GlobalBoxField {
    GlobalBoxField::from_fn(height, width, |qy, qx| {
        let cx = level_cell(level.stride, qx, level.width());
        let cy = level_cell(level.stride, qy, level.height());
        Some(level.box_at(cy, cx))
    })
}

/// Every level's boxes on the global grid, used by the levelness-free
/// assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelBoxStack {
    levels: Vec<GlobalBoxField>,
    height: usize,
    width: usize,
}

impl LevelBoxStack {
    pub fn new(levels: &[DenseBoxLevel], height: usize, width: usize) -> Self {
        LevelBoxStack {
            levels: levels
                .iter()
                .map(|l| resample_level_boxes(l, height, width))
                .collect(),
            height,
            width,
        }
    }

    pub fn levels(&self) -> &[GlobalBoxField] {
        &self.levels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Highest IoU with `query` over all levels at one pixel.
    #[inline]
    pub fn max_iou_at(&self, index: usize, query: &BoundingBox) -> f32 {
        self.levels
            .iter()
            .map(|l| iou(&l.box_at(index), query))
            .fold(0.0, f32::max)
    }
}

/// Location probability without levelness: the maximum IoU with the query
/// across levels.
pub fn location_probability_maxlevel(stack: &LevelBoxStack, query: &ScoredBox) -> Grid<f32> {
    let w = stack.width();
    Grid::from_fn(stack.height(), w, |y, x| stack.max_iou_at(y * w + x, &query.bbox))
}
