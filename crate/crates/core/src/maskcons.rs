//! Parameter-free instance mask construction and panoptic fusion.
//!
//! For a query box `b_j` of class `c_j`, the mask probability at a global
//! pixel is the IoU between the box predicted at that pixel and `b_j`,
//! multiplied by the semantic probability of `c_j` there. Thresholding the
//! map at `sigma` gives the instance mask. Nothing here is learned: the
//! output is a pure function of the box field, the semantic field, the
//! queries and `sigma`, and every query is independent of the others.
//!
//! Pixels can be associated with a query even when they fall outside its
//! box, as long as the box they predict matches it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    upsample_nearest, ClassLayout, GlobalBoxField, Grid, PanopticMap, SemanticField,
    GLOBAL_STRIDE, VOID_CLASS,
};
use crate::geometry::iou;
use crate::selection::{rank_order, LevelBoxStack, QuerySet, ScoredBox};

pub const DEFAULT_SIGMA: f32 = 0.3;

/// Mask probability of one query on the global grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskProbabilityMap(pub Grid<f32>);

impl MaskProbabilityMap {
    pub fn grid(&self) -> &Grid<f32> {
        &self.0
    }
}

/// IoU between each pixel's box and the query box; background pixels are 0.
pub fn location_probability(boxes: &GlobalBoxField, query: &ScoredBox) -> Grid<f32> {
    let w = boxes.width();
    Grid::from_fn(boxes.height(), w, |y, x| {
        let i = y * w + x;
        if boxes.is_background(i) {
            0.0
        } else {
            iou(&boxes.box_at(i), &query.bbox)
        }
    })
}

pub fn mask_probability(
    p_loc: &Grid<f32>,
    semantics: &SemanticField,
    layout: &ClassLayout,
    class: u16,
) -> Result<MaskProbabilityMap> {
    if !layout.is_thing(class) {
        return Err(Error::NotThingClass(class));
    }
    if p_loc.dims() != (semantics.height(), semantics.width()) {
        return Err(Error::shape(
            "location probability",
            format!("{}x{}", semantics.height(), semantics.width()),
            format!("{}x{}", p_loc.height(), p_loc.width()),
        ));
    }
    let sem = semantics.class_plane(class);
    let data = p_loc
        .data()
        .iter()
        .zip(sem)
        .map(|(&l, &s)| l * s)
        .collect();
    Ok(MaskProbabilityMap(Grid::new(p_loc.height(), p_loc.width(), data)?))
}

/// Strict threshold: a pixel is in the mask iff its probability exceeds `sigma`.
pub fn threshold_mask(m: &MaskProbabilityMap, sigma: f32) -> Grid<bool> {
    m.0.map(|v| v > sigma)
}

pub fn validate_sigma(sigma: f32) -> Result<()> {
    if sigma > 0.0 && sigma < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("sigma must lie in (0, 1), got {sigma}")))
    }
}

/// Where per-pixel boxes come from.
#[derive(Debug, Clone, Copy)]
pub enum BoxSource<'a> {
    /// One box per pixel, chosen by levelness.
    Assembled(&'a GlobalBoxField),
    /// All level boxes per pixel; the location probability is their best IoU.
    MaxLevel(&'a LevelBoxStack),
}

impl BoxSource<'_> {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            BoxSource::Assembled(b) => (b.height(), b.width()),
            BoxSource::MaxLevel(s) => (s.height(), s.width()),
        }
    }

    /// Location probability at one pixel.
    #[inline]
    pub fn p_loc(&self, index: usize, query: &ScoredBox) -> f32 {
        match self {
            BoxSource::Assembled(b) => {
                if b.is_background(index) {
                    0.0
                } else {
                    iou(&b.box_at(index), &query.bbox)
                }
            }
            BoxSource::MaxLevel(s) => s.max_iou_at(index, &query.bbox),
        }
    }

    /// Dense location probability map of one query.
    pub fn location_probability(&self, query: &ScoredBox) -> Grid<f32> {
        let (h, w) = self.dims();
        Grid::from_fn(h, w, |y, x| self.p_loc(y * w + x, query))
    }

    fn may_be_foreground(&self, index: usize) -> bool {
        match self {
            BoxSource::Assembled(b) => !b.is_background(index),
            BoxSource::MaxLevel(_) => true,
        }
    }
}

/// Binary instance mask on the global grid, as sorted pixel indices.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub query: ScoredBox,
    pub pixels: Vec<u32>,
}

impl InstanceMask {
    pub fn from_grid(query: ScoredBox, mask: &Grid<bool>) -> Self {
        let pixels = mask
            .data()
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i as u32))
            .collect();
        InstanceMask { query, pixels }
    }

    pub fn to_grid(&self, height: usize, width: usize) -> Grid<bool> {
        let mut g = Grid::filled(height, width, false);
        for &i in &self.pixels {
            g.data_mut()[i as usize] = true;
        }
        g
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

fn check_inputs(
    source: &BoxSource<'_>,
    semantics: &SemanticField,
    layout: &ClassLayout,
    queries: &QuerySet,
    sigma: f32,
) -> Result<()> {
    validate_sigma(sigma)?;
    if source.dims() != (semantics.height(), semantics.width()) {
        let (h, w) = source.dims();
        return Err(Error::shape(
            "box field",
            format!("{}x{}", semantics.height(), semantics.width()),
            format!("{h}x{w}"),
        ));
    }
    if let Some(q) = queries.iter().find(|q| !layout.is_thing(q.class)) {
        return Err(Error::NotThingClass(q.class));
    }
    Ok(())
}

/// Builds every query's mask.
///
/// Since the location probability never exceeds 1, a pixel can only pass the
/// threshold where the semantic probability of the query class already
/// exceeds `sigma`; each class gathers those pixels once and its queries only
/// visit them. Queries run in parallel on the current rayon pool and results
/// come back in query order.
pub fn construct_masks(
    source: BoxSource<'_>,
    semantics: &SemanticField,
    layout: &ClassLayout,
    queries: &QuerySet,
    sigma: f32,
) -> Result<Vec<InstanceMask>> {
    check_inputs(&source, semantics, layout, queries, sigma)?;

    let mut classes: Vec<u16> = queries.iter().map(|q| q.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let candidates: Vec<(u16, Vec<u32>)> = classes
        .par_iter()
        .map(|&c| {
            let plane = semantics.class_plane(c);
            let idx = plane
                .iter()
                .enumerate()
                .filter(|&(i, &s)| s > sigma && source.may_be_foreground(i))
                .map(|(i, _)| i as u32)
                .collect();
            (c, idx)
        })
        .collect();

    let masks = queries
        .boxes()
        .par_iter()
        .map(|q| {
            let (_, cand) = candidates
                .iter()
                .find(|(c, _)| *c == q.class)
                .expect("every query class has a candidate list");
            let sem = semantics.class_plane(q.class);
            let pixels = cand
                .iter()
                .copied()
                .filter(|&i| source.p_loc(i as usize, q) * sem[i as usize] > sigma)
                .collect();
            InstanceMask { query: *q, pixels }
        })
        .collect();
    Ok(masks)
}

/// Straightforward reference path: one dense location map, one dense mask
/// probability map and one threshold pass per query, single-threaded. Used
/// as the benchmark baseline.
pub fn construct_masks_dense(
    source: BoxSource<'_>,
    semantics: &SemanticField,
    layout: &ClassLayout,
    queries: &QuerySet,
    sigma: f32,
) -> Result<Vec<InstanceMask>> {
    check_inputs(&source, semantics, layout, queries, sigma)?;
    queries
        .iter()
        .map(|q| {
            let p_loc = source.location_probability(q);
            let m = mask_probability(&p_loc, semantics, layout, q.class)?;
            Ok(InstanceMask::from_grid(*q, &threshold_mask(&m, sigma)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// Minimum full-resolution area of a stuff region; smaller ones become void.
    pub stuff_area_min: u64,
    /// Factor from the global grid to the output resolution.
    pub upsample: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            stuff_area_min: 4096,
            upsample: GLOBAL_STRIDE as usize,
        }
    }
}

/// Greedy fusion of instance masks with the semantic field.
///
/// Masks claim pixels in rank order; a pixel belongs to the first mask that
/// contains it, and ids 1, 2, ... are handed out to masks that claim at least
/// one pixel. Remaining pixels take the semantic argmax; if that is a thing
/// class, or a stuff class covering less than `stuff_area_min`, they become
/// void.
pub fn fuse_panoptic(
    masks: &[InstanceMask],
    semantics: &SemanticField,
    layout: &ClassLayout,
    params: &FusionParams,
) -> Result<PanopticMap> {
    if params.upsample == 0 {
        return Err(Error::Config("upsample factor must be at least 1".into()));
    }
    let (h, w) = (semantics.height(), semantics.width());
    let n = h * w;
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| rank_order(&masks[a].query, &masks[b].query));

    let mut owner = vec![0u16; n];
    let mut classes = vec![VOID_CLASS; n];
    let mut scores: Vec<f32> = vec![0.0];
    for &mi in &order {
        let mask = &masks[mi];
        if !layout.is_thing(mask.query.class) {
            return Err(Error::NotThingClass(mask.query.class));
        }
        let next = scores.len();
        if next > u16::MAX as usize {
            break;
        }
        let id = next as u16;
        let mut claimed = false;
        for &p in &mask.pixels {
            let p = p as usize;
            if p >= n {
                return Err(Error::shape("mask pixel index", format!("< {n}"), p));
            }
            if owner[p] == 0 {
                owner[p] = id;
                classes[p] = mask.query.class;
                claimed = true;
            }
        }
        if claimed {
            scores.push(mask.query.score);
        }
    }

    let block = (params.upsample * params.upsample) as u64;
    let mut stuff_area = vec![0u64; layout.num_classes() + 1];
    for i in 0..n {
        if owner[i] != 0 {
            continue;
        }
        let c = semantics.argmax_at(i);
        if layout.is_stuff(c) {
            classes[i] = c;
            stuff_area[c as usize] += block;
        }
    }
    for i in 0..n {
        let c = classes[i];
        if owner[i] == 0 && c != VOID_CLASS && stuff_area[c as usize] < params.stuff_area_min {
            classes[i] = VOID_CLASS;
        }
    }

    let classes = upsample_nearest(&Grid::new(h, w, classes)?, params.upsample);
    let instances = upsample_nearest(&Grid::new(h, w, owner)?, params.upsample);
    PanopticMap::from_maps(classes, instances, layout, |id| scores[id as usize])
}
