//! Seeded synthetic scenes and analytically ideal predictions.
//!
//! Scenes are drawn on a coarse lattice and upsampled, so every region is a
//! union of `lattice x lattice` blocks. With a lattice of 16 and instances
//! no larger than 128 pixels, each block lies inside one cell of every level
//! that can be assigned, which is what makes exact recovery possible.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assignment::{build_targets, pixel_target, AssignMode, ForegroundAssigner, GroundTruthScene, InstanceInfo};
use crate::error::{Error, Result};
use crate::fields::{
    upsample_nearest, ClassLayout, DenseBoxLevel, Grid, LevelSpec, LevelnessField, PanopticMap, Planes,
    Predictions, SemanticField, VOID_CLASS,
};
use crate::geometry::{centerness, iou, receptive_center_f32, BoundingBox};

/// Logit given to the target levelness channel of ideal predictions; the
/// others are 0, so the softmax is one-hot to double precision.
pub const LEVELNESS_MARGIN: f32 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    #[default]
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub instances: usize,
    pub num_things: u16,
    pub num_stuff: u16,
    /// Largest allowed IoU between visible boxes of the same class.
    pub max_same_class_iou: f32,
    /// Largest allowed IoU between any two visible boxes.
    pub max_any_iou: f32,
    pub shape: Shape,
    pub lattice: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Every stuff band keeps at least this many visible pixels.
    pub min_stuff_area: usize,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 512,
            height: 512,
            instances: 5,
            num_things: 3,
            num_stuff: 3,
            max_same_class_iou: 0.3,
            max_any_iou: 1.0,
            shape: Shape::Rectangle,
            lattice: 16,
            min_size: 32,
            max_size: 128,
            min_stuff_area: 4096,
            seed: 0,
            max_attempts: 1000,
        }
    }
}

impl SceneConfig {
    pub fn layout(&self) -> ClassLayout {
        ClassLayout::new(self.num_stuff, self.num_things)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lattice == 0 || !self.width.is_multiple_of(self.lattice) || !self.height.is_multiple_of(self.lattice) {
            return bad(format!(
                "image {}x{} must be a positive multiple of the lattice {}",
                self.width, self.height, self.lattice
            ));
        }
        if self.num_stuff == 0 || self.num_stuff as usize > self.height / self.lattice {
            return bad(format!("cannot fit {} stuff bands", self.num_stuff));
        }
        if self.instances > 0 && self.num_things == 0 {
            return bad("instances requested but there are no thing classes".into());
        }
        if self.instances >= u16::MAX as usize {
            return bad(format!("too many instances: {}", self.instances));
        }
        let lo = self.min_size.div_ceil(self.lattice).max(1);
        let hi = self.max_size / self.lattice;
        if lo > hi || hi * self.lattice > self.width.min(self.height) {
            return bad(format!(
                "instance sizes {}..={} do not fit the lattice {} and image {}x{}",
                self.min_size, self.max_size, self.lattice, self.width, self.height
            ));
        }
        for (name, v) in [("max_same_class_iou", self.max_same_class_iou), ("max_any_iou", self.max_any_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

/// Coarse scene on the lattice grid.
struct CellScene {
    cw: usize,
    stuff: Vec<u16>,
    owner: Vec<u16>,
    classes: Vec<u16>,
}

impl CellScene {
    /// Visible cell boxes `(x1, y1, x2, y2)` inclusive and cell counts per instance.
    fn visible(&self, count: usize) -> Vec<Option<([usize; 4], usize)>> {
        let mut out: Vec<Option<([usize; 4], usize)>> = vec![None; count];
        for (i, &o) in self.owner.iter().enumerate() {
            if o == 0 {
                continue;
            }
            let (x, y) = (i % self.cw, i / self.cw);
            let e = &mut out[o as usize - 1];
            match e {
                None => *e = Some(([x, y, x, y], 1)),
                Some((b, n)) => {
                    b[0] = b[0].min(x);
                    b[1] = b[1].min(y);
                    b[2] = b[2].max(x);
                    b[3] = b[3].max(y);
                    *n += 1;
                }
            }
        }
        out
    }
}

fn cell_box(b: [usize; 4], lattice: usize) -> BoundingBox {
    BoundingBox {
        x1: (b[0] * lattice) as f32,
        y1: (b[1] * lattice) as f32,
        x2: ((b[2] + 1) * lattice - 1) as f32,
        y2: ((b[3] + 1) * lattice - 1) as f32,
    }
}

fn stuff_bands(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let (cw, ch) = (cfg.width / cfg.lattice, cfg.height / cfg.lattice);
    let n = cfg.num_stuff as usize;
    let mut rows: Vec<usize> = (1..ch).collect();
    rows.shuffle(rng);
    let mut cuts: Vec<usize> = rows[..n - 1].to_vec();
    cuts.sort_unstable();
    let mut stuff = Vec::with_capacity(cw * ch);
    for y in 0..ch {
        let band = cuts.iter().filter(|&&c| c <= y).count();
        stuff.extend(std::iter::repeat_n(band as u16 + 1, cw));
    }
    stuff
}

fn constraints_hold(cfg: &SceneConfig, scene: &CellScene, placed: usize, classes: &[u16]) -> bool {
    let vis = scene.visible(placed);
    let mut boxes = Vec::with_capacity(placed);
    for v in &vis {
        match v {
            Some((b, _)) => boxes.push(cell_box(*b, cfg.lattice)),
            None => return false,
        }
    }
    for i in 0..placed {
        for j in i + 1..placed {
            let v = iou(&boxes[i], &boxes[j]);
            if v > cfg.max_any_iou || (classes[i] == classes[j] && v > cfg.max_same_class_iou) {
                return false;
            }
        }
    }
    let block = cfg.lattice * cfg.lattice;
    let mut area = vec![0usize; cfg.num_stuff as usize + 1];
    for (i, &s) in scene.stuff.iter().enumerate() {
        if scene.owner[i] == 0 {
            area[s as usize] += block;
        }
    }
    area[1..].iter().all(|&a| a >= cfg.min_stuff_area)
}

/// Draws a scene: horizontal stuff bands, then instances painted in order so
/// that later ones occlude earlier ones. Each instance box is the tight box
/// of its visible pixels.
pub fn generate_scene(cfg: &SceneConfig) -> Result<GroundTruthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (cw, ch) = (cfg.width / cfg.lattice, cfg.height / cfg.lattice);
    let lo = cfg.min_size.div_ceil(cfg.lattice).max(1);
    let hi = cfg.max_size / cfg.lattice;

    let mut scene = None;
    for _ in 0..cfg.max_attempts {
        let stuff = stuff_bands(cfg, &mut rng);
        let s = CellScene {
            cw,
            owner: vec![0; cw * ch],
            classes: stuff.clone(),
            stuff,
        };
        if constraints_hold(cfg, &s, 0, &[]) {
            scene = Some(s);
            break;
        }
    }
    let mut scene = scene.ok_or(Error::Placement {
        instance: 0,
        attempts: cfg.max_attempts,
    })?;

    let mut classes = Vec::with_capacity(cfg.instances);
    for k in 0..cfg.instances {
        let id = k as u16 + 1;
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let class = cfg.num_stuff + 1 + rng.random_range(0..cfg.num_things);
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let x0 = rng.random_range(0..=cw - w);
            let y0 = rng.random_range(0..=ch - h);
            let mut owner = scene.owner.clone();
            let mut cls = scene.classes.clone();
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    if cfg.shape == Shape::Ellipse {
                        let dx = (x - x0) as f64 + 0.5 - w as f64 / 2.0;
                        let dy = (y - y0) as f64 + 0.5 - h as f64 / 2.0;
                        let r = (dx / (w as f64 / 2.0)).powi(2) + (dy / (h as f64 / 2.0)).powi(2);
                        if r > 1.0 {
                            continue;
                        }
                    }
                    owner[y * cw + x] = id;
                    cls[y * cw + x] = class;
                }
            }
            let trial = CellScene {
                cw,
                stuff: scene.stuff.clone(),
                owner,
                classes: cls,
            };
            classes.push(class);
            if constraints_hold(cfg, &trial, k + 1, &classes) {
                scene = trial;
                placed = true;
                break;
            }
            classes.pop();
        }
        if !placed {
            return Err(Error::Placement {
                instance: k,
                attempts: cfg.max_attempts,
            });
        }
    }

    let instances = scene
        .visible(cfg.instances)
        .into_iter()
        .zip(&classes)
        .enumerate()
        .map(|(k, (v, &class))| InstanceInfo {
            id: k as u16 + 1,
            class,
            bbox: cell_box(v.expect("placement keeps every instance visible").0, cfg.lattice),
        })
        .collect();
    let layout = cfg.layout();
    let up = |v: Vec<u16>| upsample_nearest(&Grid::new(ch, cw, v).expect("cell grid"), cfg.lattice);
    let panoptic = PanopticMap::from_maps(up(scene.classes), up(scene.owner), &layout, |_| 1.0)?;
    GroundTruthScene::new(layout, panoptic, instances)
}

/// Ideal predictions under full supervision.
pub fn ideal_predictions(scene: &GroundTruthScene, specs: &[LevelSpec]) -> Result<Predictions> {
    ideal_predictions_with_mode(scene, specs, AssignMode::Full)
}

/// Predictions that a perfect network trained with `mode` targets would make.
///
/// Every level location whose receptive centre is assigned to an instance
/// predicts that instance's box. Class probability and centerness are set
/// only where the location is a training positive, so the classification
/// and centerness outputs coincide with the targets. Semantics are one-hot
/// on the ground truth and levelness is one-hot on its target.
pub fn ideal_predictions_with_mode(scene: &GroundTruthScene, specs: &[LevelSpec], mode: AssignMode) -> Result<Predictions> {
    let targets = build_targets(scene, specs, mode)?;
    let assigner = ForegroundAssigner::new(scene, mode);
    let layout = scene.layout;
    let things = layout.num_things as usize;

    let mut levels = Vec::with_capacity(specs.len());
    for (spec, lt) in specs.iter().zip(&targets.levels) {
        let (h, w) = lt.class.dims();
        let mut offsets = Planes::filled(4, h, w, 0.0f32);
        let mut probs = Planes::filled(things, h, w, 0.0f32);
        let mut ctr = Grid::filled(h, w, 0.0f32);
        for y in 0..h {
            for x in 0..w {
                let point = receptive_center_f32(spec.stride, x, y);
                let Some(t) = pixel_target(&assigner, specs, point) else {
                    continue;
                };
                for (c, v) in [t.offsets.l, t.offsets.t, t.offsets.r, t.offsets.b].into_iter().enumerate() {
                    offsets.set(c, y, x, v);
                }
                if lt.foreground.get(y, x) {
                    let k = layout.thing_index(t.class).ok_or(Error::NotThingClass(t.class))?;
                    probs.set(k, y, x, 1.0);
                    ctr.set(y, x, centerness(&t.offsets));
                }
            }
        }
        levels.push(DenseBoxLevel::new(spec.stride, offsets, probs, ctr)?);
    }

    let sem_t = &targets.global.semantics;
    let (gh, gw) = sem_t.dims();
    let nc = layout.num_classes();
    let mut sem = Planes::filled(nc, gh, gw, 0.0f32);
    for (i, &c) in sem_t.data().iter().enumerate() {
        if c == VOID_CLASS {
            for k in 0..nc {
                sem.plane_mut(k)[i] = 1.0 / nc as f32;
            }
        } else {
            sem.plane_mut(c as usize - 1)[i] = 1.0;
        }
    }
    let mut lv = Planes::filled(specs.len() + 1, gh, gw, 0.0f32);
    for (i, &t) in targets.global.levelness.data().iter().enumerate() {
        lv.plane_mut(t as usize)[i] = LEVELNESS_MARGIN;
    }

    Predictions::new(
        scene.height(),
        scene.width(),
        layout,
        specs.to_vec(),
        levels,
        SemanticField::new(sem)?,
        LevelnessField::new(lv)?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseConfig {
    /// Standard deviation of the Gaussian added to every offset, in pixels.
    pub offset_std: f32,
    /// Probability of moving a pixel's semantic argmax to another class.
    pub semantic_flip: f64,
    pub centerness_std: f32,
    /// Probability of moving a pixel's levelness argmax to another channel.
    pub levelness_flip: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.offset_std >= 0.0
            && self.centerness_std >= 0.0
            && (0.0..=1.0).contains(&self.semantic_flip)
            && (0.0..=1.0).contains(&self.levelness_flip);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise config {self:?}")))
        }
    }
}

/// Swaps the value at the argmax channel with a random other channel.
fn flip_argmax(data: &mut [f32], plane_len: usize, channels: usize, index: usize, rng: &mut ChaCha8Rng) {
    if channels < 2 {
        return;
    }
    let at = |c: usize| c * plane_len + index;
    let mut best = 0;
    for c in 1..channels {
        if data[at(c)] > data[at(best)] {
            best = c;
        }
    }
    let mut other = rng.random_range(0..channels - 1);
    if other >= best {
        other += 1;
    }
    data.swap(at(best), at(other));
}

/// Seeded degradation of predictions. Zero noise returns an identical copy.
pub fn perturb(preds: &Predictions, noise: &NoiseConfig) -> Result<Predictions> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut out = preds.clone();
    let offset = Normal::new(0.0f32, noise.offset_std).map_err(|e| Error::Config(e.to_string()))?;
    let ctr_noise = Normal::new(0.0f32, noise.centerness_std).map_err(|e| Error::Config(e.to_string()))?;
    for level in &mut out.levels {
        let (offsets, _, ctr) = level.parts_mut();
        if noise.offset_std > 0.0 {
            for v in offsets.data_mut() {
                *v = (*v + offset.sample(&mut rng)).max(0.0);
            }
        }
        if noise.centerness_std > 0.0 {
            for v in ctr.data_mut() {
                *v = (*v + ctr_noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    if noise.semantic_flip > 0.0 {
        let p = out.semantics.probs_mut();
        let (n, c) = (p.plane_len(), p.channels());
        for i in 0..n {
            if rng.random_bool(noise.semantic_flip) {
                flip_argmax(p.data_mut(), n, c, i, &mut rng);
            }
        }
    }
    if noise.levelness_flip > 0.0 {
        let l = out.levelness.logits_mut();
        let (n, c) = (l.plane_len(), l.channels());
        for i in 0..n {
            if rng.random_bool(noise.levelness_flip) {
                flip_argmax(l.data_mut(), n, c, i, &mut rng);
            }
        }
    }
    Ok(out)
}
