//! Training-target generation from ground truth.
//!
//! Every pyramid location is mapped to the image pixel at the centre of its
//! receptive field. A location is foreground when that pixel belongs to an
//! instance (its visible mask in full mode, its box in weak mode), and it is
//! kept on a level only if the largest regression offset falls in the level's
//! size range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    check_image_dims, global_dims, global_reference_point, validate_levels, ClassLayout, Grid,
    LevelSpec, PanopticMap, Planes,
};
use crate::geometry::{box_to_offsets, centerness, receptive_center_f32, BoundingBox, BoxOffsets};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub id: u16,
    pub class: u16,
    pub bbox: BoundingBox,
}

/// Ground-truth panoptic labelling plus per-instance boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub layout: ClassLayout,
    pub panoptic: PanopticMap,
    pub instances: Vec<InstanceInfo>,
}

impl GroundTruthScene {
    pub fn new(layout: ClassLayout, panoptic: PanopticMap, instances: Vec<InstanceInfo>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for inst in &instances {
            if inst.id == 0 || !seen.insert(inst.id) {
                return Err(Error::InvalidValue(format!("duplicate or zero instance id {}", inst.id)));
            }
            if !layout.is_thing(inst.class) {
                return Err(Error::NotThingClass(inst.class));
            }
            if !inst.bbox.is_valid() {
                let b = inst.bbox;
                return Err(Error::InvalidBox(b.x1, b.y1, b.x2, b.y2));
            }
        }
        let classes = panoptic.classes();
        let ids = panoptic.instances();
        let w = ids.width();
        for (i, &id) in ids.data().iter().enumerate() {
            if id == 0 {
                continue;
            }
            let Some(inst) = instances.iter().find(|p| p.id == id) else {
                return Err(Error::InvalidValue(format!("instance {id} has no box")));
            };
            if classes.data()[i] != inst.class {
                return Err(Error::InvalidValue(format!(
                    "instance {id} labelled with class {} but declared {}",
                    classes.data()[i],
                    inst.class
                )));
            }
            let (x, y) = ((i % w) as f32, (i / w) as f32);
            if !inst.bbox.contains(x, y) {
                return Err(Error::InvalidValue(format!(
                    "instance {id} pixel ({x}, {y}) outside its box"
                )));
            }
        }
        Ok(GroundTruthScene {
            layout,
            panoptic,
            instances,
        })
    }

    pub fn height(&self) -> usize {
        self.panoptic.height()
    }

    pub fn width(&self) -> usize {
        self.panoptic.width()
    }

    pub fn instance(&self, id: u16) -> Option<&InstanceInfo> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AssignMode {
    /// Foreground means inside an instance mask.
    #[default]
    Full,
    /// Foreground means inside an instance box; overlaps go to the smallest
    /// box, then the lowest instance id.
    Weak,
}

/// Pixel-to-instance lookup for one scene and mode.
pub struct ForegroundAssigner<'a> {
    scene: &'a GroundTruthScene,
    mode: AssignMode,
    by_area: Vec<&'a InstanceInfo>,
}

impl<'a> ForegroundAssigner<'a> {
    pub fn new(scene: &'a GroundTruthScene, mode: AssignMode) -> Self {
        let mut by_area: Vec<&InstanceInfo> = scene.instances.iter().collect();
        by_area.sort_by(|a, b| {
            a.bbox
                .area()
                .total_cmp(&b.bbox.area())
                .then(a.id.cmp(&b.id))
        });
        ForegroundAssigner {
            scene,
            mode,
            by_area,
        }
    }

    /// Instance id owning pixel `(x, y)`, 0 for background.
    pub fn assign(&self, x: usize, y: usize) -> u16 {
        match self.mode {
            AssignMode::Full => self.scene.panoptic.instances().get(y, x),
            AssignMode::Weak => {
                let (fx, fy) = (x as f32, y as f32);
                self.by_area
                    .iter()
                    .find(|i| i.bbox.contains(fx, fy))
                    .map_or(0, |i| i.id)
            }
        }
    }

    pub fn instance(&self, id: u16) -> &'a InstanceInfo {
        self.scene
            .instance(id)
            .expect("assigned ids always come from the scene")
    }
}

/// Per-pixel instance assignment over the full image.
pub fn assign_foreground(scene: &GroundTruthScene, mode: AssignMode) -> Grid<u16> {
    let assigner = ForegroundAssigner::new(scene, mode);
    Grid::from_fn(scene.height(), scene.width(), |y, x| assigner.assign(x, y))
}

/// Index of the level whose size range `(min_size, max_size]` holds the
/// largest offset. The first level also takes size 0; anything beyond the
/// table goes to the last level.
pub fn assign_level(offsets: &BoxOffsets, specs: &[LevelSpec]) -> usize {
    let v = offsets.max_side();
    specs
        .iter()
        .position(|s| v <= s.max_size)
        .unwrap_or(specs.len() - 1)
}

/// Regression target of one reference pixel: owning instance, offsets and
/// the level those offsets belong to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelTarget {
    pub instance: u16,
    pub class: u16,
    pub offsets: BoxOffsets,
    pub level: usize,
}

pub(crate) fn pixel_target(
    assigner: &ForegroundAssigner<'_>,
    specs: &[LevelSpec],
    point: (f32, f32),
) -> Option<PixelTarget> {
    let id = assigner.assign(point.0 as usize, point.1 as usize);
    if id == 0 {
        return None;
    }
    let inst = assigner.instance(id);
    let offsets = box_to_offsets(&inst.bbox, point)
        .expect("assigned pixels lie inside their instance box");
    Some(PixelTarget {
        instance: id,
        class: inst.class,
        offsets,
        level: assign_level(&offsets, specs),
    })
}

/// Targets of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub stride: u32,
    /// `l, t, r, b` planes; zero at background locations.
    pub offsets: Planes<f32>,
    /// Semantic class id of the assigned instance, 0 for background.
    pub class: Grid<u16>,
    pub centerness: Grid<f32>,
    pub foreground: Grid<bool>,
}

impl LevelTargets {
    pub fn offsets_at(&self, y: usize, x: usize) -> BoxOffsets {
        let i = y * self.foreground.width() + x;
        BoxOffsets {
            l: self.offsets.plane(0)[i],
            t: self.offsets.plane(1)[i],
            r: self.offsets.plane(2)[i],
            b: self.offsets.plane(3)[i],
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.data().iter().filter(|&&f| f).count()
    }
}

/// Targets on the global grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTargets {
    /// 0 for background, otherwise 1 + level index.
    pub levelness: Grid<u16>,
    pub semantics: Grid<u16>,
    /// Ground-truth instance ids sampled onto the global grid.
    pub instances: Grid<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTargets {
    pub image_height: usize,
    pub image_width: usize,
    pub layout: ClassLayout,
    pub specs: Vec<LevelSpec>,
    pub levels: Vec<LevelTargets>,
    pub global: GlobalTargets,
    pub boxes: Vec<InstanceInfo>,
}

pub fn build_targets(
    scene: &GroundTruthScene,
    specs: &[LevelSpec],
    mode: AssignMode,
) -> Result<TrainingTargets> {
    validate_levels(specs)?;
    let (height, width) = (scene.height(), scene.width());
    check_image_dims(height, width, specs)?;
    let assigner = ForegroundAssigner::new(scene, mode);

    let mut levels = Vec::with_capacity(specs.len());
    for (li, spec) in specs.iter().enumerate() {
        let (h, w) = spec.grid_dims(height, width);
        let mut offsets = Planes::filled(4, h, w, 0.0f32);
        let mut class = Grid::filled(h, w, 0u16);
        let mut ctr = Grid::filled(h, w, 0.0f32);
        let mut fg = Grid::filled(h, w, false);
        for y in 0..h {
            for x in 0..w {
                let point = receptive_center_f32(spec.stride, x, y);
                let Some(t) = pixel_target(&assigner, specs, point) else {
                    continue;
                };
                if t.level != li {
                    continue;
                }
                for (c, v) in [t.offsets.l, t.offsets.t, t.offsets.r, t.offsets.b]
                    .into_iter()
                    .enumerate()
                {
                    offsets.set(c, y, x, v);
                }
                class.set(y, x, t.class);
                ctr.set(y, x, centerness(&t.offsets));
                fg.set(y, x, true);
            }
        }
        levels.push(LevelTargets {
            stride: spec.stride,
            offsets,
            class,
            centerness: ctr,
            foreground: fg,
        });
    }

    let (gh, gw) = global_dims(height, width);
    let mut levelness = Grid::filled(gh, gw, 0u16);
    let mut semantics = Grid::filled(gh, gw, 0u16);
    let mut instances = Grid::filled(gh, gw, 0u16);
    for qy in 0..gh {
        for qx in 0..gw {
            let point = global_reference_point(qx, qy);
            let (px, py) = (point.0 as usize, point.1 as usize);
            semantics.set(qy, qx, scene.panoptic.classes().get(py, px));
            instances.set(qy, qx, scene.panoptic.instances().get(py, px));
            if let Some(t) = pixel_target(&assigner, specs, point) {
                levelness.set(qy, qx, 1 + t.level as u16);
            }
        }
    }

    Ok(TrainingTargets {
        image_height: height,
        image_width: width,
        layout: scene.layout,
        specs: specs.to_vec(),
        levels,
        global: GlobalTargets {
            levelness,
            semantics,
            instances,
        },
        boxes: scene.instances.clone(),
    })
}
