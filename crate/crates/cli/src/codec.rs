//! Conversions between library types and tensor bundles, plus the panoptic
//! archive layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use densepan::assignment::{AssignMode, GlobalTargets, GroundTruthScene, InstanceInfo, LevelTargets, TrainingTargets};
use densepan::fields::{
    global_dims, ClassLayout, DenseBoxLevel, Grid, LevelSpec, LevelnessField, PanopticMap, Planes, Predictions,
    SegmentInfo, SemanticField,
};
use densepan::geometry::BoundingBox;
use serde::{Deserialize, Serialize};

use crate::bundle::{Tensor, TensorBundle};

pub const SEGMENTS_FILE: &str = "segments.json";
pub const IMAGE_FILE: &str = "panoptic.ppm";

/// Level description as stored in manifests; `null` max size means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LevelAttr {
    stride: u32,
    min_size: f32,
    max_size: Option<f32>,
}

impl From<&LevelSpec> for LevelAttr {
    fn from(s: &LevelSpec) -> Self {
        LevelAttr {
            stride: s.stride,
            min_size: s.min_size,
            max_size: s.max_size.is_finite().then_some(s.max_size),
        }
    }
}

impl From<LevelAttr> for LevelSpec {
    fn from(a: LevelAttr) -> Self {
        LevelSpec {
            stride: a.stride,
            min_size: a.min_size,
            max_size: a.max_size.unwrap_or(f32::INFINITY),
        }
    }
}

fn set_header(b: &mut TensorBundle, kind: &str, layout: &ClassLayout, h: usize, w: usize) -> Result<()> {
    b.set_attr("kind", kind)?;
    b.set_attr("num_stuff", layout.num_stuff)?;
    b.set_attr("num_things", layout.num_things)?;
    b.set_attr("image_height", h)?;
    b.set_attr("image_width", w)
}

struct Header {
    layout: ClassLayout,
    height: usize,
    width: usize,
}

fn header(b: &TensorBundle, kinds: &[&str]) -> Result<Header> {
    let kind: String = b.attr("kind")?;
    ensure!(kinds.contains(&kind.as_str()), "expected a {} bundle, found `{kind}`", kinds.join(" or "));
    Ok(Header {
        layout: ClassLayout::new(b.attr("num_stuff")?, b.attr("num_things")?),
        height: b.attr("image_height")?,
        width: b.attr("image_width")?,
    })
}

fn specs_attr(b: &TensorBundle) -> Result<Vec<LevelSpec>> {
    let levels: Vec<LevelAttr> = b.attr("levels")?;
    Ok(levels.into_iter().map(LevelSpec::from).collect())
}

fn grid<T: Copy>(h: usize, w: usize, data: &[T]) -> Result<Grid<T>> {
    Ok(Grid::new(h, w, data.to_vec())?)
}

fn planes(c: usize, h: usize, w: usize, data: &[f32]) -> Result<Planes<f32>> {
    Ok(Planes::new(c, h, w, data.to_vec())?)
}

fn insert_map(b: &mut TensorBundle, map: &PanopticMap) -> Result<()> {
    let shape = vec![map.height(), map.width()];
    b.insert("classes", Tensor::u16(shape.clone(), map.classes().data().to_vec())?);
    b.insert("instances", Tensor::u16(shape, map.instances().data().to_vec())?);
    Ok(())
}

fn insert_boxes(b: &mut TensorBundle, boxes: &[InstanceInfo]) -> Result<()> {
    let n = boxes.len();
    b.insert("boxes", Tensor::f32(vec![n, 4], boxes.iter().flat_map(|i| i.bbox.to_array()).collect())?);
    b.insert("box_ids", Tensor::u16(vec![n], boxes.iter().map(|i| i.id).collect())?);
    b.insert("box_classes", Tensor::u16(vec![n], boxes.iter().map(|i| i.class).collect())?);
    Ok(())
}

fn read_boxes(b: &TensorBundle) -> Result<Vec<InstanceInfo>> {
    let ids = b.get("box_ids")?;
    let n = ids.shape.first().copied().unwrap_or(0);
    let coords = b.f32("boxes", &[n, 4])?;
    let ids = b.u16("box_ids", &[n])?;
    let classes = b.u16("box_classes", &[n])?;
    (0..n)
        .map(|i| {
            let c = &coords[4 * i..4 * i + 4];
            Ok(InstanceInfo {
                id: ids[i],
                class: classes[i],
                bbox: BoundingBox::new(c[0], c[1], c[2], c[3])?,
            })
        })
        .collect()
}

fn read_maps(b: &TensorBundle, h: usize, w: usize) -> Result<(Grid<u16>, Grid<u16>)> {
    Ok((grid(h, w, b.u16("classes", &[h, w])?)?, grid(h, w, b.u16("instances", &[h, w])?)?))
}

pub fn scene_to_bundle(scene: &GroundTruthScene) -> Result<TensorBundle> {
    let mut b = TensorBundle::new();
    set_header(&mut b, "scene", &scene.layout, scene.height(), scene.width())?;
    insert_map(&mut b, &scene.panoptic)?;
    insert_boxes(&mut b, &scene.instances)?;
    Ok(b)
}

pub fn scene_from_bundle(b: &TensorBundle) -> Result<GroundTruthScene> {
    let h = header(b, &["scene"])?;
    let (classes, instances) = read_maps(b, h.height, h.width)?;
    let map = PanopticMap::from_maps(classes, instances, &h.layout, |_| 1.0)?;
    Ok(GroundTruthScene::new(h.layout, map, read_boxes(b)?)?)
}

pub fn predictions_to_bundle(p: &Predictions) -> Result<TensorBundle> {
    let mut b = TensorBundle::new();
    set_header(&mut b, "predictions", &p.layout, p.image_height, p.image_width)?;
    b.set_attr("levels", p.specs.iter().map(LevelAttr::from).collect::<Vec<_>>())?;
    for (k, l) in p.levels.iter().enumerate() {
        let (h, w) = (l.height(), l.width());
        b.insert(format!("level{k}.offsets"), Tensor::f32(vec![4, h, w], l.offsets().data().to_vec())?);
        b.insert(
            format!("level{k}.class_prob"),
            Tensor::f32(vec![l.num_things(), h, w], l.class_prob().data().to_vec())?,
        );
        b.insert(format!("level{k}.centerness"), Tensor::f32(vec![h, w], l.centerness().data().to_vec())?);
    }
    let s = p.semantics.probs();
    b.insert("semantics", Tensor::f32(s.shape().to_vec(), s.data().to_vec())?);
    let lv = p.levelness.logits();
    b.insert("levelness", Tensor::f32(lv.shape().to_vec(), lv.data().to_vec())?);
    Ok(b)
}

pub fn predictions_from_bundle(b: &TensorBundle) -> Result<Predictions> {
    let h = header(b, &["predictions"])?;
    let specs = specs_attr(b)?;
    let things = h.layout.num_things as usize;
    let mut levels = Vec::with_capacity(specs.len());
    for (k, s) in specs.iter().enumerate() {
        let (lh, lw) = s.grid_dims(h.height, h.width);
        let off = b.f32(&format!("level{k}.offsets"), &[4, lh, lw])?;
        let cls = b.f32(&format!("level{k}.class_prob"), &[things, lh, lw])?;
        let ctr = b.f32(&format!("level{k}.centerness"), &[lh, lw])?;
        levels.push(
            DenseBoxLevel::new(s.stride, planes(4, lh, lw, off)?, planes(things, lh, lw, cls)?, grid(lh, lw, ctr)?)
                .with_context(|| format!("level {k}"))?,
        );
    }
    let (gh, gw) = global_dims(h.height, h.width);
    let nc = h.layout.num_classes();
    let sem = SemanticField::new(planes(nc, gh, gw, b.f32("semantics", &[nc, gh, gw])?)?).context("semantics")?;
    let nl = specs.len() + 1;
    let lv = LevelnessField::new(planes(nl, gh, gw, b.f32("levelness", &[nl, gh, gw])?)?).context("levelness")?;
    Ok(Predictions::new(h.height, h.width, h.layout, specs, levels, sem, lv)?)
}

pub fn targets_to_bundle(t: &TrainingTargets, mode: AssignMode) -> Result<TensorBundle> {
    let mut b = TensorBundle::new();
    set_header(&mut b, "targets", &t.layout, t.image_height, t.image_width)?;
    b.set_attr("levels", t.specs.iter().map(LevelAttr::from).collect::<Vec<_>>())?;
    b.set_attr("mode", mode)?;
    for (k, l) in t.levels.iter().enumerate() {
        let (h, w) = l.class.dims();
        b.insert(format!("level{k}.offsets"), Tensor::f32(vec![4, h, w], l.offsets.data().to_vec())?);
        b.insert(format!("level{k}.class"), Tensor::u16(vec![h, w], l.class.data().to_vec())?);
        b.insert(format!("level{k}.centerness"), Tensor::f32(vec![h, w], l.centerness.data().to_vec())?);
        b.insert(
            format!("level{k}.foreground"),
            Tensor::u8(vec![h, w], l.foreground.data().iter().map(|&f| f as u8).collect())?,
        );
    }
    let g = &t.global;
    let shape = vec![g.levelness.height(), g.levelness.width()];
    b.insert("levelness", Tensor::u16(shape.clone(), g.levelness.data().to_vec())?);
    b.insert("semantics", Tensor::u16(shape.clone(), g.semantics.data().to_vec())?);
    b.insert("instances", Tensor::u16(shape, g.instances.data().to_vec())?);
    insert_boxes(&mut b, &t.boxes)?;
    Ok(b)
}

pub fn targets_from_bundle(b: &TensorBundle) -> Result<TrainingTargets> {
    let h = header(b, &["targets"])?;
    let specs = specs_attr(b)?;
    let mut levels = Vec::with_capacity(specs.len());
    for (k, s) in specs.iter().enumerate() {
        let (lh, lw) = s.grid_dims(h.height, h.width);
        let fg = b.u8(&format!("level{k}.foreground"), &[lh, lw])?;
        ensure!(fg.iter().all(|&f| f <= 1), "level {k} foreground flags must be 0 or 1");
        levels.push(LevelTargets {
            stride: s.stride,
            offsets: planes(4, lh, lw, b.f32(&format!("level{k}.offsets"), &[4, lh, lw])?)?,
            class: grid(lh, lw, b.u16(&format!("level{k}.class"), &[lh, lw])?)?,
            centerness: grid(lh, lw, b.f32(&format!("level{k}.centerness"), &[lh, lw])?)?,
            foreground: Grid::new(lh, lw, fg.iter().map(|&f| f == 1).collect())?,
        });
    }
    let (gh, gw) = global_dims(h.height, h.width);
    let global = GlobalTargets {
        levelness: grid(gh, gw, b.u16("levelness", &[gh, gw])?)?,
        semantics: grid(gh, gw, b.u16("semantics", &[gh, gw])?)?,
        instances: grid(gh, gw, b.u16("instances", &[gh, gw])?)?,
    };
    Ok(TrainingTargets {
        image_height: h.height,
        image_width: h.width,
        layout: h.layout,
        specs,
        levels,
        global,
        boxes: read_boxes(b)?,
    })
}

/// Writes a panoptic archive: the maps as a bundle, the segment list, and
/// optionally a colour rendering.
pub fn write_archive(dir: &Path, map: &PanopticMap, layout: &ClassLayout, image: bool) -> Result<()> {
    let mut b = TensorBundle::new();
    set_header(&mut b, "panoptic", layout, map.height(), map.width())?;
    insert_map(&mut b, map)?;
    b.write(dir)?;
    fs::write(dir.join(SEGMENTS_FILE), serde_json::to_string_pretty(map.segments())?)?;
    if image {
        write_ppm(&dir.join(IMAGE_FILE), map)?;
    }
    Ok(())
}

/// Reads the panoptic map of an archive or a scene bundle. A segment list,
/// when present, must agree with the maps.
pub fn read_panoptic(dir: &Path) -> Result<(PanopticMap, ClassLayout)> {
    let b = TensorBundle::read(dir)?;
    let h = header(&b, &["panoptic", "scene"])?;
    let (classes, instances) = read_maps(&b, h.height, h.width)?;
    let seg_path = dir.join(SEGMENTS_FILE);
    let map = if seg_path.exists() {
        let segments: Vec<SegmentInfo> = serde_json::from_str(&fs::read_to_string(&seg_path)?)
            .with_context(|| format!("malformed {}", seg_path.display()))?;
        PanopticMap::new(classes, instances, segments, &h.layout)?
    } else {
        PanopticMap::from_maps(classes, instances, &h.layout, |_| 1.0)?
    };
    Ok((map, h.layout))
}

/// Deterministic colour of a `(class, instance)` pair; void is black.
pub fn palette(class: u16, id: u16) -> [u8; 3] {
    if class == 0 {
        return [0, 0, 0];
    }
    let mut x = (class as u64) << 16 | id as u64;
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    [(x >> 8) as u8 | 0x20, (x >> 24) as u8 | 0x20, (x >> 40) as u8 | 0x20]
}

pub fn write_ppm(path: &Path, map: &PanopticMap) -> Result<()> {
    let mut out = Vec::with_capacity(map.classes().len() * 3 + 32);
    write!(out, "P6\n{} {}\n255\n", map.width(), map.height())?;
    for (&c, &id) in map.classes().data().iter().zip(map.instances().data()) {
        out.extend_from_slice(&palette(c, id));
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}
