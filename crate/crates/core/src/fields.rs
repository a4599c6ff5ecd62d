//! Dense image-grid containers shared by all pipeline stages.
//!
//! Every multi-channel field is stored planar (channel-major, then row-major)
//! so per-channel scans are contiguous. All dense pipeline math runs on the
//! global grid at a quarter of the image resolution; [`GLOBAL_STRIDE`] is the
//! factor between the two.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{offsets_to_box, receptive_center_f32, BoundingBox, BoxOffsets};

/// Downsampling factor of the global (levelness/semantic) grid.
pub const GLOBAL_STRIDE: u32 = 4;

/// Single-channel row-major grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "grid",
                format!("{height}x{width} = {}", height * width),
                data.len(),
            ));
        }
        Ok(Grid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Grid { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Channel-major stack of equally sized planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Planes<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::shape(
                "planes",
                format!("{channels}x{height}x{width} = {expected}"),
                data.len(),
            ));
        }
        Ok(Planes {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Planes {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Stacks single-channel grids; every plane must share one shape.
    pub fn from_planes(planes: Vec<Grid<T>>) -> Result<Self> {
        let Some(first) = planes.first() else {
            return Err(Error::shape("planes", "at least one plane", 0));
        };
        let (height, width) = first.dims();
        let mut data = Vec::with_capacity(planes.len() * height * width);
        for (c, p) in planes.iter().enumerate() {
            if p.dims() != (height, width) {
                return Err(Error::shape(
                    format!("plane {c}"),
                    format!("{height}x{width}"),
                    format!("{}x{}", p.height(), p.width()),
                ));
            }
            data.extend_from_slice(p.data());
        }
        Ok(Planes {
            channels: planes.len(),
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: T) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Replicates each source pixel into a `factor x factor` block.
pub fn upsample_nearest<T: Copy>(grid: &Grid<T>, factor: usize) -> Grid<T> {
    assert!(factor >= 1, "upsample factor must be at least 1");
    if factor == 1 {
        return grid.clone();
    }
    let (h, w) = grid.dims();
    let ow = w * factor;
    let mut data = Vec::with_capacity(h * factor * ow);
    let mut row = Vec::with_capacity(ow);
    for y in 0..h {
        row.clear();
        for &v in &grid.data()[y * w..(y + 1) * w] {
            row.extend(std::iter::repeat_n(v, factor));
        }
        for _ in 0..factor {
            data.extend_from_slice(&row);
        }
    }
    Grid {
        height: h * factor,
        width: ow,
        data,
    }
}

/// Per-pixel softmax over the channel axis, max-subtracted for stability.
pub fn softmax_field(logits: &Planes<f32>) -> Planes<f32> {
    let n = logits.plane_len();
    let c = logits.channels();
    let mut out = Planes::filled(c, logits.height(), logits.width(), 0.0f32);
    let mut buf = vec![0.0f64; c];
    for i in 0..n {
        let mut max = f32::NEG_INFINITY;
        for k in 0..c {
            max = max.max(logits.data()[k * n + i]);
        }
        let mut sum = 0.0f64;
        for (k, b) in buf.iter_mut().enumerate() {
            *b = f64::from(logits.data()[k * n + i] - max).exp();
            sum += *b;
        }
        for (k, b) in buf.iter().enumerate() {
            out.data_mut()[k * n + i] = (*b / sum) as f32;
        }
    }
    out
}

/// One pyramid level and the object-size range it is responsible for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub stride: u32,
    /// Exclusive lower bound on `max(l, t, r, b)`.
    pub min_size: f32,
    /// Inclusive upper bound; `f32::INFINITY` on the last level.
    pub max_size: f32,
}

pub const DEFAULT_STRIDES: [u32; 5] = [8, 16, 32, 64, 128];

impl LevelSpec {
    /// Levels for the given increasing strides. Each level covers sizes up to
    /// eight times its stride; the last level is unbounded.
    pub fn pyramid(strides: &[u32]) -> Result<Vec<LevelSpec>> {
        let mut specs = Vec::with_capacity(strides.len());
        let mut lo = 0.0f32;
        for (i, &stride) in strides.iter().enumerate() {
            let hi = if i + 1 == strides.len() {
                f32::INFINITY
            } else {
                8.0 * stride as f32
            };
            specs.push(LevelSpec {
                stride,
                min_size: lo,
                max_size: hi,
            });
            lo = hi;
        }
        validate_levels(&specs)?;
        Ok(specs)
    }

    pub fn default_pyramid() -> Vec<LevelSpec> {
        LevelSpec::pyramid(&DEFAULT_STRIDES).expect("default pyramid is valid")
    }

    pub fn grid_dims(&self, image_height: usize, image_width: usize) -> (usize, usize) {
        let s = self.stride as usize;
        (image_height / s, image_width / s)
    }
}

/// Checks that levels are non-empty, ordered by increasing stride, and cover
/// contiguous size ranges starting at 0 and ending at infinity.
pub fn validate_levels(specs: &[LevelSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("at least one pyramid level is required".into()));
    }
    if specs[0].min_size != 0.0 {
        return Err(Error::Config("first level must start at size 0".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.stride == 0 {
            return Err(Error::Config(format!("level {i} has stride 0")));
        }
        if s.min_size.is_nan() || s.max_size.is_nan() || s.min_size >= s.max_size {
            return Err(Error::Config(format!(
                "level {i} has empty size range ({}, {}]",
                s.min_size, s.max_size
            )));
        }
        if i > 0 {
            let prev = &specs[i - 1];
            if s.stride <= prev.stride {
                return Err(Error::Config("level strides must increase".into()));
            }
            if s.min_size != prev.max_size {
                return Err(Error::Config(format!(
                    "level {i} range does not continue level {}",
                    i - 1
                )));
            }
        }
    }
    if specs[specs.len() - 1].max_size != f32::INFINITY {
        return Err(Error::Config("last level must be unbounded".into()));
    }
    Ok(())
}

/// Class id layout. Id 0 is void; ids `1..=num_stuff` are stuff classes and
/// the following `num_things` ids are thing classes. Semantic channel `k`
/// holds class `k + 1`; box-classification channel `t` holds thing `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLayout {
    pub num_stuff: u16,
    pub num_things: u16,
}

pub const VOID_CLASS: u16 = 0;

impl ClassLayout {
    pub fn new(num_stuff: u16, num_things: u16) -> Self {
        ClassLayout {
            num_stuff,
            num_things,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_stuff as usize + self.num_things as usize
    }

    pub fn is_stuff(&self, class: u16) -> bool {
        class >= 1 && class <= self.num_stuff
    }

    pub fn is_thing(&self, class: u16) -> bool {
        class > self.num_stuff && (class as usize) <= self.num_classes()
    }

    pub fn thing_class(&self, thing_index: usize) -> u16 {
        self.num_stuff + 1 + thing_index as u16
    }

    pub fn thing_index(&self, class: u16) -> Option<usize> {
        self.is_thing(class)
            .then(|| (class - self.num_stuff - 1) as usize)
    }

    pub fn classes(&self) -> impl Iterator<Item = u16> {
        1..=(self.num_classes() as u16)
    }
}

/// Dense per-location predictions of one pyramid level.
///
/// Class and centerness channels hold sigmoid-activated probabilities;
/// offsets are already decoded, nonnegative pixel distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBoxLevel {
    pub stride: u32,
    offsets: Planes<f32>,
    class_prob: Planes<f32>,
    centerness: Grid<f32>,
}

impl DenseBoxLevel {
    pub fn new(
        stride: u32,
        offsets: Planes<f32>,
        class_prob: Planes<f32>,
        centerness: Grid<f32>,
    ) -> Result<Self> {
        if offsets.channels() != 4 {
            return Err(Error::shape("offset channels", 4, offsets.channels()));
        }
        let dims = (offsets.height(), offsets.width());
        if (class_prob.height(), class_prob.width()) != dims {
            return Err(Error::shape(
                "class planes",
                format!("{}x{}", dims.0, dims.1),
                format!("{}x{}", class_prob.height(), class_prob.width()),
            ));
        }
        if centerness.dims() != dims {
            return Err(Error::shape(
                "centerness plane",
                format!("{}x{}", dims.0, dims.1),
                format!("{}x{}", centerness.height(), centerness.width()),
            ));
        }
        if offsets.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidValue("offsets must be finite and nonnegative".into()));
        }
        let unit = |v: &f32| (0.0..=1.0).contains(v);
        if !class_prob.data().iter().all(unit) || !centerness.data().iter().all(unit) {
            return Err(Error::InvalidValue(
                "class and centerness probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(DenseBoxLevel {
            stride,
            offsets,
            class_prob,
            centerness,
        })
    }

    pub fn height(&self) -> usize {
        self.centerness.height()
    }

    pub fn width(&self) -> usize {
        self.centerness.width()
    }

    pub fn num_things(&self) -> usize {
        self.class_prob.channels()
    }

    pub fn offsets(&self) -> &Planes<f32> {
        &self.offsets
    }

    pub fn class_prob(&self) -> &Planes<f32> {
        &self.class_prob
    }

    pub fn centerness(&self) -> &Grid<f32> {
        &self.centerness
    }

    #[inline]
    pub fn offsets_at(&self, y: usize, x: usize) -> BoxOffsets {
        let i = y * self.width() + x;
        BoxOffsets {
            l: self.offsets.plane(0)[i],
            t: self.offsets.plane(1)[i],
            r: self.offsets.plane(2)[i],
            b: self.offsets.plane(3)[i],
        }
    }

    /// Absolute box predicted at grid cell `(x, y)`.
    #[inline]
    pub fn box_at(&self, y: usize, x: usize) -> BoundingBox {
        offsets_to_box(&self.offsets_at(y, x), receptive_center_f32(self.stride, x, y))
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Planes<f32>, &mut Planes<f32>, &mut Grid<f32>) {
        (&mut self.offsets, &mut self.class_prob, &mut self.centerness)
    }
}

/// Per-pixel class distribution on the global grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticField {
    probs: Planes<f32>,
}

impl SemanticField {
    pub const SUM_TOLERANCE: f32 = 1e-5;

    pub fn new(probs: Planes<f32>) -> Result<Self> {
        let n = probs.plane_len();
        if probs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("semantic probabilities must lie in [0, 1]".into()));
        }
        for i in 0..n {
            let s: f32 = (0..probs.channels()).map(|c| probs.data()[c * n + i]).sum();
            if (s - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::InvalidValue(format!(
                    "semantic probabilities at pixel {i} sum to {s}"
                )));
            }
        }
        Ok(SemanticField { probs })
    }

    pub fn from_logits(logits: &Planes<f32>) -> Result<Self> {
        SemanticField::new(softmax_field(logits))
    }

    pub fn probs(&self) -> &Planes<f32> {
        &self.probs
    }

    pub fn height(&self) -> usize {
        self.probs.height()
    }

    pub fn width(&self) -> usize {
        self.probs.width()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.channels()
    }

    /// Probability plane of class id `class` (1-based).
    pub fn class_plane(&self, class: u16) -> &[f32] {
        self.probs.plane(class as usize - 1)
    }

    #[inline]
    pub fn prob(&self, class: u16, y: usize, x: usize) -> f32 {
        self.probs.at(class as usize - 1, y, x)
    }

    /// Class id with the highest probability; ties go to the lower id.
    pub fn argmax_at(&self, index: usize) -> u16 {
        let n = self.probs.plane_len();
        let mut best = 0;
        let mut best_v = f32::NEG_INFINITY;
        for c in 0..self.probs.channels() {
            let v = self.probs.data()[c * n + index];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best as u16 + 1
    }

    pub fn argmax(&self) -> Grid<u16> {
        let (h, w) = (self.height(), self.width());
        Grid::from_fn(h, w, |y, x| self.argmax_at(y * w + x))
    }

    pub(crate) fn probs_mut(&mut self) -> &mut Planes<f32> {
        &mut self.probs
    }
}

/// Per-pixel logits over `levels + 1` classes; index 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelnessField {
    logits: Planes<f32>,
}

impl LevelnessField {
    pub fn new(logits: Planes<f32>) -> Result<Self> {
        if logits.channels() < 2 {
            return Err(Error::shape("levelness channels", ">= 2", logits.channels()));
        }
        if logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("levelness logits must be finite".into()));
        }
        Ok(LevelnessField { logits })
    }

    pub fn logits(&self) -> &Planes<f32> {
        &self.logits
    }

    pub fn height(&self) -> usize {
        self.logits.height()
    }

    pub fn width(&self) -> usize {
        self.logits.width()
    }

    pub fn num_levels(&self) -> usize {
        self.logits.channels() - 1
    }

    /// Winning index at a pixel; ties go to the lower index.
    #[inline]
    pub fn argmax_at(&self, index: usize) -> usize {
        let n = self.logits.plane_len();
        let mut best = 0;
        let mut best_v = f32::NEG_INFINITY;
        for c in 0..self.logits.channels() {
            let v = self.logits.data()[c * n + index];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best
    }

    pub(crate) fn logits_mut(&mut self) -> &mut Planes<f32> {
        &mut self.logits
    }
}

/// Full-resolution reference pixel of a global-grid cell.
#[inline]
pub fn global_reference_point(qx: usize, qy: usize) -> (f32, f32) {
    receptive_center_f32(GLOBAL_STRIDE, qx, qy)
}

/// One absolute box per global-grid pixel, stored as coordinate planes.
///
/// Background pixels carry the zero-area box at their own reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBoxField {
    height: usize,
    width: usize,
    pub(crate) x1: Vec<f32>,
    pub(crate) y1: Vec<f32>,
    pub(crate) x2: Vec<f32>,
    pub(crate) y2: Vec<f32>,
    background: Vec<bool>,
}

impl GlobalBoxField {
    /// Builds the field from a per-pixel box, `None` marking background.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> Option<BoundingBox>,
    ) -> Self {
        let n = height * width;
        let mut field = GlobalBoxField {
            height,
            width,
            x1: Vec::with_capacity(n),
            y1: Vec::with_capacity(n),
            x2: Vec::with_capacity(n),
            y2: Vec::with_capacity(n),
            background: Vec::with_capacity(n),
        };
        for y in 0..height {
            for x in 0..width {
                let (b, bg) = match f(y, x) {
                    Some(b) => (b, false),
                    None => {
                        let (px, py) = global_reference_point(x, y);
                        (BoundingBox::point(px, py), true)
                    }
                };
                field.x1.push(b.x1);
                field.y1.push(b.y1);
                field.x2.push(b.x2);
                field.y2.push(b.y2);
                field.background.push(bg);
            }
        }
        field
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.background.len()
    }

    pub fn is_empty(&self) -> bool {
        self.background.is_empty()
    }

    #[inline]
    pub fn box_at(&self, index: usize) -> BoundingBox {
        BoundingBox {
            x1: self.x1[index],
            y1: self.y1[index],
            x2: self.x2[index],
            y2: self.y2[index],
        }
    }

    #[inline]
    pub fn is_background(&self, index: usize) -> bool {
        self.background[index]
    }

    pub fn background(&self) -> &[bool] {
        &self.background
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u16,
    pub class: u16,
    pub area: u64,
    pub score: f32,
}

/// Per-pixel `(class, instance id)` labelling with segment metadata.
///
/// Stuff segments have id 0 and appear once per class; thing segments have
/// unique nonzero ids. Class 0 marks void pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticMap {
    classes: Grid<u16>,
    instances: Grid<u16>,
    segments: Vec<SegmentInfo>,
}

impl PanopticMap {
    /// Validates the maps against `segments`.
    pub fn new(
        classes: Grid<u16>,
        instances: Grid<u16>,
        segments: Vec<SegmentInfo>,
        layout: &ClassLayout,
    ) -> Result<Self> {
        let recomputed = Self::compute_segments(&classes, &instances, layout, |_| 1.0)?;
        let mut given: Vec<(u16, u16, u64)> =
            segments.iter().map(|s| (s.id, s.class, s.area)).collect();
        let mut expected: Vec<(u16, u16, u64)> =
            recomputed.iter().map(|s| (s.id, s.class, s.area)).collect();
        given.sort_unstable();
        expected.sort_unstable();
        if given != expected {
            return Err(Error::InvalidValue(
                "segment list does not match the class and instance maps".into(),
            ));
        }
        if segments.iter().any(|s| !(0.0..=1.0).contains(&s.score)) {
            return Err(Error::InvalidValue("segment scores must lie in [0, 1]".into()));
        }
        Ok(PanopticMap {
            classes,
            instances,
            segments,
        })
    }

    /// Derives segments from the maps; `score` supplies thing scores.
    pub fn from_maps(
        classes: Grid<u16>,
        instances: Grid<u16>,
        layout: &ClassLayout,
        score: impl Fn(u16) -> f32,
    ) -> Result<Self> {
        let segments = Self::compute_segments(&classes, &instances, layout, score)?;
        Ok(PanopticMap {
            classes,
            instances,
            segments,
        })
    }

    fn compute_segments(
        classes: &Grid<u16>,
        instances: &Grid<u16>,
        layout: &ClassLayout,
        score: impl Fn(u16) -> f32,
    ) -> Result<Vec<SegmentInfo>> {
        if classes.dims() != instances.dims() {
            return Err(Error::shape(
                "instance map",
                format!("{}x{}", classes.height(), classes.width()),
                format!("{}x{}", instances.height(), instances.width()),
            ));
        }
        let mut thing_class = vec![0u16; u16::MAX as usize + 1];
        let mut thing_area = vec![0u64; u16::MAX as usize + 1];
        let mut stuff_area = vec![0u64; layout.num_classes() + 1];
        for (&c, &id) in classes.data().iter().zip(instances.data()) {
            if c as usize > layout.num_classes() {
                return Err(Error::InvalidValue(format!("class {c} outside the layout")));
            }
            if id == 0 {
                if layout.is_thing(c) {
                    return Err(Error::InvalidValue(format!(
                        "thing class {c} pixel without an instance id"
                    )));
                }
                if c != 0 {
                    stuff_area[c as usize] += 1;
                }
                continue;
            }
            if !layout.is_thing(c) {
                return Err(Error::InvalidValue(format!(
                    "instance {id} on non-thing class {c}"
                )));
            }
            let slot = &mut thing_class[id as usize];
            if *slot == 0 {
                *slot = c;
            } else if *slot != c {
                return Err(Error::InvalidValue(format!(
                    "instance {id} spans classes {} and {c}",
                    *slot
                )));
            }
            thing_area[id as usize] += 1;
        }
        let mut segments = Vec::new();
        for id in 1..=u16::MAX {
            if thing_area[id as usize] > 0 {
                segments.push(SegmentInfo {
                    id,
                    class: thing_class[id as usize],
                    area: thing_area[id as usize],
                    score: score(id),
                });
            }
        }
        for c in layout.classes() {
            if stuff_area[c as usize] > 0 {
                segments.push(SegmentInfo {
                    id: 0,
                    class: c,
                    area: stuff_area[c as usize],
                    score: 1.0,
                });
            }
        }
        Ok(segments)
    }

    pub fn height(&self) -> usize {
        self.classes.height()
    }

    pub fn width(&self) -> usize {
        self.classes.width()
    }

    pub fn classes(&self) -> &Grid<u16> {
        &self.classes
    }

    pub fn instances(&self) -> &Grid<u16> {
        &self.instances
    }

    pub fn segments(&self) -> &[SegmentInfo] {
        &self.segments
    }

    pub fn into_parts(self) -> (Grid<u16>, Grid<u16>, Vec<SegmentInfo>) {
        (self.classes, self.instances, self.segments)
    }
}

/// Complete set of dense network outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub image_height: usize,
    pub image_width: usize,
    pub layout: ClassLayout,
    pub specs: Vec<LevelSpec>,
    pub levels: Vec<DenseBoxLevel>,
    pub semantics: SemanticField,
    pub levelness: LevelnessField,
}

impl Predictions {
    pub fn new(
        image_height: usize,
        image_width: usize,
        layout: ClassLayout,
        specs: Vec<LevelSpec>,
        levels: Vec<DenseBoxLevel>,
        semantics: SemanticField,
        levelness: LevelnessField,
    ) -> Result<Self> {
        validate_levels(&specs)?;
        check_image_dims(image_height, image_width, &specs)?;
        if levels.len() != specs.len() {
            return Err(Error::shape("levels", specs.len(), levels.len()));
        }
        for (i, (lvl, spec)) in levels.iter().zip(&specs).enumerate() {
            let (h, w) = spec.grid_dims(image_height, image_width);
            if lvl.stride != spec.stride || (lvl.height(), lvl.width()) != (h, w) {
                return Err(Error::shape(
                    format!("level {i}"),
                    format!("stride {} grid {h}x{w}", spec.stride),
                    format!("stride {} grid {}x{}", lvl.stride, lvl.height(), lvl.width()),
                ));
            }
            if lvl.num_things() != layout.num_things as usize {
                return Err(Error::shape(
                    format!("level {i} class channels"),
                    layout.num_things,
                    lvl.num_things(),
                ));
            }
        }
        let (gh, gw) = global_dims(image_height, image_width);
        if (semantics.height(), semantics.width()) != (gh, gw) {
            return Err(Error::shape(
                "semantic field",
                format!("{gh}x{gw}"),
                format!("{}x{}", semantics.height(), semantics.width()),
            ));
        }
        if semantics.num_classes() != layout.num_classes() {
            return Err(Error::shape(
                "semantic channels",
                layout.num_classes(),
                semantics.num_classes(),
            ));
        }
        if (levelness.height(), levelness.width()) != (gh, gw) {
            return Err(Error::shape(
                "levelness field",
                format!("{gh}x{gw}"),
                format!("{}x{}", levelness.height(), levelness.width()),
            ));
        }
        if levelness.num_levels() != specs.len() {
            return Err(Error::shape(
                "levelness channels",
                specs.len() + 1,
                levelness.num_levels() + 1,
            ));
        }
        Ok(Predictions {
            image_height,
            image_width,
            layout,
            specs,
            levels,
            semantics,
            levelness,
        })
    }

    pub fn global_dims(&self) -> (usize, usize) {
        global_dims(self.image_height, self.image_width)
    }
}

pub fn global_dims(image_height: usize, image_width: usize) -> (usize, usize) {
    let s = GLOBAL_STRIDE as usize;
    (image_height / s, image_width / s)
}

/// Image sides must be positive multiples of every level stride and of the
/// global stride.
pub fn check_image_dims(image_height: usize, image_width: usize, specs: &[LevelSpec]) -> Result<()> {
    let max_stride = specs
        .iter()
        .map(|s| s.stride)
        .chain(std::iter::once(GLOBAL_STRIDE))
        .max()
        .unwrap_or(GLOBAL_STRIDE) as usize;
    if image_height == 0 || image_width == 0 {
        return Err(Error::Config("image dimensions must be positive".into()));
    }
    for s in specs.iter().map(|s| s.stride as usize).chain([GLOBAL_STRIDE as usize]) {
        if !image_height.is_multiple_of(s) || !image_width.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "image {image_height}x{image_width} is not divisible by stride {s} (largest stride {max_stride})"
            )));
        }
    }
    Ok(())
}
