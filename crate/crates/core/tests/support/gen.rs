//! Seeded random inputs for oracle comparisons.

use densepan::fields::{ClassLayout, GlobalBoxField, Grid, PanopticMap, Planes, SemanticField};
use densepan::geometry::BoundingBox;
use densepan::selection::{QuerySet, ScoredBox};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracle::Box4;

pub fn box4(b: &BoundingBox) -> Box4 {
    [b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64]
}

/// Box with quarter-pixel corners inside `[0, extent]`.
pub fn random_box(rng: &mut ChaCha8Rng, extent: f32) -> BoundingBox {
    let q = |rng: &mut ChaCha8Rng| (rng.random_range(0.0..extent) * 4.0).round() / 4.0;
    let (a, b) = (q(rng), q(rng));
    let (c, d) = (q(rng), q(rng));
    BoundingBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap()
}

/// Boxes clustered around a few centres so that IoUs are often large.
pub fn clustered_box(rng: &mut ChaCha8Rng, centres: &[BoundingBox], jitter: f32) -> BoundingBox {
    let c = centres[rng.random_range(0..centres.len())];
    let mut j = |v: f32| ((v + rng.random_range(-jitter..=jitter)) * 4.0).round() / 4.0;
    let (x1, y1, x2, y2) = (j(c.x1), j(c.y1), j(c.x2), j(c.y2));
    BoundingBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2)).unwrap()
}

pub fn random_box_field(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    centres: &[BoundingBox],
    background: f64,
) -> (GlobalBoxField, Vec<Option<Box4>>) {
    let mut raw = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        if rng.random_bool(background) {
            raw.push(None);
        } else {
            raw.push(Some(clustered_box(rng, centres, 4.0)));
        }
    }
    let field = GlobalBoxField::from_fn(h, w, |y, x| raw[y * w + x]);
    let plain = raw.iter().map(|b| b.map(|b| box4(&b))).collect();
    (field, plain)
}

pub fn random_semantics(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> SemanticField {
    let n = h * w;
    let mut p = Planes::filled(classes, h, w, 0.0f32);
    for i in 0..n {
        let raw: Vec<f32> = (0..classes).map(|_| rng.random_range(0.0f32..1.0).powi(3)).collect();
        let s: f32 = raw.iter().sum::<f32>().max(1e-6);
        for (c, v) in raw.iter().enumerate() {
            p.plane_mut(c)[i] = v / s;
        }
        // fix rounding so the channels sum to one within tolerance
        let total: f32 = (0..classes).map(|c| p.plane(c)[i]).sum();
        if (total - 1.0).abs() > 1e-6 {
            p.plane_mut(0)[i] = 0.0;
            let rest: f32 = (1..classes).map(|c| p.plane(c)[i]).sum();
            p.plane_mut(0)[i] = (1.0 - rest).max(0.0);
        }
    }
    SemanticField::new(p).unwrap()
}

pub fn random_queries(rng: &mut ChaCha8Rng, n: usize, layout: &ClassLayout, centres: &[BoundingBox]) -> QuerySet {
    let boxes = (0..n)
        .map(|_| ScoredBox {
            bbox: clustered_box(rng, centres, 3.0),
            class: layout.thing_class(rng.random_range(0..layout.num_things as usize)),
            score: rng.random_range(0.05f32..1.0),
            level: 0,
        })
        .collect();
    QuerySet::from_boxes(boxes)
}

/// Random panoptic map: stuff blocks, painted thing rectangles, optional void.
pub fn random_panoptic(rng: &mut ChaCha8Rng, h: usize, w: usize, layout: &ClassLayout, void: f64) -> PanopticMap {
    let mut classes = Grid::filled(h, w, 0u16);
    let mut ids = Grid::filled(h, w, 0u16);
    let block = rng.random_range(2..=8usize);
    let stuff: Vec<u16> = (0..h.div_ceil(block) * w.div_ceil(block))
        .map(|_| rng.random_range(1..=layout.num_stuff))
        .collect();
    for y in 0..h {
        for x in 0..w {
            classes.set(y, x, stuff[(y / block) * w.div_ceil(block) + x / block]);
        }
    }
    let n = rng.random_range(0..=8u16);
    for id in 1..=n {
        let class = layout.thing_class(rng.random_range(0..layout.num_things as usize));
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (x1, y1) = (rng.random_range(x0..w), rng.random_range(y0..h));
        for y in y0..=y1 {
            for x in x0..=x1 {
                classes.set(y, x, class);
                ids.set(y, x, id);
            }
        }
    }
    for i in 0..h * w {
        if rng.random_bool(void) {
            classes.data_mut()[i] = 0;
            ids.data_mut()[i] = 0;
        }
    }
    PanopticMap::from_maps(classes, ids, layout, |_| 1.0).unwrap()
}

/// A prediction derived from `gt` by shifting, relabelling and dropping
/// segments, so that a good share of segments still match.
pub fn perturbed_panoptic(rng: &mut ChaCha8Rng, gt: &PanopticMap, layout: &ClassLayout) -> PanopticMap {
    let (h, w) = (gt.height(), gt.width());
    let (dx, dy) = (rng.random_range(0..=2usize), rng.random_range(0..=2usize));
    let mut classes = Grid::filled(h, w, 0u16);
    let mut ids = Grid::filled(h, w, 0u16);
    let relabel = rng.random_range(1..50u16);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y.saturating_sub(dy), x.saturating_sub(dx));
            let mut c = gt.classes().get(sy, sx);
            let mut id = gt.instances().get(sy, sx);
            if c == 0 {
                c = rng.random_range(1..=layout.num_stuff);
            }
            if id != 0 {
                id = id.wrapping_mul(7).wrapping_add(relabel) % 200 + 1;
            }
            if rng.random_bool(0.03) {
                c = rng.random_range(1..=layout.num_stuff);
                id = 0;
            }
            classes.set(y, x, c);
            ids.set(y, x, id);
        }
    }
    PanopticMap::from_maps(classes, ids, layout, |_| 1.0).unwrap()
}
