//! One randomized library-vs-oracle comparison per call, keyed by seed.

use densepan::assignment::InstanceInfo;
use densepan::fields::{ClassLayout, DenseBoxLevel, Grid, LevelSpec, LevelnessField, Planes};
use densepan::geometry::BoundingBox;
use densepan::losses::{
    centerness_loss, focal_classification_loss, iou_loss, levelness_loss, mask_loss, semantic_loss, FocalParams,
};
use densepan::maskcons::{construct_masks, mask_probability, BoxSource};
use densepan::metrics::evaluate;
use densepan::selection::{nms, LevelBoxStack, ScoredBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gen::{box4, clustered_box, perturbed_panoptic, random_box, random_box_field, random_panoptic, random_queries, random_semantics};
use super::oracle::{self, Box4, Cand};

pub const TOL: f64 = 1e-6;
const SIGMA: f32 = 0.3;

fn layout() -> ClassLayout {
    ClassLayout::new(2, 3)
}

fn close(what: &str, a: f64, b: f64) -> Result<(), String> {
    if (a - b).abs() <= TOL {
        Ok(())
    } else {
        Err(format!("{what}: library {a} vs oracle {b}"))
    }
}

fn centres(rng: &mut ChaCha8Rng, extent: f32) -> Vec<BoundingBox> {
    let n = rng.random_range(1..=4);
    (0..n).map(|_| random_box(rng, extent)).collect()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=32), rng.random_range(1..=32))
}

/// Mask probabilities and thresholded masks, levelness-assembled boxes.
pub fn mask_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = layout();
    let (h, w) = dims(&mut rng);
    let cs = centres(&mut rng, 4.0 * h.max(w) as f32);
    let (field, plain) = random_box_field(&mut rng, h, w, &cs, 0.2);
    let sem = random_semantics(&mut rng, h, w, layout.num_classes());
    let nq = rng.random_range(1..=100);
    let queries = random_queries(&mut rng, nq, &layout, &cs);
    let source = BoxSource::Assembled(&field);
    let masks = construct_masks(source, &sem, &layout, &queries, SIGMA).map_err(|e| e.to_string())?;
    for (q, mask) in queries.iter().zip(&masks) {
        let semf: Vec<f64> = sem.class_plane(q.class).iter().map(|&v| v as f64).collect();
        let expect = oracle::mask_probability(&plain, &semf, box4(&q.bbox));
        let got = mask_probability(&source.location_probability(q), &sem, &layout, q.class).map_err(|e| e.to_string())?;
        compare_masks(&expect, got.grid().data(), &mask.pixels)?;
    }
    Ok(())
}

fn compare_masks(expect: &[f64], got: &[f32], pixels: &[u32]) -> Result<(), String> {
    let mut in_mask = vec![false; expect.len()];
    for &p in pixels {
        in_mask[p as usize] = true;
    }
    for i in 0..expect.len() {
        close("mask probability", got[i] as f64, expect[i])?;
        let want = expect[i] > SIGMA as f64;
        if in_mask[i] != want && (expect[i] - SIGMA as f64).abs() > TOL {
            return Err(format!("pixel {i}: mask {} but probability {}", in_mask[i], expect[i]));
        }
    }
    Ok(())
}

/// Random two-level predictions on an image of `4h x 4w`.
fn random_levels(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<DenseBoxLevel>, Vec<LevelSpec>) {
    let specs = LevelSpec::pyramid(&[4, 8]).unwrap();
    let levels = specs
        .iter()
        .map(|s| {
            let (lh, lw) = s.grid_dims(4 * h, 4 * w);
            let mut off = Planes::filled(4, lh, lw, 0.0f32);
            for v in off.data_mut() {
                *v = (rng.random_range(0.0f32..24.0) * 2.0).round() / 2.0;
            }
            let cls = Planes::filled(3, lh, lw, 0.5f32);
            let ctr = Grid::filled(lh, lw, 0.5f32);
            DenseBoxLevel::new(s.stride, off, cls, ctr).unwrap()
        })
        .collect();
    (levels, specs)
}

/// Max-IoU-over-levels masks, including the level resampling.
pub fn maxlevel_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = layout();
    let (h, w) = (2 * rng.random_range(1..=16), 2 * rng.random_range(1..=16));
    let (levels, _) = random_levels(&mut rng, h, w);
    let stack = LevelBoxStack::new(&levels, h, w);
    let sem = random_semantics(&mut rng, h, w, layout.num_classes());
    let cs = centres(&mut rng, 4.0 * h.max(w) as f32);
    let nq = rng.random_range(1..=30);
    let queries = random_queries(&mut rng, nq, &layout, &cs);

    // per-level boxes on the global grid, derived independently
    let mut plain: Vec<Vec<Box4>> = Vec::new();
    for lvl in &levels {
        let s = lvl.stride as usize;
        let mut boxes = Vec::new();
        for qy in 0..h {
            for qx in 0..w {
                let (cx, cy) = ((4 * qx) / s, (4 * qy) / s);
                let (px, py) = ((s / 2 + cx * s) as f64, (s / 2 + cy * s) as f64);
                let i = cy * lvl.width() + cx;
                let o = |c: usize| lvl.offsets().plane(c)[i] as f64;
                boxes.push([px - o(0), py - o(1), px + o(2), py + o(3)]);
            }
        }
        plain.push(boxes);
    }
    let source = BoxSource::MaxLevel(&stack);
    let masks = construct_masks(source, &sem, &layout, &queries, SIGMA).map_err(|e| e.to_string())?;
    for (q, mask) in queries.iter().zip(&masks) {
        let semf: Vec<f64> = sem.class_plane(q.class).iter().map(|&v| v as f64).collect();
        let expect = oracle::mask_probability_maxlevel(&plain, &semf, box4(&q.bbox));
        let got = mask_probability(&source.location_probability(q), &sem, &layout, q.class).map_err(|e| e.to_string())?;
        compare_masks(&expect, got.grid().data(), &mask.pixels)?;
    }
    Ok(())
}

/// Class-wise greedy NMS. Returns `Ok(false)` when the case was skipped
/// because some same-class IoU sits on the threshold.
pub fn nms_case(seed: u64) -> Result<bool, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cs = centres(&mut rng, 64.0);
    let n = rng.random_range(0..=100);
    let thr = [0.3f32, 0.5, 0.6, 0.7][rng.random_range(0..4)];
    let cands: Vec<ScoredBox> = (0..n)
        .map(|_| ScoredBox {
            bbox: clustered_box(&mut rng, &cs, 3.0),
            class: rng.random_range(3..=5),
            // coarse scores so ties happen
            score: rng.random_range(1..=20) as f32 / 20.0,
            level: rng.random_range(0..3),
        })
        .collect();
    for a in &cands {
        for b in &cands {
            if a.class == b.class && (oracle::iou(box4(&a.bbox), box4(&b.bbox)) - thr as f64).abs() < 1e-5 {
                return Ok(false);
            }
        }
    }
    let got = nms(&cands, thr);
    let plain: Vec<Cand> = cands
        .iter()
        .map(|c| Cand { bbox: box4(&c.bbox), class: c.class, score: c.score as f64, level: c.level })
        .collect();
    let want = oracle::nms(&plain, thr as f64);
    if got.len() != want.len() {
        return Err(format!("nms kept {} boxes, oracle {}", got.len(), want.len()));
    }
    for (g, o) in got.iter().zip(&want) {
        if box4(&g.bbox) != o.bbox || g.class != o.class || g.score as f64 != o.score || g.level != o.level {
            return Err(format!("nms mismatch: {g:?} vs {o:?}"));
        }
    }
    Ok(true)
}

/// Every loss on random small fields.
pub fn loss_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = layout();
    let (h, w) = dims(&mut rng);
    let n = h * w;

    // box regression and centerness
    let cs = centres(&mut rng, 64.0);
    let pred: Vec<BoundingBox> = (0..n).map(|_| clustered_box(&mut rng, &cs, 6.0)).collect();
    let target: Vec<BoundingBox> = (0..n).map(|_| clustered_box(&mut rng, &cs, 6.0)).collect();
    let fg: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    let got = iou_loss(&pred, &target, &fg).map_err(|e| e.to_string())?.value;
    let pb: Vec<Box4> = pred.iter().map(box4).collect();
    let tb: Vec<Box4> = target.iter().map(box4).collect();
    close("iou loss", got, oracle::iou_loss(&pb, &tb, &fg))?;

    let pc: Vec<f32> = (0..n).map(|_| rng.random_range(0.0f32..=1.0)).collect();
    let tc: Vec<f32> = (0..n).map(|_| if rng.random_bool(0.2) { 1.0 } else { rng.random_range(0.0f32..=1.0) }).collect();
    let got = centerness_loss(&pc, &tc, &fg).map_err(|e| e.to_string())?;
    let f64s = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    close("centerness loss", got, oracle::centerness_loss(&f64s(&pc), &f64s(&tc), &fg))?;

    // levelness
    let ch = rng.random_range(2..=6);
    let mut logits = Planes::filled(ch, h, w, 0.0f32);
    for v in logits.data_mut() {
        *v = rng.random_range(-8.0f32..8.0);
    }
    let lt = Grid::from_fn(h, w, |_, _| rng.random_range(0..ch as u16));
    let got = levelness_loss(&LevelnessField::new(logits.clone()).unwrap(), &lt).map_err(|e| e.to_string())?;
    let per_pixel: Vec<Vec<f64>> = (0..n).map(|i| (0..ch).map(|c| logits.plane(c)[i] as f64).collect()).collect();
    let targets: Vec<usize> = lt.data().iter().map(|&t| t as usize).collect();
    close("levelness loss", got, oracle::levelness_loss(&per_pixel, &targets))?;

    // focal classification over 1..=3 levels
    let nl = rng.random_range(1..=3);
    let mut probs = Vec::new();
    let mut cls = Vec::new();
    for _ in 0..nl {
        let (lh, lw) = dims(&mut rng);
        let mut p = Planes::filled(3, lh, lw, 0.0f32);
        for v in p.data_mut() {
            *v = if rng.random_bool(0.1) { rng.random_range(0..=1) as f32 } else { rng.random_range(0.0f32..=1.0) };
        }
        let t = Grid::from_fn(lh, lw, |_, _| if rng.random_bool(0.7) { 0 } else { rng.random_range(3..=5u16) });
        probs.push(p);
        cls.push(t);
    }
    let alpha = rng.random_range(0.05..0.95);
    let gamma = [0.0, 1.0, 2.0, 2.5][rng.random_range(0..4)];
    let params = FocalParams { alpha, gamma };
    let pr: Vec<&Planes<f32>> = probs.iter().collect();
    let cr: Vec<&Grid<u16>> = cls.iter().collect();
    let got = focal_classification_loss(&pr, &cr, &layout, params).map_err(|e| e.to_string())?;
    let op: Vec<Vec<Vec<f64>>> = probs
        .iter()
        .map(|p| (0..p.plane_len()).map(|i| (0..3).map(|k| p.plane(k)[i] as f64).collect()).collect())
        .collect();
    let ot: Vec<Vec<Option<usize>>> = cls
        .iter()
        .map(|t| t.data().iter().map(|&c| (c != 0).then(|| c as usize - 3)).collect())
        .collect();
    close("focal loss", got, oracle::focal_loss(&op, &ot, alpha, gamma))?;

    // bootstrapped semantic cross-entropy
    let sem = random_semantics(&mut rng, h, w, layout.num_classes());
    let st = Grid::from_fn(h, w, |_, _| rng.random_range(0..=layout.num_classes() as u16));
    let fraction = [0.3, 1.0, rng.random_range(0.01..1.0)][rng.random_range(0..3)];
    let got = semantic_loss(&sem, &st, fraction).map_err(|e| e.to_string())?;
    let sp: Vec<Vec<f64>> = (0..n)
        .map(|i| (1..=layout.num_classes() as u16).map(|c| sem.class_plane(c)[i] as f64).collect())
        .collect();
    let stt: Vec<Option<usize>> = st.data().iter().map(|&c| (c != 0).then(|| c as usize - 1)).collect();
    close("semantic loss", got, oracle::bootstrapped_ce(&sp, &stt, fraction))?;

    // mask loss
    let ext = 4.0 * h.max(w) as f32;
    let cs = centres(&mut rng, ext);
    let (field, plain) = random_box_field(&mut rng, h, w, &cs, 0.3);
    let nq = rng.random_range(0..=20);
    let queries = random_queries(&mut rng, nq, &layout, &cs);
    let ngt = rng.random_range(1..=4u16);
    let gt: Vec<InstanceInfo> = (1..=ngt)
        .map(|id| InstanceInfo { id, class: 3, bbox: clustered_box(&mut rng, &cs, 3.0) })
        .collect();
    let block = rng.random_range(1..=6usize);
    let ids: Vec<u16> = (0..n.div_ceil(block) + 1).map(|_| rng.random_range(0..=ngt)).collect();
    let gt_map = Grid::from_fn(h, w, |y, x| ids[(y * w + x) / block]);
    let got = mask_loss(BoxSource::Assembled(&field), &queries, &gt_map, &gt).map_err(|e| e.to_string())?;
    let qb: Vec<Box4> = queries.iter().map(|q| box4(&q.bbox)).collect();
    let gb: Vec<(u16, Box4)> = gt.iter().map(|g| (g.id, box4(&g.bbox))).collect();
    let (want, matched) = oracle::mask_loss(&plain, &qb, gt_map.data(), &gb);
    if matched != got.matched {
        return Err(format!("mask loss matched {} queries, oracle {}", got.matched, matched));
    }
    close("mask loss", got.value, want)
}

/// PQ, SQ, RQ, counts and mIoU on random maps.
pub fn metrics_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = ClassLayout::new(3, 3);
    let (h, w) = dims(&mut rng);
    let gt = random_panoptic(&mut rng, h, w, &layout, 0.05);
    let pred = if rng.random_bool(0.7) {
        perturbed_panoptic(&mut rng, &gt, &layout)
    } else {
        random_panoptic(&mut rng, h, w, &layout, 0.0)
    };
    let report = evaluate(&pred, &gt, &layout).map_err(|e| e.to_string())?;
    let want = oracle::panoptic_quality(pred.classes().data(), pred.instances().data(), gt.classes().data(), gt.instances().data());
    if report.per_class.len() != want.len() {
        return Err(format!("{} classes evaluated, oracle {}", report.per_class.len(), want.len()));
    }
    for c in &report.per_class {
        let o = want.get(&c.class).ok_or(format!("class {} missing from oracle", c.class))?;
        if (c.tp, c.fp, c.fn_) != (o.tp, o.fp, o.fn_) {
            return Err(format!("class {} counts {:?} vs {:?}", c.class, (c.tp, c.fp, c.fn_), (o.tp, o.fp, o.fn_)));
        }
        close("pq", c.pq, o.pq)?;
        close("sq", c.sq, o.sq)?;
        close("rq", c.rq, o.rq)?;
    }
    match (report.pq, oracle::mean_pq(&want)) {
        (Some(a), Some(b)) => close("mean pq", a, b)?,
        (a, b) if a.is_none() && b.is_none() => {}
        (a, b) => return Err(format!("mean pq {a:?} vs {b:?}")),
    }
    match (report.miou, oracle::mean_iou(pred.classes().data(), gt.classes().data(), 6)) {
        (Some(a), Some(b)) => close("miou", a, b),
        (None, None) => Ok(()),
        (a, b) => Err(format!("miou {a:?} vs {b:?}")),
    }
}
