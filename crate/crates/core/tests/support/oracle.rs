//! Naive double-precision references, written straight from the formulas
//! with plain loops and no shared code from the library.

use std::collections::BTreeMap;

pub type Box4 = [f64; 4];

pub fn area(b: Box4) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: Box4, b: Box4) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mask probability of one query: IoU with each pixel's box (0 where the
/// pixel has none) times the semantic probability of the query class.
pub fn mask_probability(boxes: &[Option<Box4>], sem: &[f64], query: Box4) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..boxes.len() {
        let l = match boxes[i] {
            Some(b) => iou(b, query),
            None => 0.0,
        };
        out.push(l * sem[i]);
    }
    out
}

/// Same with the best IoU over several per-level box fields.
pub fn mask_probability_maxlevel(levels: &[Vec<Box4>], sem: &[f64], query: Box4) -> Vec<f64> {
    let n = sem.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut best = 0.0f64;
        for lvl in levels {
            let v = iou(lvl[i], query);
            if v > best {
                best = v;
            }
        }
        out[i] = best * sem[i];
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct Cand {
    pub bbox: Box4,
    pub class: u16,
    pub score: f64,
    pub level: usize,
}

fn before(a: &Cand, b: &Cand) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.class != b.class {
        return a.class < b.class;
    }
    for k in 0..4 {
        if a.bbox[k] != b.bbox[k] {
            return a.bbox[k] < b.bbox[k];
        }
    }
    a.level < b.level
}

/// Greedy class-wise NMS; returns the kept candidates in rank order.
pub fn nms(cands: &[Cand], thr: f64) -> Vec<Cand> {
    // selection sort into rank order
    let mut rest: Vec<Cand> = cands.to_vec();
    let mut ordered = Vec::new();
    while !rest.is_empty() {
        let mut best = 0;
        for i in 1..rest.len() {
            if before(&rest[i], &rest[best]) {
                best = i;
            }
        }
        ordered.push(rest.remove(best));
    }
    let mut kept: Vec<Cand> = Vec::new();
    for c in ordered {
        let mut suppressed = false;
        for k in &kept {
            if k.class == c.class && iou(k.bbox, c.bbox) > thr {
                suppressed = true;
            }
        }
        if !suppressed {
            kept.push(c);
        }
    }
    kept
}

pub fn iou_loss(pred: &[Box4], target: &[Box4], fg: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..pred.len() {
        if fg[i] {
            let v = iou(pred[i], target[i]).max(1e-6);
            sum += -v.ln();
            n += 1.0;
        }
    }
    if n == 0.0 {
        0.0
    } else {
        sum / n
    }
}

fn safe_ln(p: f64) -> f64 {
    p.max(1e-7).ln()
}

pub fn centerness_loss(pred: &[f64], target: &[f64], fg: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..pred.len() {
        if fg[i] {
            let (p, t) = (pred[i], target[i]);
            let pos = if t > 0.0 { t * safe_ln(p) } else { 0.0 };
            let neg = if t < 1.0 { (1.0 - t) * safe_ln(1.0 - p) } else { 0.0 };
            sum += -(pos + neg);
            n += 1.0;
        }
    }
    if n == 0.0 {
        0.0
    } else {
        sum / n
    }
}

/// `logits[pixel][channel]`.
pub fn levelness_loss(logits: &[Vec<f64>], target: &[usize]) -> f64 {
    let mut sum = 0.0;
    for i in 0..logits.len() {
        let z: f64 = logits[i].iter().map(|v| v.exp()).sum();
        let p = logits[i][target[i]].exp() / z;
        sum += -p.ln();
    }
    sum / logits.len() as f64
}

/// `probs[level][location][class]`, `target[level][location]` is the positive
/// class index or `None`.
pub fn focal_loss(probs: &[Vec<Vec<f64>>], target: &[Vec<Option<usize>>], alpha: f64, gamma: f64) -> f64 {
    let mut sum = 0.0;
    let mut locations = 0.0;
    for l in 0..probs.len() {
        for i in 0..probs[l].len() {
            locations += 1.0;
            for k in 0..probs[l][i].len() {
                let p = probs[l][i][k];
                if target[l][i] == Some(k) {
                    sum += -alpha * (1.0 - p).powf(gamma) * safe_ln(p);
                } else {
                    sum += -(1.0 - alpha) * p.powf(gamma) * safe_ln(1.0 - p);
                }
            }
        }
    }
    if locations == 0.0 {
        0.0
    } else {
        sum / locations
    }
}

/// `probs[pixel][class index]`, `target` class index or `None` for void.
pub fn bootstrapped_ce(probs: &[Vec<f64>], target: &[Option<usize>], fraction: f64) -> f64 {
    let mut losses: Vec<f64> = Vec::new();
    for i in 0..probs.len() {
        if let Some(t) = target[i] {
            losses.push(-safe_ln(probs[i][t]));
        }
    }
    if losses.is_empty() {
        return 0.0;
    }
    let k = (fraction * losses.len() as f64).ceil() as usize;
    let mut taken = vec![false; losses.len()];
    let mut sum = 0.0;
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in 0..losses.len() {
            if !taken[j] && best.is_none_or(|b| losses[j] > losses[b]) {
                best = Some(j);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        sum += losses[b];
    }
    sum / k as f64
}

/// Mask loss over queries; gt is `(id, box)`, `gt_map` holds ids per pixel.
pub fn mask_loss(boxes: &[Option<Box4>], queries: &[Box4], gt_map: &[u16], gt: &[(u16, Box4)]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut matched = 0usize;
    for &q in queries {
        // brute-force matching: best positive IoU, lower id on ties, visible only
        let mut best: Option<(u16, f64)> = None;
        for &(id, b) in gt {
            let visible = gt_map.contains(&id);
            let v = iou(q, b);
            if !visible || v <= 0.0 {
                continue;
            }
            best = match best {
                None => Some((id, v)),
                Some((bid, bv)) => {
                    if v > bv || (v == bv && id < bid) {
                        Some((id, v))
                    } else {
                        Some((bid, bv))
                    }
                }
            };
        }
        let Some((id, beta)) = best else { continue };
        let n = gt_map.iter().filter(|&&g| g == id).count() as f64;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for i in 0..gt_map.len() {
            let p = match boxes[i] {
                Some(b) => iou(b, q),
                None => 0.0,
            };
            if gt_map[i] == id {
                fn_ += 1.0 - p;
            } else {
                fp += p;
            }
        }
        sum += beta / n * (fp + fn_);
        matched += 1;
    }
    (if matched == 0 { 0.0 } else { sum / matched as f64 }, matched)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassPq {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Per-class PQ by comparing every pair of segments pixel by pixel.
pub fn panoptic_quality(
    pred_cls: &[u16],
    pred_ids: &[u16],
    gt_cls: &[u16],
    gt_ids: &[u16],
) -> BTreeMap<u16, ClassPq> {
    let segs = |cls: &[u16], ids: &[u16]| {
        let mut s: Vec<(u16, u16)> = Vec::new();
        for i in 0..cls.len() {
            if cls[i] != 0 && !s.contains(&(cls[i], ids[i])) {
                s.push((cls[i], ids[i]));
            }
        }
        s
    };
    let ps = segs(pred_cls, pred_ids);
    let gs = segs(gt_cls, gt_ids);
    let n = pred_cls.len();
    let in_p = |s: (u16, u16), i: usize| pred_cls[i] == s.0 && pred_ids[i] == s.1;
    let in_g = |s: (u16, u16), i: usize| gt_cls[i] == s.0 && gt_ids[i] == s.1;

    let mut out: BTreeMap<u16, (f64, usize, usize, usize)> = BTreeMap::new();
    let mut p_matched = vec![false; ps.len()];
    for &g in &gs {
        let mut hit = false;
        for (pi, &p) in ps.iter().enumerate() {
            if p.0 != g.0 {
                continue;
            }
            let (mut inter, mut pa, mut ga, mut pv) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                let a = in_p(p, i);
                let b = in_g(g, i);
                if a && b {
                    inter += 1.0;
                }
                if a {
                    pa += 1.0;
                    if gt_cls[i] == 0 {
                        pv += 1.0;
                    }
                }
                if b {
                    ga += 1.0;
                }
            }
            let v = inter / (pa + ga - inter - pv);
            if v > 0.5 {
                let e = out.entry(g.0).or_default();
                e.0 += v;
                e.1 += 1;
                p_matched[pi] = true;
                hit = true;
            }
        }
        if !hit {
            out.entry(g.0).or_default().3 += 1;
        }
    }
    for (pi, &p) in ps.iter().enumerate() {
        if p_matched[pi] {
            continue;
        }
        let (mut pa, mut pv) = (0.0, 0.0);
        for i in 0..n {
            if in_p(p, i) {
                pa += 1.0;
                if gt_cls[i] == 0 {
                    pv += 1.0;
                }
            }
        }
        if pv / pa <= 0.5 {
            out.entry(p.0).or_default().2 += 1;
        }
    }
    out.into_iter()
        .map(|(c, (s, tp, fp, fn_))| {
            let d = tp as f64 + fp as f64 / 2.0 + fn_ as f64 / 2.0;
            let sq = if tp > 0 { s / tp as f64 } else { 0.0 };
            (c, ClassPq { pq: s / d, sq, rq: tp as f64 / d, tp, fp, fn_ })
        })
        .collect()
}

pub fn mean_pq(per_class: &BTreeMap<u16, ClassPq>) -> Option<f64> {
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.values().map(|c| c.pq).sum::<f64>() / per_class.len() as f64)
    }
}

/// mIoU over classes present in the ground truth, void gt pixels ignored.
pub fn mean_iou(pred: &[u16], gt: &[u16], num_classes: u16) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 1..=num_classes {
        let (mut inter, mut union, mut in_gt) = (0.0, 0.0, false);
        for i in 0..gt.len() {
            if gt[i] == 0 {
                continue;
            }
            let a = pred[i] == c;
            let b = gt[i] == c;
            in_gt |= b;
            if a && b {
                inter += 1.0;
            }
            if a || b {
                union += 1.0;
            }
        }
        if in_gt {
            ious.push(inter / union);
        }
    }
    if ious.is_empty() {
        None
    } else {
        Some(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}
