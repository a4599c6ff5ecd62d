//! Panoptic quality and mean IoU.
//!
//! Void ground-truth pixels are left out of every union, and predicted
//! segments lying mostly on void are dropped instead of counted as false
//! positives.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ClassLayout, Grid, PanopticMap, VOID_CLASS};

/// Match threshold; overlaps must exceed it strictly.
pub const MATCH_IOU: f64 = 0.5;

/// A segment named by class and instance id (0 for stuff).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentRef {
    pub class: u16,
    pub id: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatch {
    pub class: u16,
    pub gt_id: u16,
    pub pred_id: u16,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentMatching {
    pub matches: Vec<SegmentMatch>,
    pub false_positives: Vec<SegmentRef>,
    pub false_negatives: Vec<SegmentRef>,
}

fn check_same_dims<T: Copy>(what: &str, a: &Grid<T>, b: &Grid<T>) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(Error::shape(
            what,
            format!("{}x{}", b.height(), b.width()),
            format!("{}x{}", a.height(), a.width()),
        ))
    }
}

fn segment_refs(map: &PanopticMap) -> impl Iterator<Item = SegmentRef> + '_ {
    map.classes()
        .data()
        .iter()
        .zip(map.instances().data())
        .map(|(&class, &id)| SegmentRef { class, id })
}

pub fn match_segments(pred: &PanopticMap, gt: &PanopticMap) -> Result<SegmentMatching> {
    check_same_dims("predicted panoptic map", pred.classes(), gt.classes())?;

    let mut pred_area: BTreeMap<SegmentRef, u64> = BTreeMap::new();
    let mut gt_area: BTreeMap<SegmentRef, u64> = BTreeMap::new();
    let mut pred_on_void: HashMap<SegmentRef, u64> = HashMap::new();
    let mut inter: HashMap<(SegmentRef, SegmentRef), u64> = HashMap::new();
    for (p, g) in segment_refs(pred).zip(segment_refs(gt)) {
        let p = (p.class != VOID_CLASS).then_some(p);
        let g = (g.class != VOID_CLASS).then_some(g);
        if let Some(p) = p {
            *pred_area.entry(p).or_default() += 1;
        }
        match (p, g) {
            (Some(p), Some(g)) => {
                *gt_area.entry(g).or_default() += 1;
                if p.class == g.class {
                    *inter.entry((g, p)).or_default() += 1;
                }
            }
            (Some(p), None) => *pred_on_void.entry(p).or_default() += 1,
            (None, Some(g)) => *gt_area.entry(g).or_default() += 1,
            (None, None) => {}
        }
    }

    let mut pairs: Vec<((SegmentRef, SegmentRef), u64)> = inter.into_iter().collect();
    pairs.sort_unstable();
    let mut out = SegmentMatching::default();
    let mut gt_matched = std::collections::BTreeSet::new();
    let mut pred_matched = std::collections::BTreeSet::new();
    for ((g, p), i) in pairs {
        let void = pred_on_void.get(&p).copied().unwrap_or(0);
        let union = pred_area[&p] + gt_area[&g] - i - void;
        let iou = i as f64 / union as f64;
        if iou > MATCH_IOU {
            gt_matched.insert(g);
            pred_matched.insert(p);
            out.matches.push(SegmentMatch {
                class: g.class,
                gt_id: g.id,
                pred_id: p.id,
                iou,
            });
        }
    }
    out.false_negatives = gt_area.keys().filter(|g| !gt_matched.contains(g)).copied().collect();
    out.false_positives = pred_area
        .iter()
        .filter(|(p, &area)| {
            let void = pred_on_void.get(p).copied().unwrap_or(0);
            !pred_matched.contains(p) && void as f64 / area as f64 <= MATCH_IOU
        })
        .map(|(p, _)| *p)
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassQuality {
    pub class: u16,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Per-class PQ, SQ and RQ for classes with at least one segment on either side.
pub fn panoptic_quality(matching: &SegmentMatching) -> Vec<ClassQuality> {
    let mut acc: BTreeMap<u16, (f64, usize, usize, usize)> = BTreeMap::new();
    for m in &matching.matches {
        let e = acc.entry(m.class).or_default();
        e.0 += m.iou;
        e.1 += 1;
    }
    for s in &matching.false_positives {
        acc.entry(s.class).or_default().2 += 1;
    }
    for s in &matching.false_negatives {
        acc.entry(s.class).or_default().3 += 1;
    }
    acc.into_iter()
        .map(|(class, (iou_sum, tp, fp, fn_))| {
            let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
            let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
            ClassQuality {
                class,
                pq: iou_sum / denom,
                sq,
                rq: tp as f64 / denom,
                tp,
                fp,
                fn_,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanIou {
    /// Mean over classes present in the ground truth; `None` if there are none.
    pub miou: Option<f64>,
    /// `(class, iou)` for every class present in the ground truth.
    pub per_class: Vec<(u16, f64)>,
}

/// Confusion matrix indexed `[gt][pred]`, classes `0..=num_classes`, void gt rows skipped.
pub fn confusion_matrix(pred: &Grid<u16>, gt: &Grid<u16>, num_classes: usize) -> Result<Vec<Vec<u64>>> {
    check_same_dims("predicted class map", pred, gt)?;
    let k = num_classes + 1;
    if let Some(&c) = pred.data().iter().chain(gt.data()).find(|&&c| c as usize >= k) {
        return Err(Error::InvalidValue(format!("class {c} outside 0..={num_classes}")));
    }
    let w = gt.width().max(1);
    let rows = pred
        .data()
        .par_chunks(w)
        .zip(gt.data().par_chunks(w))
        .fold(
            || vec![0u64; k * k],
            |mut m, (p, g)| {
                for (&p, &g) in p.iter().zip(g) {
                    if g != VOID_CLASS {
                        m[g as usize * k + p as usize] += 1;
                    }
                }
                m
            },
        )
        .reduce(
            || vec![0u64; k * k],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok(rows.chunks(k).map(|r| r.to_vec()).collect())
}

pub fn mean_iou(pred: &Grid<u16>, gt: &Grid<u16>, num_classes: usize) -> Result<MeanIou> {
    let m = confusion_matrix(pred, gt, num_classes)?;
    let k = num_classes + 1;
    let mut per_class = Vec::new();
    for c in 1..k {
        let gt_total: u64 = m[c].iter().sum();
        if gt_total == 0 {
            continue;
        }
        let tp = m[c][c];
        let pred_total: u64 = (1..k).map(|g| m[g][c]).sum();
        per_class.push((c as u16, tp as f64 / (gt_total + pred_total - tp) as f64));
    }
    let miou = (!per_class.is_empty())
        .then(|| per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64);
    Ok(MeanIou { miou, per_class })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassQuality>,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub pq_things: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub miou: Option<f64>,
    pub class_iou: Vec<(u16, f64)>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn evaluate(pred: &PanopticMap, gt: &PanopticMap, layout: &ClassLayout) -> Result<MetricsReport> {
    let matching = match_segments(pred, gt)?;
    let per_class = panoptic_quality(&matching);
    let iou = mean_iou(pred.classes(), gt.classes(), layout.num_classes())?;
    Ok(MetricsReport {
        pq: mean(per_class.iter().map(|c| c.pq)),
        sq: mean(per_class.iter().map(|c| c.sq)),
        rq: mean(per_class.iter().map(|c| c.rq)),
        pq_things: mean(per_class.iter().filter(|c| layout.is_thing(c.class)).map(|c| c.pq)),
        pq_stuff: mean(per_class.iter().filter(|c| layout.is_stuff(c.class)).map(|c| c.pq)),
        miou: iou.miou,
        class_iou: iou.per_class,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ClassLayout {
        ClassLayout::new(1, 1)
    }

    fn map(w: usize, classes: &[u16], ids: &[u16]) -> PanopticMap {
        let h = classes.len() / w;
        PanopticMap::from_maps(
            Grid::new(h, w, classes.to_vec()).unwrap(),
            Grid::new(h, w, ids.to_vec()).unwrap(),
            &layout(),
            |_| 1.0,
        )
        .unwrap()
    }

    #[test]
    fn identical_maps_are_perfect() {
        let m = map(4, &[1, 1, 2, 2, 1, 1, 2, 2], &[0, 0, 1, 1, 0, 0, 1, 1]);
        let r = evaluate(&m, &m, &layout()).unwrap();
        assert_eq!(r.pq, Some(1.0));
        assert_eq!(r.miou, Some(1.0));
        assert!(r.per_class.iter().all(|c| c.tp == 1 && c.sq == 1.0));
    }

    #[test]
    fn eighty_percent_cover() {
        let gt = map(5, &[2, 2, 2, 2, 2], &[1, 1, 1, 1, 1]);
        let pred = map(5, &[2, 2, 2, 2, 1], &[7, 7, 7, 7, 0]);
        let m = match_segments(&pred, &gt).unwrap();
        assert_eq!(m.matches.len(), 1);
        assert!((m.matches[0].iou - 0.8).abs() < 1e-12);
    }

    #[test]
    fn half_overlap_does_not_match() {
        let gt = map(4, &[2, 2, 1, 1], &[1, 1, 0, 0]);
        let pred = map(4, &[2, 2, 2, 2], &[3, 3, 3, 3]);
        let m = match_segments(&pred, &gt).unwrap();
        assert!(m.matches.is_empty());
        assert_eq!(m.false_positives, vec![SegmentRef { class: 2, id: 3 }]);
        assert!(m.false_negatives.contains(&SegmentRef { class: 2, id: 1 }));
    }

    #[test]
    fn pq_arithmetic() {
        let m = SegmentMatching {
            matches: vec![SegmentMatch { class: 2, gt_id: 1, pred_id: 1, iou: 0.8 }],
            false_positives: vec![SegmentRef { class: 2, id: 2 }],
            false_negatives: vec![],
        };
        let q = panoptic_quality(&m);
        assert!((q[0].pq - 0.8 / 1.5).abs() < 1e-12);
        assert!((q[0].pq - q[0].sq * q[0].rq).abs() < 1e-12);
        let m = SegmentMatching {
            false_negatives: vec![SegmentRef { class: 2, id: 1 }],
            ..Default::default()
        };
        assert_eq!(panoptic_quality(&m)[0].pq, 0.0);
    }

    #[test]
    fn miou_examples() {
        let gt = Grid::new(1, 4, vec![1u16, 1, 2, 2]).unwrap();
        let pred = Grid::new(1, 4, vec![1u16, 1, 1, 1]).unwrap();
        let r = mean_iou(&pred, &gt, 2).unwrap();
        assert_eq!(r.per_class, vec![(1, 0.5), (2, 0.0)]);
        assert_eq!(r.miou, Some(0.25));
        let swapped = Grid::new(1, 4, vec![2u16, 2, 1, 1]).unwrap();
        assert_eq!(mean_iou(&swapped, &gt, 2).unwrap().miou, Some(0.0));
    }

    #[test]
    fn void_handling() {
        // gt: instance on two pixels, two void pixels
        let gt = map(4, &[2, 2, 0, 0], &[1, 1, 0, 0]);
        // prediction spills onto one void pixel: union ignores it
        let pred = map(4, &[2, 2, 2, 1], &[4, 4, 4, 0]);
        let m = match_segments(&pred, &gt).unwrap();
        assert_eq!(m.matches[0].iou, 1.0);
        // the stuff prediction lies fully on void and is not a false positive
        assert!(m.false_positives.is_empty());
    }

    #[test]
    fn mismatched_resolution_fails() {
        let a = map(2, &[1, 1], &[0, 0]);
        let b = map(1, &[1, 1], &[0, 0]);
        assert!(match_segments(&a, &b).is_err());
    }
}
