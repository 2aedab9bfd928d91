//! Segmentation and panoptic evaluation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// `L×L` counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Input(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let l = self.classes;
        if let Some(bad) = pred.iter().chain(gt).find(|&&c| c >= l) {
            return Err(Error::Input(format!("label {bad} out of range for {l} classes")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g * l + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    fn gt_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn pred_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    /// Whether class `c` occurs in ground truth or prediction.
    pub fn present(&self, c: usize) -> bool {
        self.gt_count(c) + self.pred_count(c) > 0
    }

    pub fn iou(&self, c: usize) -> Option<f64> {
        let union = self.gt_count(c) + self.pred_count(c) - self.tp(c);
        (union > 0).then(|| self.tp(c) as f64 / union as f64)
    }

    /// `2PR/(P+R)`, 0 when either is undefined or both are zero.
    pub fn f1(&self, c: usize) -> Option<f64> {
        if !self.present(c) {
            return None;
        }
        let tp = self.tp(c) as f64;
        let (pc, gc) = (self.pred_count(c) as f64, self.gt_count(c) as f64);
        if pc == 0.0 || gc == 0.0 || tp == 0.0 {
            return Some(0.0);
        }
        let (p, r) = (tp / pc, tp / gc);
        Some(2.0 * p * r / (p + r))
    }

    pub fn report(&self) -> SegmentationReport {
        let per_class: Vec<ClassScore> = (0..self.classes)
            .map(|c| ClassScore {
                class: c,
                iou: self.iou(c),
                f1: self.f1(c),
            })
            .collect();
        let present: Vec<&ClassScore> = per_class.iter().filter(|s| s.iou.is_some()).collect();
        let mean = |f: fn(&ClassScore) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|s| f(s)).sum::<f64>() / present.len() as f64
            }
        };
        let total = self.total();
        let trace: u64 = (0..self.classes).map(|c| self.tp(c)).sum();
        SegmentationReport {
            miou: mean(|s| s.iou.unwrap_or(0.0)),
            accuracy: if total == 0 {
                0.0
            } else {
                trace as f64 / total as f64
            },
            mean_f1: mean(|s| s.f1.unwrap_or(0.0)),
            pixels: total,
            per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub class: usize,
    /// `None` when the class is absent from both ground truth and prediction.
    pub iou: Option<f64>,
    pub f1: Option<f64>,
}

/// Means are taken over classes present in ground truth or prediction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentationReport {
    pub miou: f64,
    pub accuracy: f64,
    pub mean_f1: f64,
    pub pixels: u64,
    pub per_class: Vec<ClassScore>,
}

pub fn segmentation_metrics(pred: &[usize], gt: &[usize], classes: usize) -> Result<SegmentationReport> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.report())
}

/// Expected mIoU of a predictor drawing every pixel uniformly from
/// `classes`, estimated over `draws` seeded simulations of `gt`.
pub fn random_baseline_miou(gt: &[usize], classes: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws.max(1) {
        let pred: Vec<usize> = gt.iter().map(|_| rng.random_range(0..classes)).collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.add(&pred, gt).expect("shapes agree by construction");
        total += cm.report().miou;
    }
    total / draws.max(1) as f64
}

/// One panoptic segment: a class, an identity, and the sorted, deduplicated
/// flat pixel indices it covers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub class: usize,
    pub id: u32,
    pub pixels: Vec<usize>,
}

impl Segment {
    pub fn new(class: usize, id: u32, mut pixels: Vec<usize>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Self { class, id, pixels }
    }
}

/// Intersection over union of two sorted index lists.
pub fn mask_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_disjoint(side: &str, segs: &[Segment]) -> Result<()> {
    let mut by_class: BTreeMap<usize, Vec<&Segment>> = BTreeMap::new();
    for s in segs {
        by_class.entry(s.class).or_default().push(s);
    }
    for (class, group) in by_class {
        for (k, a) in group.iter().enumerate() {
            for b in &group[k + 1..] {
                if mask_iou(&a.pixels, &b.pixels) > 0.0 {
                    return Err(Error::Input(format!(
                        "{side} segments {} and {} of class {class} overlap",
                        a.id, b.id
                    )));
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PqTally {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PqTally {
    pub fn merge(&mut self, other: &PqTally) {
        self.iou_sum += other.iou_sum;
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `Σ IoU / (TP + ½FP + ½FN)`, `None` when there are no segments at all.
    pub fn pq(&self) -> Option<f64> {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        (denom > 0.0).then(|| self.iou_sum / denom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PanopticReport {
    pub pq: Option<f64>,
    pub pq_thing: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub thing: PqTally,
    pub stuff: PqTally,
    /// Matched `(pred index, gt index, IoU)` triples.
    pub matches: Vec<(usize, usize, f64)>,
}

/// Matches same-class segments with IoU > 0.5 and pools the panoptic
/// quality over all segments, and separately over thing and stuff classes.
/// Empty segments are ignored.
pub fn panoptic_quality(
    pred: &[Segment],
    gt: &[Segment],
    is_thing: impl Fn(usize) -> bool,
) -> Result<PanopticReport> {
    check_disjoint("predicted", pred)?;
    check_disjoint("ground-truth", gt)?;
    let mut pred_matched = vec![false; pred.len()];
    let mut gt_matched = vec![false; gt.len()];
    let mut matches = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        if g.pixels.is_empty() {
            continue;
        }
        for (pi, p) in pred.iter().enumerate() {
            if p.class != g.class || pred_matched[pi] || p.pixels.is_empty() {
                continue;
            }
            let iou = mask_iou(&p.pixels, &g.pixels);
            if iou > 0.5 {
                pred_matched[pi] = true;
                gt_matched[gi] = true;
                matches.push((pi, gi, iou));
                break;
            }
        }
    }
    let mut thing = PqTally::default();
    let mut stuff = PqTally::default();
    for &(_, gi, iou) in &matches {
        let t = if is_thing(gt[gi].class) { &mut thing } else { &mut stuff };
        t.tp += 1;
        t.iou_sum += iou;
    }
    for (pi, p) in pred.iter().enumerate() {
        if !pred_matched[pi] && !p.pixels.is_empty() {
            let t = if is_thing(p.class) { &mut thing } else { &mut stuff };
            t.fp += 1;
        }
    }
    for (gi, g) in gt.iter().enumerate() {
        if !gt_matched[gi] && !g.pixels.is_empty() {
            let t = if is_thing(g.class) { &mut thing } else { &mut stuff };
            t.fn_ += 1;
        }
    }
    let all = PqTally {
        iou_sum: thing.iou_sum + stuff.iou_sum,
        tp: thing.tp + stuff.tp,
        fp: thing.fp + stuff.fp,
        fn_: thing.fn_ + stuff.fn_,
    };
    Ok(PanopticReport {
        pq: all.pq(),
        pq_thing: thing.pq(),
        pq_stuff: stuff.pq(),
        thing,
        stuff,
        matches,
    })
}
