//! Confusion counts, overlap metrics and the Hausdorff distance.

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::HdPoints;
use crate::labels::LabelMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn merge(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// One-vs-rest counts for class `k`.
pub fn confusion_counts(pred: &LabelMap, g: &LabelMap, k: u8) -> Counts {
    assert_eq!(
        pred.dims(),
        g.dims(),
        "prediction and ground truth shapes differ"
    );
    let mut c = Counts::default();
    for (&p, &t) in pred.data().iter().zip(g.data()) {
        match (p == k, t == k) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMetrics {
    pub dsc: Option<f64>,
    pub iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn pixel_metrics(c: Counts) -> PixelMetrics {
    PixelMetrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        accuracy: ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
    }
}

pub type Point = (usize, usize);

fn dist2(a: Point, b: Point) -> u64 {
    let dy = a.0.abs_diff(b.0) as u64;
    let dx = a.1.abs_diff(b.1) as u64;
    dy * dy + dx * dx
}

/// Squared `max_a min_b |a-b|`. The inner scan stops once it can no longer
/// raise the running maximum, so the result stays exact.
fn directed2(a: &[Point], b: &[Point]) -> u64 {
    let mut worst = 0;
    for &p in a {
        let mut best = u64::MAX;
        for &q in b {
            let d = dist2(p, q);
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Symmetric Hausdorff distance in pixels, `None` if either set is empty.
pub fn hausdorff(a: &[Point], b: &[Point]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    Some((directed2(a, b).max(directed2(b, a)) as f64).sqrt())
}

/// Pixel coordinates of class `k` in a single `[H,W]` map; `Boundary` keeps
/// pixels with a 4-neighbour outside the class or on the image border.
pub fn class_points(m: &LabelMap, k: u8, mode: HdPoints) -> Vec<Point> {
    let (h, w) = (m.dims()[0], m.dims()[1]);
    let d = m.data();
    let at = |y: usize, x: usize| d[y * w + x] == k;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let keep = match mode {
                HdPoints::All => true,
                HdPoints::Boundary => {
                    y == 0
                        || x == 0
                        || y + 1 == h
                        || x + 1 == w
                        || !at(y - 1, x)
                        || !at(y + 1, x)
                        || !at(y, x - 1)
                        || !at(y, x + 1)
                }
            };
            if keep {
                out.push((y, x));
            }
        }
    }
    out
}

/// Per-class distance for one sample: `None` if the class is absent from both
/// maps, the image diagonal if it is present in only one.
pub fn class_hausdorff(pred: &LabelMap, g: &LabelMap, k: u8, mode: HdPoints) -> Option<f64> {
    let (h, w) = (g.dims()[0], g.dims()[1]);
    let a = class_points(pred, k, mode);
    let b = class_points(g, k, mode);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => None,
        (false, false) => hausdorff(&a, &b),
        _ => Some(((h * h + w * w) as f64).sqrt()),
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub counts: Counts,
    pub metrics: PixelMetrics,
    /// Mean over samples where the distance is defined.
    pub hd: Option<f64>,
}

/// Metrics over an evaluation set. Counts are pooled over all pixels; class
/// means cover the foreground classes `1..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassReport>,
    pub mean_dsc: Option<f64>,
    pub miou: Option<f64>,
    pub mean_hd: Option<f64>,
    pub accuracy: Option<f64>,
    pub samples: usize,
}

struct SampleStats {
    counts: Vec<Counts>,
    hd: Vec<Option<f64>>,
    correct: u64,
    total: u64,
}

fn sample_stats(pred: &LabelMap, g: &LabelMap, k: usize, mode: HdPoints) -> SampleStats {
    let counts = (0..k as u8).map(|c| confusion_counts(pred, g, c)).collect();
    let hd = (0..k as u8)
        .map(|c| class_hausdorff(pred, g, c, mode))
        .collect();
    let correct = pred
        .data()
        .iter()
        .zip(g.data())
        .filter(|(a, b)| a == b)
        .count() as u64;
    SampleStats {
        counts,
        hd,
        correct,
        total: g.len() as u64,
    }
}

impl MetricsReport {
    /// `preds` and `truths` hold `[H,W]` maps. Samples run in parallel and are
    /// reduced in input order.
    pub fn evaluate(preds: &[LabelMap], truths: &[LabelMap], k: usize, mode: HdPoints) -> Self {
        assert_eq!(preds.len(), truths.len());
        let stats: Vec<SampleStats> = preds
            .par_iter()
            .zip(truths.par_iter())
            .map(|(p, g)| sample_stats(p, g, k, mode))
            .collect();
        let classes: Vec<ClassReport> = (0..k)
            .map(|c| {
                let counts = stats
                    .iter()
                    .fold(Counts::default(), |a, s| a.merge(s.counts[c]));
                ClassReport {
                    counts,
                    metrics: pixel_metrics(counts),
                    hd: mean(stats.iter().map(|s| s.hd[c])),
                }
            })
            .collect();
        let fg = if k > 1 { &classes[1..] } else { &classes[..] };
        let correct: u64 = stats.iter().map(|s| s.correct).sum();
        let total: u64 = stats.iter().map(|s| s.total).sum();
        Self {
            mean_dsc: mean(fg.iter().map(|c| c.metrics.dsc)),
            miou: mean(fg.iter().map(|c| c.metrics.iou)),
            mean_hd: mean(fg.iter().map(|c| c.hd)),
            accuracy: ratio(correct, total),
            classes,
            samples: preds.len(),
        }
    }

    pub fn to_json(&self) -> Value {
        let col = |f: &dyn Fn(&ClassReport) -> Option<f64>| {
            self.classes.iter().map(f).collect::<Vec<_>>()
        };
        json!({
            "samples": self.samples,
            "mean_dsc": self.mean_dsc,
            "miou": self.miou,
            "mean_hd": self.mean_hd,
            "accuracy": self.accuracy,
            "dsc": col(&|c| c.metrics.dsc),
            "iou": col(&|c| c.metrics.iou),
            "hd": col(&|c| c.hd),
            "precision": col(&|c| c.metrics.precision),
            "recall": col(&|c| c.metrics.recall),
        })
    }
}
