//! COCO-style AP, error-category shares and feature-norm images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::detector::PyramidSnapshot;
use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::matching::GroundTruth;
use crate::pnm;
use crate::tensor::Tensor;

pub const MAX_DETS: usize = 100;
pub const LOC_BAND: (f64, f64) = (0.1, 0.5);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub label: usize,
}

/// Top-scoring `(query, class)` pairs of one image as detections.
pub fn detections_from_outputs(logits: &Tensor, boxes: &Tensor, max_dets: usize) -> Vec<Detection> {
    let k = logits.last_dim();
    let mut all: Vec<Detection> = logits
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| Detection {
            bbox: BBox::from_array(boxes.row(i / k).try_into().unwrap()),
            score: sigmoid(l),
            label: i % k,
        })
        .collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(max_dets);
    all
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub aps: f64,
    pub apm: f64,
    pub apl: f64,
    pub loc: f64,
    pub cls: f64,
    pub bg: f64,
    pub fn_: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "ap,ap50,ap75,aps,apm,apl,loc,cls,bg,fn";

    pub fn values(&self) -> [f64; 10] {
        [
            self.ap, self.ap50, self.ap75, self.aps, self.apm, self.apl, self.loc, self.cls, self.bg, self.fn_,
        ]
    }

    pub fn csv_row(&self) -> String {
        self.values().map(|v| format!("{v:.6}")).join(",")
    }

    /// Aligned two-line text table.
    pub fn table(&self) -> String {
        let names = Self::CSV_HEADER.split(',');
        let head: Vec<String> = names.map(|n| format!("{:>8}", n.to_uppercase())).collect();
        let vals: Vec<String> = self.values().iter().map(|v| format!("{:>8.4}", v)).collect();
        format!("{}\n{}", head.join(" "), vals.join(" "))
    }
}

/// Area ranges in normalized units, COCO's `32²` and `96²` pixel bounds
/// rescaled from a 640-pixel reference to `canvas`.
pub fn area_ranges(canvas: usize) -> [(f64, f64); 4] {
    let scale = canvas as f64 / 640.0;
    let px = |v: f64| (v * scale).powi(2) / (canvas * canvas) as f64;
    let (s, m) = (px(32.0), px(96.0));
    [(0.0, f64::INFINITY), (0.0, s), (s, m), (m, f64::INFINITY)]
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Per-detection outcome for one image: `Some(true)` matched,
/// `Some(false)` false positive, `None` ignored.
fn match_image(dets: &[&Detection], gts: &[(BBox, bool)], thr: f64) -> Vec<Option<bool>> {
    // non-ignored ground truth first, as in the reference evaluator
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| gts[g].1);
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best = thr.min(1.0 - 1e-10);
            let mut hit: Option<usize> = None;
            for &g in &order {
                if taken[g] {
                    continue;
                }
                if let Some(h) = hit {
                    if !gts[h].1 && gts[g].1 {
                        break;
                    }
                }
                let v = iou(d.bbox, gts[g].0);
                if v < best {
                    continue;
                }
                best = v;
                hit = Some(g);
            }
            match hit {
                Some(g) => {
                    taken[g] = true;
                    if gts[g].1 {
                        None
                    } else {
                        Some(true)
                    }
                }
                None => Some(false),
            }
        })
        .collect()
}

/// 101-point interpolated AP from score-sorted outcomes; `None` when there
/// is no ground truth.
pub fn interpolated_ap(outcomes: &[bool], positives: usize) -> Option<f64> {
    if positives == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(outcomes.len());
    let mut precision = Vec::with_capacity(outcomes.len());
    for &o in outcomes {
        if o {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < target);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// AP for one class at one IoU threshold and area range.
fn class_ap(preds: &[Vec<Detection>], gts: &[GroundTruth], class: usize, thr: f64, area: (f64, f64)) -> Option<f64> {
    let in_range = |b: BBox| {
        let a = b.w * b.h;
        a >= area.0 && a <= area.1
    };
    let mut scored: Vec<(f64, usize, bool)> = Vec::new();
    let mut positives = 0;
    for (img, (dets, gt)) in preds.iter().zip(gts).enumerate() {
        let g: Vec<(BBox, bool)> = gt
            .boxes
            .iter()
            .zip(&gt.labels)
            .filter(|(_, &l)| l == class)
            .map(|(&b, _)| (b, !in_range(b)))
            .collect();
        positives += g.iter().filter(|x| !x.1).count();
        let mut d: Vec<&Detection> = dets.iter().filter(|d| d.label == class).collect();
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        d.truncate(MAX_DETS);
        for (det, o) in d.iter().zip(match_image(&d, &g, thr)) {
            // unmatched detections outside the area range are ignored
            match o {
                Some(true) => scored.push((det.score, img, true)),
                Some(false) if in_range(det.bbox) => scored.push((det.score, img, false)),
                _ => {}
            }
        }
    }
    // stable sort keeps image order among equal scores
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let outcomes: Vec<bool> = scored.iter().map(|s| s.2).collect();
    interpolated_ap(&outcomes, positives)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-class AP (averaged over IoU thresholds) at all areas; `None` for
/// classes without ground truth.
pub fn per_class_ap(preds: &[Vec<Detection>], gts: &[GroundTruth], num_classes: usize) -> Vec<Option<f64>> {
    let all = (0.0, f64::INFINITY);
    (0..num_classes)
        .map(|c| {
            let v: Vec<f64> = IOU_THRESHOLDS
                .iter()
                .filter_map(|&t| class_ap(preds, gts, c, t, all))
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

/// Fills the AP fields of a report.
pub fn compute_ap(preds: &[Vec<Detection>], gts: &[GroundTruth], num_classes: usize, canvas: usize) -> EvalReport {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    let [all, small, medium, large] = area_ranges(canvas);
    let over = |thrs: &[f64], area: (f64, f64)| {
        mean(
            (0..num_classes)
                .flat_map(|c| thrs.iter().map(move |&t| (c, t)))
                .map(|(c, t)| class_ap(preds, gts, c, t, area)),
        )
    };
    EvalReport {
        ap: over(&IOU_THRESHOLDS, all),
        ap50: over(&[0.5], all),
        ap75: over(&[0.75], all),
        aps: over(&IOU_THRESHOLDS, small),
        apm: over(&IOU_THRESHOLDS, medium),
        apl: over(&IOU_THRESHOLDS, large),
        ..Default::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    Cls,
    Loc,
    Bg,
    /// Duplicates and wrong-label near misses.
    Other,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorCounts {
    pub outcomes: Vec<Outcome>,
    pub false_negatives: usize,
    pub gt: usize,
}

impl ErrorCounts {
    pub fn count(&self, o: Outcome) -> usize {
        self.outcomes.iter().filter(|&&x| x == o).count()
    }
}

/// Classifies the top `max(|GT|, 1)` predictions of one image.
pub fn classify_image(dets: &[Detection], gt: &GroundTruth) -> ErrorCounts {
    let mut d: Vec<&Detection> = dets.iter().collect();
    d.sort_by(|a, b| b.score.total_cmp(&a.score));
    d.truncate(gt.len().max(1));
    let mut detected = vec![false; gt.len()];
    let mut covered = vec![false; gt.len()];
    let mut outcomes = Vec::with_capacity(d.len());
    for det in d {
        let ious: Vec<f64> = gt.boxes.iter().map(|&b| iou(det.bbox, b)).collect();
        let max_any = ious.iter().copied().fold(0.0, f64::max);
        let best = |same: bool, free: bool| {
            (0..gt.len())
                .filter(|&g| (gt.labels[g] == det.label) == same && (!free || !detected[g]))
                .max_by(|&a, &b| ious[a].total_cmp(&ious[b]).then(b.cmp(&a)))
        };
        let outcome = match best(true, true) {
            Some(g) if ious[g] >= LOC_BAND.1 => {
                detected[g] = true;
                Outcome::TruePositive
            }
            _ => {
                let other = best(false, false).filter(|&g| ious[g] >= LOC_BAND.1);
                let same = best(true, false).filter(|&g| ious[g] >= LOC_BAND.0 && ious[g] < LOC_BAND.1);
                if let Some(g) = other {
                    covered[g] = true;
                    Outcome::Cls
                } else if let Some(g) = same {
                    covered[g] = true;
                    Outcome::Loc
                } else if max_any < LOC_BAND.0 {
                    Outcome::Bg
                } else {
                    Outcome::Other
                }
            }
        };
        outcomes.push(outcome);
    }
    let false_negatives = (0..gt.len()).filter(|&g| !detected[g] && !covered[g]).count();
    ErrorCounts {
        outcomes,
        false_negatives,
        gt: gt.len(),
    }
}

/// Fills the error-share fields: Loc, Cls and BG as fractions of the
/// considered predictions, FN as a fraction of ground truth.
pub fn error_analysis(preds: &[Vec<Detection>], gts: &[GroundTruth], report: &mut EvalReport) {
    let (mut n, mut loc, mut cls, mut bg, mut fneg, mut ngt) = (0, 0, 0, 0, 0, 0);
    for (d, g) in preds.iter().zip(gts) {
        let c = classify_image(d, g);
        n += c.outcomes.len();
        loc += c.count(Outcome::Loc);
        cls += c.count(Outcome::Cls);
        bg += c.count(Outcome::Bg);
        fneg += c.false_negatives;
        ngt += c.gt;
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    report.loc = frac(loc, n);
    report.cls = frac(cls, n);
    report.bg = frac(bg, n);
    report.fn_ = frac(fneg, ngt);
}

pub fn evaluate(preds: &[Vec<Detection>], gts: &[GroundTruth], num_classes: usize, canvas: usize) -> EvalReport {
    let mut r = compute_ap(preds, gts, num_classes, canvas);
    error_analysis(preds, gts, &mut r);
    r
}

/// Per-location channel L2 norm of `[c, h, w]`, min-max scaled to 0–255.
/// A constant map becomes uniform mid-gray.
pub fn feature_norm_pixels(map: &Tensor) -> (usize, usize, Vec<u8>) {
    let (c, h, w) = crate::imaging::dims(map);
    let d = map.data();
    let norms: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|k| d[k * h * w + i].powi(2)).sum::<f64>().sqrt())
        .collect();
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let px = norms
        .iter()
        .map(|&v| {
            if range <= 0.0 {
                128
            } else {
                ((v - lo) / range * 255.0).round() as u8
            }
        })
        .collect();
    (w, h, px)
}

pub fn feature_norm_image(snapshot: &PyramidSnapshot, level: usize, path: &Path) -> Result<(usize, usize)> {
    let (map, _) = snapshot.levels.get(level).ok_or_else(|| {
        Error::contract(format!(
            "level {level} out of range; snapshot has {} levels",
            snapshot.levels.len()
        ))
    })?;
    let (w, h, px) = feature_norm_pixels(map);
    pnm::write_pgm(path, w, h, &px)?;
    Ok((w, h))
}

/// Copy of `image` with one-pixel outlines of every detection scoring at
/// least `threshold`. Returns the image and the number of boxes drawn.
pub fn overlay(image: &Tensor, dets: &[Detection], threshold: f64) -> (Tensor, usize) {
    const PALETTE: [[f64; 3]; 6] = [
        [1.0, 0.0, 0.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.0, 1.0],
        [1.0, 1.0, 1.0],
        [0.0, 0.0, 0.0],
    ];
    let (_, h, w) = crate::imaging::dims(image);
    let mut out = image.clone();
    let mut drawn = 0;
    for d in dets.iter().filter(|d| d.score >= threshold) {
        drawn += 1;
        let [x0, y0, x1, y1] = d.bbox.xyxy();
        let px = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
        let (x0, x1, y0, y1) = (px(x0, w), px(x1, w), px(y0, h), px(y1, h));
        let color = PALETTE[d.label % PALETTE.len()];
        let data = out.data_mut();
        let mut put = |x: usize, y: usize| {
            for (c, v) in color.iter().enumerate() {
                data[c * h * w + y * w + x] = *v;
            }
        };
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
    (out, drawn)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(boxes: &[BBox], labels: &[usize]) -> GroundTruth {
        GroundTruth {
            boxes: boxes.to_vec(),
            labels: labels.to_vec(),
        }
    }

    fn det(b: BBox, score: f64, label: usize) -> Detection {
        Detection { bbox: b, score, label }
    }

    const A: BBox = BBox {
        cx: 0.3,
        cy: 0.3,
        w: 0.2,
        h: 0.2,
    };

    #[test]
    fn single_ground_truth_cases() {
        let g = vec![gt(&[A], &[0])];
        let r = compute_ap(&[vec![det(A, 0.9, 0)]], &g, 1, 128);
        assert_eq!(r.ap, 1.0);
        let r = compute_ap(&[vec![]], &g, 1, 128);
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn spurious_higher_score_halves_ap50() {
        let g = vec![gt(&[A], &[0])];
        let far = BBox::new(0.8, 0.8, 0.1, 0.1);
        let r = compute_ap(&[vec![det(A, 0.9, 0), det(far, 0.95, 0)]], &g, 1, 128);
        assert!((r.ap50 - 0.5).abs() < 1e-12, "{}", r.ap50);
    }

    #[test]
    fn perfect_predictions_have_no_errors() {
        let b = BBox::new(0.7, 0.6, 0.2, 0.3);
        let g = vec![gt(&[A, b], &[0, 1])];
        let mut r = EvalReport::default();
        error_analysis(&[vec![det(A, 0.9, 0), det(b, 0.8, 1)]], &g, &mut r);
        assert_eq!([r.loc, r.cls, r.bg, r.fn_], [0.0; 4]);
    }

    #[test]
    fn low_iou_correct_label_is_loc() {
        // shifted box with IoU 0.3 against A
        let shifted = BBox::new(0.3 + 0.2 * (1.0 - 2.0 * 0.3 / 1.3), 0.3, 0.2, 0.2);
        assert!((iou(shifted, A) - 0.3).abs() < 1e-12);
        let c = classify_image(&[det(shifted, 0.9, 0)], &gt(&[A], &[0]));
        assert_eq!(c.outcomes, vec![Outcome::Loc]);
        assert_eq!(c.false_negatives, 0);
    }

    #[test]
    fn constant_and_spike_norm_maps() {
        let (_, _, px) = feature_norm_pixels(&Tensor::full(&[3, 4, 4], 2.0));
        assert!(px.iter().all(|&p| p == 128));
        let mut spike = Tensor::zeros(&[2, 3, 3]);
        spike.data_mut()[9 + 4] = 5.0;
        let (w, h, px) = feature_norm_pixels(&spike);
        assert_eq!((w, h), (3, 3));
        assert_eq!(px.iter().filter(|&&p| p == 255).count(), 1);
        assert_eq!(px[4], 255);
        assert_eq!(px.iter().filter(|&&p| p == 0).count(), 8);
    }

    #[test]
    fn threshold_above_one_draws_nothing() {
        let img = Tensor::zeros(&[3, 8, 8]);
        let (out, n) = overlay(&img, &[det(A, 0.99, 0)], 1.01);
        assert_eq!(n, 0);
        assert_eq!(out, img);
    }
}
