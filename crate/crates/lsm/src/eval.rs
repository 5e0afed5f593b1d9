//! COCO-style detection metrics: AP at fixed IoU, AP50:95, area-stratified
//! AP, and average recall, over per-image prediction/truth sets.
//!
//! The protocol mirrors the standard COCO evaluator: per-category greedy
//! matching by descending score, 101-point interpolated precision, at most
//! 100 detections per image. Crowd/ignore regions are out of scope.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{LsmError, Result};
use crate::geometry::{area_bin_of, iou, AreaBin, BBox};

pub const IOU_THRESHOLDS_50_95: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const MAX_DETECTIONS_PER_IMAGE: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryAp {
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap50: f64,
    pub ap50_95: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_small: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_medium: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_large: Option<f64>,
    pub avg_recall: f64,
    pub per_category: BTreeMap<u32, CategoryAp>,
    pub n_images: usize,
}

/// One teacher evaluation during training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub step: u64,
    pub ap50: f64,
    pub ap50_95: f64,
    pub avg_recall: f64,
}

/// (score, is_tp) rows for one category pooled over images, sorted by
/// descending score with a deterministic tie-break.
fn category_rows(
    per_image: &[(u64, &[BBox], &[BBox])],
    category: u32,
    iou_threshold: f64,
) -> (Vec<(f64, bool)>, usize) {
    let mut rows: Vec<(f64, u64, usize, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for (image_id, preds, truths) in per_image {
        let cat_truths: Vec<&BBox> =
            truths.iter().filter(|t| t.category == category).collect();
        n_gt += cat_truths.len();
        let mut cat_preds: Vec<(usize, &BBox)> = preds
            .iter()
            .enumerate()
            .filter(|(_, p)| p.category == category)
            .collect();
        cat_preds.sort_by(|a, b| {
            b.1.score_or_one()
                .total_cmp(&a.1.score_or_one())
                .then(a.0.cmp(&b.0))
        });

        let mut taken = vec![false; cat_truths.len()];
        for (orig_idx, p) in cat_preds {
            let mut best: Option<(usize, f64)> = None;
            for (ti, t) in cat_truths.iter().enumerate() {
                if taken[ti] {
                    continue;
                }
                let v = iou(p, t);
                if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((ti, v));
                }
            }
            let tp = match best {
                Some((ti, _)) => {
                    taken[ti] = true;
                    true
                }
                None => false,
            };
            rows.push((p.score_or_one(), *image_id, orig_idx, tp));
        }
    }
    rows.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    (rows.into_iter().map(|(s, _, _, tp)| (s, tp)).collect(), n_gt)
}

/// Area under the 101-point interpolated precision-recall curve.
fn ap_from_rows(rows: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(rows.len());
    let mut recalls = Vec::with_capacity(rows.len());
    for (i, &(_, is_tp)) in rows.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope, monotone non-increasing from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut total = 0.0;
    let mut ptr = 0usize;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        while ptr < recalls.len() && recalls[ptr] < target - 1e-12 {
            ptr += 1;
        }
        if ptr < precisions.len() {
            total += precisions[ptr];
        }
    }
    total / 101.0
}

fn mean_ap_over_categories(
    per_image: &[(u64, &[BBox], &[BBox])],
    iou_threshold: f64,
) -> Option<f64> {
    let mut categories: BTreeSet<u32> = BTreeSet::new();
    for (_, _, truths) in per_image {
        for t in truths.iter() {
            categories.insert(t.category);
        }
    }
    if categories.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &c in &categories {
        let (rows, n_gt) = category_rows(per_image, c, iou_threshold);
        sum += ap_from_rows(&rows, n_gt);
    }
    Some(sum / categories.len() as f64)
}

/// AP of a single pooled prediction/truth collection at one IoU threshold:
/// per-category greedy matching, 101-point interpolation, mean over
/// categories with at least one truth. `None` when there is no ground truth
/// at all.
pub fn average_precision(
    predictions: &[BBox],
    truths: &[BBox],
    iou_threshold: f64,
) -> Option<f64> {
    assert!(
        iou_threshold > 0.0 && iou_threshold < 1.0,
        "iou_threshold must lie in (0,1)"
    );
    let per_image = vec![(0u64, predictions, truths)];
    mean_ap_over_categories(&per_image, iou_threshold)
}

fn filter_bin<'a>(boxes: &'a [BBox], bin: AreaBin) -> Vec<BBox> {
    boxes
        .iter()
        .filter(|b| area_bin_of(b) == bin)
        .cloned()
        .collect()
}

/// Fraction of truths matched at IoU 0.5 under the per-image detection cap.
fn average_recall(per_image: &[(u64, &[BBox], &[BBox])]) -> f64 {
    let mut matched = 0usize;
    let mut total = 0usize;
    let categories: BTreeSet<u32> = per_image
        .iter()
        .flat_map(|(_, _, t)| t.iter().map(|b| b.category))
        .collect();
    for &c in &categories {
        let (rows, n_gt) = category_rows(per_image, c, 0.5);
        matched += rows.iter().filter(|(_, tp)| *tp).count();
        total += n_gt;
    }
    if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    }
}

/// Full evaluation of per-image predictions against per-image truths.
/// Prediction image ids must be a subset of the dataset's ids.
pub fn evaluate(
    predictions: &BTreeMap<u64, Vec<BBox>>,
    truths: &BTreeMap<u64, Vec<BBox>>,
) -> Result<EvalResult> {
    for id in predictions.keys() {
        if !truths.contains_key(id) {
            return Err(LsmError::Data(format!(
                "prediction image id {id} is not in the evaluation dataset"
            )));
        }
    }

    // cap detections per image by descending score
    let capped: BTreeMap<u64, Vec<BBox>> = truths
        .keys()
        .map(|id| {
            let mut preds = predictions.get(id).cloned().unwrap_or_default();
            preds.sort_by(|a, b| a.score_or_one().total_cmp(&b.score_or_one()).reverse());
            preds.truncate(MAX_DETECTIONS_PER_IMAGE);
            (*id, preds)
        })
        .collect();

    let per_image: Vec<(u64, &[BBox], &[BBox])> = truths
        .iter()
        .map(|(id, t)| (*id, capped[id].as_slice(), t.as_slice()))
        .collect();

    let ap50 = mean_ap_over_categories(&per_image, 0.50).unwrap_or(0.0);
    let ap50_95 = IOU_THRESHOLDS_50_95
        .iter()
        .filter_map(|&t| mean_ap_over_categories(&per_image, t))
        .sum::<f64>()
        / IOU_THRESHOLDS_50_95.len() as f64;

    // area-stratified: restrict truths and predictions to the bin
    let mut stratified: BTreeMap<AreaBin, f64> = BTreeMap::new();
    for bin in AreaBin::ALL {
        let binned: Vec<(u64, Vec<BBox>, Vec<BBox>)> = per_image
            .iter()
            .map(|(id, p, t)| (*id, filter_bin(p, bin), filter_bin(t, bin)))
            .collect();
        if binned.iter().all(|(_, _, t)| t.is_empty()) {
            continue;
        }
        let view: Vec<(u64, &[BBox], &[BBox])> = binned
            .iter()
            .map(|(id, p, t)| (*id, p.as_slice(), t.as_slice()))
            .collect();
        let ap = IOU_THRESHOLDS_50_95
            .iter()
            .filter_map(|&t| mean_ap_over_categories(&view, t))
            .sum::<f64>()
            / IOU_THRESHOLDS_50_95.len() as f64;
        stratified.insert(bin, ap);
    }

    let mut per_category = BTreeMap::new();
    let categories: BTreeSet<u32> = per_image
        .iter()
        .flat_map(|(_, _, t)| t.iter().map(|b| b.category))
        .collect();
    for &c in &categories {
        let (rows50, n_gt) = category_rows(&per_image, c, 0.50);
        let ap50_c = ap_from_rows(&rows50, n_gt);
        let mut sum = 0.0;
        for &t in &IOU_THRESHOLDS_50_95 {
            let (rows, n) = category_rows(&per_image, c, t);
            sum += ap_from_rows(&rows, n);
        }
        per_category.insert(
            c,
            CategoryAp {
                ap50: ap50_c,
                ap50_95: sum / IOU_THRESHOLDS_50_95.len() as f64,
            },
        );
    }

    Ok(EvalResult {
        ap50,
        ap50_95,
        ap_small: stratified.get(&AreaBin::Small).copied(),
        ap_medium: stratified.get(&AreaBin::Medium).copied(),
        ap_large: stratified.get(&AreaBin::Large).copied(),
        avg_recall: average_recall(&per_image),
        per_category,
        n_images: truths.len(),
    })
}

/// Long-form CSV of evaluation snapshots from one or more runs, aligned by
/// step for overlay plotting.
pub fn recall_precision_trace(logs: &[(String, Vec<EvalSnapshot>)]) -> Result<String> {
    for (label, snaps) in logs {
        if snaps.len() < 2 {
            return Err(LsmError::Data(format!(
                "run '{label}' has {} evaluation snapshots; need at least 2 for a curve",
                snaps.len()
            )));
        }
    }
    let mut csv = String::from("run,step,ap50,ap50_95,avg_recall\n");
    for (label, snaps) in logs {
        let mut sorted = snaps.clone();
        sorted.sort_by_key(|s| s.step);
        for s in sorted {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                label, s.step, s.ap50, s.ap50_95, s.avg_recall
            ));
        }
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64, c: u32) -> BBox {
        BBox::new(x, y, w, h, c).unwrap()
    }

    fn scored(x: f64, y: f64, w: f64, h: f64, c: u32, s: f64) -> BBox {
        BBox::with_score(x, y, w, h, c, s).unwrap()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truths = vec![b(0.0, 0.0, 10.0, 10.0, 0), b(40.0, 40.0, 20.0, 20.0, 1)];
        let preds: Vec<BBox> = truths
            .iter()
            .map(|t| scored(t.x, t.y, t.w, t.h, t.category, 1.0))
            .collect();
        assert_eq!(average_precision(&preds, &truths, 0.5), Some(1.0));
    }

    #[test]
    fn no_predictions_scores_zero() {
        let truths = vec![b(0.0, 0.0, 10.0, 10.0, 0)];
        assert_eq!(average_precision(&[], &truths, 0.5), Some(0.0));
    }

    #[test]
    fn no_truths_is_undefined() {
        let preds = vec![scored(0.0, 0.0, 5.0, 5.0, 0, 0.9)];
        assert_eq!(average_precision(&preds, &[], 0.5), None);
    }

    #[test]
    fn evaluate_perfect_detector() {
        let mut truths = BTreeMap::new();
        truths.insert(1u64, vec![b(0.0, 0.0, 10.0, 10.0, 0)]);
        truths.insert(2u64, vec![b(5.0, 5.0, 100.0, 100.0, 2)]);
        let preds: BTreeMap<u64, Vec<BBox>> = truths
            .iter()
            .map(|(id, ts)| {
                (
                    *id,
                    ts.iter()
                        .map(|t| scored(t.x, t.y, t.w, t.h, t.category, 0.95))
                        .collect(),
                )
            })
            .collect();
        let r = evaluate(&preds, &truths).unwrap();
        assert!((r.ap50_95 - 1.0).abs() < 1e-12);
        assert!((r.avg_recall - 1.0).abs() < 1e-12);
        assert_eq!(r.n_images, 2);
    }

    #[test]
    fn stratification_restricts_to_bins() {
        let mut truths = BTreeMap::new();
        truths.insert(
            1u64,
            vec![b(0.0, 0.0, 10.0, 10.0, 0), b(20.0, 20.0, 100.0, 100.0, 0)],
        );
        // predict only the small object
        let mut preds = BTreeMap::new();
        preds.insert(1u64, vec![scored(0.0, 0.0, 10.0, 10.0, 0, 0.9)]);
        let r = evaluate(&preds, &truths).unwrap();
        assert_eq!(r.ap_large, Some(0.0));
        assert!(r.ap_small.unwrap() > 0.99);
        assert!(r.ap_medium.is_none());
    }

    #[test]
    fn single_bin_truths_match_overall_ap() {
        let mut truths = BTreeMap::new();
        truths.insert(1u64, vec![b(0.0, 0.0, 10.0, 10.0, 0)]);
        let mut preds = BTreeMap::new();
        preds.insert(
            1u64,
            vec![
                scored(0.5, 0.2, 10.0, 10.0, 0, 0.9),
                scored(30.0, 30.0, 9.0, 9.0, 0, 0.5),
            ],
        );
        let r = evaluate(&preds, &truths).unwrap();
        assert!((r.ap_small.unwrap() - r.ap50_95).abs() < 1e-12);
        assert!(r.ap_medium.is_none() && r.ap_large.is_none());
    }

    #[test]
    fn score_scaling_leaves_metrics_unchanged() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut truths = BTreeMap::new();
        let mut preds = BTreeMap::new();
        for img in 0..4u64 {
            let ts: Vec<BBox> = (0..5)
                .map(|_| {
                    b(
                        rng.gen_range(0.0..80.0),
                        rng.gen_range(0.0..80.0),
                        rng.gen_range(5.0..40.0),
                        rng.gen_range(5.0..40.0),
                        rng.gen_range(0..3),
                    )
                })
                .collect();
            let ps: Vec<BBox> = ts
                .iter()
                .map(|t| {
                    scored(
                        t.x + rng.gen_range(-3.0..3.0),
                        t.y,
                        t.w,
                        t.h,
                        t.category,
                        rng.gen_range(0.2..1.0),
                    )
                })
                .collect();
            truths.insert(img, ts);
            preds.insert(img, ps);
        }
        let base = evaluate(&preds, &truths).unwrap();
        let scaled: BTreeMap<u64, Vec<BBox>> = preds
            .iter()
            .map(|(id, ps)| {
                (
                    *id,
                    ps.iter()
                        .map(|p| {
                            let mut q = p.clone();
                            q.score = Some(p.score.unwrap() * 0.5);
                            q
                        })
                        .collect(),
                )
            })
            .collect();
        let after = evaluate(&scaled, &truths).unwrap();
        assert_eq!(base.ap50, after.ap50);
        assert_eq!(base.ap50_95, after.ap50_95);
        assert_eq!(base.avg_recall, after.avg_recall);
    }

    #[test]
    fn unknown_prediction_id_is_error() {
        let mut truths = BTreeMap::new();
        truths.insert(1u64, vec![b(0.0, 0.0, 10.0, 10.0, 0)]);
        let mut preds = BTreeMap::new();
        preds.insert(9u64, vec![scored(0.0, 0.0, 10.0, 10.0, 0, 0.9)]);
        assert!(evaluate(&preds, &truths).is_err());
    }

    #[test]
    fn trace_requires_two_snapshots() {
        let one = vec![EvalSnapshot {
            step: 10,
            ap50: 0.5,
            ap50_95: 0.3,
            avg_recall: 0.6,
        }];
        assert!(recall_precision_trace(&[("x".into(), one.clone())]).is_err());
        let two = vec![
            one[0],
            EvalSnapshot {
                step: 20,
                ap50: 0.6,
                ap50_95: 0.4,
                avg_recall: 0.7,
            },
        ];
        let csv = recall_precision_trace(&[("x".into(), two)]).unwrap();
        assert!(csv.starts_with("run,step,ap50"));
        assert_eq!(csv.lines().count(), 3);
    }
}
