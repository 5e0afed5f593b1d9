//! Box arithmetic, per-category IoU matching, and area-binned IoU statistics.
//!
//! Boxes use the COCO `(x, y, w, h)` top-left convention with continuous
//! coordinates. Corner form is internal to the intersection math.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LsmError, Result};

/// Axis-aligned box with category and optional confidence score.
///
/// Ground-truth boxes carry no score; predictions and pseudo-labels do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub category: u32,
    pub score: Option<f64>,
}

impl BBox {
    /// Ground-truth box (no score). Zero-area or negative extents are rejected
    /// here so downstream IoU math never sees degenerate input.
    pub fn new(x: f64, y: f64, w: f64, h: f64, category: u32) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(LsmError::InvalidBox(format!(
                "w and h must be positive and finite, got w={w}, h={h}"
            )));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(LsmError::InvalidBox(format!(
                "x and y must be finite, got x={x}, y={y}"
            )));
        }
        Ok(BBox {
            x,
            y,
            w,
            h,
            category,
            score: None,
        })
    }

    /// Scored box (prediction / pseudo-label).
    pub fn with_score(x: f64, y: f64, w: f64, h: f64, category: u32, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(LsmError::InvalidBox(format!(
                "score must lie in [0,1], got {score}"
            )));
        }
        let mut b = Self::new(x, y, w, h, category)?;
        b.score = Some(score);
        Ok(b)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Right edge (exclusive).
    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    /// Bottom edge (exclusive).
    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    /// Score, with unscored (ground-truth) boxes ranked as certain.
    pub fn score_or_one(&self) -> f64 {
        self.score.unwrap_or(1.0)
    }
}

/// Object-size interval keyed on box area, lower-inclusive / upper-exclusive.
///
/// Boundaries are 32*32 = 1024 and 96*96 = 9216; the three bins partition
/// `[0, +inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AreaBin {
    Small,
    Medium,
    Large,
}

pub const AREA_SMALL_MAX: f64 = 32.0 * 32.0;
pub const AREA_MEDIUM_MAX: f64 = 96.0 * 96.0;

impl AreaBin {
    pub const ALL: [AreaBin; 3] = [AreaBin::Small, AreaBin::Medium, AreaBin::Large];

    pub fn name(&self) -> &'static str {
        match self {
            AreaBin::Small => "small",
            AreaBin::Medium => "medium",
            AreaBin::Large => "large",
        }
    }

    /// Inclusive lower area bound.
    pub fn lower(&self) -> f64 {
        match self {
            AreaBin::Small => 0.0,
            AreaBin::Medium => AREA_SMALL_MAX,
            AreaBin::Large => AREA_MEDIUM_MAX,
        }
    }

    /// Exclusive upper area bound; `None` for the unbounded large bin.
    pub fn upper(&self) -> Option<f64> {
        match self {
            AreaBin::Small => Some(AREA_SMALL_MAX),
            AreaBin::Medium => Some(AREA_MEDIUM_MAX),
            AreaBin::Large => None,
        }
    }
}

/// One-to-one matching outcome between predictions and ground truths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// (prediction index, ground-truth index, iou) triples.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_truths: Vec<usize>,
}

/// Intersection-over-union of two boxes. Symmetric, in [0,1], zero when
/// disjoint. Degenerate extents are excluded by the `BBox` constructors.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    // All widths derive from the same corner arithmetic so iou(a,a) is
    // exactly 1 despite floating-point rounding in x + w.
    let (ax2, ay2) = (a.x + a.w, a.y + a.h);
    let (bx2, by2) = (b.x + b.w, b.y + b.h);
    let ix = (ax2.min(bx2) - a.x.max(b.x)).max(0.0);
    let iy = (ay2.min(by2) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (ax2 - a.x) * (ay2 - a.y);
    let area_b = (bx2 - b.x) * (by2 - b.y);
    inter / (area_a + area_b - inter)
}

/// Greedy one-to-one matching within each category.
///
/// Predictions are visited in descending score order (ties broken by lower
/// index) and each takes the still-unassigned same-category truth of highest
/// IoU, provided that IoU reaches `iou_floor`. IoU ties go to the lower truth
/// index. This mirrors the standard COCO evaluator protocol.
pub fn match_per_category(
    predictions: &[BBox],
    truths: &[BBox],
    iou_floor: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&i, &j| {
        predictions[j]
            .score_or_one()
            .total_cmp(&predictions[i].score_or_one())
            .then(i.cmp(&j))
    });

    let mut truth_taken = vec![false; truths.len()];
    let mut pairs = Vec::new();
    let mut unmatched_predictions = Vec::new();

    for &pi in &order {
        let pred = &predictions[pi];
        let mut best: Option<(usize, f64)> = None;
        for (ti, truth) in truths.iter().enumerate() {
            if truth_taken[ti] || truth.category != pred.category {
                continue;
            }
            let v = iou(pred, truth);
            if v < iou_floor {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bv)) => v > bv,
            };
            if better {
                best = Some((ti, v));
            }
        }
        match best {
            Some((ti, v)) => {
                truth_taken[ti] = true;
                pairs.push((pi, ti, v));
            }
            None => unmatched_predictions.push(pi),
        }
    }

    pairs.sort_by_key(|&(pi, _, _)| pi);
    unmatched_predictions.sort_unstable();
    let unmatched_truths = (0..truths.len()).filter(|&t| !truth_taken[t]).collect();

    MatchResult {
        pairs,
        unmatched_predictions,
        unmatched_truths,
    }
}

/// Alternative analysis matcher: every prediction pairs with its best
/// same-category truth (truths may be reused), subject to `iou_floor`.
///
/// The motivating-analysis figure does not state whether its IoUs came from
/// one-to-one matching; this flag exposes the other reading.
pub fn match_best_iou_per_prediction(
    predictions: &[BBox],
    truths: &[BBox],
    iou_floor: f64,
) -> MatchResult {
    let mut pairs = Vec::new();
    let mut unmatched_predictions = Vec::new();
    let mut truth_used = vec![false; truths.len()];

    for (pi, pred) in predictions.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ti, truth) in truths.iter().enumerate() {
            if truth.category != pred.category {
                continue;
            }
            let v = iou(pred, truth);
            if v < iou_floor {
                continue;
            }
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((ti, v));
            }
        }
        match best {
            Some((ti, v)) => {
                truth_used[ti] = true;
                pairs.push((pi, ti, v));
            }
            None => unmatched_predictions.push(pi),
        }
    }

    let unmatched_truths = (0..truths.len()).filter(|&t| !truth_used[t]).collect();
    MatchResult {
        pairs,
        unmatched_predictions,
        unmatched_truths,
    }
}

/// Size bin of a box, by area against the 1024 / 9216 boundaries.
pub fn area_bin_of(b: &BBox) -> AreaBin {
    let a = b.area();
    if a < AREA_SMALL_MAX {
        AreaBin::Small
    } else if a < AREA_MEDIUM_MAX {
        AreaBin::Medium
    } else {
        AreaBin::Large
    }
}

/// Mean pair IoU per size bin of the matched prediction. Bins without any
/// matched prediction are absent from the map.
pub fn binned_mean_iou(
    matches: &MatchResult,
    predictions: &[BBox],
) -> BTreeMap<AreaBin, f64> {
    let mut sums: BTreeMap<AreaBin, (f64, usize)> = BTreeMap::new();
    for &(pi, _, v) in &matches.pairs {
        let bin = area_bin_of(&predictions[pi]);
        let e = sums.entry(bin).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(bin, (sum, n))| (bin, sum / n as f64))
        .collect()
}

/// Per-bin pair counts, used to recombine bin means into a global mean.
pub fn binned_pair_counts(
    matches: &MatchResult,
    predictions: &[BBox],
) -> BTreeMap<AreaBin, usize> {
    let mut counts: BTreeMap<AreaBin, usize> = BTreeMap::new();
    for &(pi, _, _) in &matches.pairs {
        *counts.entry(area_bin_of(&predictions[pi])).or_insert(0) += 1;
    }
    counts
}
