//! Teacher inference over unlabeled images and threshold partitioning of the
//! predictions: main-branch set (score > t), mining set (score > alpha), and
//! the self-distillation interval (alpha < score < t). All comparisons are
//! strict.

use ndarray::Array3;

use crate::data::{AugmentationRecipe, CocoPrediction, RealizedAugmentation};
use crate::detector::MiniDetector;
use crate::error::{LsmError, Result};
use crate::geometry::BBox;

/// Teacher predictions for one image, partitioned by confidence thresholds.
/// Index sets point into `all`; `main_set` is always a subset of `pim_set`.
#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    pub all: Vec<BBox>,
    pub main_set: Vec<usize>,
    pub pim_set: Vec<usize>,
    pub sd_interval: Vec<usize>,
    pub source_image_id: u64,
    /// (t, alpha)
    pub thresholds: (f64, f64),
}

impl PseudoLabelSet {
    pub fn main_boxes(&self) -> Vec<BBox> {
        self.main_set.iter().map(|&i| self.all[i].clone()).collect()
    }

    pub fn pim_boxes(&self) -> Vec<BBox> {
        self.pim_set.iter().map(|&i| self.all[i].clone()).collect()
    }

    pub fn sd_boxes(&self) -> Vec<BBox> {
        self.sd_interval
            .iter()
            .map(|&i| self.all[i].clone())
            .collect()
    }

    /// COCO-prediction rows tagged with the partition each box fell into.
    pub fn to_predictions(&self) -> Vec<CocoPrediction> {
        let (t, _alpha) = self.thresholds;
        self.all
            .iter()
            .map(|b| {
                let s = b.score_or_one();
                let partition = if s > t {
                    "main"
                } else if s < t {
                    "sd_interval"
                } else {
                    "threshold_boundary"
                };
                CocoPrediction {
                    image_id: self.source_image_id,
                    category_id: b.category,
                    bbox: vec![b.x, b.y, b.w, b.h],
                    score: s,
                    partition: Some(partition.to_string()),
                }
            })
            .collect()
    }
}

/// `alpha > t` is rejected; `alpha == t` is allowed as the degenerate
/// two-view-consistency configuration (the SD interval is then empty).
pub fn validate_thresholds(t: f64, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&alpha) || alpha > t {
        return Err(LsmError::ConfigValidation(vec![format!(
            "thresholds: alpha must be < t with both in [0,1], got alpha={alpha}, t={t}"
        )]));
    }
    Ok(())
}

/// Partition scored boxes by strict threshold comparisons.
pub fn partition_by_scores(
    boxes: Vec<BBox>,
    t: f64,
    alpha: f64,
    source_image_id: u64,
) -> Result<PseudoLabelSet> {
    validate_thresholds(t, alpha)?;
    let mut main_set = Vec::new();
    let mut pim_set = Vec::new();
    let mut sd_interval = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let s = b.score_or_one();
        if s > alpha {
            pim_set.push(i);
        }
        if s > t {
            main_set.push(i);
        }
        if s > alpha && s < t {
            sd_interval.push(i);
        }
    }
    Ok(PseudoLabelSet {
        all: boxes,
        main_set,
        pim_set,
        sd_interval,
        source_image_id,
        thresholds: (t, alpha),
    })
}

/// Run the frozen teacher on a weakly augmented image and partition its
/// predictions. NMS happens inside `predict`, before thresholding, so the
/// main and mining sets come from one candidate pool.
pub fn generate_pseudo_labels(
    teacher: &MiniDetector,
    image: &Array3<f64>,
    source_image_id: u64,
    t: f64,
    alpha: f64,
) -> Result<PseudoLabelSet> {
    validate_thresholds(t, alpha)?;
    let candidates = teacher.predict(image, alpha)?;
    partition_by_scores(candidates, t, alpha, source_image_id)
}

/// Map a pseudo-label set through the geometric steps of the student's
/// strong view. Dropped boxes leave every index set consistently; scores and
/// set membership are otherwise preserved.
pub fn transfer_to_student_view(
    labels: &PseudoLabelSet,
    recipe: &AugmentationRecipe,
    view_hw: (usize, usize),
) -> PseudoLabelSet {
    transfer_through(labels, &recipe.realize(view_hw.0, view_hw.1))
}

/// Same as [`transfer_to_student_view`] but with an already-realized
/// augmentation, so the caller can share it with the image path.
pub fn transfer_through(
    labels: &PseudoLabelSet,
    realized: &RealizedAugmentation,
) -> PseudoLabelSet {
    let mut remap: Vec<Option<usize>> = Vec::with_capacity(labels.all.len());
    let mut all = Vec::new();
    for b in &labels.all {
        match realized.transform_box(b) {
            Some(nb) => {
                remap.push(Some(all.len()));
                all.push(nb);
            }
            None => remap.push(None),
        }
    }
    let remap_set =
        |set: &[usize]| -> Vec<usize> { set.iter().filter_map(|&i| remap[i]).collect() };
    PseudoLabelSet {
        main_set: remap_set(&labels.main_set),
        pim_set: remap_set(&labels.pim_set),
        sd_interval: remap_set(&labels.sd_interval),
        all,
        source_image_id: labels.source_image_id,
        thresholds: labels.thresholds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GeomStep;

    fn scored(scores: &[f64]) -> Vec<BBox> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                BBox::with_score(10.0 * i as f64, 5.0, 8.0, 8.0, 0, s).unwrap()
            })
            .collect()
    }

    #[test]
    fn threshold_arithmetic() {
        let set = partition_by_scores(scored(&[0.8, 0.6, 0.4]), 0.7, 0.5, 1).unwrap();
        assert_eq!(set.main_set, vec![0]);
        assert_eq!(set.pim_set, vec![0, 1]);
        assert_eq!(set.sd_interval, vec![1]);
    }

    #[test]
    fn all_below_alpha_gives_empty_sets() {
        let set = partition_by_scores(scored(&[0.2, 0.4, 0.1]), 0.7, 0.5, 1).unwrap();
        assert!(set.main_set.is_empty());
        assert!(set.pim_set.is_empty());
        assert!(set.sd_interval.is_empty());
    }

    #[test]
    fn boundary_scores_are_excluded_strictly() {
        let set = partition_by_scores(scored(&[0.7]), 0.7, 0.5, 1).unwrap();
        assert!(set.main_set.is_empty());
        assert!(set.sd_interval.is_empty());
        assert_eq!(set.pim_set, vec![0]);
        // alpha boundary is excluded from pim too
        let set = partition_by_scores(scored(&[0.5]), 0.7, 0.5, 1).unwrap();
        assert!(set.pim_set.is_empty());
    }

    #[test]
    fn alpha_above_t_rejected_equality_degenerate() {
        assert!(partition_by_scores(scored(&[0.5]), 0.5, 0.7, 0).is_err());
        // alpha == t: allowed, sd interval provably empty
        let set = partition_by_scores(scored(&[0.9, 0.6]), 0.7, 0.7, 0).unwrap();
        assert!(set.sd_interval.is_empty());
        assert_eq!(set.main_set, set.pim_set);
    }

    #[test]
    fn main_is_subset_of_pim_over_random_scores() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(0..12);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let t = rng.gen_range(0.4..0.9);
            let alpha = rng.gen_range(0.0..t - 1e-6);
            let set = partition_by_scores(scored(&scores), t, alpha, 0).unwrap();
            for m in &set.main_set {
                assert!(set.pim_set.contains(m));
            }
            // pim contains main and sd entirely
            for s in &set.sd_interval {
                assert!(set.pim_set.contains(s));
                assert!(!set.main_set.contains(s));
            }
        }
    }

    #[test]
    fn identity_transfer_is_noop() {
        let set = partition_by_scores(scored(&[0.8, 0.6]), 0.7, 0.5, 3).unwrap();
        let out = transfer_to_student_view(&set, &AugmentationRecipe::identity(0), (64, 64));
        assert_eq!(out.all, set.all);
        assert_eq!(out.main_set, set.main_set);
        assert_eq!(out.sd_interval, set.sd_interval);
    }

    #[test]
    fn flip_preserves_scores_and_membership() {
        let set = partition_by_scores(scored(&[0.8, 0.6]), 0.7, 0.5, 3).unwrap();
        let realized = RealizedAugmentation {
            geom: vec![GeomStep::HFlip],
            photo: vec![],
            in_dims: (64, 64),
            min_visible_fraction: 0.25,
        };
        let out = transfer_through(&set, &realized);
        assert_eq!(out.main_set, set.main_set);
        assert_eq!(out.pim_set, set.pim_set);
        for (a, b) in set.all.iter().zip(&out.all) {
            assert_eq!(a.score, b.score);
            assert_eq!(a.x + b.x + a.w, 64.0);
        }
    }

    #[test]
    fn crop_removing_a_box_drops_it_from_all_sets() {
        let set = partition_by_scores(scored(&[0.8, 0.6]), 0.7, 0.5, 3).unwrap();
        // crop keeps only the first box's region (x in [0,9))
        let realized = RealizedAugmentation {
            geom: vec![GeomStep::Crop {
                x0: 0,
                y0: 0,
                w: 9,
                h: 64,
            }],
            photo: vec![],
            in_dims: (64, 64),
            min_visible_fraction: 0.25,
        };
        let out = transfer_through(&set, &realized);
        assert_eq!(out.all.len(), 1);
        assert_eq!(out.main_set, vec![0]);
        assert!(out.pim_set.contains(&0));
        assert!(out.sd_interval.is_empty());
    }
}
