//! Datasets: synthetic shapes generation, COCO ingestion, labeled/unlabeled
//! splits, and the weak/strong augmentation pipelines.

mod augment;
mod coco;
mod shapes;

pub use augment::{
    apply_augmentation, bilinear_resize_f64, downsample_image, AugKind, AugParams,
    AugmentationRecipe, GeomStep, PhotoStep, RealizedAugmentation,
};
pub use coco::{
    load_coco_boxes, load_coco_json, load_predictions, save_coco_json, write_predictions,
    CocoAnnotation, CocoCategory, CocoDataset, CocoImage, CocoPrediction, LoadedCoco,
};
pub use shapes::{generate_shapes_dataset, shapes_categories, SHAPES_MIN_IMAGE_SIZE};

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{LsmError, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Labeled,
    Unlabeled,
}

/// One image with its annotations and provenance.
///
/// Intensities are `[0,1]`, channel-first `[3, H, W]`. Labeled samples carry
/// ground truth; unlabeled samples carry none at training time.
#[derive(Debug, Clone)]
pub struct DetectionSample {
    pub image: Array3<f32>,
    pub annotations: Vec<BBox>,
    pub id: u64,
    pub split: Split,
}

impl DetectionSample {
    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }
}

/// Deterministic labeled/unlabeled partition request.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub seed: u64,
}

/// Result of splitting: unlabeled annotations are withheld and quarantined
/// behind [`SplitDatasets::evaluation_truths`] so training code cannot touch
/// them by accident.
#[derive(Debug, Clone)]
pub struct SplitDatasets {
    pub labeled: Vec<DetectionSample>,
    pub unlabeled: Vec<DetectionSample>,
    withheld: BTreeMap<u64, Vec<BBox>>,
}

impl SplitDatasets {
    /// Ground truth of an unlabeled sample, for analysis and evaluation only.
    pub fn evaluation_truths(&self, id: u64) -> Option<&[BBox]> {
        self.withheld.get(&id).map(|v| v.as_slice())
    }

    pub fn withheld_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.withheld.keys().copied()
    }
}

/// Seeded shuffle, first `ceil(fraction * N)` ids labeled, the rest
/// unlabeled with annotations withheld.
pub fn split_labeled_unlabeled(
    samples: Vec<DetectionSample>,
    spec: &SplitSpec,
) -> Result<SplitDatasets> {
    if samples.is_empty() {
        return Err(LsmError::Data("cannot split an empty dataset".into()));
    }
    if !(spec.labeled_fraction > 0.0 && spec.labeled_fraction <= 1.0) {
        return Err(LsmError::Data(format!(
            "labeled_fraction must lie in (0,1], got {}",
            spec.labeled_fraction
        )));
    }

    let mut ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);
    let n_labeled = (spec.labeled_fraction * samples.len() as f64).ceil() as usize;
    let labeled_ids: std::collections::BTreeSet<u64> =
        ids.iter().take(n_labeled).copied().collect();

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut withheld = BTreeMap::new();
    for mut s in samples {
        if labeled_ids.contains(&s.id) {
            s.split = Split::Labeled;
            labeled.push(s);
        } else {
            s.split = Split::Unlabeled;
            withheld.insert(s.id, std::mem::take(&mut s.annotations));
            unlabeled.push(s);
        }
    }

    Ok(SplitDatasets {
        labeled,
        unlabeled,
        withheld,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize) -> Vec<DetectionSample> {
        (0..n)
            .map(|i| DetectionSample {
                image: Array3::zeros((3, 8, 8)),
                annotations: vec![BBox::new(1.0, 1.0, 2.0, 2.0, 0).unwrap()],
                id: i as u64,
                split: Split::Labeled,
            })
            .collect()
    }

    #[test]
    fn split_counts() {
        let out = split_labeled_unlabeled(
            tiny_dataset(100),
            &SplitSpec {
                labeled_fraction: 0.10,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(out.labeled.len(), 10);
        assert_eq!(out.unlabeled.len(), 90);
        assert!(out.unlabeled.iter().all(|s| s.annotations.is_empty()));
        assert!(out
            .unlabeled
            .iter()
            .all(|s| out.evaluation_truths(s.id).is_some()));
    }

    #[test]
    fn split_full_fraction() {
        let out = split_labeled_unlabeled(
            tiny_dataset(7),
            &SplitSpec {
                labeled_fraction: 1.0,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(out.labeled.len(), 7);
        assert!(out.unlabeled.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_labeled_unlabeled(
            tiny_dataset(50),
            &SplitSpec {
                labeled_fraction: 0.3,
                seed: 11,
            },
        )
        .unwrap();
        let b = split_labeled_unlabeled(
            tiny_dataset(50),
            &SplitSpec {
                labeled_fraction: 0.3,
                seed: 11,
            },
        )
        .unwrap();
        let ids = |v: &[DetectionSample]| -> Vec<u64> { v.iter().map(|s| s.id).collect() };
        assert_eq!(ids(&a.labeled), ids(&b.labeled));
        assert_eq!(ids(&a.unlabeled), ids(&b.unlabeled));

        let mut all: Vec<u64> = ids(&a.labeled);
        all.extend(ids(&a.unlabeled));
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<u64>>());
    }

    #[test]
    fn split_rejects_empty_input() {
        assert!(split_labeled_unlabeled(
            vec![],
            &SplitSpec {
                labeled_fraction: 0.5,
                seed: 0
            }
        )
        .is_err());
    }
}
