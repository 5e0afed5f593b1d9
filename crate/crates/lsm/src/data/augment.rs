//! Weak / strong augmentation recipes and the 0.5x image downsampling used
//! by the mining branch.
//!
//! A recipe is a seed plus parameter ranges; `realize` samples the concrete
//! steps so the same geometry can later be replayed on pseudo-label boxes.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LsmError, Result};
use crate::geometry::BBox;
use crate::nn::derive_seed;

use super::DetectionSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugKind {
    Weak,
    Strong,
}

/// Named augmentation settings. Weak recipes use the resize/flip fields,
/// strong recipes the jitter/noise/crop fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugParams {
    /// Uniform scale range for the weak resize step.
    pub resize_range: (f64, f64),
    pub flip_prob: f64,
    /// Intensity scale half-width: factors drawn from [1-j, 1+j].
    pub jitter: f64,
    pub noise_sigma: f64,
    /// Kept fraction of each side under the strong crop.
    pub crop_keep_range: (f64, f64),
    /// Boxes keeping less than this fraction of their area under a crop are
    /// dropped.
    pub min_visible_fraction: f64,
    /// Output views never shrink below this side length. The trainer raises
    /// it to twice the backbone minimum when the mining branch is active, so
    /// the 0.5x downsample stays valid.
    pub min_side: usize,
}

impl Default for AugParams {
    fn default() -> Self {
        AugParams {
            resize_range: (0.8, 1.2),
            flip_prob: 0.5,
            jitter: 0.10,
            noise_sigma: 0.03,
            crop_keep_range: (0.6, 1.0),
            min_visible_fraction: 0.25,
            min_side: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentationRecipe {
    pub kind: AugKind,
    pub seed: u64,
    pub params: AugParams,
}

impl AugmentationRecipe {
    pub fn weak(seed: u64, params: AugParams) -> Self {
        AugmentationRecipe {
            kind: AugKind::Weak,
            seed,
            params,
        }
    }

    pub fn strong(seed: u64, params: AugParams) -> Self {
        AugmentationRecipe {
            kind: AugKind::Strong,
            seed,
            params,
        }
    }

    /// A weak recipe that realizes to a no-op (unit resize, no flip).
    pub fn identity(seed: u64) -> Self {
        AugmentationRecipe {
            kind: AugKind::Weak,
            seed,
            params: AugParams {
                resize_range: (1.0, 1.0),
                flip_prob: 0.0,
                ..AugParams::default()
            },
        }
    }

    /// Sample the concrete steps for an image of the given dimensions.
    pub fn realize(&self, height: usize, width: usize) -> RealizedAugmentation {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let p = &self.params;
        let mut geom = Vec::new();
        let mut photo = Vec::new();
        match self.kind {
            AugKind::Weak => {
                let s = rng.gen_range(p.resize_range.0..=p.resize_range.1);
                let h2 = ((s * height as f64).round() as usize).max(p.min_side);
                let w2 = ((s * width as f64).round() as usize).max(p.min_side);
                geom.push(GeomStep::Resize {
                    out_h: h2,
                    out_w: w2,
                });
                if rng.gen_bool(p.flip_prob) {
                    geom.push(GeomStep::HFlip);
                }
            }
            AugKind::Strong => {
                let factor = rng.gen_range(1.0 - p.jitter..=1.0 + p.jitter);
                photo.push(PhotoStep::Jitter { factor });
                photo.push(PhotoStep::GaussianNoise {
                    sigma: p.noise_sigma,
                    seed: derive_seed(self.seed, "noise", 0),
                });
                let fy = rng.gen_range(p.crop_keep_range.0..=p.crop_keep_range.1);
                let fx = rng.gen_range(p.crop_keep_range.0..=p.crop_keep_range.1);
                let ch = ((fy * height as f64).round() as usize)
                    .clamp(p.min_side.min(height), height);
                let cw = ((fx * width as f64).round() as usize)
                    .clamp(p.min_side.min(width), width);
                let y0 = rng.gen_range(0..=height - ch);
                let x0 = rng.gen_range(0..=width - cw);
                geom.push(GeomStep::Crop { x0, y0, w: cw, h: ch });
            }
        }
        RealizedAugmentation {
            geom,
            photo,
            in_dims: (height, width),
            min_visible_fraction: p.min_visible_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GeomStep {
    Resize { out_h: usize, out_w: usize },
    HFlip,
    Crop { x0: usize, y0: usize, w: usize, h: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PhotoStep {
    Jitter { factor: f64 },
    GaussianNoise { sigma: f64, seed: u64 },
}

/// Concrete augmentation: geometric steps transform image and boxes in
/// lockstep, photometric steps leave boxes untouched.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RealizedAugmentation {
    pub geom: Vec<GeomStep>,
    pub photo: Vec<PhotoStep>,
    pub in_dims: (usize, usize),
    pub min_visible_fraction: f64,
}

impl RealizedAugmentation {
    pub fn out_dims(&self) -> (usize, usize) {
        let (mut h, mut w) = self.in_dims;
        for step in &self.geom {
            match *step {
                GeomStep::Resize { out_h, out_w } => {
                    h = out_h;
                    w = out_w;
                }
                GeomStep::HFlip => {}
                GeomStep::Crop { w: cw, h: ch, .. } => {
                    w = cw;
                    h = ch;
                }
            }
        }
        (h, w)
    }

    pub fn apply_image(&self, image: &Array3<f32>) -> Result<Array3<f32>> {
        let (_, h, w) = image.dim();
        assert_eq!((h, w), self.in_dims, "recipe realized for other dims");
        let mut img = image.clone();
        for step in &self.photo {
            match *step {
                PhotoStep::Jitter { factor } => {
                    img.mapv_inplace(|v| (v * factor as f32).clamp(0.0, 1.0));
                }
                PhotoStep::GaussianNoise { sigma, seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let dist = Normal::new(0.0, sigma).unwrap();
                    img.mapv_inplace(|v| (v + dist.sample(&mut rng) as f32).clamp(0.0, 1.0));
                }
            }
        }
        for step in &self.geom {
            img = apply_geom_to_image(&img, step)?;
        }
        Ok(img)
    }

    /// Map a box through the geometric steps. `None` means the box was
    /// dropped (cropped away or below the visibility threshold).
    pub fn transform_box(&self, b: &BBox) -> Option<BBox> {
        let (mut h, mut w) = self.in_dims;
        let mut cur = b.clone();
        for step in &self.geom {
            match *step {
                GeomStep::Resize { out_h, out_w } => {
                    let sx = out_w as f64 / w as f64;
                    let sy = out_h as f64 / h as f64;
                    cur.x *= sx;
                    cur.y *= sy;
                    cur.w *= sx;
                    cur.h *= sy;
                    h = out_h;
                    w = out_w;
                }
                GeomStep::HFlip => {
                    cur.x = w as f64 - cur.x - cur.w;
                }
                GeomStep::Crop { x0, y0, w: cw, h: ch } => {
                    let area_before = cur.w * cur.h;
                    let x1 = (cur.x - x0 as f64).max(0.0);
                    let y1 = (cur.y - y0 as f64).max(0.0);
                    let x2 = (cur.x + cur.w - x0 as f64).min(cw as f64);
                    let y2 = (cur.y + cur.h - y0 as f64).min(ch as f64);
                    let vw = x2 - x1;
                    let vh = y2 - y1;
                    if vw <= 0.0 || vh <= 0.0 {
                        return None;
                    }
                    if vw * vh < self.min_visible_fraction * area_before {
                        return None;
                    }
                    cur.x = x1;
                    cur.y = y1;
                    cur.w = vw;
                    cur.h = vh;
                    h = ch;
                    w = cw;
                }
            }
        }
        Some(cur)
    }
}

fn apply_geom_to_image(image: &Array3<f32>, step: &GeomStep) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    match *step {
        GeomStep::Resize { out_h, out_w } => Ok(bilinear_resize_f32(image, out_h, out_w)),
        GeomStep::HFlip => {
            let mut out = Array3::zeros((c, h, w));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[[ci, i, j]] = image[[ci, i, w - 1 - j]];
                    }
                }
            }
            Ok(out)
        }
        GeomStep::Crop { x0, y0, w: cw, h: ch } => {
            if cw == 0 || ch == 0 || x0 + cw > w || y0 + ch > h {
                return Err(LsmError::Data(format!(
                    "crop ({x0},{y0},{cw},{ch}) invalid for {w}x{h} image"
                )));
            }
            Ok(image
                .slice(ndarray::s![.., y0..y0 + ch, x0..x0 + cw])
                .to_owned())
        }
    }
}

/// Apply a recipe to a sample: image transformed, annotation boxes moved in
/// lockstep through the geometric steps.
pub fn apply_augmentation(
    sample: &DetectionSample,
    recipe: &AugmentationRecipe,
) -> Result<DetectionSample> {
    let realized = recipe.realize(sample.height(), sample.width());
    let image = realized.apply_image(&sample.image)?;
    let annotations = sample
        .annotations
        .iter()
        .filter_map(|b| realized.transform_box(b))
        .collect();
    Ok(DetectionSample {
        image,
        annotations,
        id: sample.id,
        split: sample.split,
    })
}

fn resize_src_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    // half-pixel-centre convention
    let scale = src_len as f64 / dst_len as f64;
    let sc = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = sc.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, sc - i0 as f64)
}

pub fn bilinear_resize_f32(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    for i in 0..out_h {
        let (r0, r1, fr) = resize_src_coord(i, h, out_h);
        for j in 0..out_w {
            let (c0, c1, fc) = resize_src_coord(j, w, out_w);
            for ci in 0..c {
                let v = src[[ci, r0, c0]] as f64 * (1.0 - fr) * (1.0 - fc)
                    + src[[ci, r0, c1]] as f64 * (1.0 - fr) * fc
                    + src[[ci, r1, c0]] as f64 * fr * (1.0 - fc)
                    + src[[ci, r1, c1]] as f64 * fr * fc;
                out[[ci, i, j]] = v as f32;
            }
        }
    }
    out
}

pub fn bilinear_resize_f64(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    for i in 0..out_h {
        let (r0, r1, fr) = resize_src_coord(i, h, out_h);
        for j in 0..out_w {
            let (c0, c1, fc) = resize_src_coord(j, w, out_w);
            for ci in 0..c {
                out[[ci, i, j]] = src[[ci, r0, c0]] * (1.0 - fr) * (1.0 - fc)
                    + src[[ci, r0, c1]] * (1.0 - fr) * fc
                    + src[[ci, r1, c0]] * fr * (1.0 - fc)
                    + src[[ci, r1, c1]] * fr * fc;
            }
        }
    }
    out
}

/// Bilinear resize so both height and width become `ceil(ratio * dim)`.
/// Rejects results below `min_dim` (the backbone's smallest valid input).
pub fn downsample_image(image: &Array3<f64>, ratio: f64, min_dim: usize) -> Result<Array3<f64>> {
    let (_, h, w) = image.dim();
    let h2 = (ratio * h as f64).ceil() as usize;
    let w2 = (ratio * w as f64).ceil() as usize;
    if h2 < min_dim || w2 < min_dim {
        return Err(LsmError::Data(format!(
            "downsample of {h}x{w} at ratio {ratio} gives {h2}x{w2}, below backbone minimum {min_dim}"
        )));
    }
    Ok(bilinear_resize_f64(image, h2, w2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_image(h: usize, w: usize, v: f32) -> Array3<f32> {
        Array3::from_elem((3, h, w), v)
    }

    #[test]
    fn flip_mirrors_box() {
        let realized = RealizedAugmentation {
            geom: vec![GeomStep::HFlip],
            photo: vec![],
            in_dims: (128, 128),
            min_visible_fraction: 0.25,
        };
        let b = BBox::new(10.0, 20.0, 30.0, 40.0, 0).unwrap();
        let t = realized.transform_box(&b).unwrap();
        assert_eq!((t.x, t.y, t.w, t.h), (88.0, 20.0, 30.0, 40.0));
    }

    #[test]
    fn resize_scales_box() {
        let realized = RealizedAugmentation {
            geom: vec![GeomStep::Resize { out_h: 64, out_w: 64 }],
            photo: vec![],
            in_dims: (128, 128),
            min_visible_fraction: 0.25,
        };
        let b = BBox::new(10.0, 20.0, 30.0, 40.0, 0).unwrap();
        let t = realized.transform_box(&b).unwrap();
        assert_eq!((t.x, t.y, t.w, t.h), (5.0, 10.0, 15.0, 20.0));
    }

    #[test]
    fn noise_changes_image_not_boxes() {
        let sample = DetectionSample {
            image: flat_image(64, 64, 0.5),
            annotations: vec![BBox::new(5.0, 5.0, 10.0, 10.0, 1).unwrap()],
            id: 0,
            split: super::super::Split::Labeled,
        };
        let recipe = AugmentationRecipe::strong(
            9,
            AugParams {
                crop_keep_range: (1.0, 1.0),
                jitter: 0.0,
                ..AugParams::default()
            },
        );
        let out = apply_augmentation(&sample, &recipe).unwrap();
        assert_eq!(out.annotations, sample.annotations);
        assert_ne!(out.image, sample.image);
    }

    #[test]
    fn augmentation_is_deterministic() {
        let sample = DetectionSample {
            image: flat_image(96, 96, 0.3),
            annotations: vec![BBox::new(10.0, 10.0, 20.0, 25.0, 2).unwrap()],
            id: 0,
            split: super::super::Split::Labeled,
        };
        let recipe = AugmentationRecipe::strong(123, AugParams::default());
        let a = apply_augmentation(&sample, &recipe).unwrap();
        let b = apply_augmentation(&sample, &recipe).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.annotations, b.annotations);
    }

    #[test]
    fn crop_translates_and_drops_boxes() {
        let realized = RealizedAugmentation {
            geom: vec![GeomStep::Crop {
                x0: 20,
                y0: 10,
                w: 60,
                h: 60,
            }],
            photo: vec![],
            in_dims: (128, 128),
            min_visible_fraction: 0.25,
        };
        // fully inside after translation
        let b = BBox::new(30.0, 20.0, 10.0, 10.0, 0).unwrap();
        let t = realized.transform_box(&b).unwrap();
        assert_eq!((t.x, t.y, t.w, t.h), (10.0, 10.0, 10.0, 10.0));
        // completely outside
        let outside = BBox::new(100.0, 100.0, 20.0, 20.0, 0).unwrap();
        assert!(realized.transform_box(&outside).is_none());
        // mostly cropped away: 10% visible < 25%
        let sliver = BBox::new(0.0, 20.0, 22.0, 10.0, 0).unwrap();
        assert!(realized.transform_box(&sliver).is_none());
    }

    #[test]
    fn downsample_halves_dimensions() {
        let img = Array3::<f64>::from_elem((3, 128, 128), 0.7);
        let out = downsample_image(&img, 0.5, 64).unwrap();
        assert_eq!(out.dim(), (3, 64, 64));
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn downsample_rejects_undersized_result() {
        let img = Array3::<f64>::zeros((3, 100, 100));
        let err = downsample_image(&img, 0.5, 64).unwrap_err();
        assert!(err.to_string().contains("50x50"));
    }

    #[test]
    fn weak_realize_contains_only_resize_and_flip() {
        for seed in 0..20 {
            let r = AugmentationRecipe::weak(seed, AugParams::default()).realize(128, 128);
            assert!(r.photo.is_empty());
            assert!(r.geom.iter().all(|s| matches!(
                s,
                GeomStep::Resize { .. } | GeomStep::HFlip
            )));
        }
    }

    #[test]
    fn strong_realize_contains_jitter_noise_crop() {
        for seed in 0..20 {
            let r = AugmentationRecipe::strong(seed, AugParams::default()).realize(128, 128);
            assert_eq!(r.photo.len(), 2);
            assert_eq!(r.geom.len(), 1);
            assert!(matches!(r.geom[0], GeomStep::Crop { .. }));
        }
    }

    #[test]
    fn identity_recipe_is_noop() {
        let sample = DetectionSample {
            image: flat_image(64, 64, 0.4),
            annotations: vec![BBox::new(3.0, 4.0, 5.0, 6.0, 0).unwrap()],
            id: 0,
            split: super::super::Split::Labeled,
        };
        let out = apply_augmentation(&sample, &AugmentationRecipe::identity(5)).unwrap();
        assert_eq!(out.annotations, sample.annotations);
        assert_eq!(out.image, sample.image);
    }
}
