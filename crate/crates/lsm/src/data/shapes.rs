//! Deterministic synthetic shapes dataset: colored circles, squares, and
//! triangles on a textured background, with exact analytic bounding boxes.
//!
//! Shape areas are drawn to populate all three size bins, which is what the
//! mining branch's large-object bias needs to show up at desk scale.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LsmError, Result};
use crate::geometry::{BBox, AREA_MEDIUM_MAX};
use crate::nn::{derive_seed, rng_from};

use super::{CocoCategory, DetectionSample, Split};

/// Border margin shapes keep from the image edge, in pixels.
const MARGIN: usize = 2;

/// Smallest image that can host a large-bin (area >= 96*96) shape.
pub const SHAPES_MIN_IMAGE_SIZE: usize = 100;

pub const CATEGORY_CIRCLE: u32 = 0;
pub const CATEGORY_SQUARE: u32 = 1;
pub const CATEGORY_TRIANGLE: u32 = 2;

pub fn shapes_categories() -> Vec<CocoCategory> {
    vec![
        CocoCategory {
            id: CATEGORY_CIRCLE,
            name: "circle".into(),
        },
        CocoCategory {
            id: CATEGORY_SQUARE,
            name: "square".into(),
        },
        CocoCategory {
            id: CATEGORY_TRIANGLE,
            name: "triangle".into(),
        },
    ]
}

struct ShapeSpec {
    category: u32,
    rect: BBox,
    color: [f32; 3],
}

/// Generate `n_images` square images of side `image_size`, each holding 1-6
/// shapes. Deterministic per (seed, image index): the i-th image does not
/// depend on `n_images`.
pub fn generate_shapes_dataset(
    n_images: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<DetectionSample>> {
    if n_images == 0 {
        return Err(LsmError::Data("n_images must be at least 1".into()));
    }
    if image_size < 64 {
        return Err(LsmError::Data(format!(
            "image_size must be at least 64, got {image_size}"
        )));
    }
    let usable = image_size - 2 * MARGIN;
    if (usable * usable) as f64 <= AREA_MEDIUM_MAX {
        return Err(LsmError::Data(format!(
            "image_size {image_size} cannot host a large-bin shape \
             (usable {usable}x{usable} <= 96x96); need at least {SHAPES_MIN_IMAGE_SIZE}"
        )));
    }

    (0..n_images)
        .map(|idx| generate_one(idx as u64, image_size, derive_seed(seed, "shapes-img", idx as u64)))
        .collect()
}

fn generate_one(id: u64, size: usize, seed: u64) -> Result<DetectionSample> {
    let mut rng = rng_from(seed);
    let mut image = textured_background(size, &mut rng);

    let n_shapes = rng.gen_range(1..=6usize);
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        if let Some(spec) = sample_shape(size, &shapes, &mut rng) {
            shapes.push(spec);
        }
    }
    // a sample must hold at least one annotation
    if shapes.is_empty() {
        if let Some(spec) = sample_shape(size, &[], &mut rng) {
            shapes.push(spec);
        }
    }

    for s in &shapes {
        rasterize(&mut image, s);
    }

    let annotations = shapes.iter().map(|s| s.rect.clone()).collect();
    Ok(DetectionSample {
        image,
        annotations,
        id,
        split: Split::Labeled,
    })
}

fn textured_background(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let base = rng.gen_range(0.25..0.45f64);
    let mut img = Array3::<f32>::zeros((3, size, size));
    for i in 0..size {
        for j in 0..size {
            let n = rng.gen_range(-0.06..0.06f64);
            let v = quantize(base + n);
            for c in 0..3 {
                img[[c, i, j]] = v;
            }
        }
    }
    img
}

fn quantize(v: f64) -> f32 {
    // match the 8-bit on-disk representation so generated and reloaded
    // datasets are identical
    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    byte as f32 / 255.0
}

fn sample_shape(size: usize, existing: &[ShapeSpec], rng: &mut ChaCha8Rng) -> Option<ShapeSpec> {
    let usable = (size - 2 * MARGIN) as f64;
    let category = rng.gen_range(0..3u32);

    // area target by bin; weights keep all three bins populated over a
    // dataset without flooding single images with huge shapes
    let bin_draw: f64 = rng.gen();
    let max_large = (usable * usable * 0.88).min(15500.0);
    let (area_lo, area_hi) = if bin_draw < 0.38 {
        (170.0, 950.0)
    } else if bin_draw < 0.76 {
        (1150.0, 8700.0)
    } else {
        (AREA_MEDIUM_MAX + 120.0, max_large)
    };
    let area = rng.gen_range(area_lo..area_hi);

    let (w, h) = if category == CATEGORY_CIRCLE {
        let side = area.sqrt();
        (side, side)
    } else {
        let aspect = rng.gen_range(0.75..1.33f64);
        let w = (area * aspect).sqrt();
        (w, area / w)
    };
    let w = w.min(usable - 1.0);
    let h = h.min(usable - 1.0);

    // placement with a bounded overlap-rejection loop; the last try is
    // accepted regardless to keep generation total
    for attempt in 0..8 {
        let x = rng.gen_range(MARGIN as f64..(size as f64 - MARGIN as f64 - w));
        let y = rng.gen_range(MARGIN as f64..(size as f64 - MARGIN as f64 - h));
        let rect = BBox::new(x, y, w, h, category).ok()?;
        let overlaps = existing
            .iter()
            .any(|s| crate::geometry::iou(&s.rect, &rect) > 0.35);
        if !overlaps || attempt == 7 {
            let color = shape_color(category, rng);
            return Some(ShapeSpec {
                category,
                rect,
                color,
            });
        }
    }
    None
}

fn shape_color(category: u32, rng: &mut ChaCha8Rng) -> [f32; 3] {
    let base: [f64; 3] = match category {
        CATEGORY_CIRCLE => [0.82, 0.20, 0.22],
        CATEGORY_SQUARE => [0.18, 0.74, 0.28],
        _ => [0.22, 0.34, 0.86],
    };
    let mut out = [0.0f32; 3];
    for (o, b) in out.iter_mut().zip(base) {
        *o = quantize(b + rng.gen_range(-0.08..0.08));
    }
    out
}

fn rasterize(image: &mut Array3<f32>, shape: &ShapeSpec) {
    let (_, size_h, size_w) = image.dim();
    let r = &shape.rect;
    let row_lo = r.y.floor().max(0.0) as usize;
    let row_hi = (r.y2().ceil() as usize).min(size_h);
    let col_lo = r.x.floor().max(0.0) as usize;
    let col_hi = (r.x2().ceil() as usize).min(size_w);

    for row in row_lo..row_hi {
        let py = row as f64 + 0.5;
        for col in col_lo..col_hi {
            let px = col as f64 + 0.5;
            if inside(shape, px, py) {
                for c in 0..3 {
                    image[[c, row, col]] = shape.color[c];
                }
            }
        }
    }
}

fn inside(shape: &ShapeSpec, px: f64, py: f64) -> bool {
    let r = &shape.rect;
    if px < r.x || px > r.x2() || py < r.y || py > r.y2() {
        return false;
    }
    match shape.category {
        CATEGORY_SQUARE => true,
        CATEGORY_CIRCLE => {
            let cx = r.x + r.w / 2.0;
            let cy = r.y + r.h / 2.0;
            let rad = r.w / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= rad * rad
        }
        _ => {
            // upright triangle: apex at top centre, base along the bottom edge
            let t = (py - r.y) / r.h;
            let half = (r.w / 2.0) * t;
            let cx = r.x + r.w / 2.0;
            (px - cx).abs() <= half
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{area_bin_of, AreaBin};
    use std::collections::BTreeSet;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_shapes_dataset(1, 128, 7).unwrap();
        let b = generate_shapes_dataset(1, 128, 7).unwrap();
        assert_eq!(a[0].image, b[0].image);
        assert_eq!(a[0].annotations, b[0].annotations);
    }

    #[test]
    fn prefix_is_stable_under_larger_n() {
        let small = generate_shapes_dataset(3, 128, 9).unwrap();
        let big = generate_shapes_dataset(10, 128, 9).unwrap();
        for (a, b) in small.iter().zip(&big) {
            assert_eq!(a.annotations, b.annotations);
        }
    }

    #[test]
    fn boxes_stay_inside_bounds() {
        for s in generate_shapes_dataset(40, 128, 3).unwrap() {
            for b in &s.annotations {
                assert!(b.x >= 0.0 && b.y >= 0.0);
                assert!(b.x2() <= 128.0 && b.y2() <= 128.0);
            }
            assert!(!s.annotations.is_empty());
            assert!(s.annotations.len() <= 6);
        }
    }

    #[test]
    fn every_category_and_bin_occurs() {
        let data = generate_shapes_dataset(1000, 128, 0).unwrap();
        let mut cats = BTreeSet::new();
        let mut bins = BTreeSet::new();
        for s in &data {
            for b in &s.annotations {
                cats.insert(b.category);
                bins.insert(area_bin_of(b));
            }
        }
        assert_eq!(cats.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(
            bins.into_iter().collect::<Vec<_>>(),
            vec![AreaBin::Small, AreaBin::Medium, AreaBin::Large]
        );
    }

    #[test]
    fn undersized_image_rejected() {
        let err = generate_shapes_dataset(1, 96, 0).unwrap_err();
        assert!(err.to_string().contains("large-bin"));
        assert!(generate_shapes_dataset(1, 50, 0).is_err());
    }
}
