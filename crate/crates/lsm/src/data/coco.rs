//! COCO object-detection JSON ingestion and emission, plus PNG image IO.
//!
//! Files follow the standard schema: `images[{id, width, height, file_name}]`,
//! `annotations[{id, image_id, category_id, bbox:[x,y,w,h]}]`,
//! `categories[{id, name}]`. Predictions add a `score` per annotation and may
//! carry the crate's extra `partition` tag.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{LsmError, Result};
use crate::geometry::BBox;

use super::{DetectionSample, Split};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One detection result row, COCO results format plus an optional partition
/// tag ("main" / "sd_interval" / "threshold_boundary") used by the
/// pseudo-label dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoPrediction {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: Vec<f64>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<String>,
}

#[derive(Debug)]
pub struct LoadedCoco {
    pub samples: Vec<DetectionSample>,
    pub categories: Vec<CocoCategory>,
    /// Annotations discarded for nonpositive width or height.
    pub dropped_degenerate: usize,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| LsmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LsmError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn validate_annotations(
    dataset: &CocoDataset,
) -> Result<(BTreeMap<u64, Vec<BBox>>, usize)> {
    let image_ids: std::collections::BTreeSet<u64> =
        dataset.images.iter().map(|im| im.id).collect();
    let mut by_image: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
    for im in &dataset.images {
        by_image.insert(im.id, Vec::new());
    }
    let mut dropped = 0usize;
    for ann in &dataset.annotations {
        if ann.bbox.len() != 4 {
            return Err(LsmError::Schema(format!(
                "annotation {}: bbox must have 4 elements, got {}",
                ann.id,
                ann.bbox.len()
            )));
        }
        if !image_ids.contains(&ann.image_id) {
            return Err(LsmError::Schema(format!(
                "annotation {} references unknown image_id {}",
                ann.id, ann.image_id
            )));
        }
        let [x, y, w, h] = [ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3]];
        if w <= 0.0 || h <= 0.0 {
            dropped += 1;
            continue;
        }
        let mut b = BBox::new(x, y, w, h, ann.category_id)?;
        b.score = ann.score;
        by_image.get_mut(&ann.image_id).unwrap().push(b);
    }
    Ok((by_image, dropped))
}

/// Load a COCO detection dataset: one `DetectionSample` per image entry,
/// bbox fields mapped without unit change, degenerate boxes dropped.
pub fn load_coco_json(images_dir: &Path, annotations: &Path) -> Result<LoadedCoco> {
    let dataset: CocoDataset = read_json(annotations)?;
    let (mut by_image, dropped_degenerate) = validate_annotations(&dataset)?;

    let mut samples = Vec::with_capacity(dataset.images.len());
    for im in &dataset.images {
        let path = images_dir.join(&im.file_name);
        let image = load_image(&path)?;
        let (_, h, w) = image.dim();
        if (h as u32, w as u32) != (im.height, im.width) {
            return Err(LsmError::Schema(format!(
                "image {} ({}): file is {}x{} but entry declares {}x{}",
                im.id, im.file_name, w, h, im.width, im.height
            )));
        }
        samples.push(DetectionSample {
            image,
            annotations: by_image.remove(&im.id).unwrap_or_default(),
            id: im.id,
            split: Split::Labeled,
        });
    }

    Ok(LoadedCoco {
        samples,
        categories: dataset.categories,
        dropped_degenerate,
    })
}

/// Parse only the boxes of a COCO file (no image decoding). Used by the
/// offline analysis command.
pub fn load_coco_boxes(
    annotations: &Path,
) -> Result<(BTreeMap<u64, Vec<BBox>>, Vec<CocoCategory>)> {
    let dataset: CocoDataset = read_json(annotations)?;
    let (by_image, _) = validate_annotations(&dataset)?;
    Ok((by_image, dataset.categories))
}

/// Load a COCO results file: either a bare prediction array or a full
/// dataset whose annotations carry scores.
pub fn load_predictions(path: &Path) -> Result<BTreeMap<u64, Vec<BBox>>> {
    let text = fs::read_to_string(path).map_err(|e| LsmError::io(path, e))?;
    let preds: Vec<CocoPrediction> = match serde_json::from_str(&text) {
        Ok(p) => p,
        Err(array_err) => {
            let dataset: CocoDataset =
                serde_json::from_str(&text).map_err(|_| LsmError::Parse {
                    path: path.to_path_buf(),
                    message: format!("neither a prediction array ({array_err}) nor a dataset"),
                })?;
            dataset
                .annotations
                .iter()
                .map(|a| CocoPrediction {
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: a.bbox.clone(),
                    score: a.score.unwrap_or(1.0),
                    partition: None,
                })
                .collect()
        }
    };

    let mut by_image: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        if p.bbox.len() != 4 {
            return Err(LsmError::Schema(format!(
                "prediction {i}: bbox must have 4 elements, got {}",
                p.bbox.len()
            )));
        }
        if p.bbox[2] <= 0.0 || p.bbox[3] <= 0.0 {
            continue;
        }
        let b = BBox::with_score(
            p.bbox[0],
            p.bbox[1],
            p.bbox[2],
            p.bbox[3],
            p.category_id,
            p.score.clamp(0.0, 1.0),
        )?;
        by_image.entry(p.image_id).or_default().push(b);
    }
    Ok(by_image)
}

pub fn write_predictions(path: &Path, preds: &[CocoPrediction]) -> Result<()> {
    let text = serde_json::to_string_pretty(preds).expect("serialize predictions");
    fs::write(path, text).map_err(|e| LsmError::io(path, e))
}

/// Write samples to `images_dir` as 8-bit PNGs plus a COCO annotations file.
pub fn save_coco_json(
    samples: &[DetectionSample],
    categories: &[CocoCategory],
    images_dir: &Path,
    annotations_path: &Path,
) -> Result<()> {
    fs::create_dir_all(images_dir).map_err(|e| LsmError::io(images_dir, e))?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut next_ann_id = 1u64;
    for s in samples {
        let file_name = format!("{:06}.png", s.id);
        let path = images_dir.join(&file_name);
        save_image(&s.image, &path)?;
        images.push(CocoImage {
            id: s.id,
            width: s.width() as u32,
            height: s.height() as u32,
            file_name,
        });
        for b in &s.annotations {
            annotations.push(CocoAnnotation {
                id: next_ann_id,
                image_id: s.id,
                category_id: b.category,
                bbox: vec![b.x, b.y, b.w, b.h],
                score: b.score,
            });
            next_ann_id += 1;
        }
    }
    let dataset = CocoDataset {
        images,
        annotations,
        categories: categories.to_vec(),
    };
    let text = serde_json::to_string_pretty(&dataset).expect("serialize dataset");
    fs::write(annotations_path, text).map_err(|e| LsmError::io(annotations_path, e))
}

/// 8-bit RGB file mapped to [0,1] by division by 255.
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| LsmError::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_image(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| LsmError::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, content).unwrap();
        p
    }

    fn solid_png(dir: &Path, name: &str, w: u32, h: u32) {
        let img = image::RgbImage::from_pixel(w, h, image::Rgb([100, 120, 140]));
        img.save(dir.join(name)).unwrap();
    }

    #[test]
    fn minimal_file_maps_fields_directly() {
        let dir = tempfile::tempdir().unwrap();
        solid_png(dir.path(), "a.png", 64, 48);
        let ann = write_tmp(
            dir.path(),
            "ann.json",
            r#"{"images":[{"id":1,"width":64,"height":48,"file_name":"a.png"}],
                "annotations":[{"id":1,"image_id":1,"category_id":2,"bbox":[10,20,30,40]}],
                "categories":[{"id":2,"name":"square"}]}"#,
        );
        let loaded = load_coco_json(dir.path(), &ann).unwrap();
        assert_eq!(loaded.samples.len(), 1);
        let b = &loaded.samples[0].annotations[0];
        assert_eq!((b.x, b.y, b.w, b.h, b.category), (10.0, 20.0, 30.0, 40.0, 2));
        assert_eq!(loaded.dropped_degenerate, 0);
    }

    #[test]
    fn unknown_image_id_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let ann = write_tmp(
            dir.path(),
            "ann.json",
            r#"{"images":[{"id":1,"width":8,"height":8,"file_name":"a.png"}],
                "annotations":[{"id":9,"image_id":77,"category_id":0,"bbox":[1,1,2,2]}],
                "categories":[]}"#,
        );
        let err = load_coco_boxes(&ann).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("77") && msg.contains('9'), "{msg}");
    }

    #[test]
    fn wrong_bbox_arity_names_annotation() {
        let dir = tempfile::tempdir().unwrap();
        let ann = write_tmp(
            dir.path(),
            "ann.json",
            r#"{"images":[{"id":1,"width":8,"height":8,"file_name":"a.png"}],
                "annotations":[{"id":4,"image_id":1,"category_id":0,"bbox":[1,1,2]}],
                "categories":[]}"#,
        );
        let err = load_coco_boxes(&ann).unwrap_err();
        assert!(err.to_string().contains("annotation 4"));
    }

    #[test]
    fn degenerate_boxes_dropped_with_count() {
        let dir = tempfile::tempdir().unwrap();
        solid_png(dir.path(), "a.png", 32, 32);
        let ann = write_tmp(
            dir.path(),
            "ann.json",
            r#"{"images":[{"id":1,"width":32,"height":32,"file_name":"a.png"}],
                "annotations":[
                  {"id":1,"image_id":1,"category_id":0,"bbox":[1,1,4,4]},
                  {"id":2,"image_id":1,"category_id":0,"bbox":[2,2,0,4]},
                  {"id":3,"image_id":1,"category_id":0,"bbox":[3,3,4,4]}],
                "categories":[]}"#,
        );
        let loaded = load_coco_json(dir.path(), &ann).unwrap();
        assert_eq!(loaded.samples[0].annotations.len(), 2);
        assert_eq!(loaded.dropped_degenerate, 1);
    }

    #[test]
    fn malformed_json_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let ann = write_tmp(dir.path(), "bad.json", "{not json");
        let err = load_coco_boxes(&ann).unwrap_err();
        assert!(err.to_string().contains("bad.json"));
    }

    #[test]
    fn roundtrip_preserves_boxes_and_ids() {
        let data = crate::data::generate_shapes_dataset(3, 128, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        let ann = dir.path().join("ann.json");
        save_coco_json(&data, &crate::data::shapes_categories(), &images, &ann).unwrap();

        let loaded = load_coco_json(&images, &ann).unwrap();
        assert_eq!(loaded.samples.len(), data.len());
        for (orig, re) in data.iter().zip(&loaded.samples) {
            assert_eq!(orig.id, re.id);
            assert_eq!(orig.annotations, re.annotations);
            assert_eq!(orig.image, re.image);
        }

        // serialize again: boxes survive a second cycle unchanged
        let images2 = dir.path().join("images2");
        let ann2 = dir.path().join("ann2.json");
        save_coco_json(&loaded.samples, &loaded.categories, &images2, &ann2).unwrap();
        let again = load_coco_json(&images2, &ann2).unwrap();
        for (a, b) in loaded.samples.iter().zip(&again.samples) {
            assert_eq!(a.annotations, b.annotations);
        }
    }
}
