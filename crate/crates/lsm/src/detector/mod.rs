//! A miniature differentiable two-stage detector with the structural hooks
//! the mining branch needs: an FPN feature extractor, a proposal generator,
//! a shared regression head, and dual (main / auxiliary) classifiers, plus
//! the shift-aligned downsampled pyramid path.

pub mod checkpoint;
mod heads;
mod pyramid;
mod roi;
mod rpn;

pub use heads::{decode_delta, encode_delta, nms_keep, Classifier, DetectionHeadOutput};
pub use roi::assign_main_level;
pub use rpn::{RpnLevelMaps, RpnMaps};

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{LsmError, Result};
use crate::geometry::BBox;
use crate::nn::{rng_from, Binder, Conv2dParams, Graph, LinearParams, Var};

/// Pyramid level identifiers. `P2..P5` are the main branch at strides
/// 4..32; `P2d..P4d` come from the 0.5x-downsampled input and align with
/// `P3..P5` spatially.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelName {
    P2,
    P3,
    P4,
    P5,
    P2d,
    P3d,
    P4d,
}

impl LevelName {
    /// Numeric level: 2..=5 for main, 2..=4 for downsampled.
    pub fn index(&self) -> i32 {
        match self {
            LevelName::P2 | LevelName::P2d => 2,
            LevelName::P3 | LevelName::P3d => 3,
            LevelName::P4 | LevelName::P4d => 4,
            LevelName::P5 => 5,
        }
    }

    pub fn is_downsampled(&self) -> bool {
        matches!(self, LevelName::P2d | LevelName::P3d | LevelName::P4d)
    }

    pub fn main(index: i32) -> LevelName {
        match index {
            2 => LevelName::P2,
            3 => LevelName::P3,
            4 => LevelName::P4,
            5 => LevelName::P5,
            _ => panic!("no main level {index}"),
        }
    }

    pub fn downsampled(index: i32) -> LevelName {
        match index {
            2 => LevelName::P2d,
            3 => LevelName::P3d,
            4 => LevelName::P4d,
            _ => panic!("no downsampled level {index}"),
        }
    }
}

impl std::fmt::Display for LevelName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LevelName::P2 => "P2",
            LevelName::P3 => "P3",
            LevelName::P4 => "P4",
            LevelName::P5 => "P5",
            LevelName::P2d => "P2d",
            LevelName::P3d => "P3d",
            LevelName::P4d => "P4d",
        };
        f.write_str(s)
    }
}

/// One level of a pyramid, in-graph. `stride` is measured against the
/// original image frame even for downsampled levels, so box-to-cell mapping
/// is uniform.
#[derive(Debug, Clone, Copy)]
pub struct PyramidLevel {
    pub name: LevelName,
    pub features: Var,
    pub stride: usize,
}

/// Ordered multi-resolution feature maps with stride metadata.
#[derive(Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
    /// Original-frame image dimensions (h, w) boxes are expressed in.
    pub image_hw: (usize, usize),
}

impl FeaturePyramid {
    pub fn level(&self, name: LevelName) -> Option<&PyramidLevel> {
        self.levels.iter().find(|l| l.name == name)
    }
}

/// Region proposal: a rectangle (the `score` field stays empty; `category`
/// is unused and zero) with its objectness and source level.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub rect: BBox,
    pub objectness: f64,
    pub source_level: LevelName,
}

/// Named map from parameter path to tensor.
pub type ParameterSet = BTreeMap<String, ArrayD<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub n_categories: usize,
    /// Channels after the stem (stride 2) and stages C2..C5.
    pub backbone_channels: [usize; 5],
    pub fpn_channels: usize,
    /// Anchor side length as a multiple of the level stride.
    pub anchor_scale: f64,
    /// Offset in the proposal level-assignment rule
    /// `k = floor(k0 + log2(sqrt(area) / canonical))`.
    pub level_k0: f64,
    pub level_canonical: f64,
    /// Downsampled levels the mining branch consumes (subset of [2,3,4]).
    pub pim_levels: Vec<i32>,
    pub proposal_nms_iou: f64,
    pub predict_nms_iou: f64,
    pub max_proposals_train: usize,
    pub max_proposals_predict: usize,
    pub roi_size: usize,
    /// Smallest accepted input side.
    pub min_input: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            n_categories: 3,
            backbone_channels: [16, 32, 48, 64, 96],
            fpn_channels: 32,
            anchor_scale: 4.0,
            level_k0: 4.0,
            level_canonical: 224.0,
            pim_levels: vec![2, 3, 4],
            proposal_nms_iou: 0.7,
            predict_nms_iou: 0.5,
            max_proposals_train: 64,
            max_proposals_predict: 100,
            roi_size: 7,
            min_input: 64,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_categories == 0 {
            problems.push("detector.n_categories: must be at least 1".to_string());
        }
        if self.fpn_channels == 0 {
            problems.push("detector.fpn_channels: must be at least 1".to_string());
        }
        if self.pim_levels.is_empty() {
            problems.push("detector.pim_levels: must name at least one of 2,3,4".to_string());
        }
        for l in &self.pim_levels {
            if !(2..=4).contains(l) {
                problems.push(format!("detector.pim_levels: level {l} outside 2..=4"));
            }
        }
        if self.roi_size == 0 {
            problems.push("detector.roi_size: must be positive".to_string());
        }
        if self.min_input < 32 {
            problems.push("detector.min_input: below 32 the stride-32 level vanishes".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LsmError::ConfigValidation(problems))
        }
    }

    pub fn roi_flat_len(&self) -> usize {
        self.fpn_channels * self.roi_size * self.roi_size
    }
}

/// All learnable tensors of the detector.
#[derive(Debug, Clone)]
pub struct DetectorParams {
    pub stem: Conv2dParams,
    pub stages: [Conv2dParams; 4],
    pub laterals: [Conv2dParams; 4],
    pub smooths: [Conv2dParams; 4],
    pub rpn_conv: Conv2dParams,
    pub rpn_obj: Conv2dParams,
    pub rpn_delta: Conv2dParams,
    pub f_main: LinearParams,
    pub f_aux: LinearParams,
    pub r_head: LinearParams,
}

/// The detector: configuration plus parameters. Forward passes happen on a
/// [`BoundDetector`] obtained from [`MiniDetector::bind`].
#[derive(Debug, Clone)]
pub struct MiniDetector {
    pub config: DetectorConfig,
    pub params: DetectorParams,
}

impl MiniDetector {
    pub fn init(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let [b0, b1, b2, b3, b4] = config.backbone_channels;
        let f = config.fpn_channels;
        let flat = config.roi_flat_len();
        let n_cls = config.n_categories + 1;
        let params = DetectorParams {
            stem: Conv2dParams::init(3, b0, 3, 2, 1, &mut rng),
            stages: [
                Conv2dParams::init(b0, b1, 3, 2, 1, &mut rng),
                Conv2dParams::init(b1, b2, 3, 2, 1, &mut rng),
                Conv2dParams::init(b2, b3, 3, 2, 1, &mut rng),
                Conv2dParams::init(b3, b4, 3, 2, 1, &mut rng),
            ],
            laterals: [
                Conv2dParams::init(b1, f, 1, 1, 0, &mut rng),
                Conv2dParams::init(b2, f, 1, 1, 0, &mut rng),
                Conv2dParams::init(b3, f, 1, 1, 0, &mut rng),
                Conv2dParams::init(b4, f, 1, 1, 0, &mut rng),
            ],
            smooths: [
                Conv2dParams::init(f, f, 3, 1, 1, &mut rng),
                Conv2dParams::init(f, f, 3, 1, 1, &mut rng),
                Conv2dParams::init(f, f, 3, 1, 1, &mut rng),
                Conv2dParams::init(f, f, 3, 1, 1, &mut rng),
            ],
            rpn_conv: Conv2dParams::init(f, f, 3, 1, 1, &mut rng),
            rpn_obj: Conv2dParams::init(f, 1, 1, 1, 0, &mut rng),
            rpn_delta: Conv2dParams::init(f, 4, 1, 1, 0, &mut rng),
            f_main: LinearParams::init_jittered(flat, n_cls, &mut rng),
            f_aux: LinearParams::init_jittered(flat, n_cls, &mut rng),
            r_head: LinearParams::init(flat, 4, &mut rng),
        };
        Ok(MiniDetector { config, params })
    }

    pub fn named_params(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out = Vec::with_capacity(40);
        let p = &self.params;
        p.stem.entries("backbone.stem", &mut out);
        for (i, s) in p.stages.iter().enumerate() {
            s.entries(&format!("backbone.stage{}", i + 2), &mut out);
        }
        for (i, l) in p.laterals.iter().enumerate() {
            l.entries(&format!("fpn.lateral{}", i + 2), &mut out);
        }
        for (i, s) in p.smooths.iter().enumerate() {
            s.entries(&format!("fpn.smooth{}", i + 2), &mut out);
        }
        p.rpn_conv.entries("rpn.conv", &mut out);
        p.rpn_obj.entries("rpn.obj", &mut out);
        p.rpn_delta.entries("rpn.delta", &mut out);
        p.f_main.entries("heads.f_main", &mut out);
        p.f_aux.entries("heads.f_aux", &mut out);
        p.r_head.entries("heads.r", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>)> {
        let mut out = Vec::with_capacity(40);
        let p = &mut self.params;
        p.stem.entries_mut("backbone.stem", &mut out);
        for (i, s) in p.stages.iter_mut().enumerate() {
            s.entries_mut(&format!("backbone.stage{}", i + 2), &mut out);
        }
        for (i, l) in p.laterals.iter_mut().enumerate() {
            l.entries_mut(&format!("fpn.lateral{}", i + 2), &mut out);
        }
        for (i, s) in p.smooths.iter_mut().enumerate() {
            s.entries_mut(&format!("fpn.smooth{}", i + 2), &mut out);
        }
        p.rpn_conv.entries_mut("rpn.conv", &mut out);
        p.rpn_obj.entries_mut("rpn.obj", &mut out);
        p.rpn_delta.entries_mut("rpn.delta", &mut out);
        p.f_main.entries_mut("heads.f_main", &mut out);
        p.f_aux.entries_mut("heads.f_aux", &mut out);
        p.r_head.entries_mut("heads.r", &mut out);
        out
    }

    pub fn parameter_set(&self) -> ParameterSet {
        self.named_params()
            .into_iter()
            .map(|(k, v)| (k, v.clone()))
            .collect()
    }

    /// Overwrite all parameters from a set; paths and shapes must match
    /// exactly (a mismatch signals corruption).
    pub fn load_parameter_set(&mut self, set: &ParameterSet) -> Result<()> {
        for (path, value) in self.named_params_mut() {
            let src = set.get(&path).ok_or_else(|| {
                LsmError::Checkpoint(format!("missing parameter {path}"))
            })?;
            if src.shape() != value.shape() {
                return Err(LsmError::Checkpoint(format!(
                    "parameter {path}: shape {:?} does not match expected {:?}",
                    src.shape(),
                    value.shape()
                )));
            }
            value.assign(src);
        }
        Ok(())
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> BoundDetector<'g> {
        let mut binder = Binder::new(g);
        let p = &self.params;
        let bound = BoundDetectorParams {
            stem: p.stem.bind(&mut binder, "backbone.stem"),
            stages: [
                p.stages[0].bind(&mut binder, "backbone.stage2"),
                p.stages[1].bind(&mut binder, "backbone.stage3"),
                p.stages[2].bind(&mut binder, "backbone.stage4"),
                p.stages[3].bind(&mut binder, "backbone.stage5"),
            ],
            laterals: [
                p.laterals[0].bind(&mut binder, "fpn.lateral2"),
                p.laterals[1].bind(&mut binder, "fpn.lateral3"),
                p.laterals[2].bind(&mut binder, "fpn.lateral4"),
                p.laterals[3].bind(&mut binder, "fpn.lateral5"),
            ],
            smooths: [
                p.smooths[0].bind(&mut binder, "fpn.smooth2"),
                p.smooths[1].bind(&mut binder, "fpn.smooth3"),
                p.smooths[2].bind(&mut binder, "fpn.smooth4"),
                p.smooths[3].bind(&mut binder, "fpn.smooth5"),
            ],
            rpn_conv: p.rpn_conv.bind(&mut binder, "rpn.conv"),
            rpn_obj: p.rpn_obj.bind(&mut binder, "rpn.obj"),
            rpn_delta: p.rpn_delta.bind(&mut binder, "rpn.delta"),
            f_main: p.f_main.bind(&mut binder, "heads.f_main"),
            f_aux: p.f_aux.bind(&mut binder, "heads.f_aux"),
            r_head: p.r_head.bind(&mut binder, "heads.r"),
        };
        BoundDetector {
            graph: g,
            config: self.config.clone(),
            params: bound,
            bindings: binder.entries,
        }
    }

    /// Full inference pipeline: extract, propose, pool, classify with the
    /// main head, decode, per-category NMS, score filter. The mining branch
    /// never runs here.
    pub fn predict(&self, image: &Array3<f64>, score_floor: f64) -> Result<Vec<BBox>> {
        let g = Graph::no_grad();
        let bound = self.bind(&g);
        let image_var = g.leaf(image.clone().into_dyn());
        let pyramid = bound.extract_pyramid(image_var, (image.dim().1, image.dim().2))?;
        let maps = bound.rpn_forward(&pyramid);
        let proposals = bound.propose(&maps, &pyramid, self.config.max_proposals_predict);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let feats = bound.roi_features(&pyramid, &proposals, 0)?;
        let out = bound.detect(feats, Classifier::Main);
        Ok(bound.decode_predictions(&pyramid, &proposals, &out, score_floor))
    }
}

pub(crate) struct BoundDetectorParams {
    pub stem: crate::nn::BoundConv,
    pub stages: [crate::nn::BoundConv; 4],
    pub laterals: [crate::nn::BoundConv; 4],
    pub smooths: [crate::nn::BoundConv; 4],
    pub rpn_conv: crate::nn::BoundConv,
    pub rpn_obj: crate::nn::BoundConv,
    pub rpn_delta: crate::nn::BoundConv,
    pub f_main: crate::nn::BoundLinear,
    pub f_aux: crate::nn::BoundLinear,
    pub r_head: crate::nn::BoundLinear,
}

/// A detector bound into a graph: parameters are leaves, forward methods
/// build nodes. Gradients are recovered per parameter path via `bindings`.
pub struct BoundDetector<'g> {
    pub graph: &'g Graph,
    pub config: DetectorConfig,
    pub(crate) params: BoundDetectorParams,
    pub bindings: Vec<(String, Var)>,
}

impl<'g> BoundDetector<'g> {
    pub fn binding(&self, path: &str) -> Option<Var> {
        self.bindings
            .iter()
            .find(|(p, _)| p == path)
            .map(|(_, v)| *v)
    }
}
