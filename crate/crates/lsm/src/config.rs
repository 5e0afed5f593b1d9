//! Experiment configuration: a flat, typed key-value text format with dotted
//! sections, validated en bloc (every violated field reported) and emitted
//! back verbatim alongside run outputs for provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::detector::DetectorConfig;
use crate::error::{LsmError, Result};
use crate::trainer::{KlDirection, TrainMode, TrainerConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum DatasetSpec {
    Synthetic {
        n_images: usize,
        image_size: usize,
        seed: u64,
        /// Held-out images for teacher evaluation, generated with an
        /// independent seed stream.
        val_images: usize,
    },
    Coco {
        images_dir: PathBuf,
        annotations: PathBuf,
        val_images_dir: Option<PathBuf>,
        val_annotations: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub detector: DetectorConfig,
    pub trainer: TrainerConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                n_images: 1000,
                image_size: 128,
                seed: 7,
                val_images: 60,
            },
            split: SplitSpec {
                labeled_fraction: 0.10,
                seed: 1,
            },
            detector: DetectorConfig::default(),
            trainer: TrainerConfig::default(),
            output_dir: PathBuf::from("lsm_run"),
        }
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut problems = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                let key = k.trim().to_string();
                if key.is_empty() {
                    problems.push(format!("line {}: empty key", lineno + 1));
                } else {
                    map.insert(key, v.trim().to_string());
                }
            }
            None => problems.push(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )),
        }
    }
    if problems.is_empty() {
        Ok(map)
    } else {
        Err(LsmError::ConfigValidation(problems))
    }
}

/// Apply `key=value` override strings on top of a parsed map.
pub fn apply_overrides(
    map: &mut BTreeMap<String, String>,
    overrides: &[String],
) -> Result<()> {
    let mut problems = Vec::new();
    for ov in overrides {
        match ov.split_once('=') {
            Some((k, v)) => {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
            None => problems.push(format!("override '{ov}': expected key=value")),
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(LsmError::ConfigValidation(problems))
    }
}

struct FieldReader<'a> {
    map: &'a BTreeMap<String, String>,
    problems: Vec<String>,
    consumed: std::collections::BTreeSet<String>,
}

impl<'a> FieldReader<'a> {
    fn new(map: &'a BTreeMap<String, String>) -> Self {
        FieldReader {
            map,
            problems: Vec::new(),
            consumed: Default::default(),
        }
    }

    fn raw(&mut self, key: &str) -> Option<&'a str> {
        self.consumed.insert(key.to_string());
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        match self.raw(key) {
            None => default,
            Some(s) => match s.parse() {
                Ok(v) => v,
                Err(_) => {
                    self.problems.push(format!(
                        "{key}: cannot parse '{s}' as {}",
                        std::any::type_name::<T>()
                    ));
                    default
                }
            },
        }
    }

    fn parse_pair(&mut self, key: &str, default: (f64, f64)) -> (f64, f64) {
        match self.raw(key) {
            None => default,
            Some(s) => {
                let parts: Vec<&str> = s.split(',').map(str::trim).collect();
                let parsed: Option<Vec<f64>> =
                    parts.iter().map(|p| p.parse().ok()).collect();
                match parsed {
                    Some(v) if v.len() == 2 => (v[0], v[1]),
                    _ => {
                        self.problems
                            .push(format!("{key}: expected 'lo,hi', got '{s}'"));
                        default
                    }
                }
            }
        }
    }

    fn parse_list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Vec<T> {
        match self.raw(key) {
            None => default,
            Some(s) => {
                let parsed: Option<Vec<T>> = s
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| p.parse().ok())
                    .collect();
                match parsed {
                    Some(v) if !v.is_empty() => v,
                    _ => {
                        self.problems
                            .push(format!("{key}: expected comma-separated list, got '{s}'"));
                        default
                    }
                }
            }
        }
    }
}

/// Build a full, validated config from a key-value map. Every violated
/// field is reported, not just the first.
pub fn config_from_map(map: &BTreeMap<String, String>) -> Result<ExperimentConfig> {
    let defaults = ExperimentConfig::default();
    let mut r = FieldReader::new(map);

    let dataset = match r.raw("dataset.kind").unwrap_or("synthetic") {
        "synthetic" => DatasetSpec::Synthetic {
            n_images: r.parse("dataset.n_images", 1000),
            image_size: r.parse("dataset.image_size", 128),
            seed: r.parse("dataset.seed", 7),
            val_images: r.parse("dataset.val_images", 60),
        },
        "coco" => DatasetSpec::Coco {
            images_dir: PathBuf::from(r.parse("dataset.images_dir", String::new())),
            annotations: PathBuf::from(r.parse("dataset.annotations", String::new())),
            val_images_dir: r
                .raw("dataset.val_images_dir")
                .map(PathBuf::from),
            val_annotations: r
                .raw("dataset.val_annotations")
                .map(PathBuf::from),
        },
        other => {
            r.problems.push(format!(
                "dataset.kind: expected 'synthetic' or 'coco', got '{other}'"
            ));
            defaults.dataset.clone()
        }
    };

    let split = SplitSpec {
        labeled_fraction: r.parse("split.labeled_fraction", 0.10),
        seed: r.parse("split.seed", 1),
    };

    let dd = DetectorConfig::default();
    let backbone: Vec<usize> =
        r.parse_list("detector.backbone_channels", dd.backbone_channels.to_vec());
    let mut detector = DetectorConfig {
        n_categories: r.parse("detector.n_categories", dd.n_categories),
        backbone_channels: dd.backbone_channels,
        fpn_channels: r.parse("detector.fpn_channels", dd.fpn_channels),
        anchor_scale: r.parse("detector.anchor_scale", dd.anchor_scale),
        level_k0: r.parse("detector.level_k0", dd.level_k0),
        level_canonical: r.parse("detector.level_canonical", dd.level_canonical),
        pim_levels: r.parse_list("detector.pim_levels", dd.pim_levels.clone()),
        proposal_nms_iou: r.parse("detector.proposal_nms_iou", dd.proposal_nms_iou),
        predict_nms_iou: r.parse("detector.predict_nms_iou", dd.predict_nms_iou),
        max_proposals_train: r.parse("detector.max_proposals_train", dd.max_proposals_train),
        max_proposals_predict: r.parse("detector.max_proposals_predict", dd.max_proposals_predict),
        roi_size: r.parse("detector.roi_size", dd.roi_size),
        min_input: r.parse("detector.min_input", dd.min_input),
    };
    if backbone.len() == 5 {
        detector.backbone_channels = [backbone[0], backbone[1], backbone[2], backbone[3], backbone[4]];
    } else {
        r.problems.push(format!(
            "detector.backbone_channels: expected 5 entries, got {}",
            backbone.len()
        ));
    }

    let td = TrainerConfig::default();
    let mode = match r.raw("trainer.mode").unwrap_or("lsm") {
        "lsm" => TrainMode::Lsm,
        "baseline" => TrainMode::Baseline,
        "supervised" => TrainMode::Supervised,
        other => {
            r.problems.push(format!(
                "trainer.mode: expected lsm|baseline|supervised, got '{other}'"
            ));
            TrainMode::Lsm
        }
    };
    let kl_direction = match r.raw("trainer.kl_direction").unwrap_or("aux_teaches_main") {
        "aux_teaches_main" => KlDirection::AuxTeachesMain,
        "main_teaches_aux" => KlDirection::MainTeachesAux,
        other => {
            r.problems.push(format!(
                "trainer.kl_direction: expected aux_teaches_main|main_teaches_aux, got '{other}'"
            ));
            KlDirection::AuxTeachesMain
        }
    };
    let aug_defaults = td.aug.clone();
    let aug = crate::data::AugParams {
        resize_range: r.parse_pair("aug.resize_range", aug_defaults.resize_range),
        flip_prob: r.parse("aug.flip_prob", aug_defaults.flip_prob),
        jitter: r.parse("aug.jitter", aug_defaults.jitter),
        noise_sigma: r.parse("aug.noise_sigma", aug_defaults.noise_sigma),
        crop_keep_range: r.parse_pair("aug.crop_keep_range", aug_defaults.crop_keep_range),
        min_visible_fraction: r.parse(
            "aug.min_visible_fraction",
            aug_defaults.min_visible_fraction,
        ),
        min_side: r.parse("aug.min_side", aug_defaults.min_side),
    };
    let trainer = TrainerConfig {
        steps: r.parse("trainer.steps", td.steps),
        burn_in_steps: r.parse("trainer.burn_in_steps", td.burn_in_steps),
        lambda_u: r.parse("trainer.lambda_u", td.lambda_u),
        lambda_e: r.parse("trainer.lambda_e", td.lambda_e),
        lambda_p: r.parse("trainer.lambda_p", td.lambda_p),
        t: r.parse("trainer.t", td.t),
        alpha: r.parse("trainer.alpha", td.alpha),
        lr: r.parse("trainer.lr", td.lr),
        momentum: r.parse("trainer.momentum", td.momentum),
        warmup_steps: r.parse("trainer.warmup_steps", td.warmup_steps),
        clip_grad_norm: r.parse("trainer.clip_grad_norm", td.clip_grad_norm),
        batch_labeled: r.parse("trainer.batch_labeled", td.batch_labeled),
        batch_unlabeled: r.parse("trainer.batch_unlabeled", td.batch_unlabeled),
        seed: r.parse("trainer.seed", td.seed),
        mode,
        unsup_regression: r.parse("trainer.unsup_regression", td.unsup_regression),
        kl_direction,
        aug,
        log_every: r.parse("trainer.log_every", td.log_every),
        eval_every: r.parse("trainer.eval_every", td.eval_every),
        checkpoint_every: r.parse("trainer.checkpoint_every", td.checkpoint_every),
    };

    let output_dir = PathBuf::from(r.parse(
        "output.dir",
        defaults.output_dir.to_string_lossy().into_owned(),
    ));

    // unknown keys are configuration mistakes
    let mut problems = r.problems;
    for key in map.keys() {
        if !r.consumed.contains(key) {
            problems.push(format!("{key}: unknown configuration key"));
        }
    }

    let cfg = ExperimentConfig {
        dataset,
        split,
        detector,
        trainer,
        output_dir,
    };
    problems.extend(cfg.validation_problems());

    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(LsmError::ConfigValidation(problems))
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut map = parse_config_text(text)?;
        apply_overrides(&mut map, overrides)?;
        config_from_map(&map)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| LsmError::io(path, e))?;
        Self::from_text(&text, overrides)
    }

    /// All validation problems across sections; empty means valid.
    pub fn validation_problems(&self) -> Vec<String> {
        let mut problems = self.trainer.validation_problems();
        if let Err(LsmError::ConfigValidation(p)) = self.detector.validate() {
            problems.extend(p);
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                n_images,
                image_size,
                ..
            } => {
                if *n_images == 0 {
                    problems.push("dataset.n_images: must be at least 1".into());
                }
                if *image_size < crate::data::SHAPES_MIN_IMAGE_SIZE {
                    problems.push(format!(
                        "dataset.image_size: must be at least {} to host large-bin shapes, got {image_size}",
                        crate::data::SHAPES_MIN_IMAGE_SIZE
                    ));
                }
            }
            DatasetSpec::Coco {
                images_dir,
                annotations,
                ..
            } => {
                if images_dir.as_os_str().is_empty() {
                    problems.push("dataset.images_dir: required for coco datasets".into());
                }
                if annotations.as_os_str().is_empty() {
                    problems.push("dataset.annotations: required for coco datasets".into());
                }
            }
        }
        if !(self.split.labeled_fraction > 0.0 && self.split.labeled_fraction <= 1.0) {
            problems.push(format!(
                "split.labeled_fraction: must lie in (0,1], got {}",
                self.split.labeled_fraction
            ));
        }
        problems
    }

    /// Serialize back to the flat text format, fully resolved, sorted keys.
    pub fn to_text(&self) -> String {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        match &self.dataset {
            DatasetSpec::Synthetic {
                n_images,
                image_size,
                seed,
                val_images,
            } => {
                map.insert("dataset.kind".into(), "synthetic".into());
                map.insert("dataset.n_images".into(), n_images.to_string());
                map.insert("dataset.image_size".into(), image_size.to_string());
                map.insert("dataset.seed".into(), seed.to_string());
                map.insert("dataset.val_images".into(), val_images.to_string());
            }
            DatasetSpec::Coco {
                images_dir,
                annotations,
                val_images_dir,
                val_annotations,
            } => {
                map.insert("dataset.kind".into(), "coco".into());
                map.insert(
                    "dataset.images_dir".into(),
                    images_dir.to_string_lossy().into_owned(),
                );
                map.insert(
                    "dataset.annotations".into(),
                    annotations.to_string_lossy().into_owned(),
                );
                if let Some(p) = val_images_dir {
                    map.insert(
                        "dataset.val_images_dir".into(),
                        p.to_string_lossy().into_owned(),
                    );
                }
                if let Some(p) = val_annotations {
                    map.insert(
                        "dataset.val_annotations".into(),
                        p.to_string_lossy().into_owned(),
                    );
                }
            }
        }
        map.insert(
            "split.labeled_fraction".into(),
            self.split.labeled_fraction.to_string(),
        );
        map.insert("split.seed".into(), self.split.seed.to_string());

        let d = &self.detector;
        map.insert("detector.n_categories".into(), d.n_categories.to_string());
        map.insert(
            "detector.backbone_channels".into(),
            d.backbone_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("detector.fpn_channels".into(), d.fpn_channels.to_string());
        map.insert("detector.anchor_scale".into(), d.anchor_scale.to_string());
        map.insert("detector.level_k0".into(), d.level_k0.to_string());
        map.insert(
            "detector.level_canonical".into(),
            d.level_canonical.to_string(),
        );
        map.insert(
            "detector.pim_levels".into(),
            d.pim_levels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert(
            "detector.proposal_nms_iou".into(),
            d.proposal_nms_iou.to_string(),
        );
        map.insert(
            "detector.predict_nms_iou".into(),
            d.predict_nms_iou.to_string(),
        );
        map.insert(
            "detector.max_proposals_train".into(),
            d.max_proposals_train.to_string(),
        );
        map.insert(
            "detector.max_proposals_predict".into(),
            d.max_proposals_predict.to_string(),
        );
        map.insert("detector.roi_size".into(), d.roi_size.to_string());
        map.insert("detector.min_input".into(), d.min_input.to_string());

        let t = &self.trainer;
        map.insert("trainer.steps".into(), t.steps.to_string());
        map.insert("trainer.burn_in_steps".into(), t.burn_in_steps.to_string());
        map.insert("trainer.lambda_u".into(), t.lambda_u.to_string());
        map.insert("trainer.lambda_e".into(), t.lambda_e.to_string());
        map.insert("trainer.lambda_p".into(), t.lambda_p.to_string());
        map.insert("trainer.t".into(), t.t.to_string());
        map.insert("trainer.alpha".into(), t.alpha.to_string());
        map.insert("trainer.lr".into(), t.lr.to_string());
        map.insert("trainer.momentum".into(), t.momentum.to_string());
        map.insert("trainer.warmup_steps".into(), t.warmup_steps.to_string());
        map.insert(
            "trainer.clip_grad_norm".into(),
            t.clip_grad_norm.to_string(),
        );
        map.insert("trainer.batch_labeled".into(), t.batch_labeled.to_string());
        map.insert(
            "trainer.batch_unlabeled".into(),
            t.batch_unlabeled.to_string(),
        );
        map.insert("trainer.seed".into(), t.seed.to_string());
        map.insert(
            "trainer.mode".into(),
            match t.mode {
                TrainMode::Lsm => "lsm",
                TrainMode::Baseline => "baseline",
                TrainMode::Supervised => "supervised",
            }
            .into(),
        );
        map.insert(
            "trainer.unsup_regression".into(),
            t.unsup_regression.to_string(),
        );
        map.insert(
            "trainer.kl_direction".into(),
            match t.kl_direction {
                KlDirection::AuxTeachesMain => "aux_teaches_main",
                KlDirection::MainTeachesAux => "main_teaches_aux",
            }
            .into(),
        );
        map.insert("trainer.log_every".into(), t.log_every.to_string());
        map.insert("trainer.eval_every".into(), t.eval_every.to_string());
        map.insert(
            "trainer.checkpoint_every".into(),
            t.checkpoint_every.to_string(),
        );
        let a = &t.aug;
        map.insert(
            "aug.resize_range".into(),
            format!("{},{}", a.resize_range.0, a.resize_range.1),
        );
        map.insert("aug.flip_prob".into(), a.flip_prob.to_string());
        map.insert("aug.jitter".into(), a.jitter.to_string());
        map.insert("aug.noise_sigma".into(), a.noise_sigma.to_string());
        map.insert(
            "aug.crop_keep_range".into(),
            format!("{},{}", a.crop_keep_range.0, a.crop_keep_range.1),
        );
        map.insert(
            "aug.min_visible_fraction".into(),
            a.min_visible_fraction.to_string(),
        );
        map.insert("aug.min_side".into(), a.min_side.to_string());
        map.insert(
            "output.dir".into(),
            self.output_dir.to_string_lossy().into_owned(),
        );

        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Output directory resolution: relative paths live under
    /// `LSM_OUTPUT_ROOT` when that variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os("LSM_OUTPUT_ROOT") {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_text_uses_defaults() {
        let cfg = ExperimentConfig::from_text("trainer.steps = 50\n", &[]).unwrap();
        assert_eq!(cfg.trainer.steps, 50);
        assert_eq!(cfg.trainer.t, 0.7);
        assert_eq!(cfg.trainer.alpha, 0.5);
        assert_eq!(cfg.trainer.lambda_e, 0.9996);
    }

    #[test]
    fn overrides_win() {
        let cfg = ExperimentConfig::from_text(
            "trainer.steps = 50\n",
            &["trainer.steps=99".into(), "trainer.lambda_p=0.25".into()],
        )
        .unwrap();
        assert_eq!(cfg.trainer.steps, 99);
        assert_eq!(cfg.trainer.lambda_p, 0.25);
    }

    #[test]
    fn alpha_above_t_is_named() {
        let err = ExperimentConfig::from_text("", &["trainer.alpha=0.8".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alpha must be < t"), "{msg}");
    }

    #[test]
    fn all_violations_reported_together() {
        let err = ExperimentConfig::from_text(
            "trainer.alpha = 0.9\ntrainer.lr = -1\ndetector.fpn_channels = 0\n",
            &[],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alpha"), "{msg}");
        assert!(msg.contains("trainer.lr"), "{msg}");
        assert!(msg.contains("fpn_channels"), "{msg}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_text("trainer.stepz = 50\n", &[]).unwrap_err();
        assert!(err.to_string().contains("trainer.stepz"));
    }

    #[test]
    fn text_roundtrip_is_stable() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        let re = ExperimentConfig::from_text(&text, &[]).unwrap();
        assert_eq!(text, re.to_text());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = ExperimentConfig::from_text(
            "# a comment\n\ntrainer.steps = 12  # trailing\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.trainer.steps, 12);
    }
}
