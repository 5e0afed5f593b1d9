//! The training loop: burn-in on labeled data, mean-teacher EMA, and the
//! four-part loss — supervised, main-branch unsupervised, mining-branch
//! (PIM), and self-distillation — assembled as
//!
//! `total = L_m_s + lambda_u * (L_m_u + lambda_p * L_p_u + L_distill)`.
//!
//! One optimizer step per call, on a single autodiff tape shared by all four
//! parts, so subgraphs (pyramids, proposals) are computed once and gradients
//! accumulate across passes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    downsample_image, AugParams, AugmentationRecipe, DetectionSample, SplitDatasets,
};
use crate::detector::{
    checkpoint, Classifier, DetectorConfig, FeaturePyramid, MiniDetector, ParameterSet, Proposal,
};
use crate::error::{LsmError, Result};
use crate::eval::{evaluate, EvalSnapshot};
use crate::geometry::{iou, BBox};
use crate::nn::{derive_seed, rng_from, Graph, Var};
use crate::pseudo::{generate_pseudo_labels, transfer_through, PseudoLabelSet};

/// Smooth-L1 transition point for ROI box regression.
const ROI_BETA: f64 = 1.0;
/// Proposal-to-target IoU above which a proposal trains as that class.
const FOREGROUND_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Labeled data only; no teacher.
    Supervised,
    /// Mean teacher with the high-threshold main branch only.
    Baseline,
    /// Mean teacher plus the mining branch and self-distillation.
    Lsm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(p_aux || p_main): the main branch fits the mining branch's
    /// predictions (gradients still reach both).
    AuxTeachesMain,
    /// The ablation flag reversing the direction.
    MainTeachesAux,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub steps: u64,
    /// Zero means "use steps / 9", mirroring the usual 20k/180k schedule.
    pub burn_in_steps: u64,
    pub lambda_u: f64,
    pub lambda_e: f64,
    pub lambda_p: f64,
    pub t: f64,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub warmup_steps: u64,
    pub clip_grad_norm: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Eq. 5/6 include box regression on pseudo-labels; disabling mimics the
    /// classification-only variant.
    pub unsup_regression: bool,
    pub kl_direction: KlDirection,
    pub aug: AugParams,
    pub log_every: u64,
    /// Teacher evaluation cadence in steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 3000,
            burn_in_steps: 0,
            lambda_u: 2.0,
            lambda_e: 0.9996,
            lambda_p: 0.5,
            t: 0.7,
            alpha: 0.5,
            lr: 0.02,
            momentum: 0.9,
            warmup_steps: 100,
            clip_grad_norm: 10.0,
            batch_labeled: 1,
            batch_unlabeled: 1,
            seed: 0,
            mode: TrainMode::Lsm,
            unsup_regression: true,
            kl_direction: KlDirection::AuxTeachesMain,
            aug: AugParams::default(),
            log_every: 1,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn effective_burn_in(&self) -> u64 {
        if self.burn_in_steps == 0 {
            self.steps / 9
        } else {
            self.burn_in_steps
        }
    }

    /// Validation problems, in `field: message` form.
    pub fn validation_problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("trainer.steps: must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda_e) {
            problems.push(format!(
                "trainer.lambda_e: must lie in [0,1], got {}",
                self.lambda_e
            ));
        }
        if !(self.lambda_p > 0.0 && self.lambda_p <= 1.0) {
            problems.push(format!(
                "trainer.lambda_p: must lie in (0,1], got {}",
                self.lambda_p
            ));
        }
        if self.lambda_u < 0.0 {
            problems.push(format!(
                "trainer.lambda_u: must be nonnegative, got {}",
                self.lambda_u
            ));
        }
        if !(0.0..=1.0).contains(&self.t) || !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!(
                "trainer.t/alpha: thresholds must lie in [0,1], got t={}, alpha={}",
                self.t, self.alpha
            ));
        } else if self.alpha > self.t {
            problems.push(format!(
                "trainer.alpha: alpha must be < t (got alpha={}, t={})",
                self.alpha, self.t
            ));
        }
        if self.lr <= 0.0 {
            problems.push(format!("trainer.lr: must be positive, got {}", self.lr));
        }
        if self.batch_labeled == 0 {
            problems.push("trainer.batch_labeled: must be at least 1".into());
        }
        if self.batch_unlabeled == 0 && self.mode != TrainMode::Supervised {
            problems.push("trainer.batch_unlabeled: must be at least 1".into());
        }
        problems
    }

    /// The degenerate `alpha == t` configuration collapses the SD interval;
    /// it is allowed but worth flagging in experiment output.
    pub fn is_degenerate_two_view(&self) -> bool {
        self.alpha == self.t && self.mode == TrainMode::Lsm
    }

    /// Strong views must stay large enough for the 0.5x mining downsample.
    fn normalized_aug(&self, detector_min_input: usize) -> AugParams {
        let mut aug = self.aug.clone();
        if self.mode == TrainMode::Lsm {
            aug.min_side = aug.min_side.max(2 * detector_min_input);
        } else {
            aug.min_side = aug.min_side.max(detector_min_input);
        }
        aug
    }
}

/// Student and teacher parameters plus the loop bookkeeping.
pub struct TrainState {
    pub student: MiniDetector,
    pub teacher: MiniDetector,
    pub step: u64,
    pub lambda_u: f64,
    pub lambda_e: f64,
    pub lambda_p: f64,
    pub t: f64,
    pub alpha: f64,
    pub burn_in_steps: u64,
    momentum: BTreeMap<String, ArrayD<f64>>,
}

impl TrainState {
    /// Fresh state: teacher starts as an exact copy of the student.
    pub fn new(student: MiniDetector, cfg: &TrainerConfig) -> Self {
        let teacher = student.clone();
        TrainState {
            student,
            teacher,
            step: 0,
            lambda_u: cfg.lambda_u,
            lambda_e: cfg.lambda_e,
            lambda_p: cfg.lambda_p,
            t: cfg.t,
            alpha: cfg.alpha,
            burn_in_steps: cfg.effective_burn_in(),
            momentum: BTreeMap::new(),
        }
    }

    pub fn in_burn_in(&self) -> bool {
        self.step < self.burn_in_steps
    }

    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("step".into(), self.step as f64);
        m.insert("lambda_u".into(), self.lambda_u);
        m.insert("lambda_e".into(), self.lambda_e);
        m.insert("lambda_p".into(), self.lambda_p);
        m.insert("t".into(), self.t);
        m.insert("alpha".into(), self.alpha);
        m.insert("burn_in_steps".into(), self.burn_in_steps as f64);
        m
    }
}

/// Per-step loss record; `total` is the Eq.-weighted sum of the components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    #[serde(rename = "L_m_s")]
    pub l_m_s: f64,
    #[serde(rename = "L_m_s_cls")]
    pub l_m_s_cls: f64,
    #[serde(rename = "L_m_s_reg")]
    pub l_m_s_reg: f64,
    #[serde(rename = "L_m_u")]
    pub l_m_u: f64,
    #[serde(rename = "L_m_u_cls")]
    pub l_m_u_cls: f64,
    #[serde(rename = "L_m_u_reg")]
    pub l_m_u_reg: f64,
    #[serde(rename = "L_p_u")]
    pub l_p_u: f64,
    #[serde(rename = "L_p_u_cls")]
    pub l_p_u_cls: f64,
    #[serde(rename = "L_p_u_reg")]
    pub l_p_u_reg: f64,
    #[serde(rename = "L_distill")]
    pub l_distill: f64,
    pub total: f64,
    #[serde(rename = "teacher_mAP", skip_serializing_if = "Option::is_none")]
    pub teacher_map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

/// Diagnostics from one step, used by tests and the harness.
#[derive(Debug, Clone, Default)]
pub struct StepTrace {
    pub n_pseudo_main: usize,
    pub n_pseudo_pim: usize,
    pub n_pseudo_sd: usize,
    /// Data pointer of the proposal slice the main unsupervised pass used.
    pub main_proposals_ptr: usize,
    /// Data pointer of the proposal slice the mining pass used.
    pub pim_proposals_ptr: usize,
}

impl StepTrace {
    pub fn pim_reused_main_proposals(&self) -> bool {
        self.main_proposals_ptr != 0 && self.main_proposals_ptr == self.pim_proposals_ptr
    }
}

/// Eq. 2: `theta_t <- lambda_e * theta_t + (1 - lambda_e) * theta_s`,
/// elementwise over every parameter. The student is untouched.
pub fn ema_update(state: &mut TrainState) -> Result<()> {
    let lambda = state.lambda_e;
    let student: Vec<(String, ArrayD<f64>)> = state
        .student
        .named_params()
        .into_iter()
        .map(|(k, v)| (k, v.clone()))
        .collect();
    for ((t_path, t_val), (s_path, s_val)) in
        state.teacher.named_params_mut().into_iter().zip(student)
    {
        if t_path != s_path || t_val.shape() != s_val.shape() {
            return Err(LsmError::Checkpoint(format!(
                "teacher/student parameter mismatch at {t_path} vs {s_path}"
            )));
        }
        t_val.zip_mut_with(&s_val, |t, &s| *t = lambda * *t + (1.0 - lambda) * s);
    }
    Ok(())
}

fn to_f64_image(img: &ndarray::Array3<f32>) -> Array3<f64> {
    img.mapv(|v| v as f64)
}

fn aug_seed(base: u64, tag: &str, sample_id: u64, step: u64) -> u64 {
    derive_seed(derive_seed(base, tag, sample_id), "step", step)
}

/// Proposal list for ROI training: RPN output plus the target boxes
/// appended as extra proposals (standard practice, and it makes the
/// supervised/unsupervised loss paths exactly symmetric).
fn training_proposals(
    bound: &crate::detector::BoundDetector,
    maps: &crate::detector::RpnMaps,
    pyramid: &FeaturePyramid,
    targets: &[BBox],
) -> Vec<Proposal> {
    let mut proposals = bound.propose(maps, pyramid, bound.config.max_proposals_train);
    for t in targets {
        let mut rect = t.clone();
        let score = rect.score.take().unwrap_or(1.0);
        rect.category = 0;
        proposals.push(Proposal {
            rect,
            objectness: score,
            source_level: crate::detector::LevelName::P2,
        });
    }
    proposals
}

/// Classification + regression losses of the ROI head over a proposal set.
/// Proposals with IoU >= 0.5 to a target adopt its class and regression
/// target through the shared head; the rest classify as background.
fn roi_head_losses(
    bound: &crate::detector::BoundDetector,
    pyramid: &FeaturePyramid,
    proposals: &[Proposal],
    targets: &[BBox],
    classifier: Classifier,
    shift: i32,
    include_reg: bool,
) -> Result<(Var, Var)> {
    let g = bound.graph;
    if proposals.is_empty() {
        return Ok((g.scalar(0.0), g.scalar(0.0)));
    }
    let features = bound.roi_features(pyramid, proposals, shift)?;
    let out = bound.detect(features, classifier);

    let background = bound.config.n_categories;
    let mut labels = Vec::with_capacity(proposals.len());
    let mut positives: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in proposals.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in targets.iter().enumerate() {
            let v = iou(&p.rect, t);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((ti, v));
            }
        }
        match best {
            Some((ti, v)) if v >= FOREGROUND_IOU => {
                labels.push(targets[ti].category as usize);
                positives.push((pi, ti));
            }
            _ => labels.push(background),
        }
    }

    let log_probs = g.log_softmax_rows(out.class_logits);
    let nll = g.nll_rows(log_probs, &labels);
    // balance foreground and background rows so the handful of positives
    // is not drowned out
    let fg_rows: Vec<usize> = positives.iter().map(|&(pi, _)| pi).collect();
    let bg_rows: Vec<usize> = (0..proposals.len())
        .filter(|i| !fg_rows.contains(i))
        .collect();
    let cls = if fg_rows.is_empty() || bg_rows.is_empty() {
        g.mean_all(nll)
    } else {
        let fg = g.mean_all(g.select_flat(nll, &fg_rows));
        let bg = g.mean_all(g.select_flat(nll, &bg_rows));
        g.add(g.scale(fg, 0.5), g.scale(bg, 0.5))
    };

    let reg = if include_reg && !positives.is_empty() {
        let rows: Vec<usize> = positives.iter().map(|&(pi, _)| pi).collect();
        let pred = g.select_rows(out.box_deltas, &rows);
        let mut target_deltas = Vec::with_capacity(positives.len() * 4);
        for &(pi, ti) in &positives {
            let p = &proposals[pi].rect;
            let t = &targets[ti];
            let enc = crate::detector::encode_delta(
                (p.x, p.y, p.w, p.h),
                (t.x, t.y, t.w, t.h),
            );
            target_deltas.extend_from_slice(&enc);
        }
        let target =
            ArrayD::from_shape_vec(IxDyn(&[positives.len(), 4]), target_deltas).unwrap();
        let sl = g.smooth_l1(pred, &target, ROI_BETA);
        g.mean_all(sl)
    } else {
        g.scalar(0.0)
    };

    Ok((cls, reg))
}

/// Supervised loss of one labeled view: ROI-head losses on the main
/// classifier plus the RPN objectness/box losses, as (cls, reg).
pub fn supervised_loss(
    bound: &crate::detector::BoundDetector,
    image: &Array3<f64>,
    ground_truth: &[BBox],
) -> Result<(Var, Var)> {
    let g = bound.graph;
    let image_hw = (image.dim().1, image.dim().2);
    let image_var = g.leaf(image.clone().into_dyn());
    let pyramid = bound.extract_pyramid(image_var, image_hw)?;
    let maps = bound.rpn_forward(&pyramid);
    let (rpn_cls, rpn_reg) = bound.rpn_losses(&maps, ground_truth)?;
    let proposals = training_proposals(bound, &maps, &pyramid, ground_truth);
    let (roi_cls, roi_reg) = roi_head_losses(
        bound,
        &pyramid,
        &proposals,
        ground_truth,
        Classifier::Main,
        0,
        true,
    )?;
    Ok((g.add(rpn_cls, roi_cls), g.add(rpn_reg, roi_reg)))
}

pub struct UnsupOptions {
    pub mode: TrainMode,
    pub unsup_regression: bool,
    pub kl_direction: KlDirection,
}

/// All unsupervised loss heads for one strong view of one unlabeled image.
pub struct UnsupForward {
    pub main_cls: Var,
    pub main_reg: Var,
    pub pim_cls: Var,
    pub pim_reg: Var,
    pub distill: Var,
    pub trace: StepTrace,
}

/// Build the unsupervised subgraph: main branch on the strong view with the
/// high-threshold set, mining branch on the 0.5x view with the
/// lower-threshold set reusing the main proposals, and the KL
/// self-distillation term on the in-between boxes.
pub fn unsupervised_losses(
    bound: &crate::detector::BoundDetector,
    strong_image: &Array3<f64>,
    labels: &PseudoLabelSet,
    opts: &UnsupOptions,
) -> Result<UnsupForward> {
    let g = bound.graph;
    let zero = || g.scalar(0.0);
    let mut trace = StepTrace {
        n_pseudo_main: labels.main_set.len(),
        n_pseudo_pim: labels.pim_set.len(),
        n_pseudo_sd: labels.sd_interval.len(),
        ..StepTrace::default()
    };

    let image_hw = (strong_image.dim().1, strong_image.dim().2);
    let main_targets = labels.main_boxes();
    let pim_targets = labels.pim_boxes();
    let sd_boxes = labels.sd_boxes();

    let run_pim = opts.mode == TrainMode::Lsm && !pim_targets.is_empty();
    let run_sd = opts.mode == TrainMode::Lsm && !sd_boxes.is_empty();
    let run_main = !main_targets.is_empty();

    if !(run_main || run_pim || run_sd) {
        return Ok(UnsupForward {
            main_cls: zero(),
            main_reg: zero(),
            pim_cls: zero(),
            pim_reg: zero(),
            distill: zero(),
            trace,
        });
    }

    // main-branch pyramid over the strong view
    let image_var = g.leaf(strong_image.clone().into_dyn());
    let pyramid = bound.extract_pyramid(image_var, image_hw)?;

    // the mining branch and SD read the 0.5x-downsampled strong view
    let pim_pyramid = if run_pim || run_sd {
        let down = downsample_image(strong_image, 0.5, bound.config.min_input)?;
        let down_var = g.leaf(down.into_dyn());
        Some(bound.extract_pim_pyramid(down_var, image_hw)?)
    } else {
        None
    };

    let (main_cls, main_reg, proposals) = if run_main {
        let maps = bound.rpn_forward(&pyramid);
        let (rpn_cls, rpn_reg) = bound.rpn_losses(&maps, &main_targets)?;
        let proposals = training_proposals(bound, &maps, &pyramid, &main_targets);
        let (roi_cls, roi_reg) = roi_head_losses(
            bound,
            &pyramid,
            &proposals,
            &main_targets,
            Classifier::Main,
            0,
            opts.unsup_regression,
        )?;
        (
            g.add(rpn_cls, roi_cls),
            g.add(rpn_reg, roi_reg),
            proposals,
        )
    } else {
        // no high-confidence set: the mining branch still reuses what the
        // main branch would see, i.e. plain RPN proposals
        let maps = bound.rpn_forward(&pyramid);
        let proposals = bound.propose(&maps, &pyramid, bound.config.max_proposals_train);
        (zero(), zero(), proposals)
    };
    trace.main_proposals_ptr = proposals.as_ptr() as usize;

    let (pim_cls, pim_reg) = if run_pim {
        let pim_pyr = pim_pyramid.as_ref().unwrap();
        trace.pim_proposals_ptr = proposals.as_ptr() as usize;
        roi_head_losses(
            bound,
            pim_pyr,
            &proposals,
            &pim_targets,
            Classifier::Aux,
            -1,
            opts.unsup_regression,
        )?
    } else {
        (zero(), zero())
    };

    let distill = if run_sd {
        let pim_pyr = pim_pyramid.as_ref().unwrap();
        distillation_term(bound, &pyramid, pim_pyr, &sd_boxes, opts.kl_direction)?
    } else {
        zero()
    };

    Ok(UnsupForward {
        main_cls,
        main_reg,
        pim_cls,
        pim_reg,
        distill,
        trace,
    })
}

/// KL divergence between the two classifiers' distributions on the same
/// boxes: main head on the main pyramid, auxiliary head on the downsampled
/// pyramid. Gradients are not detached on either side.
fn distillation_term(
    bound: &crate::detector::BoundDetector,
    main_pyramid: &FeaturePyramid,
    pim_pyramid: &FeaturePyramid,
    sd_boxes: &[BBox],
    direction: KlDirection,
) -> Result<Var> {
    let g = bound.graph;
    let as_proposals: Vec<Proposal> = sd_boxes
        .iter()
        .map(|b| {
            let mut rect = b.clone();
            rect.score = None;
            rect.category = 0;
            Proposal {
                rect,
                objectness: b.score_or_one(),
                source_level: crate::detector::LevelName::P2,
            }
        })
        .collect();

    let main_feats = bound.roi_features(main_pyramid, &as_proposals, 0)?;
    let aux_feats = bound.roi_features(pim_pyramid, &as_proposals, -1)?;
    let main_logits = bound.detect(main_feats, Classifier::Main).class_logits;
    let aux_logits = bound.detect(aux_feats, Classifier::Aux).class_logits;

    let lm = g.log_softmax_rows(main_logits);
    let la = g.log_softmax_rows(aux_logits);
    let (log_p, log_q) = match direction {
        KlDirection::AuxTeachesMain => (la, lm),
        KlDirection::MainTeachesAux => (lm, la),
    };
    // KL(p || q) = sum p * (log p - log q)
    let p = g.exp(log_p);
    let diff = g.sub(log_p, log_q);
    let per_box = g.sum_rows(g.mul(p, diff));
    Ok(g.mean_all(per_box))
}

struct BatchLosses {
    sup_cls: f64,
    sup_reg: f64,
    unsup_cls: f64,
    unsup_reg: f64,
    pim_cls: f64,
    pim_reg: f64,
    distill: f64,
}

/// One optimizer step over a labeled and an unlabeled batch, then the
/// teacher update (copy during burn-in, EMA afterwards).
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainerConfig,
    labeled_batch: &[&DetectionSample],
    unlabeled_batch: &[&DetectionSample],
) -> Result<(LossReport, StepTrace)> {
    let g = Graph::new();
    let bound = state.student.bind(&g);
    let aug = cfg.normalized_aug(state.student.config.min_input);
    let step = state.step;
    let burn_in = state.in_burn_in();

    let mut trace = StepTrace::default();

    // ---- supervised part: strong(weak(labeled image)) ----
    let mut sup_cls_acc: Option<Var> = None;
    let mut sup_reg_acc: Option<Var> = None;
    for sample in labeled_batch {
        let weak = AugmentationRecipe::weak(
            aug_seed(cfg.seed, "weak-labeled", sample.id, step),
            aug.clone(),
        );
        let weak_view = crate::data::apply_augmentation(sample, &weak)?;
        let strong = AugmentationRecipe::strong(
            aug_seed(cfg.seed, "strong-labeled", sample.id, step),
            aug.clone(),
        );
        let strong_view = crate::data::apply_augmentation(&weak_view, &strong)?;
        let image = to_f64_image(&strong_view.image);
        let (cls, reg) = supervised_loss(&bound, &image, &strong_view.annotations)?;
        sup_cls_acc = Some(match sup_cls_acc {
            Some(a) => g.add(a, cls),
            None => cls,
        });
        sup_reg_acc = Some(match sup_reg_acc {
            Some(a) => g.add(a, reg),
            None => reg,
        });
    }
    let nl = labeled_batch.len().max(1) as f64;
    let sup_cls = sup_cls_acc.map_or_else(|| g.scalar(0.0), |v| g.scale(v, 1.0 / nl));
    let sup_reg = sup_reg_acc.map_or_else(|| g.scalar(0.0), |v| g.scale(v, 1.0 / nl));

    // ---- unsupervised part ----
    let run_unsup = !burn_in && cfg.mode != TrainMode::Supervised;
    let mut unsup_terms: Vec<UnsupForward> = Vec::new();
    if run_unsup {
        let opts = UnsupOptions {
            mode: cfg.mode,
            unsup_regression: cfg.unsup_regression,
            kl_direction: cfg.kl_direction,
        };
        for sample in unlabeled_batch {
            // teacher sees the weak view
            let weak = AugmentationRecipe::weak(
                aug_seed(cfg.seed, "weak-unlabeled", sample.id, step),
                aug.clone(),
            );
            let weak_view = crate::data::apply_augmentation(sample, &weak)?;
            let weak_image = to_f64_image(&weak_view.image);
            let labels = generate_pseudo_labels(
                &state.teacher,
                &weak_image,
                sample.id,
                state.t,
                state.alpha,
            )?;

            // student sees the strong view; labels ride along
            let strong = AugmentationRecipe::strong(
                aug_seed(cfg.seed, "strong-unlabeled", sample.id, step),
                aug.clone(),
            );
            let realized = strong.realize(weak_view.height(), weak_view.width());
            let strong_image = realized.apply_image(&weak_view.image)?;
            let student_labels = transfer_through(&labels, &realized);

            let fwd = unsupervised_losses(
                &bound,
                &to_f64_image(&strong_image),
                &student_labels,
                &opts,
            )?;
            unsup_terms.push(fwd);
        }
    }
    let nu = unsup_terms.len().max(1) as f64;
    let acc = |pick: &dyn Fn(&UnsupForward) -> Var| -> Var {
        let mut total: Option<Var> = None;
        for term in &unsup_terms {
            let v = pick(term);
            total = Some(match total {
                Some(a) => g.add(a, v),
                None => v,
            });
        }
        total.map_or_else(|| g.scalar(0.0), |v| g.scale(v, 1.0 / nu))
    };
    let unsup_cls = acc(&|t| t.main_cls);
    let unsup_reg = acc(&|t| t.main_reg);
    let pim_cls = acc(&|t| t.pim_cls);
    let pim_reg = acc(&|t| t.pim_reg);
    let distill = acc(&|t| t.distill);
    if let Some(first) = unsup_terms.first() {
        trace = first.trace.clone();
    }

    // ---- Eq. 3 assembly ----
    let l_m_s = g.add(sup_cls, sup_reg);
    let l_m_u = g.add(unsup_cls, unsup_reg);
    let l_p_u = g.add(pim_cls, pim_reg);
    let inner = g.add(g.add(l_m_u, g.scale(l_p_u, state.lambda_p)), distill);
    let total = g.add(l_m_s, g.scale(inner, state.lambda_u));

    let values = BatchLosses {
        sup_cls: g.scalar_value(sup_cls),
        sup_reg: g.scalar_value(sup_reg),
        unsup_cls: g.scalar_value(unsup_cls),
        unsup_reg: g.scalar_value(unsup_reg),
        pim_cls: g.scalar_value(pim_cls),
        pim_reg: g.scalar_value(pim_reg),
        distill: g.scalar_value(distill),
    };
    let report = LossReport {
        step,
        l_m_s: values.sup_cls + values.sup_reg,
        l_m_s_cls: values.sup_cls,
        l_m_s_reg: values.sup_reg,
        l_m_u: values.unsup_cls + values.unsup_reg,
        l_m_u_cls: values.unsup_cls,
        l_m_u_reg: values.unsup_reg,
        l_p_u: values.pim_cls + values.pim_reg,
        l_p_u_cls: values.pim_cls,
        l_p_u_reg: values.pim_reg,
        l_distill: values.distill,
        total: g.scalar_value(total),
        teacher_map: None,
        recall: None,
    };

    for (name, v) in [
        ("L_m_s", report.l_m_s),
        ("L_m_u", report.l_m_u),
        ("L_p_u", report.l_p_u),
        ("L_distill", report.l_distill),
        ("total", report.total),
    ] {
        if !v.is_finite() {
            return Err(LsmError::NonFiniteLoss {
                component: name.to_string(),
                step,
            });
        }
    }

    // ---- optimizer step on the student ----
    let bindings = bound.bindings.clone();
    drop(bound);
    let grads = g.backward(total);

    let lr = if cfg.warmup_steps > 0 {
        cfg.lr * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    } else {
        cfg.lr
    };

    // optional global-norm clip
    let mut scale = 1.0;
    if cfg.clip_grad_norm > 0.0 {
        let mut sq = 0.0;
        for (_, var) in &bindings {
            if let Some(gr) = grads.get(*var) {
                sq += gr.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if norm > cfg.clip_grad_norm {
            scale = cfg.clip_grad_norm / norm;
        }
    }

    let grad_by_path: BTreeMap<String, ArrayD<f64>> = bindings
        .iter()
        .map(|(path, var)| {
            let shape = match state.student.named_params().iter().find(|(p, _)| p == path) {
                Some((_, arr)) => arr.shape().to_vec(),
                None => Vec::new(),
            };
            (path.clone(), grads.get_or_zeros(*var, &shape))
        })
        .collect();

    for (path, param) in state.student.named_params_mut() {
        let grad = &grad_by_path[&path];
        let vel = state
            .momentum
            .entry(path.clone())
            .or_insert_with(|| ArrayD::zeros(param.shape()));
        vel.zip_mut_with(grad, |v, &gr| *v = cfg.momentum * *v + gr * scale);
        param.zip_mut_with(vel, |p, &v| *p -= lr * v);
    }

    // ---- teacher update ----
    if state.step + 1 <= state.burn_in_steps {
        state.teacher = state.student.clone();
    } else {
        ema_update(state)?;
    }
    state.step += 1;

    Ok((report, trace))
}

/// Artifacts of a full training run.
#[derive(Debug)]
pub struct RunArtifacts {
    pub final_eval: EvalSnapshot,
    pub eval_history: Vec<EvalSnapshot>,
    pub metric_log_path: PathBuf,
    pub final_checkpoint_path: PathBuf,
    pub degenerate_two_view: bool,
}

pub struct TrainingInputs<'a> {
    pub train: &'a SplitDatasets,
    pub val: &'a [DetectionSample],
}

fn eval_teacher(
    teacher: &MiniDetector,
    val: &[DetectionSample],
    step: u64,
) -> Result<EvalSnapshot> {
    let mut preds = BTreeMap::new();
    let mut truths = BTreeMap::new();
    for sample in val {
        let img = to_f64_image(&sample.image);
        preds.insert(sample.id, teacher.predict(&img, 0.05)?);
        truths.insert(sample.id, sample.annotations.clone());
    }
    let r = evaluate(&preds, &truths)?;
    Ok(EvalSnapshot {
        step,
        ap50: r.ap50,
        ap50_95: r.ap50_95,
        avg_recall: r.avg_recall,
    })
}

fn write_run_checkpoint(
    path: &Path,
    state: &TrainState,
    detector_cfg: &DetectorConfig,
    trainer_cfg: &TrainerConfig,
) -> Result<()> {
    let mut tensors: Vec<(String, &ArrayD<f64>)> = Vec::new();
    let student = state.student.named_params();
    let teacher = state.teacher.named_params();
    for (p, v) in &student {
        tensors.push((format!("student.{p}"), v));
    }
    for (p, v) in &teacher {
        tensors.push((format!("teacher.{p}"), v));
    }
    for (p, v) in &state.momentum {
        tensors.push((format!("momentum.{p}"), v));
    }
    let mut meta = BTreeMap::new();
    meta.insert(
        "detector_config".to_string(),
        serde_json::to_string(detector_cfg).expect("serialize detector config"),
    );
    meta.insert(
        "trainer_config".to_string(),
        serde_json::to_string(trainer_cfg).expect("serialize trainer config"),
    );
    checkpoint::write_checkpoint(path, &tensors, &state.scalars(), &meta)
}

/// Restore a [`TrainState`] (and configs) from a checkpoint file.
pub fn load_run_checkpoint(path: &Path) -> Result<(TrainState, DetectorConfig, TrainerConfig)> {
    let ck = checkpoint::read_checkpoint(path)?;
    let detector_cfg: DetectorConfig = serde_json::from_str(
        ck.meta
            .get("detector_config")
            .ok_or_else(|| LsmError::Checkpoint("missing detector_config".into()))?,
    )
    .map_err(|e| LsmError::Checkpoint(format!("detector_config parse: {e}")))?;
    let trainer_cfg: TrainerConfig = serde_json::from_str(
        ck.meta
            .get("trainer_config")
            .ok_or_else(|| LsmError::Checkpoint("missing trainer_config".into()))?,
    )
    .map_err(|e| LsmError::Checkpoint(format!("trainer_config parse: {e}")))?;

    let split = |prefix: &str| -> ParameterSet {
        ck.tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone()))
            })
            .collect()
    };
    let student_set = split("student.");
    let teacher_set = split("teacher.");
    let momentum = split("momentum.");

    let mut student = MiniDetector::init(detector_cfg.clone(), trainer_cfg.seed)?;
    student.load_parameter_set(&student_set)?;
    let mut teacher = student.clone();
    teacher.load_parameter_set(&teacher_set)?;

    let scalar = |k: &str| -> Result<f64> {
        ck.scalars
            .get(k)
            .copied()
            .ok_or_else(|| LsmError::Checkpoint(format!("missing scalar {k}")))
    };
    let state = TrainState {
        student,
        teacher,
        step: scalar("step")? as u64,
        lambda_u: scalar("lambda_u")?,
        lambda_e: scalar("lambda_e")?,
        lambda_p: scalar("lambda_p")?,
        t: scalar("t")?,
        alpha: scalar("alpha")?,
        burn_in_steps: scalar("burn_in_steps")? as u64,
        momentum,
    };
    Ok((state, detector_cfg, trainer_cfg))
}

/// Burn-in then joint phase, with periodic teacher evaluation, an ndjson
/// metric log, and versioned checkpoints. Deterministic for a fixed config.
pub fn run_training(
    detector_cfg: &DetectorConfig,
    trainer_cfg: &TrainerConfig,
    inputs: &TrainingInputs,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<RunArtifacts> {
    let problems = trainer_cfg.validation_problems();
    if !problems.is_empty() {
        return Err(LsmError::ConfigValidation(problems));
    }
    detector_cfg.validate()?;
    if inputs.train.labeled.is_empty() {
        return Err(LsmError::Data("no labeled training samples".into()));
    }
    if trainer_cfg.mode != TrainMode::Supervised && inputs.train.unlabeled.is_empty() {
        return Err(LsmError::Data(
            "semi-supervised modes need unlabeled samples".into(),
        ));
    }

    fs::create_dir_all(out_dir).map_err(|e| LsmError::io(out_dir, e))?;
    let metric_log_path = out_dir.join("metrics.ndjson");
    let mut state = match resume_from {
        Some(path) => load_run_checkpoint(path)?.0,
        None => TrainState::new(
            MiniDetector::init(detector_cfg.clone(), trainer_cfg.seed)?,
            trainer_cfg,
        ),
    };
    let mut log = fs::File::create(&metric_log_path)
        .map_err(|e| LsmError::io(&metric_log_path, e))?;

    let mut eval_history: Vec<EvalSnapshot> = Vec::new();
    let labeled = &inputs.train.labeled;
    let unlabeled = &inputs.train.unlabeled;

    while state.step < trainer_cfg.steps {
        let step = state.step;
        let mut rng = rng_from(derive_seed(trainer_cfg.seed, "batch", step));
        let labeled_batch: Vec<&DetectionSample> = (0..trainer_cfg.batch_labeled)
            .map(|_| &labeled[rng.gen_range(0..labeled.len())])
            .collect();
        let unlabeled_batch: Vec<&DetectionSample> =
            if trainer_cfg.mode == TrainMode::Supervised || unlabeled.is_empty() {
                Vec::new()
            } else {
                (0..trainer_cfg.batch_unlabeled)
                    .map(|_| &unlabeled[rng.gen_range(0..unlabeled.len())])
                    .collect()
            };

        let (mut report, _trace) =
            train_step(&mut state, trainer_cfg, &labeled_batch, &unlabeled_batch)?;

        let is_last = state.step >= trainer_cfg.steps;
        let eval_due = (trainer_cfg.eval_every > 0 && state.step % trainer_cfg.eval_every == 0)
            || is_last;
        if eval_due && !inputs.val.is_empty() {
            let snap = eval_teacher(&state.teacher, inputs.val, state.step)?;
            report.teacher_map = Some(snap.ap50);
            report.recall = Some(snap.avg_recall);
            eval_history.push(snap);
        }

        if step % trainer_cfg.log_every == 0 || is_last {
            let line = serde_json::to_string(&report).expect("serialize report");
            writeln!(log, "{line}").map_err(|e| LsmError::io(&metric_log_path, e))?;
        }

        if trainer_cfg.checkpoint_every > 0 && state.step % trainer_cfg.checkpoint_every == 0 {
            let p = out_dir.join(format!("ckpt_step{:06}.ckpt", state.step));
            write_run_checkpoint(&p, &state, detector_cfg, trainer_cfg)?;
        }
    }

    let final_checkpoint_path = out_dir.join("ckpt_final.ckpt");
    write_run_checkpoint(&final_checkpoint_path, &state, detector_cfg, trainer_cfg)?;

    let final_eval = match eval_history.last() {
        Some(s) if s.step == state.step => *s,
        _ => {
            if inputs.val.is_empty() {
                EvalSnapshot {
                    step: state.step,
                    ap50: 0.0,
                    ap50_95: 0.0,
                    avg_recall: 0.0,
                }
            } else {
                let snap = eval_teacher(&state.teacher, inputs.val, state.step)?;
                eval_history.push(snap);
                snap
            }
        }
    };

    Ok(RunArtifacts {
        final_eval,
        eval_history,
        metric_log_path,
        final_checkpoint_path,
        degenerate_two_view: trainer_cfg.is_degenerate_two_view(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::pseudo::partition_by_scores;
    use ndarray::Array3 as A3;

    fn tiny_detector_cfg() -> DetectorConfig {
        DetectorConfig {
            backbone_channels: [4, 6, 8, 10, 12],
            fpn_channels: 6,
            min_input: 32,
            max_proposals_train: 12,
            ..DetectorConfig::default()
        }
    }

    fn tiny_trainer_cfg() -> TrainerConfig {
        TrainerConfig {
            steps: 10,
            burn_in_steps: 2,
            lr: 0.01,
            warmup_steps: 2,
            aug: AugParams {
                resize_range: (1.0, 1.0),
                flip_prob: 0.5,
                crop_keep_range: (0.9, 1.0),
                min_side: 64,
                ..AugParams::default()
            },
            ..TrainerConfig::default()
        }
    }

    fn toy_sample(id: u64, labeled: bool) -> DetectionSample {
        let mut image = A3::<f32>::from_elem((3, 64, 64), 0.3);
        let x0 = 8 + (id as usize * 7) % 24;
        let y0 = 8 + (id as usize * 11) % 24;
        for i in y0..y0 + 20 {
            for j in x0..x0 + 20 {
                image[[0, i, j]] = 0.9;
                image[[1, i, j]] = 0.2;
                image[[2, i, j]] = 0.2;
            }
        }
        let annotations = if labeled {
            vec![BBox::new(x0 as f64, y0 as f64, 20.0, 20.0, 0).unwrap()]
        } else {
            Vec::new()
        };
        DetectionSample {
            image,
            annotations,
            id,
            split: if labeled { Split::Labeled } else { Split::Unlabeled },
        }
    }

    fn fresh_state(seed: u64) -> TrainState {
        let cfg = tiny_trainer_cfg();
        let det = MiniDetector::init(tiny_detector_cfg(), seed).unwrap();
        TrainState::new(det, &cfg)
    }

    #[test]
    fn ema_boundary_lambda_zero_copies_student() {
        let mut state = fresh_state(0);
        state.lambda_e = 0.0;
        // perturb the teacher so they differ
        for (_, p) in state.teacher.named_params_mut() {
            p.mapv_inplace(|v| v + 1.0);
        }
        ema_update(&mut state).unwrap();
        for ((_, t), (_, s)) in state
            .teacher
            .named_params()
            .iter()
            .zip(state.student.named_params().iter())
        {
            assert_eq!(t, s);
        }
    }

    #[test]
    fn ema_boundary_lambda_one_keeps_teacher() {
        let mut state = fresh_state(0);
        state.lambda_e = 1.0;
        for (_, p) in state.teacher.named_params_mut() {
            p.mapv_inplace(|v| v + 1.0);
        }
        let before: Vec<ArrayD<f64>> = state
            .teacher
            .named_params()
            .iter()
            .map(|(_, v)| (*v).clone())
            .collect();
        ema_update(&mut state).unwrap();
        for ((_, t), b) in state.teacher.named_params().iter().zip(&before) {
            assert_eq!(*t, b);
        }
    }

    #[test]
    fn ema_distance_decays_geometrically() {
        let mut state = fresh_state(3);
        state.lambda_e = 0.9;
        for (_, p) in state.teacher.named_params_mut() {
            p.mapv_inplace(|v| v + 0.5);
        }
        let dist = |state: &TrainState| -> f64 {
            state
                .teacher
                .named_params()
                .iter()
                .zip(state.student.named_params().iter())
                .map(|((_, t), (_, s))| {
                    t.iter().zip(s.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(&state);
        for k in 1..=20u32 {
            ema_update(&mut state).unwrap();
            let expect = d0 * 0.9f64.powi(k as i32);
            assert!((dist(&state) - expect).abs() < 1e-9 * d0.max(1.0));
        }
    }

    #[test]
    fn burn_in_reports_zero_unsupervised_terms() {
        let cfg = tiny_trainer_cfg();
        let mut state = fresh_state(1);
        let labeled = toy_sample(0, true);
        let unlabeled = toy_sample(10, false);
        let (report, _) = train_step(&mut state, &cfg, &[&labeled], &[&unlabeled]).unwrap();
        assert_eq!(report.l_m_u, 0.0);
        assert_eq!(report.l_p_u, 0.0);
        assert_eq!(report.l_distill, 0.0);
        assert!(report.l_m_s > 0.0);
    }

    #[test]
    fn report_total_matches_weighted_sum() {
        let cfg = tiny_trainer_cfg();
        let mut state = fresh_state(1);
        state.burn_in_steps = 0;
        let labeled = toy_sample(0, true);
        let unlabeled = toy_sample(10, false);
        for _ in 0..3 {
            let (r, _) = train_step(&mut state, &cfg, &[&labeled], &[&unlabeled]).unwrap();
            let expect =
                r.l_m_s + state.lambda_u * (r.l_m_u + state.lambda_p * r.l_p_u + r.l_distill);
            assert!((r.total - expect).abs() < 1e-6, "{} vs {expect}", r.total);
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = tiny_trainer_cfg();
        let run = || -> Vec<String> {
            let mut state = fresh_state(5);
            let labeled = toy_sample(0, true);
            let unlabeled = toy_sample(10, false);
            (0..4)
                .map(|_| {
                    let (r, _) =
                        train_step(&mut state, &cfg, &[&labeled], &[&unlabeled]).unwrap();
                    serde_json::to_string(&r).unwrap()
                })
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn teacher_changes_only_through_ema() {
        let cfg = tiny_trainer_cfg();
        let mut state = fresh_state(2);
        state.burn_in_steps = 0;
        let labeled = toy_sample(0, true);
        let unlabeled = toy_sample(10, false);
        let teacher_before: Vec<ArrayD<f64>> = state
            .teacher
            .named_params()
            .iter()
            .map(|(_, v)| (*v).clone())
            .collect();
        train_step(&mut state, &cfg, &[&labeled], &[&unlabeled]).unwrap();
        // after the step, teacher must equal lambda_e * before + (1-lambda_e) * student_now
        for (((_, t_now), before), (_, s_now)) in state
            .teacher
            .named_params()
            .iter()
            .zip(&teacher_before)
            .zip(state.student.named_params().iter())
        {
            for ((tv, bv), sv) in t_now.iter().zip(before.iter()).zip(s_now.iter()) {
                let expect = state.lambda_e * bv + (1.0 - state.lambda_e) * sv;
                assert!((tv - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn baseline_mode_never_produces_pim_or_distill() {
        let mut cfg = tiny_trainer_cfg();
        cfg.mode = TrainMode::Baseline;
        let mut state = fresh_state(4);
        state.burn_in_steps = 0;
        let labeled = toy_sample(0, true);
        let unlabeled = toy_sample(10, false);
        for _ in 0..3 {
            let (r, _) = train_step(&mut state, &cfg, &[&labeled], &[&unlabeled]).unwrap();
            assert_eq!(r.l_p_u, 0.0);
            assert_eq!(r.l_distill, 0.0);
        }
    }

    fn synthetic_labels(scores: &[f64], t: f64, alpha: f64) -> PseudoLabelSet {
        let boxes: Vec<BBox> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                BBox::with_score(6.0 + 14.0 * i as f64, 8.0, 12.0, 12.0, (i % 3) as u32, s)
                    .unwrap()
            })
            .collect();
        partition_by_scores(boxes, t, alpha, 0).unwrap()
    }

    fn grad_norm_for(
        grads: &crate::nn::Gradients,
        bindings: &[(String, Var)],
        prefix: &str,
    ) -> f64 {
        bindings
            .iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .filter_map(|(_, v)| grads.get(*v))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn pim_gradient_reaches_aux_and_shared_head_but_not_main() {
        let det = MiniDetector::init(tiny_detector_cfg(), 6).unwrap();
        let g = Graph::new();
        let bound = det.bind(&g);
        let image = to_f64_image(&toy_sample(3, false).image);
        // one high-confidence box (so its rect joins the reused proposals and
        // gives the mining branch a positive) plus one pim-only box
        let labels = synthetic_labels(&[0.9, 0.6], 0.7, 0.5);
        let opts = UnsupOptions {
            mode: TrainMode::Lsm,
            unsup_regression: true,
            kl_direction: KlDirection::AuxTeachesMain,
        };
        let fwd = unsupervised_losses(&bound, &image, &labels, &opts).unwrap();
        let root = g.add(fwd.pim_cls, fwd.pim_reg);
        let bindings = bound.bindings.clone();
        drop(bound);
        let grads = g.backward(root);
        assert!(grad_norm_for(&grads, &bindings, "heads.f_aux") > 0.0);
        assert!(grad_norm_for(&grads, &bindings, "heads.r") > 0.0);
        assert_eq!(grad_norm_for(&grads, &bindings, "heads.f_main"), 0.0);
    }

    #[test]
    fn distillation_reaches_both_classifiers() {
        let det = MiniDetector::init(tiny_detector_cfg(), 7).unwrap();
        let g = Graph::new();
        let bound = det.bind(&g);
        let image = to_f64_image(&toy_sample(4, false).image);
        let labels = synthetic_labels(&[0.6, 0.55], 0.7, 0.5);
        assert_eq!(labels.sd_interval.len(), 2);
        let opts = UnsupOptions {
            mode: TrainMode::Lsm,
            unsup_regression: true,
            kl_direction: KlDirection::AuxTeachesMain,
        };
        let fwd = unsupervised_losses(&bound, &image, &labels, &opts).unwrap();
        assert!(g.scalar_value(fwd.distill) >= 0.0);
        let bindings = bound.bindings.clone();
        drop(bound);
        let grads = g.backward(fwd.distill);
        assert!(grad_norm_for(&grads, &bindings, "heads.f_main") > 0.0);
        assert!(grad_norm_for(&grads, &bindings, "heads.f_aux") > 0.0);
    }

    #[test]
    fn pim_reuses_main_branch_proposals() {
        let det = MiniDetector::init(tiny_detector_cfg(), 8).unwrap();
        let g = Graph::new();
        let bound = det.bind(&g);
        let image = to_f64_image(&toy_sample(5, false).image);
        let labels = synthetic_labels(&[0.9, 0.6], 0.7, 0.5);
        let opts = UnsupOptions {
            mode: TrainMode::Lsm,
            unsup_regression: true,
            kl_direction: KlDirection::AuxTeachesMain,
        };
        let fwd = unsupervised_losses(&bound, &image, &labels, &opts).unwrap();
        assert!(fwd.trace.pim_reused_main_proposals());
    }

    #[test]
    fn alpha_equal_t_collapses_sd_and_distill() {
        let det = MiniDetector::init(tiny_detector_cfg(), 9).unwrap();
        let g = Graph::new();
        let bound = det.bind(&g);
        let image = to_f64_image(&toy_sample(6, false).image);
        let labels = synthetic_labels(&[0.9, 0.75, 0.6], 0.7, 0.7);
        assert!(labels.sd_interval.is_empty());
        assert_eq!(labels.main_set, labels.pim_set);
        let opts = UnsupOptions {
            mode: TrainMode::Lsm,
            unsup_regression: true,
            kl_direction: KlDirection::AuxTeachesMain,
        };
        let fwd = unsupervised_losses(&bound, &image, &labels, &opts).unwrap();
        assert_eq!(g.scalar_value(fwd.distill), 0.0);
        assert!(g.scalar_value(fwd.pim_cls) > 0.0);
    }

    #[test]
    fn checkpoint_resume_reproduces_next_report() {
        let dir = tempfile::tempdir().unwrap();
        let det_cfg = tiny_detector_cfg();
        let mut cfg = tiny_trainer_cfg();
        cfg.steps = 4;
        cfg.burn_in_steps = 1;
        cfg.checkpoint_every = 2;
        let samples: Vec<DetectionSample> = (0..6).map(|i| toy_sample(i, true)).collect();
        let split = crate::data::split_labeled_unlabeled(
            samples,
            &crate::data::SplitSpec {
                labeled_fraction: 0.5,
                seed: 0,
            },
        )
        .unwrap();
        let val: Vec<DetectionSample> = vec![toy_sample(100, true)];
        let inputs = TrainingInputs {
            train: &split,
            val: &val,
        };
        let out_a = dir.path().join("a");
        run_training(&det_cfg, &cfg, &inputs, &out_a, None).unwrap();
        let log_a = fs::read_to_string(out_a.join("metrics.ndjson")).unwrap();

        // resume from the step-2 checkpoint and re-run the tail
        let out_b = dir.path().join("b");
        run_training(
            &det_cfg,
            &cfg,
            &inputs,
            &out_b,
            Some(&out_a.join("ckpt_step000002.ckpt")),
        )
        .unwrap();
        let log_b = fs::read_to_string(out_b.join("metrics.ndjson")).unwrap();
        let tail_a: Vec<&str> = log_a.lines().skip(2).collect();
        let tail_b: Vec<&str> = log_b.lines().collect();
        assert_eq!(tail_a, tail_b);
    }
}
