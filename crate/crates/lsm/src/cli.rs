//! Command implementations behind the `lsm` binary: train, eval, analyze,
//! sweep, gen-data. Every command writes its artifacts under an output
//! directory and never mutates its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::data::{
    generate_shapes_dataset, load_coco_boxes, load_coco_json, load_predictions, save_coco_json,
    shapes_categories, split_labeled_unlabeled, write_predictions, CocoAnnotation, CocoDataset,
    CocoImage, CocoPrediction, DetectionSample, SplitDatasets,
};
use crate::detector::MiniDetector;
use crate::error::{LsmError, Result};
use crate::eval::{evaluate, recall_precision_trace, EvalResult, EvalSnapshot};
use crate::geometry::{
    binned_mean_iou, binned_pair_counts, match_best_iou_per_prediction, match_per_category,
    AreaBin, BBox,
};
use crate::plot;
use crate::pseudo::partition_by_scores;
use crate::trainer::{load_run_checkpoint, run_training, RunArtifacts, TrainMode, TrainingInputs};

fn derive(base: u64, tag: &str) -> u64 {
    crate::nn::derive_seed(base, tag, 0)
}

/// Materialize the configured dataset: train split plus a held-out
/// evaluation set.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(SplitDatasets, Vec<DetectionSample>)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            n_images,
            image_size,
            seed,
            val_images,
        } => {
            let train = generate_shapes_dataset(*n_images, *image_size, *seed)?;
            let mut val = generate_shapes_dataset(
                (*val_images).max(1),
                *image_size,
                derive(*seed, "val"),
            )?;
            // keep val ids disjoint from train ids
            for (i, v) in val.iter_mut().enumerate() {
                v.id = 1_000_000 + i as u64;
            }
            let split = split_labeled_unlabeled(train, &cfg.split)?;
            Ok((split, val))
        }
        DatasetSpec::Coco {
            images_dir,
            annotations,
            val_images_dir,
            val_annotations,
        } => {
            let loaded = load_coco_json(images_dir, annotations)?;
            if loaded.dropped_degenerate > 0 {
                eprintln!(
                    "warning: dropped {} degenerate annotations",
                    loaded.dropped_degenerate
                );
            }
            let split = split_labeled_unlabeled(loaded.samples, &cfg.split)?;
            let val = match (val_images_dir, val_annotations) {
                (Some(dir), Some(ann)) => load_coco_json(dir, ann)?.samples,
                _ => Vec::new(),
            };
            Ok((split, val))
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub mode: TrainMode,
    pub steps: u64,
    pub final_ap50: f64,
    pub final_ap50_95: f64,
    pub final_avg_recall: f64,
    pub degenerate_two_view: bool,
}

/// Dump the trained teacher's pseudo-labels over the unlabeled set (clean
/// views) plus the withheld ground truth, for offline analysis.
fn dump_pseudo_labels(
    teacher: &MiniDetector,
    split: &SplitDatasets,
    t: f64,
    alpha: f64,
    out_dir: &Path,
) -> Result<()> {
    let mut rows: Vec<CocoPrediction> = Vec::new();
    for sample in &split.unlabeled {
        let image = sample.image.mapv(|v| v as f64);
        let candidates = teacher.predict(&image, alpha)?;
        let set = partition_by_scores(candidates, t, alpha, sample.id)?;
        rows.extend(set.to_predictions());
    }
    write_predictions(&out_dir.join("pseudo_labels.json"), &rows)?;

    // quarantined ground truth of the unlabeled images, annotations only
    let mut annotations = Vec::new();
    for sample in &split.unlabeled {
        if let Some(truths) = split.evaluation_truths(sample.id) {
            for b in truths {
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id: sample.id,
                    category_id: b.category,
                    bbox: vec![b.x, b.y, b.w, b.h],
                    score: None,
                });
            }
        }
    }
    let dataset = CocoDataset {
        images: split
            .unlabeled
            .iter()
            .map(|s| CocoImage {
                id: s.id,
                width: s.width() as u32,
                height: s.height() as u32,
                file_name: format!("{:06}.png", s.id),
            })
            .collect(),
        annotations,
        categories: shapes_categories(),
    };
    let json_path = out_dir.join("unlabeled_truths.json");
    let text = serde_json::to_string_pretty(&dataset).expect("serialize truths");
    fs::write(&json_path, text).map_err(|e| LsmError::io(&json_path, e))
}

fn write_trace_artifacts(
    out_dir: &Path,
    runs: &[(String, Vec<EvalSnapshot>)],
) -> Result<()> {
    let with_curves: Vec<(String, Vec<EvalSnapshot>)> = runs
        .iter()
        .filter(|(_, snaps)| snaps.len() >= 2)
        .cloned()
        .collect();
    if with_curves.is_empty() {
        return Ok(());
    }
    let csv = recall_precision_trace(&with_curves)?;
    let csv_path = out_dir.join("trace.csv");
    fs::write(&csv_path, csv).map_err(|e| LsmError::io(&csv_path, e))?;

    let recall_series: Vec<plot::Series> = with_curves
        .iter()
        .map(|(label, snaps)| plot::Series {
            label: label.clone(),
            points: snaps
                .iter()
                .map(|s| (s.step as f64, s.avg_recall))
                .collect(),
        })
        .collect();
    plot::line_chart(
        "average recall over training",
        "step",
        "avg recall (IoU 0.5)",
        &recall_series,
        &out_dir.join("recall_curve.svg"),
    )?;
    let ap_series: Vec<plot::Series> = with_curves
        .iter()
        .map(|(label, snaps)| plot::Series {
            label: label.clone(),
            points: snaps.iter().map(|s| (s.step as f64, s.ap50)).collect(),
        })
        .collect();
    plot::line_chart(
        "average precision over training",
        "step",
        "mAP50",
        &ap_series,
        &out_dir.join("precision_curve.svg"),
    )
}

/// Train per the config; artifacts land in the resolved output directory.
pub fn cmd_train(
    config_path: &Path,
    overrides: &[String],
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    let out_dir = cfg.resolved_output_dir();
    fs::create_dir_all(&out_dir).map_err(|e| LsmError::io(&out_dir, e))?;
    let resolved = out_dir.join("config.resolved.txt");
    fs::write(&resolved, cfg.to_text()).map_err(|e| LsmError::io(&resolved, e))?;

    let (split, val) = prepare_data(&cfg)?;
    let inputs = TrainingInputs {
        train: &split,
        val: &val,
    };
    let artifacts = run_training(&cfg.detector, &cfg.trainer, &inputs, &out_dir, resume)?;

    if cfg.trainer.mode != TrainMode::Supervised && !split.unlabeled.is_empty() {
        let (state, _, _) = load_run_checkpoint(&artifacts.final_checkpoint_path)?;
        dump_pseudo_labels(
            &state.teacher,
            &split,
            cfg.trainer.t,
            cfg.trainer.alpha,
            &out_dir,
        )?;
    }

    write_trace_artifacts(
        &out_dir,
        &[("this_run".to_string(), artifacts.eval_history.clone())],
    )?;

    let summary = TrainSummary {
        out_dir: out_dir.clone(),
        mode: cfg.trainer.mode,
        steps: cfg.trainer.steps,
        final_ap50: artifacts.final_eval.ap50,
        final_ap50_95: artifacts.final_eval.ap50_95,
        final_avg_recall: artifacts.final_eval.avg_recall,
        degenerate_two_view: artifacts.degenerate_two_view,
    };
    let summary_path = out_dir.join("summary.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("serialize summary"),
    )
    .map_err(|e| LsmError::io(&summary_path, e))?;
    if summary.degenerate_two_view {
        println!("note: alpha == t, degenerate two-view consistency configuration");
    }
    println!(
        "trained {} steps ({:?}); teacher mAP50 {:.4}, AP50:95 {:.4}, avg recall {:.4}",
        summary.steps, summary.mode, summary.final_ap50, summary.final_ap50_95,
        summary.final_avg_recall
    );
    Ok(summary)
}

pub enum EvalDataset {
    Coco {
        images_dir: PathBuf,
        annotations: PathBuf,
    },
    Synthetic {
        n_images: usize,
        image_size: usize,
        seed: u64,
    },
}

/// Evaluate the TEACHER model of a checkpoint on a dataset.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &EvalDataset,
    out: Option<&Path>,
) -> Result<EvalResult> {
    let (state, _, _) = load_run_checkpoint(checkpoint)?;
    let samples = match dataset {
        EvalDataset::Coco {
            images_dir,
            annotations,
        } => load_coco_json(images_dir, annotations)?.samples,
        EvalDataset::Synthetic {
            n_images,
            image_size,
            seed,
        } => generate_shapes_dataset(*n_images, *image_size, *seed)?,
    };
    let mut preds = BTreeMap::new();
    let mut truths = BTreeMap::new();
    for s in &samples {
        let image = s.image.mapv(|v| v as f64);
        preds.insert(s.id, state.teacher.predict(&image, 0.05)?);
        truths.insert(s.id, s.annotations.clone());
    }
    let result = evaluate(&preds, &truths)?;
    let text = serde_json::to_string_pretty(&result).expect("serialize eval");
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, &text).map_err(|e| LsmError::io(path, e))?;
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchingMode {
    GreedyOneToOne,
    BestIouPerPrediction,
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub bin_mean_iou: BTreeMap<String, f64>,
    pub bin_counts: BTreeMap<String, usize>,
    pub n_pairs: usize,
    pub n_predictions: usize,
    /// Directional check of the motivating analysis: large-bin mean IoU at
    /// least the small-bin mean. `None` when either bin is empty.
    pub large_ge_small: Option<bool>,
    pub flagged: bool,
}

/// Pseudo-label quality analysis: per-category IoU matching against ground
/// truth, area-binned mean IoU, an IoU-vs-area scatter, and a score-vs-IoU
/// table, as CSV plus SVG.
pub fn cmd_analyze(
    predictions_path: &Path,
    truths_path: &Path,
    out_dir: &Path,
    matching: MatchingMode,
    iou_floor: f64,
) -> Result<AnalysisReport> {
    fs::create_dir_all(out_dir).map_err(|e| LsmError::io(out_dir, e))?;
    let (truths_by_image, _) = load_coco_boxes(truths_path)?;
    let preds_by_image = load_predictions(predictions_path)?;

    let mut all_pairs: Vec<(BBox, f64)> = Vec::new(); // (prediction, iou)
    let mut n_predictions = 0usize;
    let mut bin_sums: BTreeMap<AreaBin, (f64, usize)> = BTreeMap::new();
    for (image_id, preds) in &preds_by_image {
        let truths = truths_by_image.get(image_id).cloned().unwrap_or_default();
        n_predictions += preds.len();
        let result = match matching {
            MatchingMode::GreedyOneToOne => match_per_category(preds, &truths, iou_floor),
            MatchingMode::BestIouPerPrediction => {
                match_best_iou_per_prediction(preds, &truths, iou_floor)
            }
        };
        let means = binned_mean_iou(&result, preds);
        let counts = binned_pair_counts(&result, preds);
        for (bin, mean) in means {
            let e = bin_sums.entry(bin).or_insert((0.0, 0));
            let c = counts[&bin];
            e.0 += mean * c as f64;
            e.1 += c;
        }
        for &(pi, _, v) in &result.pairs {
            all_pairs.push((preds[pi].clone(), v));
        }
    }

    let bin_mean_iou: BTreeMap<String, f64> = bin_sums
        .iter()
        .map(|(bin, (sum, n))| (bin.name().to_string(), sum / (*n).max(1) as f64))
        .collect();
    let bin_counts: BTreeMap<String, usize> = bin_sums
        .iter()
        .map(|(bin, (_, n))| (bin.name().to_string(), *n))
        .collect();

    // (a) binned mean IoU table
    let mut table = String::from("bin,lower_area,upper_area,count,mean_iou\n");
    for bin in AreaBin::ALL {
        if let Some((sum, n)) = bin_sums.get(&bin) {
            table.push_str(&format!(
                "{},{},{},{},{}\n",
                bin.name(),
                bin.lower(),
                bin.upper().map_or("inf".to_string(), |u| u.to_string()),
                n,
                sum / (*n).max(1) as f64
            ));
        }
    }
    let p = out_dir.join("binned_mean_iou.csv");
    fs::write(&p, table).map_err(|e| LsmError::io(&p, e))?;

    // (b) IoU-vs-area scatter
    let mut scatter = String::from("area,iou,score,category\n");
    for (pred, v) in &all_pairs {
        scatter.push_str(&format!(
            "{},{},{},{}\n",
            pred.area(),
            v,
            pred.score_or_one(),
            pred.category
        ));
    }
    let p = out_dir.join("iou_vs_area.csv");
    fs::write(&p, scatter).map_err(|e| LsmError::io(&p, e))?;

    // (c) score-vs-IoU table over ten score bands
    let mut bands: Vec<(f64, usize)> = vec![(0.0, 0); 10];
    for (pred, v) in &all_pairs {
        let band = ((pred.score_or_one() * 10.0).floor() as usize).min(9);
        bands[band].0 += v;
        bands[band].1 += 1;
    }
    let mut score_table = String::from("score_lo,score_hi,count,mean_iou\n");
    for (i, (sum, n)) in bands.iter().enumerate() {
        if *n > 0 {
            score_table.push_str(&format!(
                "{},{},{},{}\n",
                i as f64 / 10.0,
                (i + 1) as f64 / 10.0,
                n,
                sum / *n as f64
            ));
        }
    }
    let p = out_dir.join("score_vs_iou.csv");
    fs::write(&p, score_table).map_err(|e| LsmError::io(&p, e))?;

    // plots
    if !all_pairs.is_empty() {
        plot::scatter_chart(
            "IoU versus pseudo-box area",
            "box area",
            "IoU with matched truth",
            &all_pairs
                .iter()
                .map(|(pred, v)| (pred.area(), *v))
                .collect::<Vec<_>>(),
            &out_dir.join("iou_vs_area.svg"),
        )?;
        let bin_index = |bin: &AreaBin| -> f64 {
            match bin {
                AreaBin::Small => 0.0,
                AreaBin::Medium => 1.0,
                AreaBin::Large => 2.0,
            }
        };
        let bin_points: Vec<(f64, f64)> = AreaBin::ALL
            .iter()
            .filter_map(|bin| {
                bin_sums
                    .get(bin)
                    .map(|(sum, n)| (bin_index(bin), sum / (*n).max(1) as f64))
            })
            .collect();
        if bin_points.len() >= 2 {
            plot::line_chart(
                "mean IoU per size bin (0=small, 1=medium, 2=large)",
                "size bin",
                "mean IoU",
                &[plot::Series {
                    label: "pseudo-labels".into(),
                    points: bin_points,
                }],
                &out_dir.join("binned_mean_iou.svg"),
            )?;
        }
    }

    let large_ge_small = match (
        bin_sums.get(&AreaBin::Large),
        bin_sums.get(&AreaBin::Small),
    ) {
        (Some((ls, ln)), Some((ss, sn))) => {
            Some(ls / (*ln).max(1) as f64 >= ss / (*sn).max(1) as f64)
        }
        _ => None,
    };
    let flagged = large_ge_small == Some(false);
    if flagged {
        println!(
            "FLAG: large-bin mean IoU fell below small-bin mean IoU on this fixture \
             (dataset-dependent empirical claim; artifacts emitted for inspection)"
        );
    }

    let report = AnalysisReport {
        bin_mean_iou,
        bin_counts,
        n_pairs: all_pairs.len(),
        n_predictions,
        large_ge_small,
        flagged,
    };
    let p = out_dir.join("analysis.json");
    fs::write(
        &p,
        serde_json::to_string_pretty(&report).expect("serialize analysis"),
    )
    .map_err(|e| LsmError::io(&p, e))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Alpha,
    T,
    PimLevels,
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub lsm_ap50: f64,
    pub lsm_ap50_95: f64,
    pub lsm_ap_small: Option<f64>,
    pub lsm_ap_medium: Option<f64>,
    pub lsm_ap_large: Option<f64>,
    pub baseline_ap50: Option<f64>,
    pub baseline_ap50_95: Option<f64>,
    pub degenerate_two_view: bool,
}

const SWEEP_BUDGET: usize = 8;

fn sweep_eval(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(RunArtifacts, EvalResult)> {
    fs::create_dir_all(out_dir).map_err(|e| LsmError::io(out_dir, e))?;
    let resolved = out_dir.join("config.resolved.txt");
    fs::write(&resolved, cfg.to_text()).map_err(|e| LsmError::io(&resolved, e))?;
    let (split, val) = prepare_data(cfg)?;
    let inputs = TrainingInputs {
        train: &split,
        val: &val,
    };
    let artifacts = run_training(&cfg.detector, &cfg.trainer, &inputs, out_dir, None)?;
    // full stratified result on the validation set
    let (state, _, _) = load_run_checkpoint(&artifacts.final_checkpoint_path)?;
    let mut preds = BTreeMap::new();
    let mut truths = BTreeMap::new();
    for s in &val {
        let image = s.image.mapv(|v| v as f64);
        preds.insert(s.id, state.teacher.predict(&image, 0.05)?);
        truths.insert(s.id, s.annotations.clone());
    }
    let result = evaluate(&preds, &truths)?;
    Ok((artifacts, result))
}

/// Grid sweep over alpha, t, or the mining-branch level subset. Threshold
/// sweeps also train a baseline arm at the same threshold, mirroring the
/// two-curve ablation layout; the level sweep gets one baseline reference.
pub fn cmd_sweep(
    config_path: &Path,
    overrides: &[String],
    parameter: SweepParameter,
    values: &[String],
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(LsmError::ConfigValidation(vec![
            "sweep: need at least one value".into(),
        ]));
    }
    if values.len() > SWEEP_BUDGET {
        let base = ExperimentConfig::load(config_path, overrides)?;
        return Err(LsmError::ConfigValidation(vec![format!(
            "sweep: {} points exceed the {SWEEP_BUDGET}-point budget \
             (estimated {} training steps across {} runs); trim the value list",
            values.len(),
            base.trainer.steps * (values.len() as u64) * 2,
            values.len() * 2
        )]));
    }

    let base = ExperimentConfig::load(config_path, overrides)?;
    let out_root = base.resolved_output_dir();
    fs::create_dir_all(&out_root).map_err(|e| LsmError::io(&out_root, e))?;

    struct Job {
        label: String,
        cfg: ExperimentConfig,
        dir: PathBuf,
    }
    let mut jobs: Vec<Job> = Vec::new();
    let sanitize = |v: &str| v.replace([',', ' ', '.'], "_");

    for v in values {
        let mut cfg = base.clone();
        cfg.trainer.mode = TrainMode::Lsm;
        match parameter {
            SweepParameter::Alpha => {
                cfg.trainer.alpha = v.parse().map_err(|_| {
                    LsmError::ConfigValidation(vec![format!("sweep value '{v}' is not a number")])
                })?;
            }
            SweepParameter::T => {
                cfg.trainer.t = v.parse().map_err(|_| {
                    LsmError::ConfigValidation(vec![format!("sweep value '{v}' is not a number")])
                })?;
                cfg.trainer.alpha = cfg.trainer.alpha.min(cfg.trainer.t);
            }
            SweepParameter::PimLevels => {
                let levels: std::result::Result<Vec<i32>, _> =
                    v.split(',').map(|p| p.trim().parse()).collect();
                cfg.detector.pim_levels = levels.map_err(|_| {
                    LsmError::ConfigValidation(vec![format!(
                        "sweep value '{v}' is not a level list like 2,3"
                    )])
                })?;
            }
        }
        let problems = cfg.validation_problems();
        if !problems.is_empty() {
            return Err(LsmError::ConfigValidation(problems));
        }
        jobs.push(Job {
            label: format!("lsm_{}", sanitize(v)),
            dir: out_root.join(format!("lsm_{}", sanitize(v))),
            cfg,
        });
    }
    // baseline arm: one per threshold value, or a single reference run
    match parameter {
        SweepParameter::Alpha | SweepParameter::T => {
            for v in values {
                let mut cfg = base.clone();
                cfg.trainer.mode = TrainMode::Baseline;
                cfg.trainer.t = v.parse().unwrap();
                cfg.trainer.alpha = cfg.trainer.alpha.min(cfg.trainer.t);
                jobs.push(Job {
                    label: format!("baseline_{}", sanitize(v)),
                    dir: out_root.join(format!("baseline_{}", sanitize(v))),
                    cfg,
                });
            }
        }
        SweepParameter::PimLevels => {
            let mut cfg = base.clone();
            cfg.trainer.mode = TrainMode::Baseline;
            jobs.push(Job {
                label: "baseline".into(),
                dir: out_root.join("baseline"),
                cfg,
            });
        }
    }

    // independent runs; opt-in parallel execution
    let mut results: BTreeMap<String, EvalResult> = BTreeMap::new();
    if parallel {
        let outcome: Vec<(String, Result<EvalResult>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|job| {
                    scope.spawn(move || {
                        (
                            job.label.clone(),
                            sweep_eval(&job.cfg, &job.dir).map(|(_, r)| r),
                        )
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (label, res) in outcome {
            results.insert(label, res?);
        }
    } else {
        for job in &jobs {
            let (_, r) = sweep_eval(&job.cfg, &job.dir)?;
            results.insert(job.label.clone(), r);
        }
    }

    let mut rows = Vec::new();
    let mut csv = String::from(
        "value,lsm_ap50,lsm_ap50_95,lsm_ap_small,lsm_ap_medium,lsm_ap_large,baseline_ap50,baseline_ap50_95,degenerate\n",
    );
    let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for v in values {
        let lsm = &results[&format!("lsm_{}", sanitize(v))];
        let baseline = match parameter {
            SweepParameter::PimLevels => results.get("baseline"),
            _ => results.get(&format!("baseline_{}", sanitize(v))),
        };
        let degenerate = match parameter {
            SweepParameter::Alpha => v.parse::<f64>().ok() == Some(base.trainer.t),
            SweepParameter::T => v.parse::<f64>().ok() == Some(base.trainer.alpha),
            SweepParameter::PimLevels => false,
        };
        if degenerate {
            println!(
                "note: value {v} makes alpha == t, the degenerate two-view consistency case"
            );
        }
        let row = SweepRow {
            value: v.clone(),
            lsm_ap50: lsm.ap50,
            lsm_ap50_95: lsm.ap50_95,
            lsm_ap_small: lsm.ap_small,
            lsm_ap_medium: lsm.ap_medium,
            lsm_ap_large: lsm.ap_large,
            baseline_ap50: baseline.map(|b| b.ap50),
            baseline_ap50_95: baseline.map(|b| b.ap50_95),
            degenerate_two_view: degenerate,
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.value,
            row.lsm_ap50,
            row.lsm_ap50_95,
            fmt_opt(row.lsm_ap_small),
            fmt_opt(row.lsm_ap_medium),
            fmt_opt(row.lsm_ap_large),
            fmt_opt(row.baseline_ap50),
            fmt_opt(row.baseline_ap50_95),
            row.degenerate_two_view,
        ));
        rows.push(row);
    }
    let p = out_root.join("sweep.csv");
    fs::write(&p, &csv).map_err(|e| LsmError::io(&p, e))?;

    // two-curve plot for numeric sweeps
    if matches!(parameter, SweepParameter::Alpha | SweepParameter::T) {
        let numeric: Vec<f64> = values.iter().filter_map(|v| v.parse().ok()).collect();
        if numeric.len() == rows.len() {
            let series = vec![
                plot::Series {
                    label: "LSM".into(),
                    points: numeric
                        .iter()
                        .zip(&rows)
                        .map(|(&x, r)| (x, r.lsm_ap50_95))
                        .collect(),
                },
                plot::Series {
                    label: "baseline".into(),
                    points: numeric
                        .iter()
                        .zip(&rows)
                        .filter_map(|(&x, r)| r.baseline_ap50_95.map(|b| (x, b)))
                        .collect(),
                },
            ];
            plot::line_chart(
                "threshold ablation",
                "threshold",
                "AP50:95",
                &series,
                &out_root.join("sweep.svg"),
            )?;
        }
    }

    println!("{csv}");
    Ok(rows)
}

/// Synthetic dataset to disk in COCO schema.
pub fn cmd_gen_data(
    n_images: usize,
    image_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let samples = generate_shapes_dataset(n_images, image_size, seed)?;
    let images_dir = out_dir.join("images");
    let annotations = out_dir.join("annotations.json");
    save_coco_json(&samples, &shapes_categories(), &images_dir, &annotations)?;
    println!(
        "wrote {} images to {} and annotations to {}",
        samples.len(),
        images_dir.display(),
        annotations.display()
    );
    Ok(())
}
