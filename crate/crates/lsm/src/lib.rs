//! Low-confidence sample mining (LSM) for semi-supervised object detection.
//!
//! A desk-scale mean-teacher detection trainer with two additions over the
//! plain teacher-student loop:
//!
//! - a pseudo-information-mining (PIM) branch that re-reads the main branch's
//!   proposals from a 0.5x-downsampled feature pyramid and trains an
//!   auxiliary classifier on pseudo-labels above a lower confidence
//!   threshold, and
//! - a self-distillation (SD) loss that pulls the main and auxiliary
//!   classifier distributions together on boxes whose confidence falls
//!   between the two thresholds, with gradients flowing to both heads.
//!
//! The crate ships a tiny differentiable two-stage detector (FPN backbone,
//! RPN, ROI heads) built on an internal f64 autodiff tape, a synthetic
//! shapes dataset, COCO-format ingestion, a COCO-style evaluator, and an
//! experiment harness. See the `examples/` directory for runnable
//! walkthroughs of each capability; the `lsm` binary exposes the same
//! operations as subcommands.

pub mod cli;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod plot;
pub mod pseudo;
pub mod trainer;

pub use error::{LsmError, Result};
