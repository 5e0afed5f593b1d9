//! Proposal-to-level assignment and ROI feature pooling.
//!
//! The level rule is computed once against the main pyramid's full range and
//! reused with a shift for the mining branch, so both branches read the same
//! proposal at aligned resolutions.

use crate::error::{LsmError, Result};
use crate::nn::Var;

use super::{BoundDetector, FeaturePyramid, Proposal};

/// Unclamped level index `floor(k0 + log2(sqrt(area) / canonical))`.
pub fn assign_main_level(area: f64, k0: f64, canonical: f64) -> i32 {
    (k0 + (area.sqrt() / canonical).log2()).floor() as i32
}

impl<'g> BoundDetector<'g> {
    /// Bilinear crop-and-resize of each proposal's region to a `roi_size`
    /// square grid, `[N, C, S, S]`.
    ///
    /// With `shift = 0` proposals read their assigned main level; with a
    /// shift the assignment moves (e.g. -1 sends a proposal that would read
    /// main `P_{i+1}` to downsampled `P_i^d`) and snaps to the nearest level
    /// present in `pyramid`. A request landing further than one level from
    /// anything available is a malformed shift.
    pub fn roi_features(
        &self,
        pyramid: &FeaturePyramid,
        proposals: &[Proposal],
        shift: i32,
    ) -> Result<Var> {
        let g = self.graph;
        let s = self.config.roi_size;
        if proposals.is_empty() {
            return Ok(g.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[
                0,
                self.config.fpn_channels,
                s,
                s,
            ]))));
        }

        let available: Vec<i32> = pyramid.levels.iter().map(|l| l.name.index()).collect();
        if available.is_empty() {
            return Err(LsmError::Runtime("roi_features on empty pyramid".into()));
        }

        // per-proposal target level, snapped to what the pyramid offers
        let mut assigned: Vec<usize> = Vec::with_capacity(proposals.len());
        for p in proposals {
            let k_raw = assign_main_level(
                p.rect.area(),
                self.config.level_k0,
                self.config.level_canonical,
            );
            let k_main = k_raw.clamp(2, 5);
            let target = k_main + shift;
            let (slot, dist) = available
                .iter()
                .enumerate()
                .map(|(i, &lvl)| (i, (lvl - target).abs()))
                .min_by_key(|&(i, d)| (d, i))
                .unwrap();
            if dist > 1 {
                return Err(LsmError::Runtime(format!(
                    "proposal assigned to level {target} which is absent from the pyramid \
                     (available: {available:?}; shift {shift} malformed)"
                )));
            }
            assigned.push(slot);
        }

        // pool per level, then restore the original proposal order
        let mut parts: Vec<Var> = Vec::new();
        let mut flat_order: Vec<usize> = Vec::with_capacity(proposals.len());
        for (slot, level) in pyramid.levels.iter().enumerate() {
            let members: Vec<usize> = (0..proposals.len())
                .filter(|&i| assigned[i] == slot)
                .collect();
            if members.is_empty() {
                continue;
            }
            let stride = level.stride as f64;
            let rois: Vec<[f64; 4]> = members
                .iter()
                .map(|&i| {
                    let r = &proposals[i].rect;
                    [r.x / stride, r.y / stride, r.w / stride, r.h / stride]
                })
                .collect();
            parts.push(g.roi_align(level.features, &rois, s));
            flat_order.extend(members);
        }

        let cat = g.concat0(&parts);
        let mut inverse = vec![0usize; proposals.len()];
        for (flat_pos, &orig) in flat_order.iter().enumerate() {
            inverse[orig] = flat_pos;
        }
        Ok(g.select_rows(cat, &inverse))
    }
}
