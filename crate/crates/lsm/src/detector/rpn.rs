//! Simplified region proposal network: one square anchor per cell per
//! level, a shared 3x3 conv trunk, and 1x1 objectness / delta heads.

use ndarray::{ArrayD, Ix3, IxDyn};

use crate::error::Result;
use crate::geometry::{iou, BBox};
use crate::nn::Var;

use super::heads::{decode_delta, encode_delta, nms_keep};
use super::{BoundDetector, FeaturePyramid, LevelName, Proposal};

/// Smooth-L1 transition point for RPN box regression.
const RPN_BETA: f64 = 1.0 / 9.0;
const POSITIVE_IOU: f64 = 0.7;
const NEGATIVE_IOU: f64 = 0.3;

pub struct RpnLevelMaps {
    pub name: LevelName,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Objectness logits `[1, h, w]`.
    pub obj: Var,
    /// Box deltas `[4, h, w]`.
    pub delta: Var,
}

pub struct RpnMaps {
    pub levels: Vec<RpnLevelMaps>,
}

/// Square anchor centred on a cell.
fn anchor_rect(row: usize, col: usize, stride: usize, scale: f64) -> (f64, f64, f64, f64) {
    let side = scale * stride as f64;
    let cx = (col as f64 + 0.5) * stride as f64;
    let cy = (row as f64 + 0.5) * stride as f64;
    (cx - side / 2.0, cy - side / 2.0, side, side)
}

fn clip_rect(
    (x, y, w, h): (f64, f64, f64, f64),
    image_hw: (usize, usize),
) -> Option<(f64, f64, f64, f64)> {
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let x1 = x.clamp(0.0, iw);
    let y1 = y.clamp(0.0, ih);
    let x2 = (x + w).clamp(0.0, iw);
    let y2 = (y + h).clamp(0.0, ih);
    if x2 - x1 < 1e-3 || y2 - y1 < 1e-3 {
        return None;
    }
    Some((x1, y1, x2 - x1, y2 - y1))
}

impl<'g> BoundDetector<'g> {
    /// Objectness and delta maps for every pyramid level.
    pub fn rpn_forward(&self, pyramid: &FeaturePyramid) -> RpnMaps {
        let g = self.graph;
        let p = &self.params;
        let levels = pyramid
            .levels
            .iter()
            .map(|lvl| {
                let trunk = g.relu(p.rpn_conv.apply(g, lvl.features));
                let obj = p.rpn_obj.apply(g, trunk);
                let delta = p.rpn_delta.apply(g, trunk);
                let (h, w) = g.with_value(lvl.features, |a| (a.shape()[1], a.shape()[2]));
                RpnLevelMaps {
                    name: lvl.name,
                    stride: lvl.stride,
                    h,
                    w,
                    obj,
                    delta,
                }
            })
            .collect();
        RpnMaps { levels }
    }

    /// Decode, score, and NMS anchors into at most `max_proposals` proposals.
    /// Candidates enter in (level, row, column) order, which is also the
    /// objectness tie-break.
    pub fn propose(
        &self,
        maps: &RpnMaps,
        pyramid: &FeaturePyramid,
        max_proposals: usize,
    ) -> Vec<Proposal> {
        if max_proposals == 0 {
            return Vec::new();
        }
        let g = self.graph;
        let mut rects: Vec<BBox> = Vec::new();
        let mut scores: Vec<f64> = Vec::new();
        let mut levels: Vec<LevelName> = Vec::new();

        for lvl in &maps.levels {
            let obj = g.value(lvl.obj);
            let obj = obj.view().into_dimensionality::<Ix3>().unwrap();
            let delta = g.value(lvl.delta);
            let delta = delta.view().into_dimensionality::<Ix3>().unwrap();
            for r in 0..lvl.h {
                for c in 0..lvl.w {
                    let anchor = anchor_rect(r, c, lvl.stride, self.config.anchor_scale);
                    let d = [
                        delta[[0, r, c]],
                        delta[[1, r, c]],
                        delta[[2, r, c]],
                        delta[[3, r, c]],
                    ];
                    let Some(rect) = clip_rect(decode_delta(anchor, d), pyramid.image_hw) else {
                        continue;
                    };
                    let Ok(bb) = BBox::new(rect.0, rect.1, rect.2, rect.3, 0) else {
                        continue;
                    };
                    rects.push(bb);
                    scores.push(sigmoid(obj[[0, r, c]]));
                    levels.push(lvl.name);
                }
            }
        }

        let mut order: Vec<usize> = (0..rects.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let sorted: Vec<BBox> = order.iter().map(|&i| rects[i].clone()).collect();
        let keep = nms_keep(&sorted, self.config.proposal_nms_iou, max_proposals);

        keep.into_iter()
            .map(|k| {
                let i = order[k];
                Proposal {
                    rect: rects[i].clone(),
                    objectness: scores[i],
                    source_level: levels[i],
                }
            })
            .collect()
    }

    /// RPN objectness and box losses against a target set (ground truth or
    /// pseudo-boxes). Positives are anchors with IoU >= 0.7 plus each
    /// target's best anchor; anchors below 0.3 are negatives and the rest
    /// are ignored. Objectness is balanced BCE over the two groups.
    pub fn rpn_losses(&self, maps: &RpnMaps, targets: &[BBox]) -> Result<(Var, Var)> {
        let g = self.graph;
        let zero = || g.scalar(0.0);
        if targets.is_empty() {
            return Ok((zero(), zero()));
        }

        // anchor geometry per level
        struct AnchorInfo {
            rect: (f64, f64, f64, f64),
            best_iou: f64,
            best_target: usize,
        }
        let mut anchors: Vec<Vec<AnchorInfo>> = Vec::with_capacity(maps.levels.len());
        let mut global_best: Vec<(f64, usize, usize)> =
            vec![(-1.0, usize::MAX, usize::MAX); targets.len()];
        for (li, lvl) in maps.levels.iter().enumerate() {
            let mut infos = Vec::with_capacity(lvl.h * lvl.w);
            for r in 0..lvl.h {
                for c in 0..lvl.w {
                    let rect = anchor_rect(r, c, lvl.stride, self.config.anchor_scale);
                    let abox = BBox::new(rect.0, rect.1, rect.2, rect.3, 0)
                        .expect("anchor rect valid");
                    let mut best_iou = 0.0;
                    let mut best_target = 0usize;
                    for (ti, t) in targets.iter().enumerate() {
                        let v = iou(&abox, t);
                        if v > best_iou {
                            best_iou = v;
                            best_target = ti;
                        }
                        let flat = r * lvl.w + c;
                        if v > global_best[ti].0 {
                            global_best[ti] = (v, li, flat);
                        }
                    }
                    infos.push(AnchorInfo {
                        rect,
                        best_iou,
                        best_target,
                    });
                }
            }
            anchors.push(infos);
        }

        // positive / negative index sets per level; objectness is balanced
        // within each level so coarse levels (positive in nearly every
        // image) cannot drown out the fine ones
        let mut level_cls: Vec<Var> = Vec::new();
        let mut n_pos = 0usize;
        let mut reg_sum: Option<Var> = None;

        for (li, lvl) in maps.levels.iter().enumerate() {
            let infos = &anchors[li];
            let mut pos_idx: Vec<usize> = Vec::new();
            let mut pos_target: Vec<usize> = Vec::new();
            let mut neg_idx: Vec<usize> = Vec::new();
            for (flat, info) in infos.iter().enumerate() {
                let forced = global_best
                    .iter()
                    .enumerate()
                    .any(|(_, &(_, bl, bf))| bl == li && bf == flat);
                if info.best_iou >= POSITIVE_IOU || forced {
                    pos_idx.push(flat);
                    // forced anchors adopt the target they are best for
                    let target = if info.best_iou >= POSITIVE_IOU && !forced {
                        info.best_target
                    } else {
                        global_best
                            .iter()
                            .enumerate()
                            .find(|(_, &(_, bl, bf))| bl == li && bf == flat)
                            .map(|(ti, _)| ti)
                            .unwrap_or(info.best_target)
                    };
                    pos_target.push(target);
                } else if info.best_iou < NEGATIVE_IOU {
                    neg_idx.push(flat);
                }
            }

            let pos_mean = if pos_idx.is_empty() {
                None
            } else {
                let logits = g.select_flat(lvl.obj, &pos_idx);
                let ones = ArrayD::from_elem(IxDyn(&[pos_idx.len()]), 1.0);
                let bce = g.bce_with_logits(logits, &ones);
                Some(g.mean_all(bce))
            };
            let neg_mean = if neg_idx.is_empty() {
                None
            } else {
                let logits = g.select_flat(lvl.obj, &neg_idx);
                let zeros = ArrayD::zeros(IxDyn(&[neg_idx.len()]));
                let bce = g.bce_with_logits(logits, &zeros);
                Some(g.mean_all(bce))
            };
            match (pos_mean, neg_mean) {
                (Some(p), Some(n)) => {
                    level_cls.push(g.add(g.scale(p, 0.5), g.scale(n, 0.5)))
                }
                (Some(p), None) => level_cls.push(p),
                (None, Some(n)) => level_cls.push(n),
                (None, None) => {}
            }

            if !pos_idx.is_empty() {
                n_pos += pos_idx.len();

                // regression on positive anchors
                let hw = lvl.h * lvl.w;
                let mut delta_idx = Vec::with_capacity(pos_idx.len() * 4);
                let mut target_deltas = Vec::with_capacity(pos_idx.len() * 4);
                for (&flat, &ti) in pos_idx.iter().zip(&pos_target) {
                    let info = &infos[flat];
                    let t = &targets[ti];
                    let enc = encode_delta(info.rect, (t.x, t.y, t.w, t.h));
                    for k in 0..4 {
                        delta_idx.push(k * hw + flat);
                        target_deltas.push(enc[k]);
                    }
                }
                let pred = g.select_flat(lvl.delta, &delta_idx);
                let target_arr =
                    ArrayD::from_shape_vec(IxDyn(&[pos_idx.len() * 4]), target_deltas).unwrap();
                let sl = g.smooth_l1(pred, &target_arr, RPN_BETA);
                let s = g.sum_all(sl);
                reg_sum = Some(match reg_sum {
                    Some(acc) => g.add(acc, s),
                    None => s,
                });
            }
        }

        let cls = if level_cls.is_empty() {
            zero()
        } else {
            let total = level_cls
                .iter()
                .skip(1)
                .fold(level_cls[0], |acc, &v| g.add(acc, v));
            g.scale(total, 1.0 / level_cls.len() as f64)
        };
        let reg = match reg_sum {
            Some(r) if n_pos > 0 => g.scale(r, 1.0 / n_pos as f64),
            _ => zero(),
        };
        Ok((cls, reg))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[cfg(test)]
mod tests {
    use super::super::{DetectorConfig, MiniDetector};
    use crate::geometry::BBox;
    use crate::nn::Graph;
    use ndarray::Array3;

    fn tiny() -> MiniDetector {
        MiniDetector::init(
            DetectorConfig {
                backbone_channels: [4, 6, 8, 10, 12],
                fpn_channels: 6,
                ..DetectorConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn image(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |(c, i, j)| {
            ((c * 31 + i * 7 + j) % 23) as f64 / 23.0
        })
    }

    #[test]
    fn propose_zero_budget_is_empty() {
        let det = tiny();
        let g = Graph::no_grad();
        let b = det.bind(&g);
        let img = g.leaf(image(64, 64).into_dyn());
        let pyr = b.extract_pyramid(img, (64, 64)).unwrap();
        let maps = b.rpn_forward(&pyr);
        assert!(b.propose(&maps, &pyr, 0).is_empty());
    }

    #[test]
    fn proposals_clip_to_image_and_rank_by_objectness() {
        let det = tiny();
        let g = Graph::no_grad();
        let b = det.bind(&g);
        let img = g.leaf(image(96, 64).into_dyn());
        let pyr = b.extract_pyramid(img, (96, 64)).unwrap();
        let maps = b.rpn_forward(&pyr);
        let props = b.propose(&maps, &pyr, 32);
        assert!(!props.is_empty());
        for p in &props {
            assert!(p.rect.x >= 0.0 && p.rect.y >= 0.0);
            assert!(p.rect.x2() <= 64.0 + 1e-9 && p.rect.y2() <= 96.0 + 1e-9);
        }
        for w in props.windows(2) {
            assert!(w[0].objectness >= w[1].objectness);
        }
    }

    #[test]
    fn equal_objectness_breaks_ties_by_position() {
        // zeroed parameters give identical logits everywhere; proposals must
        // come out in (level, row, col) scan order
        let mut det = tiny();
        for (_, p) in det.named_params_mut() {
            p.fill(0.0);
        }
        let g = Graph::no_grad();
        let b = det.bind(&g);
        let img = g.leaf(Array3::from_elem((3, 64, 64), 0.5).into_dyn());
        let pyr = b.extract_pyramid(img, (64, 64)).unwrap();
        let maps = b.rpn_forward(&pyr);
        let props = b.propose(&maps, &pyr, 5);
        assert_eq!(props.len(), 5);
        // all-equal scores: first proposal is the first anchor that survives
        // clipping, and NMS walks the scan order
        for w in props.windows(2) {
            assert!(w[0].objectness == w[1].objectness);
        }
        let first = &props[0];
        assert_eq!(first.source_level, super::LevelName::P2);
    }

    #[test]
    fn rpn_loss_empty_targets_is_zero() {
        let det = tiny();
        let g = Graph::new();
        let b = det.bind(&g);
        let img = g.leaf(image(64, 64).into_dyn());
        let pyr = b.extract_pyramid(img, (64, 64)).unwrap();
        let maps = b.rpn_forward(&pyr);
        let (cls, reg) = b.rpn_losses(&maps, &[]).unwrap();
        assert_eq!(g.scalar_value(cls), 0.0);
        assert_eq!(g.scalar_value(reg), 0.0);
    }

    #[test]
    fn rpn_loss_positive_for_real_targets() {
        let det = tiny();
        let g = Graph::new();
        let b = det.bind(&g);
        let img = g.leaf(image(128, 128).into_dyn());
        let pyr = b.extract_pyramid(img, (128, 128)).unwrap();
        let maps = b.rpn_forward(&pyr);
        let targets = vec![BBox::new(30.0, 30.0, 40.0, 40.0, 1).unwrap()];
        let (cls, reg) = b.rpn_losses(&maps, &targets).unwrap();
        assert!(g.scalar_value(cls) > 0.0);
        assert!(g.scalar_value(reg) >= 0.0);
    }
}
