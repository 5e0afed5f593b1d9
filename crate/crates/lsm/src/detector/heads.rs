//! ROI heads: dual classifiers over pooled features, a single shared
//! regression head, delta coding, and NMS.

use crate::geometry::BBox;
use crate::nn::Var;

use super::{BoundDetector, FeaturePyramid, Proposal};

/// Which classification head to run. The regression path is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classifier {
    Main,
    Aux,
}

/// Class logits `[n, n_categories+1]` (background last) and box deltas
/// `[n, 4]` from the shared regression head.
pub struct DetectionHeadOutput {
    pub class_logits: Var,
    pub box_deltas: Var,
    pub n_proposals: usize,
}

const DELTA_CLAMP: f64 = 4.0;

/// Standard box delta decode: centre offsets scaled by anchor size, log-space
/// width/height.
pub fn decode_delta(anchor: (f64, f64, f64, f64), d: [f64; 4]) -> (f64, f64, f64, f64) {
    let (ax, ay, aw, ah) = anchor;
    let acx = ax + aw / 2.0;
    let acy = ay + ah / 2.0;
    let cx = acx + d[0] * aw;
    let cy = acy + d[1] * ah;
    let w = aw * d[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = ah * d[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    (cx - w / 2.0, cy - h / 2.0, w, h)
}

pub fn encode_delta(anchor: (f64, f64, f64, f64), target: (f64, f64, f64, f64)) -> [f64; 4] {
    let (ax, ay, aw, ah) = anchor;
    let (tx, ty, tw, th) = target;
    let acx = ax + aw / 2.0;
    let acy = ay + ah / 2.0;
    let tcx = tx + tw / 2.0;
    let tcy = ty + th / 2.0;
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (tw / aw).ln(),
        (th / ah).ln(),
    ]
}

/// Greedy NMS over rects already sorted by priority; returns kept positions
/// (into the sorted slice), at most `cap`.
pub fn nms_keep(sorted: &[BBox], iou_thr: f64, cap: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for (i, cand) in sorted.iter().enumerate() {
        if keep.len() >= cap {
            break;
        }
        let suppressed = keep
            .iter()
            .any(|&k| crate::geometry::iou(&sorted[k], cand) > iou_thr);
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

impl<'g> BoundDetector<'g> {
    /// Run pooled features through the selected classifier and the shared
    /// regression head.
    pub fn detect(&self, features: Var, classifier: Classifier) -> DetectionHeadOutput {
        let g = self.graph;
        let (n, flat) = g.with_value(features, |a| {
            let shape = a.shape();
            (shape[0], shape[1] * shape[2] * shape[3])
        });
        debug_assert_eq!(flat, self.config.roi_flat_len());
        let x = g.reshape(features, &[n, flat]);
        let head = match classifier {
            Classifier::Main => &self.params.f_main,
            Classifier::Aux => &self.params.f_aux,
        };
        DetectionHeadOutput {
            class_logits: head.apply(g, x),
            box_deltas: self.params.r_head.apply(g, x),
            n_proposals: n,
        }
    }

    /// Turn head outputs into scored boxes: decode the shared deltas against
    /// each proposal, clip, emit one candidate per foreground category above
    /// `score_floor`, then per-category NMS.
    pub fn decode_predictions(
        &self,
        pyramid: &FeaturePyramid,
        proposals: &[Proposal],
        out: &DetectionHeadOutput,
        score_floor: f64,
    ) -> Vec<BBox> {
        let g = self.graph;
        let logits = g.value(out.class_logits);
        let deltas = g.value(out.box_deltas);
        let n_cls = self.config.n_categories;
        let (ih, iw) = (pyramid.image_hw.0 as f64, pyramid.image_hw.1 as f64);

        let mut candidates: Vec<BBox> = Vec::new();
        for (i, prop) in proposals.iter().enumerate() {
            // softmax over the row
            let row: Vec<f64> = (0..n_cls + 1).map(|c| logits[[i, c]]).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();

            let d = [
                deltas[[i, 0]],
                deltas[[i, 1]],
                deltas[[i, 2]],
                deltas[[i, 3]],
            ];
            let r = &prop.rect;
            let (x, y, w, h) = decode_delta((r.x, r.y, r.w, r.h), d);
            let x1 = x.clamp(0.0, iw);
            let y1 = y.clamp(0.0, ih);
            let x2 = (x + w).clamp(0.0, iw);
            let y2 = (y + h).clamp(0.0, ih);
            if x2 - x1 < 1e-3 || y2 - y1 < 1e-3 {
                continue;
            }
            for c in 0..n_cls {
                let score = exps[c] / z;
                if score > score_floor {
                    if let Ok(b) =
                        BBox::with_score(x1, y1, x2 - x1, y2 - y1, c as u32, score.min(1.0))
                    {
                        candidates.push(b);
                    }
                }
            }
        }

        // per-category NMS
        let mut kept: Vec<BBox> = Vec::new();
        for c in 0..n_cls as u32 {
            let mut cat: Vec<BBox> = candidates
                .iter()
                .filter(|b| b.category == c)
                .cloned()
                .collect();
            cat.sort_by(|a, b| b.score_or_one().total_cmp(&a.score_or_one()));
            let keep = nms_keep(&cat, self.config.predict_nms_iou, usize::MAX);
            kept.extend(keep.into_iter().map(|k| cat[k].clone()));
        }
        kept.sort_by(|a, b| {
            b.score_or_one()
                .total_cmp(&a.score_or_one())
                .then(a.category.cmp(&b.category))
        });
        kept
    }
}

#[cfg(test)]
mod tests {
    use super::super::{DetectorConfig, MiniDetector};
    use super::*;
    use crate::nn::Graph;
    use ndarray::{ArrayD, IxDyn};

    fn tiny() -> MiniDetector {
        MiniDetector::init(
            DetectorConfig {
                backbone_channels: [4, 6, 8, 10, 12],
                fpn_channels: 6,
                ..DetectorConfig::default()
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn delta_coding_roundtrips() {
        let anchor = (10.0, 20.0, 30.0, 40.0);
        let target = (12.0, 25.0, 28.0, 35.0);
        let enc = encode_delta(anchor, target);
        let dec = decode_delta(anchor, enc);
        assert!((dec.0 - target.0).abs() < 1e-9);
        assert!((dec.1 - target.1).abs() < 1e-9);
        assert!((dec.2 - target.2).abs() < 1e-9);
        assert!((dec.3 - target.3).abs() < 1e-9);
    }

    #[test]
    fn zero_features_give_bias_logits() {
        let det = tiny();
        let g = Graph::no_grad();
        let b = det.bind(&g);
        let s = det.config.roi_size;
        let feats = g.leaf(ArrayD::zeros(IxDyn(&[2, det.config.fpn_channels, s, s])));
        let out = b.detect(feats, Classifier::Main);
        let logits = g.value(out.class_logits);
        for i in 0..2 {
            for c in 0..det.config.n_categories + 1 {
                assert_eq!(logits[[i, c]], det.params.f_main.b[[c]]);
            }
        }
    }

    #[test]
    fn softmax_rows_normalise() {
        let det = tiny();
        let g = Graph::no_grad();
        let b = det.bind(&g);
        let s = det.config.roi_size;
        let feats = g.leaf(ArrayD::from_shape_fn(
            IxDyn(&[3, det.config.fpn_channels, s, s]),
            |ix| (ix[0] as f64 * 0.3 + ix[1] as f64 * 0.1).sin(),
        ));
        let out = b.detect(feats, Classifier::Aux);
        let lp = g.log_softmax_rows(out.class_logits);
        let probs = g.value(g.exp(lp));
        for i in 0..3 {
            let sum: f64 = (0..det.config.n_categories + 1)
                .map(|c| probs[[i, c]])
                .sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn main_and_aux_share_regression_only() {
        let det = tiny();
        let g = Graph::no_grad();
        let b = det.bind(&g);
        let s = det.config.roi_size;
        let feats = g.leaf(ArrayD::from_shape_fn(
            IxDyn(&[2, det.config.fpn_channels, s, s]),
            |ix| ((ix[1] + ix[2] * 3 + ix[3]) % 5) as f64 * 0.1,
        ));
        let main = b.detect(feats, Classifier::Main);
        let aux = b.detect(feats, Classifier::Aux);
        assert_ne!(g.value(main.class_logits), g.value(aux.class_logits));
        assert_eq!(g.value(main.box_deltas), g.value(aux.box_deltas));
    }
}
