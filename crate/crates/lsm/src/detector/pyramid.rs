//! Backbone and FPN forward: four strided stages with lateral top-down
//! fusion, producing P2..P5 at strides 4..32. Every stage uses ceil output
//! arithmetic, so the downsampled pyramid lines up with the main one shifted
//! by a level.

use crate::error::{LsmError, Result};
use crate::nn::Var;

use super::{BoundDetector, FeaturePyramid, LevelName, PyramidLevel};

impl<'g> BoundDetector<'g> {
    /// C2..C5 then lateral + top-down + smooth. Returns the four FPN outputs
    /// indexed by level - 2.
    fn backbone_fpn(&self, image: Var) -> [Var; 4] {
        let g = self.graph;
        let p = &self.params;
        // centre intensities so the DC component does not dominate
        let centred = g.add_scalar(g.scale(image, 2.0), -0.9);
        let stem = g.relu(p.stem.apply(g, centred));
        let c2 = g.relu(p.stages[0].apply(g, stem));
        let c3 = g.relu(p.stages[1].apply(g, c2));
        let c4 = g.relu(p.stages[2].apply(g, c3));
        let c5 = g.relu(p.stages[3].apply(g, c4));

        let l2 = p.laterals[0].apply(g, c2);
        let l3 = p.laterals[1].apply(g, c3);
        let l4 = p.laterals[2].apply(g, c4);
        let l5 = p.laterals[3].apply(g, c5);

        let dims = |v: Var| {
            g.with_value(v, |a| (a.shape()[1], a.shape()[2]))
        };
        let t5 = l5;
        let (h4, w4) = dims(l4);
        let t4 = g.add(l4, g.resize_nearest(t5, h4, w4));
        let (h3, w3) = dims(l3);
        let t3 = g.add(l3, g.resize_nearest(t4, h3, w3));
        let (h2, w2) = dims(l2);
        let t2 = g.add(l2, g.resize_nearest(t3, h2, w2));

        [
            p.smooths[0].apply(g, t2),
            p.smooths[1].apply(g, t3),
            p.smooths[2].apply(g, t4),
            p.smooths[3].apply(g, t5),
        ]
    }

    fn check_min_input(&self, image: Var) -> Result<(usize, usize)> {
        let (c, h, w) = self
            .graph
            .with_value(image, |a| (a.shape()[0], a.shape()[1], a.shape()[2]));
        if c != 3 {
            return Err(LsmError::Data(format!("expected 3 channels, got {c}")));
        }
        if h < self.config.min_input || w < self.config.min_input {
            return Err(LsmError::Data(format!(
                "input {h}x{w} below detector minimum {}",
                self.config.min_input
            )));
        }
        Ok((h, w))
    }

    /// Main-branch pyramid P2..P5 with strides 4, 8, 16, 32.
    ///
    /// `image_hw` is the frame proposals and boxes are expressed in; for the
    /// main branch it equals the input dimensions.
    pub fn extract_pyramid(&self, image: Var, image_hw: (usize, usize)) -> Result<FeaturePyramid> {
        self.check_min_input(image)?;
        let feats = self.backbone_fpn(image);
        let levels = (0..4)
            .map(|i| PyramidLevel {
                name: LevelName::main(i as i32 + 2),
                features: feats[i],
                stride: 4 << i,
            })
            .collect();
        Ok(FeaturePyramid { levels, image_hw })
    }

    /// Mining-branch pyramid over the 0.5x-downsampled image. Level `P_i^d`
    /// matches main `P_{i+1}` spatially; strides are original-frame (8, 16,
    /// 32), so box-to-cell mapping needs no extra scaling. Only levels named
    /// in `config.pim_levels` are exposed.
    pub fn extract_pim_pyramid(
        &self,
        downsampled_image: Var,
        original_hw: (usize, usize),
    ) -> Result<FeaturePyramid> {
        self.check_min_input(downsampled_image)?;
        let feats = self.backbone_fpn(downsampled_image);
        let levels = self
            .config
            .pim_levels
            .iter()
            .map(|&idx| PyramidLevel {
                name: LevelName::downsampled(idx),
                features: feats[(idx - 2) as usize],
                stride: (4 << (idx - 2)) * 2,
            })
            .collect();
        Ok(FeaturePyramid {
            levels,
            image_hw: original_hw,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{DetectorConfig, MiniDetector};
    use crate::nn::Graph;
    use ndarray::Array3;

    fn tiny_config() -> DetectorConfig {
        DetectorConfig {
            backbone_channels: [4, 6, 8, 10, 12],
            fpn_channels: 6,
            ..DetectorConfig::default()
        }
    }

    fn leaf_image(g: &Graph, h: usize, w: usize) -> crate::nn::Var {
        g.leaf(Array3::<f64>::from_shape_fn((3, h, w), |(c, i, j)| {
            ((c + 1) * (i * 7 + j * 3) % 17) as f64 / 17.0
        }).into_dyn())
    }

    #[test]
    fn pyramid_shapes_at_128() {
        let det = MiniDetector::init(tiny_config(), 0).unwrap();
        let g = Graph::no_grad();
        let b = det.bind(&g);
        let pyr = b.extract_pyramid(leaf_image(&g, 128, 128), (128, 128)).unwrap();
        let dims: Vec<(usize, usize)> = pyr
            .levels
            .iter()
            .map(|l| g.with_value(l.features, |a| (a.shape()[1], a.shape()[2])))
            .collect();
        assert_eq!(dims, vec![(32, 32), (16, 16), (8, 8), (4, 4)]);
        let strides: Vec<usize> = pyr.levels.iter().map(|l| l.stride).collect();
        assert_eq!(strides, vec![4, 8, 16, 32]);
    }

    #[test]
    fn downsampled_levels_match_shifted_main_levels() {
        let det = MiniDetector::init(tiny_config(), 0).unwrap();
        let g = Graph::no_grad();
        let b = det.bind(&g);
        // sweep input sizes, including odd ones
        for &side in &[64usize, 65, 96, 100, 127, 128, 200, 256, 333, 512] {
            let main = b
                .extract_pyramid(leaf_image(&g, side, side), (side, side))
                .unwrap();
            let dside = side.div_ceil(2);
            if dside < det.config.min_input {
                continue;
            }
            let pim = b
                .extract_pim_pyramid(leaf_image(&g, dside, dside), (side, side))
                .unwrap();
            for lvl in &pim.levels {
                let main_lvl = main
                    .levels
                    .iter()
                    .find(|m| m.name.index() == lvl.name.index() + 1)
                    .unwrap();
                let (dh, dw) = g.with_value(lvl.features, |a| (a.shape()[1], a.shape()[2]));
                let (mh, mw) = g.with_value(main_lvl.features, |a| (a.shape()[1], a.shape()[2]));
                assert!(
                    (dh as i64 - mh as i64).abs() <= 1 && (dw as i64 - mw as i64).abs() <= 1,
                    "side {side}: {} is {dh}x{dw} but {} is {mh}x{mw}",
                    lvl.name,
                    main_lvl.name
                );
                assert_eq!(lvl.stride, main_lvl.stride);
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let det = MiniDetector::init(tiny_config(), 1).unwrap();
        let g = Graph::no_grad();
        let b = det.bind(&g);
        let p1 = b.extract_pyramid(leaf_image(&g, 64, 64), (64, 64)).unwrap();
        let p2 = b.extract_pyramid(leaf_image(&g, 64, 64), (64, 64)).unwrap();
        for (a, c) in p1.levels.iter().zip(&p2.levels) {
            assert_eq!(g.value(a.features), g.value(c.features));
        }
    }

    #[test]
    fn undersized_input_rejected() {
        let det = MiniDetector::init(tiny_config(), 0).unwrap();
        let g = Graph::no_grad();
        let b = det.bind(&g);
        let err = b.extract_pyramid(leaf_image(&g, 48, 64), (48, 64)).unwrap_err();
        assert!(err.to_string().contains("48x64"));
    }
}
