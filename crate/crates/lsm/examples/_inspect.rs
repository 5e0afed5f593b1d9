use lsm::detector::Classifier;
use lsm::nn::Graph;

fn main() {
    let (state, _, _) = lsm::trainer::load_run_checkpoint(std::path::Path::new(
        "/tmp/lsmtest/sup1/ckpt_final.ckpt",
    ))
    .unwrap();
    let det = &state.teacher;
    let data = lsm::data::generate_shapes_dataset(4, 128, 7).unwrap();
    for s in &data {
        let img = s.image.mapv(|v| v as f64);
        let g = Graph::no_grad();
        let b = det.bind(&g);
        let iv = g.leaf(img.clone().into_dyn());
        let pyr = b.extract_pyramid(iv, (128, 128)).unwrap();
        // feature variance per level
        print!("img {}: feat std ", s.id);
        for l in &pyr.levels {
            let v = g.value(l.features);
            let mean = v.sum() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            print!("{}={:.3} ", l.name, var.sqrt());
        }
        println!();
        let maps = b.rpn_forward(&pyr);
        let props = b.propose(&maps, &pyr, 64);
        // coverage: best proposal IoU per GT
        for gt in &s.annotations {
            let best = props
                .iter()
                .map(|p| lsm::geometry::iou(&p.rect, gt))
                .fold(0.0f64, f64::max);
            println!("   gt cat {} area {:6.0}: best proposal IoU {:.2}", gt.category, gt.area(), best);
        }
        let top: Vec<String> = props.iter().take(5).map(|p| format!("({:.0},{:.0},{:.0},{:.0}) o={:.2} {}", p.rect.x, p.rect.y, p.rect.w, p.rect.h, p.objectness, p.source_level)).collect();
        println!("   top5 props: {}", top.join(" "));
        // classify the GT boxes themselves
        let gt_props: Vec<lsm::detector::Proposal> = s.annotations.iter().map(|t| {
            lsm::detector::Proposal { rect: lsm::geometry::BBox::new(t.x, t.y, t.w, t.h, 0).unwrap(), objectness: 1.0, source_level: lsm::detector::LevelName::P2 }
        }).collect();
        let feats = b.roi_features(&pyr, &gt_props, 0).unwrap();
        let out = b.detect(feats, Classifier::Main);
        let lp = g.log_softmax_rows(out.class_logits);
        let probs = g.value(g.exp(lp));
        for (i, gt) in s.annotations.iter().enumerate() {
            let row: Vec<String> = (0..4).map(|c| format!("{:.2}", probs[[i, c]])).collect();
            println!("   gt cat {} on-box class probs [c0,c1,c2,bg]: {}", gt.category, row.join(","));
        }
    }
}
