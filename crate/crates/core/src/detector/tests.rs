use ndarray::{array, Array2};

use super::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        image_size: 16,
        patch_size: 8,
        text_layers: 2,
        gcp_layers: vec![1],
        vocab: vec!["circle".into(), "square".into()],
        ..Default::default()
    }
}

fn zero_all(model: &mut Model) {
    let ids: Vec<_> = model.params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        model.params.get_mut(id).fill(0.0);
    }
}

fn noise_image(size: usize, seed: u64) -> Raster {
    let mut r = Raster::filled(size, size, 0.0);
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    for v in &mut r.data {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *v = ((state >> 40) as f32) / (1u64 << 24) as f32;
    }
    r
}

#[test]
fn zero_encoder_on_zero_image_gives_identical_rows() {
    let mut model = Model::new(ModelConfig::default(), 0).unwrap();
    zero_all(&mut model);
    let f = model.encode_image(&Raster::filled(64, 64, 0.0)).unwrap();
    assert_eq!(f.grid.dim(), (64, 64));
    let first = f.grid.row(0).to_owned();
    assert!(f.grid.outer_iter().all(|r| r == first));
}

#[test]
fn image_encoding_is_deterministic() {
    let model = Model::new(tiny_config(), 5).unwrap();
    let img = noise_image(16, 1);
    let a = model.encode_image(&img).unwrap();
    let b = model.encode_image(&img).unwrap();
    assert_eq!(a, b);
    assert!(a.grid.iter().all(|x| x.is_finite()));
    let again = Model::new(tiny_config(), 5).unwrap();
    assert_eq!(again.encode_image(&img).unwrap(), a);
}

#[test]
fn image_dimension_mismatch_is_config_error() {
    let model = Model::new(tiny_config(), 0).unwrap();
    let err = model.encode_image(&Raster::filled(24, 16, 0.0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn text_errors() {
    let model = Model::new(tiny_config(), 0).unwrap();
    let err = model.encode_text(&["hexagon".into()], &[false], None).unwrap_err();
    assert!(matches!(err, Error::Vocabulary(n) if n == "hexagon"));
    let err = model.encode_text(&["circle".into()], &[false, true], None).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn no_gcp_text_is_repeatable() {
    let model = Model::new(tiny_config(), 3).unwrap();
    let names = vec!["square".to_string(), "circle".to_string()];
    let a = model.encode_text(&names, &[false, false], None).unwrap();
    let b = model.encode_text(&names, &[false, false], None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_gates_make_gcp_path_bitwise_identical() {
    let model = Model::new(tiny_config(), 3).unwrap();
    let names = vec!["square".to_string(), "circle".to_string()];
    let image = model.encode_image(&noise_image(16, 2)).unwrap();
    let queries = vec![Array2::from_elem((3, 8), 0.5), Array2::from_elem((1, 8), -2.0)];
    let plain = model.encode_text(&names, &[true, false], None).unwrap();
    let with = model
        .encode_text(
            &names,
            &[true, false],
            Some(GcpInputs {
                queries: &queries,
                image: &image,
            }),
        )
        .unwrap();
    assert_eq!(plain, with);
}

#[test]
fn logits_examples() {
    let r = RegionOutputs {
        region_features: array![[1.0, 0.0], [0.0, 1.0]],
        boxes: Array2::zeros((2, 4)),
    };
    let t = TokenFeatures {
        tokens: array![[1.0, 0.0], [0.0, 1.0]],
        mask_flags: vec![false; 2],
    };
    assert_eq!(region_word_logits(&r, &t).unwrap().logits, Array2::<f64>::eye(2));
    let zeros = TokenFeatures {
        tokens: Array2::zeros((3, 2)),
        mask_flags: vec![false; 3],
    };
    assert!(region_word_logits(&r, &zeros).unwrap().logits.iter().all(|&x| x == 0.0));
    let r = RegionOutputs {
        region_features: array![[1.0, 2.0], [0.0, 1.0]],
        boxes: Array2::zeros((2, 4)),
    };
    let t = TokenFeatures {
        tokens: array![[1.0, 0.0], [1.0, 1.0]],
        mask_flags: vec![false; 2],
    };
    assert_eq!(region_word_logits(&r, &t).unwrap().logits, array![[1.0, 3.0], [0.0, 1.0]]);
    let bad = TokenFeatures {
        tokens: Array2::zeros((1, 3)),
        mask_flags: vec![false],
    };
    assert!(matches!(region_word_logits(&r, &bad), Err(Error::Shape(_))));
}

#[test]
fn zero_offsets_decode_to_default_cell_boxes() {
    let mut model = Model::new(ModelConfig::default(), 0).unwrap();
    let head = model.arch.head.clone();
    model.params.get_mut(head.box_reg.weight).fill(0.0);
    model.params.get_mut(head.box_reg.bias).fill(0.0);
    let feats = ImageFeatures {
        grid: Array2::from_elem((64, 64), 0.3),
    };
    let out = model.detection_head(&feats).unwrap();
    for (i, (cx, cy)) in model.grid_centers().into_iter().enumerate() {
        let b = out.boxes.row(i);
        assert_eq!([b[0], b[1], b[2], b[3]], [cx - 4.0, cy - 4.0, cx + 4.0, cy + 4.0]);
    }
}

#[test]
fn boxes_are_clipped_to_the_image() {
    let mut model = Model::new(ModelConfig::default(), 0).unwrap();
    let head = model.arch.head.clone();
    model.params.get_mut(head.box_reg.weight).fill(0.0);
    *model.params.get_mut(head.box_reg.bias) = array![[0.0, 0.0, 3.0, 0.0]];
    let feats = ImageFeatures {
        grid: Array2::zeros((64, 64)),
    };
    let out = model.detection_head(&feats).unwrap();
    // last column: cx = 60, x2 = 60 + 4 e^3 > 64
    assert_eq!(out.boxes[[7, 2]], 64.0);
    for b in out.boxes.outer_iter() {
        assert!(b[0] <= b[2] && b[1] <= b[3]);
        assert!(b.iter().all(|&v| (0.0..=64.0).contains(&v)));
    }
}

#[test]
fn assignment_examples() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let whole = [GtInstance {
        category: 1,
        bbox: [0.0, 0.0, 64.0, 64.0],
    }];
    let a = assign_targets(&whole, &model);
    assert!(a.matched.iter().all(|m| *m == Some(0)));
    let a = assign_targets(&[], &model);
    assert!(a.matched.iter().all(|m| m.is_none()));

    // outer covers cells (0..3, 0..3); inner covers cell (1,1) only
    let nested = [
        GtInstance {
            category: 0,
            bbox: [0.0, 0.0, 24.0, 24.0],
        },
        GtInstance {
            category: 1,
            bbox: [10.0, 10.0, 14.0, 14.0],
        },
    ];
    let a = assign_targets(&nested, &model);
    for gy in 0..8 {
        for gx in 0..8 {
            let r = gy * 8 + gx;
            let expect = if gx == 1 && gy == 1 {
                Some(1)
            } else if gx < 3 && gy < 3 {
                Some(0)
            } else {
                None
            };
            assert_eq!(a.matched[r], expect, "cell ({gx},{gy})");
        }
    }
    // identical boxes: lowest index wins
    let tie = [
        GtInstance {
            category: 0,
            bbox: [0.0, 0.0, 8.0, 8.0],
        },
        GtInstance {
            category: 1,
            bbox: [0.0, 0.0, 8.0, 8.0],
        },
    ];
    assert_eq!(assign_targets(&tie, &model).matched[0], Some(0));
}

fn loss_on(logits: Array2<f64>, categories: Vec<Option<usize>>) -> f64 {
    let store = crate::params::ParamStore::new();
    let mut g = Graph::new(&store, None);
    let n = categories.len();
    let a = Assignment {
        matched: categories.clone(),
        categories,
        boxes: vec![None; n],
    };
    let l = g.constant(logits);
    let loss = grounding_loss(&mut g, l, &a);
    g.tape.scalar(loss)
}

#[test]
fn grounding_loss_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((loss_on(Array2::zeros((4, 3)), vec![Some(0), None, Some(2), None]) - ln2).abs() < 1e-15);
    let big = array![[60.0, -60.0], [-60.0, -60.0]];
    assert!(loss_on(big, vec![Some(0), None]) < 1e-20);
    // hand oracle: cells (2,1) (-1,0) (0,0) (1,0)
    let bce = |x: f64, y: f64| -(y * (1.0 / (1.0 + (-x).exp())).ln() + (1.0 - y) * (1.0 - 1.0 / (1.0 + (-x).exp())).ln());
    let expect = (bce(2.0, 1.0) + bce(-1.0, 0.0) + bce(0.0, 0.0) + bce(1.0, 0.0)) / 4.0;
    let got = loss_on(array![[2.0, -1.0], [0.0, 1.0]], vec![Some(0), None]);
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn localization_loss_examples() {
    let store = crate::params::ParamStore::new();
    let gt = [10.0, 10.0, 20.0, 20.0];
    let run = |pred: Array2<f64>, boxes: Vec<Option<[f64; 4]>>| {
        let mut g = Graph::new(&store, None);
        let a = Assignment {
            matched: boxes.iter().map(|b| b.map(|_| 0)).collect(),
            categories: boxes.iter().map(|b| b.map(|_| 0)).collect(),
            boxes,
        };
        let p = g.constant(pred);
        let l = localization_loss(&mut g, p, &a, 8);
        g.tape.scalar(l)
    };
    assert_eq!(run(Array2::zeros((2, 4)), vec![None, None]), 0.0);
    assert_eq!(run(array![[10.0, 10.0, 20.0, 20.0], [0.0; 4]], vec![Some(gt), None]), 0.0);
    let got = run(array![[11.0, 11.0, 21.0, 21.0], [0.0; 4]], vec![Some(gt), None]);
    assert!((got - 0.125).abs() < 1e-15);
}

#[test]
fn nms_keeps_the_higher_duplicate() {
    let b = [0.0, 0.0, 10.0, 10.0];
    let dets = vec![
        Detection {
            category: 0,
            score: 0.8,
            bbox: b,
            region: 1,
        },
        Detection {
            category: 0,
            score: 0.9,
            bbox: b,
            region: 0,
        },
    ];
    let kept = nms_per_class(dets, 0.5);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);
}

#[test]
fn orthogonal_queries_score_one_half_and_are_thresholded_away() {
    let mut model = Model::new(tiny_config(), 0).unwrap();
    // region features identically zero
    let head = model.arch.head.clone();
    model.params.get_mut(head.fc2.weight).fill(0.0);
    model.params.get_mut(head.fc2.bias).fill(0.0);
    let img = noise_image(16, 9);
    let queries = [MultiModalQuery::text("circle"), MultiModalQuery::text("square")];
    let opts = DetectOptions {
        score_threshold: 0.6,
        ..Default::default()
    };
    assert!(detect(&model, &img, &queries, &[false, false], &opts).unwrap().is_empty());
    let low = DetectOptions {
        score_threshold: 0.5,
        nms_iou: 1.0,
        max_detections: 1000,
    };
    let all = detect(&model, &img, &queries, &[false, false], &low).unwrap();
    assert_eq!(all.len(), 8);
    assert!(all.iter().all(|d| d.score == 0.5));
    assert!(matches!(detect(&model, &img, &[], &[], &opts), Err(Error::Argument(_))));
}

#[test]
fn checkpoint_round_trip() {
    let mut model = Model::new(tiny_config(), 4).unwrap();
    model.round_to_f32();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = Model::load(dir.path()).unwrap();
    assert_eq!(back.params, model.params);
    assert_eq!(back.config, model.config);
    assert!(back.params.by_name("text.block1.attn.wq.weight").is_some());
    assert!(back.params.by_name("gcp.layer1.gate.scalar").is_some());
}

#[test]
fn checkpoint_version_mismatch_is_format_error() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
    assert!(matches!(Model::load(dir.path()), Err(Error::Format(_))));
}

#[test]
fn reset_gcp_only_touches_gcp_params() {
    let mut model = Model::new(tiny_config(), 4).unwrap();
    let before = model.params.clone();
    let gid = model.arch.gcp.layers[0].gate.scalar;
    *model.params.get_mut(gid) = array![[0.7]];
    model.reset_gcp(11);
    assert_eq!(model.params.get(gid)[[0, 0]], 0.0);
    for (id, name, v) in before.iter() {
        if !name.starts_with("gcp.") {
            assert_eq!(model.params.get(id), v);
        }
    }
}

#[test]
fn gcp_rebuild_keeps_the_detector() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let cfg = ModelConfig {
        gate_variant: crate::config::GateVariant::Linear,
        gcp_layers: vec![1],
        ..model.config.clone()
    };
    let rebuilt = model.with_gcp_config(cfg, 2).unwrap();
    assert!(rebuilt.params.by_name("gcp.layer1.gate.proj.weight").is_some());
    assert!(rebuilt.params.by_name("gcp.layer0.gate.scalar").is_none());
    for (_, name, v) in model.params.iter().filter(|(_, n, _)| !n.starts_with("gcp.")) {
        assert_eq!(rebuilt.params.by_name(name).unwrap(), v);
    }
    let wider = ModelConfig {
        d: model.config.d * 2,
        ..model.config.clone()
    };
    assert!(matches!(model.with_gcp_config(wider, 2), Err(Error::Config(_))));
}
