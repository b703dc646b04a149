//! Sweeps comparing library routines with the loop oracles. Each returns
//! the worst absolute deviation it saw.

use super::*;
use mqdet_core::config::GateVariant;
use mqdet_core::detector::Model;
use mqdet_core::eval::{average_precision, GtBox, ScoredBox};
use mqdet_core::gcp::{build_class_attention_mask, cross_attention, gcp_forward, QueryBatch};
use mqdet_core::modulation::{AdamW, AdamWSettings};
use mqdet_core::nn::{Attention, Graph};
use mqdet_core::params::{ParamId, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GATE_VARIANTS: [GateVariant; 4] =
    [GateVariant::Mlp, GateVariant::ScalarOnly, GateVariant::Linear, GateVariant::MlpConcat];

pub fn set_gate_scalars(model: &mut Model, value: f64) {
    let ids: Vec<ParamId> = model.arch.gcp.layers.iter().map(|l| l.gate.scalar).collect();
    for id in ids {
        model.params.get_mut(id)[[0, 0]] = value;
    }
}

/// Small query layouts covering single, multiple and uneven blocks.
pub fn layouts() -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in 1..=3 {
        out.push(vec![a]);
        for b in 1..=3 {
            out.push(vec![a, b]);
            for c in 1..=2 {
                out.push(vec![a, b, c]);
            }
        }
    }
    out
}

/// Masked and unmasked cross-attention, `d` in 1..=4, one head.
pub fn cross_attention_max_err() -> f64 {
    let mut worst = 0.0f64;
    for d in 1..=4 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
        let attn = Attention::new(&mut store, &mut rng, "x", d, 1);
        for (li, counts) in layouts().into_iter().enumerate() {
            let total: usize = counts.iter().sum();
            let t = noise_matrix(counts.len(), d, 100 + li as u64);
            let v = noise_matrix(total, d, 200 + li as u64);
            let mask = build_class_attention_mask(&counts);
            let mut starts = Vec::new();
            let mut acc = 0;
            for &c in &counts {
                starts.push(acc);
                acc += c;
            }
            let owner = |i: usize, j: usize| j >= starts[i] && j < starts[i] + counts[i];

            let mut g = Graph::new(&store, None);
            let (tv, vv) = (g.constant(t.clone()), g.constant(v.clone()));
            let out = cross_attention(&mut g, &attn, tv, vv, Some(&mask)).unwrap();
            let want = attention(&store, "x", 1, &to_mat(&t), &to_mat(&v), &owner);
            worst = worst.max(max_abs_diff(g.value(out), &want));

            let mut g = Graph::new(&store, None);
            let (tv, vv) = (g.constant(t.clone()), g.constant(v.clone()));
            let out = cross_attention(&mut g, &attn, tv, vv, None).unwrap();
            let want = attention(&store, "x", 1, &to_mat(&t), &to_mat(&v), &|_, _| true);
            worst = worst.max(max_abs_diff(g.value(out), &want));
        }
    }
    worst
}

/// Every gate variant, with and without the query residual, `d` in {2, 4},
/// one head, layouts including a category without queries.
pub fn gcp_forward_max_err() -> f64 {
    let mut worst = 0.0f64;
    for d in [2, 4] {
        for variant in GATE_VARIANTS {
            for residual in [true, false] {
                let mut cfg = tiny_config(d, 1, &["a"]);
                cfg.gate_variant = variant;
                cfg.query_residual = residual;
                let mut model = Model::new(cfg.clone(), d as u64).unwrap();
                set_gate_scalars(&mut model, -0.6);
                let layer = &model.arch.gcp.layers[0];
                for (li, mut counts) in layouts().into_iter().enumerate() {
                    counts.insert(li % (counts.len() + 1), 0);
                    let t = noise_matrix(counts.len(), d, 7 + li as u64);
                    let image = noise_matrix(4, d, 11 + li as u64);
                    let queries: Vec<_> = counts
                        .iter()
                        .enumerate()
                        .map(|(i, &c)| noise_matrix(c, d, 1000 * li as u64 + i as u64))
                        .collect();
                    let mut g = Graph::new(&model.params, None);
                    let tv = g.constant(t.clone());
                    let iv = g.constant(image.clone());
                    let batch = QueryBatch::new(&mut g, &queries, d).unwrap();
                    let out = gcp_forward(&mut g, layer, tv, &batch, iv).unwrap();
                    let qm: Vec<Mat> = queries.iter().map(to_mat).collect();
                    let want = gcp_layer(&model.params, "gcp.layer0", &cfg, &to_mat(&t), &qm, &to_mat(&image));
                    worst = worst.max(max_abs_diff(g.value(out), &want));
                }
            }
        }
    }
    worst
}

const GT_POOL: [[f64; 4]; 4] = [
    [0.0, 0.0, 10.0, 10.0],
    [20.0, 0.0, 30.0, 10.0],
    [0.0, 20.0, 10.0, 30.0],
    [40.0, 40.0, 50.0, 50.0],
];

/// Exact, shifted (IoU 0.67), barely overlapping (IoU 0.14) or far away.
fn box_for(kind: usize, gt: [f64; 4]) -> [f64; 4] {
    match kind {
        0 => gt,
        1 => [gt[0] + 2.0, gt[1], gt[2] + 2.0, gt[3]],
        2 => [gt[0] + 5.0, gt[1] + 5.0, gt[2] + 5.0, gt[3] + 5.0],
        _ => [90.0, 90.0, 99.0, 99.0],
    }
}

fn ap_err(dets: &[(u64, f64, [f64; 4])], gts: &[(u64, [f64; 4])]) -> f64 {
    let sd: Vec<ScoredBox> = dets
        .iter()
        .map(|&(image, score, bbox)| ScoredBox { image, category: 0, score, bbox })
        .collect();
    let sg: Vec<GtBox> = gts.iter().map(|&(image, bbox)| GtBox { image, category: 0, bbox }).collect();
    match (average_precision(&sd, &sg, 0.5), ap_bruteforce(dets, gts, 0.5)) {
        (Some(a), Some(b)) => (a - b).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Every arrangement of up to three detections (target, box kind, tied or
/// distinct score) against zero to four ground truths.
pub fn ap_exhaustive_max_err() -> f64 {
    let scores = [0.9, 0.5, 0.5, 0.1];
    let mut worst = 0.0f64;
    for n_gt in 0..=4 {
        let gts: Vec<(u64, [f64; 4])> = GT_POOL[..n_gt].iter().map(|&b| (0, b)).collect();
        let targets = n_gt.max(1);
        let choices: Vec<(usize, usize, usize)> = (0..targets)
            .flat_map(|t| (0..4).flat_map(move |k| (0..4).map(move |s| (t, k, s))))
            .collect();
        for n_det in 0..=3u32 {
            for code in 0..choices.len().pow(n_det) {
                let mut c = code;
                let dets: Vec<(u64, f64, [f64; 4])> = (0..n_det)
                    .map(|_| {
                        let (t, k, s) = choices[c % choices.len()];
                        c /= choices.len();
                        (0, scores[s], box_for(k, GT_POOL[t]))
                    })
                    .collect();
                worst = worst.max(ap_err(&dets, &gts));
            }
        }
    }
    worst
}

/// Every sequence of up to six detections, each an exact hit on one of
/// the four pool boxes, a shifted hit on the first, or a miss, under a
/// strictly decreasing and a tied score pattern.
pub fn ap_exhaustive_six_max_err() -> f64 {
    let patterns = [[0.9, 0.8, 0.7, 0.6, 0.5, 0.4], [0.9, 0.5, 0.5, 0.9, 0.1, 0.5]];
    let mut worst = 0.0f64;
    for n_gt in 0..=4 {
        let gts: Vec<(u64, [f64; 4])> = GT_POOL[..n_gt].iter().map(|&b| (0, b)).collect();
        for n_det in 0..=6u32 {
            for code in 0..6usize.pow(n_det) {
                for scores in &patterns {
                    let mut c = code;
                    let dets: Vec<(u64, f64, [f64; 4])> = (0..n_det as usize)
                        .map(|i| {
                            let choice = c % 6;
                            c /= 6;
                            let bbox = match choice {
                                0..=3 => GT_POOL[choice],
                                4 => box_for(1, GT_POOL[0]),
                                _ => box_for(3, GT_POOL[0]),
                            };
                            (0, scores[i], bbox)
                        })
                        .collect();
                    worst = worst.max(ap_err(&dets, &gts));
                }
            }
        }
    }
    worst
}

/// Random instances with up to six detections over two images.
pub fn ap_random_max_err(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n_gt = rng.gen_range(0..=4);
        let gts: Vec<(u64, [f64; 4])> = (0..n_gt).map(|i| (rng.gen_range(0..2), GT_POOL[i])).collect();
        let n_det = rng.gen_range(0..=6);
        let dets: Vec<(u64, f64, [f64; 4])> = (0..n_det)
            .map(|_| {
                let t = GT_POOL[rng.gen_range(0..4)];
                let s = [0.9, 0.7, 0.7, 0.3, 0.2][rng.gen_range(0..5)];
                (rng.gen_range(0..2), s, box_for(rng.gen_range(0..4), t))
            })
            .collect();
        worst = worst.max(ap_err(&dets, &gts));
    }
    worst
}

/// Four AdamW steps on two tensors with different learning rates, plus a
/// tensor without one that must stay put.
pub fn adamw_max_err() -> f64 {
    let mut store = ParamStore::new();
    let a = store.insert("gcp.layer0.gate.scalar", ndarray::arr2(&[[0.25]]));
    let b = store.insert("gcp.layer0.xmha_tv.wq.weight", noise_matrix(2, 3, 1));
    let c = store.insert("frozen", noise_matrix(1, 2, 2));
    let settings = AdamWSettings { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 };
    let mut opt = AdamW::new(settings, vec![Some(5e-3), Some(1e-3), None]);
    let hyper = (0.9, 0.999, 1e-8, 1e-4);

    let mut ra: Vec<f64> = store.get(a).iter().copied().collect();
    let mut rb: Vec<f64> = store.get(b).iter().copied().collect();
    let (mut ma, mut va) = (vec![0.0; 1], vec![0.0; 1]);
    let (mut mb, mut vb) = (vec![0.0; 6], vec![0.0; 6]);
    let frozen = store.get(c).clone();
    let mut worst = 0.0f64;
    for step in 1..=4 {
        let ga = noise_matrix(1, 1, 10 + step as u64);
        let gb = noise_matrix(2, 3, 20 + step as u64);
        let gc = noise_matrix(1, 2, 30 + step as u64);
        opt.step(&mut store, &[Some(ga.clone()), Some(gb.clone()), Some(gc)], 1.0);
        adamw_reference(&mut ra, &mut ma, &mut va, ga.as_slice().unwrap(), step, 5e-3, hyper);
        adamw_reference(&mut rb, &mut mb, &mut vb, gb.as_slice().unwrap(), step, 1e-3, hyper);
        for (x, y) in store.get(a).iter().zip(&ra).chain(store.get(b).iter().zip(&rb)) {
            worst = worst.max((x - y).abs());
        }
    }
    if store.get(c) != frozen {
        return f64::INFINITY;
    }
    worst
}
