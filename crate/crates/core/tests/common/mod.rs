//! Scalar loop re-implementations of the model, used as test oracles.
//! Nothing here touches the tape; parameters are read by name.

#![allow(dead_code)]

pub mod checks;

use mqdet_core::config::{GateVariant, ModelConfig};
use mqdet_core::params::ParamStore;
use mqdet_core::raster::Raster;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &ndarray::Array2<f64>) -> Mat {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> ndarray::Array2<f64> {
    let cols = m.first().map_or(0, Vec::len);
    ndarray::Array2::from_shape_fn((m.len(), cols), |(i, j)| m[i][j])
}

pub fn param(store: &ParamStore, name: &str) -> Mat {
    to_mat(store.by_name(name).unwrap_or_else(|| panic!("missing parameter {name}")))
}

pub fn max_abs_diff(a: &ndarray::Array2<f64>, b: &Mat) -> f64 {
    assert_eq!(a.nrows(), b.len());
    let mut worst = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        assert_eq!(a.ncols(), row.len());
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((a[[i, j]] - v).abs());
        }
    }
    worst
}

pub fn linear(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let w = param(store, &format!("{prefix}.weight"));
    let b = param(store, &format!("{prefix}.bias"));
    let (fan_in, fan_out) = (w.len(), w[0].len());
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), fan_in);
            (0..fan_out)
                .map(|o| {
                    let mut acc = b[0][o];
                    for i in 0..fan_in {
                        acc += row[i] * w[i][o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let g = param(store, &format!("{prefix}.gain"));
    let b = param(store, &format!("{prefix}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[0][j] + b[0][j])
                .collect()
        })
        .collect()
}

fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Multi-head attention of `queries` over `kv`. `allowed(i, j)` removes
/// keys; the softmax is taken over admitted keys only.
pub fn attention(
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    queries: &Mat,
    kv: &Mat,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let q = linear(store, &format!("{prefix}.wq"), queries);
    let k = linear(store, &format!("{prefix}.wk"), kv);
    let v = linear(store, &format!("{prefix}.wv"), kv);
    let d = q[0].len();
    let dh = d / heads;
    let mut merged = vec![vec![0.0; d]; queries.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..queries.len() {
            let keys: Vec<usize> = (0..kv.len()).filter(|&j| allowed(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                merged[i][c] = keys.iter().zip(&exps).map(|(&j, e)| e / z * v[j][c]).sum();
            }
        }
    }
    linear(store, &format!("{prefix}.wo"), &merged)
}

pub fn block(store: &ParamStore, prefix: &str, heads: usize, x: &Mat) -> Mat {
    let h = layer_norm(store, &format!("{prefix}.ln1"), x);
    let a = attention(store, &format!("{prefix}.attn"), heads, &h, &h, &|_, _| true);
    let x = add(x, &a);
    let h = layer_norm(store, &format!("{prefix}.ln2"), &x);
    let h = relu(&linear(store, &format!("{prefix}.mlp.fc1"), &h));
    let h = linear(store, &format!("{prefix}.mlp.fc2"), &h);
    add(&x, &h)
}

pub fn encode_image(store: &ParamStore, cfg: &ModelConfig, image: &Raster) -> Mat {
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let mut patches = Vec::new();
    for gy in 0..side {
        for gx in 0..side {
            let mut row = Vec::new();
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        row.push(image.get(gx * p + px, gy * p + py, c) as f64);
                    }
                }
            }
            patches.push(row);
        }
    }
    let mut x = add(&linear(store, "image.patch_embed", &patches), &param(store, "image.pos_embed"));
    for b in 0..cfg.image_layers {
        x = block(store, &format!("image.block{b}"), cfg.heads, &x);
    }
    layer_norm(store, "image.norm", &x)
}

/// Region features and decoded boxes.
pub fn head(store: &ParamStore, cfg: &ModelConfig, grid: &Mat) -> (Mat, Mat) {
    let h = relu(&linear(store, "head.fc1", grid));
    let regions = linear(store, "head.fc2", &h);
    let offsets = linear(store, "head.box", &regions);
    let side = cfg.image_size / cfg.patch_size;
    let p = cfg.patch_size as f64;
    let boxes = offsets
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let cx = ((i % side) as f64 + 0.5) * p;
            let cy = ((i / side) as f64 + 0.5) * p;
            let dist: Vec<f64> = o.iter().map(|v| v.clamp(-4.0, 4.0).exp() * p / 2.0).collect();
            let s = cfg.image_size as f64;
            vec![
                (cx - dist[0]).clamp(0.0, s),
                (cy - dist[1]).clamp(0.0, s),
                (cx + dist[2]).clamp(0.0, s),
                (cy + dist[3]).clamp(0.0, s),
            ]
        })
        .collect();
    (regions, boxes)
}

fn gate(store: &ParamStore, prefix: &str, variant: GateVariant, v_hat: &[f64], t: &[f64]) -> f64 {
    let s = param(store, &format!("{prefix}.scalar"))[0][0];
    let pre = match variant {
        GateVariant::ScalarOnly => 1.0,
        GateVariant::Linear => linear(store, &format!("{prefix}.proj"), &vec![v_hat.to_vec()])[0][0],
        GateVariant::Mlp | GateVariant::MlpConcat => {
            let mut input = v_hat.to_vec();
            if variant == GateVariant::MlpConcat {
                input.extend_from_slice(t);
            }
            let h = relu(&linear(store, &format!("{prefix}.fc1"), &vec![input]));
            let h = relu(&linear(store, &format!("{prefix}.fc2"), &h));
            linear(store, &format!("{prefix}.fc3"), &h)[0][0]
        }
    };
    (s * pre).tanh()
}

/// One GCP layer, one category at a time; no attention mask is needed
/// because each token only ever sees its own query rows.
pub fn gcp_layer(store: &ParamStore, prefix: &str, cfg: &ModelConfig, t: &Mat, queries: &[Mat], image: &Mat) -> Mat {
    let mut out = t.clone();
    for (i, v) in queries.iter().enumerate() {
        if v.is_empty() {
            continue;
        }
        let ctx = attention(store, &format!("{prefix}.xmha_vi"), cfg.heads, v, image, &|_, _| true);
        let v_bar = if cfg.query_residual { add(v, &ctx) } else { ctx };
        let ti = vec![t[i].clone()];
        let v_hat = attention(store, &format!("{prefix}.xmha_tv"), cfg.heads, &ti, &v_bar, &|_, _| true);
        let gv = gate(store, &format!("{prefix}.gate"), cfg.gate_variant, &v_hat[0], &t[i]);
        for j in 0..t[i].len() {
            out[i][j] = t[i][j] + gv * v_hat[0][j];
        }
    }
    out
}

pub fn encode_text(
    store: &ParamStore,
    cfg: &ModelConfig,
    names: &[String],
    masked: &[bool],
    gcp: Option<(&[Mat], &Mat)>,
) -> Mat {
    let table = param(store, "text.token_embed");
    let mask = param(store, "gcp.mask_token");
    let mut x: Mat = names
        .iter()
        .zip(masked)
        .map(|(n, &m)| {
            if m {
                mask[0].clone()
            } else {
                table[cfg.vocab.iter().position(|v| v == n).unwrap()].clone()
            }
        })
        .collect();
    for b in 0..cfg.text_layers {
        x = block(store, &format!("text.block{b}"), cfg.heads, &x);
        if let Some((queries, image)) = gcp {
            if cfg.gcp_layers.contains(&b) {
                x = gcp_layer(store, &format!("gcp.layer{b}"), cfg, &x, queries, image);
            }
        }
    }
    x
}

pub fn dot_t(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|r| b.iter().map(|t| r.iter().zip(t).map(|(x, y)| x * y).sum()).collect())
        .collect()
}

/// AP by exhaustive enumeration: every score-ordered prefix is matched from
/// scratch, and the interpolated precision is integrated over the distinct
/// recall levels reached.
pub fn ap_bruteforce(dets: &[(u64, f64, [f64; 4])], gts: &[(u64, [f64; 4])], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap());
    let iou = |a: &[f64; 4], b: &[f64; 4]| {
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    };
    let mut curve = Vec::new();
    for k in 1..=order.len() {
        let mut taken = vec![false; gts.len()];
        let mut tp = 0;
        for &di in &order[..k] {
            let (img, _, b) = dets[di];
            let mut best = None;
            let mut best_iou = thr;
            for (gi, (gimg, gb)) in gts.iter().enumerate() {
                let v = iou(&b, gb);
                if !taken[gi] && *gimg == img && v >= best_iou && best.is_none_or(|_| v > best_iou) {
                    best = Some(gi);
                    best_iou = v;
                }
            }
            if let Some(gi) = best {
                taken[gi] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
    }
    let mut levels: Vec<f64> = curve.iter().map(|c| c.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = curve
            .iter()
            .filter(|c| c.0 >= r)
            .map(|c| c.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

/// Textbook AdamW on flat vectors: decoupled decay, then the bias-corrected
/// Adam step.
pub fn adamw_reference(
    p: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    grad: &[f64],
    t: i32,
    lr: f64,
    (b1, b2, eps, wd): (f64, f64, f64, f64),
) {
    for i in 0..p.len() {
        p[i] -= lr * wd * p[i];
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mh = m[i] / (1.0 - b1.powi(t));
        let vh = v[i] / (1.0 - b2.powi(t));
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

pub fn tiny_config(d: usize, heads: usize, vocab: &[&str]) -> ModelConfig {
    ModelConfig {
        d,
        heads,
        image_size: 16,
        patch_size: 8,
        image_layers: 1,
        text_layers: 2,
        gcp_layers: vec![0, 1],
        vocab: vocab.iter().map(|s| s.to_string()).collect(),
        ..ModelConfig::default()
    }
}

/// Deterministic pseudo-random image.
pub fn noise_image(size: usize, seed: u64) -> Raster {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut img = Raster::filled(size, size, 0.0);
    for v in &mut img.data {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *v = ((state >> 33) as f64 / (1u64 << 31) as f64) as f32;
    }
    img
}

/// Deterministic pseudo-random `rows x cols` matrix in `[-1, 1)`.
pub fn noise_matrix(rows: usize, cols: usize, seed: u64) -> ndarray::Array2<f64> {
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    ndarray::Array2::from_shape_fn((rows, cols), |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}
