use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ImageFeatures, Model, RegionOutputs};
use crate::autograd::sigmoid;
use crate::error::{Error, Result};
use crate::gcp::QueryBatch;
use crate::nn::Graph;
use crate::raster::Raster;

/// One category of a prompt: its text name and optional vision queries.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalQuery {
    pub text: String,
    pub vision: Option<Array2<f64>>,
}

impl MultiModalQuery {
    pub fn text(name: impl Into<String>) -> Self {
        Self {
            text: name.into(),
            vision: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Index into the query list.
    pub category: usize,
    pub score: f64,
    pub bbox: [f64; 4],
    pub region: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Upper bound on returned detections per image.
    pub max_detections: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let ua = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0) + (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
        - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

fn by_score_desc(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.category.cmp(&b.category))
        .then(a.region.cmp(&b.region))
}

/// Greedy NMS within each category: a box is dropped when its IoU with an
/// already kept box of the same category exceeds `iou`. Output is sorted by
/// score, descending.
pub fn nms_per_class(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(by_score_desc);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.category == d.category && box_iou(&k.bbox, &d.bbox) > iou);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Thresholded, NMS-filtered detections from a region x category logit
/// matrix and per-region boxes.
pub fn detect_from_logits(logits: &Array2<f64>, boxes: &Array2<f64>, opts: &DetectOptions) -> Vec<Detection> {
    let mut dets = Vec::new();
    for ((r, c), &l) in logits.indexed_iter() {
        let score = sigmoid(l);
        if score >= opts.score_threshold {
            let b = boxes.row(r);
            dets.push(Detection {
                category: c,
                score,
                bbox: [b[0], b[1], b[2], b[3]],
                region: r,
            });
        }
    }
    let mut kept = nms_per_class(dets, opts.nms_iou);
    kept.truncate(opts.max_detections);
    kept
}

/// Region x category logits for precomputed image features.
pub fn scene_scores(
    model: &Model,
    image: &ImageFeatures,
    regions: &RegionOutputs,
    queries: &[MultiModalQuery],
    mask_flags: &[bool],
) -> Result<Array2<f64>> {
    if queries.is_empty() {
        return Err(Error::Argument("empty query list".into()));
    }
    let names: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
    let mut g = Graph::new(&model.params, None);
    let has_vision = queries.iter().any(|q| q.vision.as_ref().is_some_and(|v| v.nrows() > 0));
    let tokens = if has_vision {
        let sets: Vec<Array2<f64>> = queries
            .iter()
            .map(|q| q.vision.clone().unwrap_or_else(|| Array2::zeros((0, model.config.d))))
            .collect();
        let batch = QueryBatch::new(&mut g, &sets, model.config.d)?;
        let grid = g.constant(image.grid.clone());
        model.text_graph(&mut g, &names, mask_flags, Some((&batch, grid)))?
    } else {
        model.text_graph(&mut g, &names, mask_flags, None)?
    };
    let t = g.value(tokens);
    Ok(regions.region_features.dot(&t.t()))
}

/// End-to-end inference on one image.
pub fn detect(
    model: &Model,
    image: &Raster,
    queries: &[MultiModalQuery],
    mask_flags: &[bool],
    opts: &DetectOptions,
) -> Result<Vec<Detection>> {
    if queries.is_empty() {
        return Err(Error::Argument("empty query list".into()));
    }
    let features = model.encode_image(image)?;
    let regions = model.detection_head(&features)?;
    let logits = scene_scores(model, &features, &regions, queries, mask_flags)?;
    Ok(detect_from_logits(&logits, &regions.boxes, opts))
}
