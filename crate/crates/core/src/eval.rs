//! Average precision, finetuning-free evaluation and the query-quality
//! harness.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{box_iou, detect_from_logits, scene_scores, DetectOptions, Model, MultiModalQuery};
use crate::error::{Error, Result};
use crate::modulation::entry_prompt;
use crate::query_bank::{pool_query, VisionQueryBank};
use crate::synth::{SceneSample, VocabSpec};

pub const DEFAULT_IOU: f64 = 0.5;
pub const DEFAULT_EVAL_SEED: u64 = 1234;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: u64,
    pub category: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image: u64,
    pub category: usize,
    pub bbox: [f64; 4],
}

/// All-point interpolated AP for one category. Detections are matched in
/// descending score order (stable for ties) to the unmatched ground truth
/// of the same image with the highest IoU, if that IoU reaches
/// `iou_threshold`. `None` without ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(dets.len());
    for (rank, &di) in order.iter().enumerate() {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.image != d.image {
                continue;
            }
            let iou = box_iou(&d.bbox, &g.bbox);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    // Precision envelope, then area under the step function over recall.
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub per_category: Vec<Option<f64>>,
    /// Mean over categories with at least one ground-truth box.
    pub mean: Option<f64>,
}

pub fn compute_ap(dets: &[ScoredBox], gts: &[GtBox], num_categories: usize, iou_threshold: f64) -> ApSummary {
    let per_category: Vec<Option<f64>> = (0..num_categories)
        .map(|c| {
            let d: Vec<ScoredBox> = dets.iter().filter(|x| x.category == c).copied().collect();
            let g: Vec<GtBox> = gts.iter().filter(|x| x.category == c).copied().collect();
            average_precision(&d, &g, iou_threshold)
        })
        .collect();
    ApSummary {
        mean: mean_of(per_category.iter().flatten().copied()),
        per_category,
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Text,
    Vision,
    Multimodal,
}

impl std::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(QueryMode::Text),
            "vision" => Ok(QueryMode::Vision),
            "multimodal" => Ok(QueryMode::Multimodal),
            other => Err(Error::Argument(format!("unknown query mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for QueryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QueryMode::Text => "text",
            QueryMode::Vision => "vision",
            QueryMode::Multimodal => "multimodal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: String,
    pub text_name: String,
    pub num_gt: usize,
    pub ap: Option<f64>,
    pub novel: bool,
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub query_mode: QueryMode,
    pub split: String,
    pub k: usize,
    pub eval_seed: u64,
    pub num_scenes: usize,
    pub per_category: Vec<CategoryAp>,
    pub mean_ap: Option<f64>,
    pub ambiguous_mean_ap: Option<f64>,
    pub base_mean_ap: Option<f64>,
    pub novel_mean_ap: Option<f64>,
    /// Categories that had no vision queries in a vision-using mode.
    pub fallbacks: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub k: usize,
    pub seed: u64,
    pub iou_threshold: f64,
    pub detect: DetectOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 5,
            seed: DEFAULT_EVAL_SEED,
            iou_threshold: DEFAULT_IOU,
            detect: DetectOptions {
                score_threshold: 0.0,
                ..DetectOptions::default()
            },
        }
    }
}

/// Inference over `scenes` with one prompt entry per vocabulary entry and
/// one fixed set of `k` queries per category drawn with the eval seed.
/// Text mode ignores the bank; vision mode masks every token; multimodal
/// keeps text and adds queries. Categories with no queries fall back to
/// text (pure `[MASK]` in vision mode).
pub fn finetuning_free_eval(
    model: &Model,
    vocab: &VocabSpec,
    scenes: &[SceneSample],
    split: &str,
    bank: Option<&VisionQueryBank>,
    mode: QueryMode,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let keys = vocab.category_keys();
    let query_sets: Vec<Option<Array2<f64>>> = match mode {
        QueryMode::Text => vec![None; keys.len()],
        _ => {
            let bank = bank.ok_or_else(|| Error::Argument(format!("{mode} evaluation needs a query bank")))?;
            if bank.categories() != keys.as_slice() {
                return Err(Error::Config("bank categories do not match the dataset vocabulary".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            bank.sample_all(opts.k, &mut rng).into_iter().map(Some).collect()
        }
    };
    evaluate_with_queries(model, vocab, scenes, split, mode, &query_sets, opts)
}

/// Evaluation with explicit per-category query sets (`None` or empty for
/// text-only categories).
pub fn evaluate_with_queries(
    model: &Model,
    vocab: &VocabSpec,
    scenes: &[SceneSample],
    split: &str,
    mode: QueryMode,
    query_sets: &[Option<Array2<f64>>],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let keys = vocab.category_keys();
    let prompt = entry_prompt(vocab);
    let mut fallbacks = Vec::new();
    let queries: Vec<MultiModalQuery> = prompt
        .iter()
        .zip(query_sets)
        .zip(&keys)
        .map(|((text, q), key)| {
            let vision = q.clone().filter(|m| m.nrows() > 0);
            if mode != QueryMode::Text && vision.is_none() {
                log::warn!("no vision queries for `{key}`, falling back");
                fallbacks.push(key.clone());
            }
            MultiModalQuery {
                text: text.clone(),
                vision: if mode == QueryMode::Text { None } else { vision },
            }
        })
        .collect();
    let flags = vec![mode == QueryMode::Vision; prompt.len()];

    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in scenes {
        let features = model.encode_image(&s.image)?;
        let regions = model.detection_head(&features)?;
        let logits = scene_scores(model, &features, &regions, &queries, &flags)?;
        for d in detect_from_logits(&logits, &regions.boxes, &opts.detect) {
            dets.push(ScoredBox {
                image: s.scene_id,
                category: d.category,
                score: d.score,
                bbox: d.bbox,
            });
        }
        for i in &s.instances {
            gts.push(GtBox {
                image: s.scene_id,
                category: i.entry_id,
                bbox: i.bbox,
            });
        }
    }
    let summary = compute_ap(&dets, &gts, keys.len(), opts.iou_threshold);
    let ambiguous = vocab.ambiguous_entries();
    let per_category: Vec<CategoryAp> = (0..keys.len())
        .map(|c| CategoryAp {
            category: keys[c].clone(),
            text_name: vocab.entries[c].text_name.clone(),
            num_gt: gts.iter().filter(|g| g.category == c).count(),
            ap: summary.per_category[c],
            novel: vocab.entries[c].held_out,
            ambiguous: ambiguous.contains(&c),
        })
        .collect();
    let mean_where = |pred: &dyn Fn(&CategoryAp) -> bool| mean_of(per_category.iter().filter(|c| pred(c)).filter_map(|c| c.ap));
    Ok(EvalReport {
        query_mode: mode,
        split: split.to_string(),
        k: opts.k,
        eval_seed: opts.seed,
        num_scenes: scenes.len(),
        mean_ap: summary.mean,
        ambiguous_mean_ap: mean_where(&|c| c.ambiguous),
        base_mean_ap: mean_where(&|c| !c.novel),
        novel_mean_ap: mean_where(&|c| c.novel),
        per_category,
        fallbacks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySetKind {
    Positive,
    HardPositive,
    Negative,
    None,
    Mixed,
}

impl QuerySetKind {
    pub const ALL: [QuerySetKind; 5] = [
        QuerySetKind::Positive,
        QuerySetKind::HardPositive,
        QuerySetKind::Negative,
        QuerySetKind::None,
        QuerySetKind::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuerySetKind::Positive => "positive",
            QuerySetKind::HardPositive => "hard_positive",
            QuerySetKind::Negative => "negative",
            QuerySetKind::None => "none",
            QuerySetKind::Mixed => "mixed",
        }
    }
}

/// Exemplar pools per category, each `n x d`.
#[derive(Debug, Clone)]
pub struct ExemplarPools {
    pub positive: Vec<Array2<f64>>,
    pub hard_positive: Vec<Array2<f64>>,
    pub negative: Vec<Array2<f64>>,
}

fn stack(rows: &[Vec<f64>], d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), d));
    for (r, v) in rows.iter().enumerate() {
        m.row_mut(r).assign(&ndarray::ArrayView1::from(v.as_slice()));
    }
    m
}

/// Exemplars from annotated scenes. Positive: the instance box. Hard
/// positive: its left half. Negative: a same-size crop elsewhere in the
/// scene that overlaps no instance, when one can be found.
pub fn build_exemplar_pools(
    model: &Model,
    vocab: &VocabSpec,
    scenes: &[SceneSample],
    gamma: f64,
    seed: u64,
) -> Result<ExemplarPools> {
    let n = vocab.len();
    let d = model.config.d;
    let mut pos = vec![Vec::new(); n];
    let mut hard = vec![Vec::new(); n];
    let mut neg = vec![Vec::new(); n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = model.config.image_size as f64;
    for s in scenes {
        let features = model.encode_image(&s.image)?;
        for inst in &s.instances {
            let b = inst.bbox;
            pos[inst.entry_id].push(pool_query(model, &features, b, gamma)?.to_vec());
            let half = [b[0], b[1], (b[0] + b[2]) / 2.0, b[3]];
            hard[inst.entry_id].push(pool_query(model, &features, half, gamma)?.to_vec());
            let (w, h) = (b[2] - b[0], b[3] - b[1]);
            for _ in 0..100 {
                let x = rng.gen_range(0.0..=(size - w).max(0.0));
                let y = rng.gen_range(0.0..=(size - h).max(0.0));
                let cand = [x, y, x + w, y + h];
                let context = crate::query_bank::enlarge_box(cand, gamma, size)?;
                if s.instances.iter().all(|o| box_iou(&context, &o.bbox) == 0.0) {
                    neg[inst.entry_id].push(pool_query(model, &features, cand, gamma)?.to_vec());
                    break;
                }
            }
        }
    }
    Ok(ExemplarPools {
        positive: pos.iter().map(|r| stack(r, d)).collect(),
        hard_positive: hard.iter().map(|r| stack(r, d)).collect(),
        negative: neg.iter().map(|r| stack(r, d)).collect(),
    })
}

fn sample_rows<R: Rng>(pool: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = pool.nrows();
    if n == 0 {
        return Array2::zeros((0, pool.ncols()));
    }
    let picks: Vec<usize> = if n >= k {
        rand::seq::index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..n)).collect()
    };
    pool.select(ndarray::Axis(0), &picks)
}

/// Query sets of one kind, `k` per category.
pub fn query_sets_for(kind: QuerySetKind, pools: &ExemplarPools, k: usize, seed: u64) -> Vec<Option<Array2<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pools.positive.len();
    (0..n)
        .map(|c| match kind {
            QuerySetKind::None => None,
            QuerySetKind::Positive => Some(sample_rows(&pools.positive[c], k, &mut rng)),
            QuerySetKind::HardPositive => Some(sample_rows(&pools.hard_positive[c], k, &mut rng)),
            QuerySetKind::Negative => Some(sample_rows(&pools.negative[c], k, &mut rng)),
            QuerySetKind::Mixed => {
                let sources = [&pools.positive[c], &pools.hard_positive[c], &pools.negative[c]];
                let d = pools.positive[c].ncols();
                let mut rows = Vec::with_capacity(k);
                for _ in 0..k {
                    let src = sources[rng.gen_range(0..sources.len())];
                    if src.nrows() > 0 {
                        rows.push(src.row(rng.gen_range(0..src.nrows())).to_vec());
                    }
                }
                Some(stack(&rows, d))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub query_set: QuerySetKind,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityTable {
    pub rows: Vec<QualityRow>,
}

impl QualityTable {
    pub fn row(&self, kind: QuerySetKind) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.query_set == kind).map(|r| &r.report)
    }

    fn cells(&self) -> Vec<[String; 4]> {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        self.rows
            .iter()
            .map(|r| {
                [
                    r.query_set.name().to_string(),
                    fmt(r.report.mean_ap),
                    fmt(r.report.ambiguous_mean_ap),
                    fmt(r.report.novel_mean_ap),
                ]
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<14} {:>8} {:>10} {:>8}\n", "query_set", "AP", "AP_ambig", "AP_novel");
        for c in self.cells() {
            let _ = writeln!(out, "{:<14} {:>8} {:>10} {:>8}", c[0], c[1], c[2], c[3]);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_set,ap,ap_ambiguous,ap_novel\n");
        for c in self.cells() {
            let _ = writeln!(out, "{}", c.join(","));
        }
        out
    }
}

/// One multimodal evaluation per query-set kind (text-only for `none`),
/// all with the same seed.
pub fn query_quality_harness(
    model: &Model,
    vocab: &VocabSpec,
    eval_scenes: &[SceneSample],
    split: &str,
    pools: &ExemplarPools,
    opts: &EvalOptions,
) -> Result<QualityTable> {
    let rows = QuerySetKind::ALL
        .iter()
        .map(|&kind| {
            let sets = query_sets_for(kind, pools, opts.k, opts.seed);
            let mode = if kind == QuerySetKind::None {
                QueryMode::Text
            } else {
                QueryMode::Multimodal
            };
            let report = evaluate_with_queries(model, vocab, eval_scenes, split, mode, &sets, opts)?;
            Ok(QualityRow { query_set: kind, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QualityTable { rows })
}
