//! Training loops: baseline pre-training of the text-queried detector and
//! modulated training of the GCP layers on top of it.
//!
//! Training prompts hold one token per category annotated somewhere in the
//! training scenes, so categories absent from the data are never seen.
//! During modulation, tokens of categories present in the scene are
//! replaced by `[MASK]` at `mask_rate`, but keep their positive targets, so
//! the only way to score them is through the vision queries.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::config::{FreezeMode, ModelConfig, PretrainConfig, TrainConfig};
use crate::detector::{assign_targets, localization_loss, logits_graph, Assignment, GtInstance, Model};
use crate::error::{Error, Result};
use crate::gcp::{QueryBatch, GCP_PREFIX};
use crate::nn::Graph;
use crate::params::{ParamId, ParamStore};
use crate::query_bank::VisionQueryBank;
use crate::synth::{SceneSample, VocabSpec};

/// Hyper-parameters shared by every parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay and per-parameter learning rates.
/// A parameter with learning rate `None` is never touched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub settings: AdamWSettings,
    lrs: Vec<Option<f64>>,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
    steps: Vec<u32>,
}

impl AdamW {
    pub fn new(settings: AdamWSettings, lrs: Vec<Option<f64>>) -> Self {
        let n = lrs.len();
        Self {
            settings,
            lrs,
            m: vec![None; n],
            v: vec![None; n],
            steps: vec![0; n],
        }
    }

    pub fn lr(&self, id: ParamId) -> Option<f64> {
        self.lrs[id.0]
    }

    /// One update. Parameters without a gradient are skipped entirely, as
    /// are those without a learning rate. `lr_scale` multiplies every rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>], lr_scale: f64) {
        let s = self.settings;
        for (i, grad) in grads.iter().enumerate() {
            let (Some(g), Some(lr)) = (grad, self.lrs[i]) else {
                continue;
            };
            let lr = lr * lr_scale;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = s.beta1 * *m + (1.0 - s.beta1) * g);
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = s.beta2 * *v + (1.0 - s.beta2) * g * g);
            let bc1 = 1.0 - s.beta1.powi(t);
            let bc2 = 1.0 - s.beta2.powi(t);
            let p = store.get_mut(ParamId(i));
            p.mapv_inplace(|x| x * (1.0 - lr * s.weight_decay));
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| *p -= lr * (m / bc1) / ((v / bc2).sqrt() + s.eps));
        }
    }
}

/// Learning rates for modulation: gate parameters at `lr_gate`, other GCP
/// parameters (including the `[MASK]` embedding) at `lr_gcp`, and the
/// detector according to the freeze mode.
pub fn modulation_learning_rates(model: &Model, cfg: &TrainConfig) -> Vec<Option<f64>> {
    let freeze = cfg.effective_freeze();
    model
        .params
        .iter()
        .map(|(_, name, _)| {
            if name.starts_with(GCP_PREFIX) {
                Some(if name.contains(".gate.") { cfg.lr_gate } else { cfg.lr_gcp })
            } else {
                match freeze {
                    FreezeMode::All => None,
                    FreezeMode::TextEncoder if !name.starts_with("text.") => None,
                    _ => Some(cfg.lr_detector),
                }
            }
        })
        .collect()
}

/// Per-category `[MASK]` flags: each present category is masked with
/// probability `rate`, drawn in ascending category order.
pub fn mask_present_categories<R: Rng>(num_categories: usize, present: &[usize], rate: f64, rng: &mut R) -> Vec<bool> {
    let mut ordered: Vec<usize> = present.iter().copied().filter(|&c| c < num_categories).collect();
    ordered.sort_unstable();
    ordered.dedup();
    let mut flags = vec![false; num_categories];
    for c in ordered {
        flags[c] = rng.gen_bool(rate.clamp(0.0, 1.0));
    }
    flags
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_grounding: f64,
    pub loss_loc: f64,
    pub gate_scalar_l2: f64,
    pub masked_fraction: f64,
}

/// L2 norm over all gate scalars.
pub fn gate_scalar_l2(model: &Model) -> f64 {
    model
        .arch
        .gcp
        .layers
        .iter()
        .map(|l| model.params.get(l.gate.scalar)[[0, 0]].powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Prompt with one text name per vocabulary entry.
pub fn entry_prompt(vocab: &VocabSpec) -> Vec<String> {
    vocab.entries.iter().map(|e| e.text_name.clone()).collect()
}

/// Sorted entry ids that occur in at least one scene.
pub fn annotated_entries(scenes: &[SceneSample]) -> Vec<usize> {
    let mut ids: Vec<usize> = scenes.iter().flat_map(|s| s.instances.iter().map(|i| i.entry_id)).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn ground_truth(scene: &SceneSample) -> Vec<GtInstance> {
    scene
        .instances
        .iter()
        .map(|i| GtInstance {
            category: i.entry_id,
            bbox: i.bbox,
        })
        .collect()
}

/// Region x prompt targets: `positive(gt_category, prompt_index)`.
fn targets_for(assign: &Assignment, prompt_len: usize, positive: impl Fn(usize, usize) -> bool) -> Array2<f64> {
    let mut t = Array2::zeros((assign.categories.len(), prompt_len));
    for (r, c) in assign.categories.iter().enumerate() {
        if let Some(c) = *c {
            for p in 0..prompt_len {
                if positive(c, p) {
                    t[[r, p]] = 1.0;
                }
            }
        }
    }
    t
}

fn check_finite(step: usize, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Argument(format!("non-finite loss at step {step}")))
    }
}

fn accumulate(acc: &mut [Option<Array2<f64>>], g: &Graph, loss: Var) {
    let grads = g.tape.backward(loss);
    for (var, id) in g.tape.trainable_params() {
        if let Some(d) = grads.get(var) {
            match &mut acc[id.0] {
                Some(a) => *a += d,
                slot => *slot = Some(d.clone()),
            }
        }
    }
}

/// Trains the text-queried detector from scratch. The prompt lists the
/// text name of every annotated entry; a region is positive for every
/// entry sharing its instance's text name.
/// GCP parameters stay at their zero-gate initialisation.
pub fn pretrain_baseline(
    config: ModelConfig,
    vocab: &VocabSpec,
    scenes: &[SceneSample],
    cfg: &PretrainConfig,
) -> Result<(Model, Vec<StepRecord>)> {
    let mut model = Model::new(config, cfg.seed)?;
    for name in entry_prompt(vocab) {
        model.config.token_index(&name)?;
    }
    let entries = annotated_entries(scenes);
    let prompt: Vec<String> = entries.iter().map(|&e| vocab.entries[e].text_name.clone()).collect();
    if scenes.is_empty() || cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let trainable: Vec<bool> = model.mask_by_prefix(&[GCP_PREFIX]).iter().map(|g| !g).collect();
    let lrs = trainable.iter().map(|&t| t.then_some(cfg.lr)).collect();
    let mut opt = AdamW::new(
        AdamWSettings {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        lrs,
    );
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = scenes.len().div_ceil(batch);
    let total = steps_per_epoch * cfg.epochs;
    let no_mask = vec![false; prompt.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut acc = vec![None; model.params.len()];
            let (mut lg, mut ll) = (0.0, 0.0);
            for &si in chunk {
                let scene = &scenes[si];
                let assign = assign_targets(&ground_truth(scene), &model);
                let targets = targets_for(&assign, prompt.len(), |c, p| {
                    vocab.entries[c].text_name == vocab.entries[entries[p]].text_name
                });
                let mut g = Graph::new(&model.params, Some(&trainable));
                let grid = model.image_graph(&mut g, &scene.image)?;
                let (regions, boxes) = model.head_graph(&mut g, grid)?;
                let tokens = model.text_graph(&mut g, &prompt, &no_mask, None)?;
                let logits = logits_graph(&mut g, regions, tokens)?;
                let lgv = g.tape.bce_with_logits(logits, targets);
                let llv = localization_loss(&mut g, boxes, &assign, model.config.patch_size);
                let llw = g.tape.scale(llv, model.config.loc_weight);
                let total_loss = g.tape.add(lgv, llw);
                let loss = g.tape.scale(total_loss, 1.0 / chunk.len() as f64);
                lg += g.tape.scalar(lgv) / chunk.len() as f64;
                ll += g.tape.scalar(llv) / chunk.len() as f64;
                accumulate(&mut acc, &g, loss);
            }
            check_finite(step, &[lg, ll])?;
            let scale = lr_schedule(step, total, cfg.warmup_steps);
            opt.step(&mut model.params, &acc, scale);
            log.push(StepRecord {
                step,
                loss_grounding: lg,
                loss_loc: ll,
                gate_scalar_l2: 0.0,
                masked_fraction: 0.0,
            });
            if step % 100 == 0 {
                log::debug!("pretrain step {step}: grounding {lg:.4} loc {ll:.4}");
            }
            step += 1;
        }
    }
    Ok((model, log))
}

/// Linear warm-up followed by cosine decay to a tenth of the base rate.
fn lr_schedule(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup.min(total)).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Verifies that the bank, the dataset vocabulary and the model agree.
pub fn check_vocab(model: &Model, vocab: &VocabSpec, bank: &VisionQueryBank) -> Result<()> {
    if bank.categories() != vocab.category_keys().as_slice() {
        return Err(Error::Config(format!(
            "bank categories {:?} do not match dataset categories {:?}",
            bank.categories(),
            vocab.category_keys()
        )));
    }
    if bank.d() != model.config.d {
        return Err(Error::Config(format!(
            "bank dimension {} differs from model dimension {}",
            bank.d(),
            model.config.d
        )));
    }
    for e in &vocab.entries {
        model
            .config
            .token_index(&e.text_name)
            .map_err(|_| Error::Config(format!("text name `{}` is not in the model vocabulary", e.text_name)))?;
    }
    Ok(())
}

/// Trains the parameters selected by `cfg.freeze` (only `gcp.*` by
/// default) with vision-conditioned masked prediction. Returns the
/// per-step log.
pub fn modulate(
    model: &mut Model,
    vocab: &VocabSpec,
    scenes: &[SceneSample],
    bank: &VisionQueryBank,
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    check_vocab(model, vocab, bank)?;
    if cfg.epochs == 0 || scenes.is_empty() {
        return Ok(Vec::new());
    }
    let entries = annotated_entries(scenes);
    let prompt: Vec<String> = entries.iter().map(|&e| vocab.entries[e].text_name.clone()).collect();
    let slot = |entry: usize| entries.binary_search(&entry).expect("annotated entry");
    let lrs = modulation_learning_rates(model, cfg);
    let trainable: Vec<bool> = lrs.iter().map(Option::is_some).collect();
    let detector_frozen = cfg.effective_freeze() == FreezeMode::All;
    let mut opt = AdamW::new(
        AdamWSettings {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        },
        lrs,
    );
    let k = model.config.queries_per_category;

    // With the detector frozen, image features, boxes and the localisation
    // loss do not change during training.
    struct Cached {
        grid: Array2<f64>,
        regions: Array2<f64>,
        loss_loc: f64,
    }
    let assignments: Vec<Assignment> = scenes.iter().map(|s| assign_targets(&ground_truth(s), model)).collect();
    let cache: Vec<Cached> = if detector_frozen {
        scenes
            .iter()
            .zip(&assignments)
            .map(|(s, a)| {
                let mut g = Graph::new(&model.params, None);
                let grid = model.image_graph(&mut g, &s.image)?;
                let (regions, boxes) = model.head_graph(&mut g, grid)?;
                let ll = localization_loss(&mut g, boxes, a, model.config.patch_size);
                Ok(Cached {
                    grid: g.value(grid).clone(),
                    regions: g.value(regions).clone(),
                    loss_loc: g.tape.scalar(ll),
                })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let batch = cfg.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut acc = vec![None; model.params.len()];
            let (mut lg, mut ll) = (0.0, 0.0);
            let (mut masked, mut present_total) = (0usize, 0usize);
            for &si in chunk {
                let scene = &scenes[si];
                let assign = &assignments[si];
                let present: Vec<usize> = scene.instances.iter().map(|i| slot(i.entry_id)).collect();
                let flags = mask_present_categories(prompt.len(), &present, cfg.mask_rate, &mut rng);
                masked += flags.iter().filter(|&&f| f).count();
                present_total += {
                    let mut p = present.clone();
                    p.sort_unstable();
                    p.dedup();
                    p.len()
                };
                let queries: Vec<Array2<f64>> = entries.iter().map(|&e| bank.sample(e, k, &mut rng)).collect();
                let targets = targets_for(assign, prompt.len(), |c, p| c == entries[p]);

                let mut g = Graph::new(&model.params, Some(&trainable));
                let (grid, regions, loc) = if detector_frozen {
                    let c = &cache[si];
                    let grid = g.constant(c.grid.clone());
                    let regions = g.constant(c.regions.clone());
                    let loc = g.tape.scalar_constant(c.loss_loc);
                    (grid, regions, loc)
                } else {
                    let grid = model.image_graph(&mut g, &scene.image)?;
                    let (regions, boxes) = model.head_graph(&mut g, grid)?;
                    let loc = localization_loss(&mut g, boxes, assign, model.config.patch_size);
                    (grid, regions, loc)
                };
                let qb = QueryBatch::new(&mut g, &queries, model.config.d)?;
                let tokens = model.text_graph(&mut g, &prompt, &flags, Some((&qb, grid)))?;
                let logits = logits_graph(&mut g, regions, tokens)?;
                let lgv = g.tape.bce_with_logits(logits, targets);
                let llw = g.tape.scale(loc, model.config.loc_weight);
                let total_loss = g.tape.add(lgv, llw);
                let loss = g.tape.scale(total_loss, 1.0 / chunk.len() as f64);
                lg += g.tape.scalar(lgv) / chunk.len() as f64;
                ll += g.tape.scalar(loc) / chunk.len() as f64;
                accumulate(&mut acc, &g, loss);
            }
            check_finite(step, &[lg, ll])?;
            opt.step(&mut model.params, &acc, 1.0);
            let record = StepRecord {
                step,
                loss_grounding: lg,
                loss_loc: ll,
                gate_scalar_l2: gate_scalar_l2(model),
                masked_fraction: if present_total == 0 {
                    0.0
                } else {
                    masked as f64 / present_total as f64
                },
            };
            check_finite(step, &[record.gate_scalar_l2])?;
            if step % 100 == 0 {
                log::debug!(
                    "modulate step {step}: grounding {lg:.4} gate {:.4}",
                    record.gate_scalar_l2
                );
            }
            log.push(record);
            step += 1;
        }
    }
    Ok(log)
}

/// Few-shot adaptation: the same mechanics as [`modulate`] on a
/// downstream split, with the bank built from that split.
pub fn partial_finetune(
    model: &mut Model,
    vocab: &VocabSpec,
    fewshot: &[SceneSample],
    bank: &VisionQueryBank,
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    if fewshot.is_empty() {
        return Err(Error::Argument("few-shot split is empty".into()));
    }
    modulate(model, vocab, fewshot, bank, cfg)
}
