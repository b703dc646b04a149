//! End-to-end experiment plumbing shared by the command-line tool and the
//! acceptance tests.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PretrainConfig, TrainConfig};
use crate::detector::Model;
use crate::error::Result;
use crate::eval::{finetuning_free_eval, EvalOptions, EvalReport, QueryMode};
use crate::modulation::{modulate, pretrain_baseline, StepRecord};
use crate::query_bank::VisionQueryBank;
use crate::synth::{generate_dataset, Dataset, Split, SplitSizes, VocabSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sizes: SplitSizes,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vocab = VocabSpec::default_ambiguous();
        Self {
            sizes: SplitSizes::default(),
            model: ModelConfig {
                vocab: vocab.text_names(),
                ..ModelConfig::default()
            },
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Every seed in the configuration set to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// A pre-trained detector with its data and query banks.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub dataset: Dataset,
    pub model: Model,
    /// Queries from the pre-training split, used for modulation.
    pub train_bank: VisionQueryBank,
    /// Queries from the few-shot split (covers held-out categories), used
    /// for evaluation.
    pub eval_bank: VisionQueryBank,
    pub pretrain_log: Vec<StepRecord>,
}

pub fn build_bank(model: &Model, dataset: &Dataset, split: Split) -> Result<VisionQueryBank> {
    let mut bank = VisionQueryBank::new(
        model.config.d,
        model.config.bank_capacity,
        dataset.vocab.category_keys(),
    )?;
    bank.ingest_scenes(model, &dataset.split_scenes(split), model.config.gamma)?;
    Ok(bank)
}

pub fn prepare_baseline(cfg: &ExperimentConfig, data_seed: u64, vocab: &VocabSpec, workers: usize) -> Result<Baseline> {
    let dataset = generate_dataset(data_seed, vocab, &cfg.sizes, cfg.model.image_size, workers)?;
    let pretrain = dataset.split_scenes(Split::Pretrain);
    let (model, pretrain_log) = pretrain_baseline(cfg.model.clone(), vocab, &pretrain, &cfg.pretrain)?;
    let train_bank = build_bank(&model, &dataset, Split::Pretrain)?;
    let eval_bank = build_bank(&model, &dataset, Split::Fewshot)?;
    Ok(Baseline {
        dataset,
        model,
        train_bank,
        eval_bank,
        pretrain_log,
    })
}

/// A copy of the baseline model with GCP trained under `train`.
pub fn modulated_copy(base: &Baseline, train: &TrainConfig) -> Result<(Model, Vec<StepRecord>)> {
    let mut model = base.model.clone();
    let scenes = base.dataset.split_scenes(Split::Pretrain);
    let log = modulate(&mut model, &base.dataset.vocab, &scenes, &base.train_bank, train)?;
    Ok((model, log))
}

pub fn evaluate_split(
    model: &Model,
    base: &Baseline,
    split: Split,
    mode: QueryMode,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let scenes = base.dataset.split_scenes(split);
    finetuning_free_eval(
        model,
        &base.dataset.vocab,
        &scenes,
        split.name(),
        Some(&base.eval_bank),
        mode,
        opts,
    )
}
