use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use mqdet_core::detector::{detect, Model, MultiModalQuery};
use mqdet_core::eval::{build_exemplar_pools, finetuning_free_eval, query_quality_harness, EvalOptions, EvalReport, QueryMode};
use mqdet_core::modulation::{check_vocab, entry_prompt, modulate as train_gcp, pretrain_baseline, StepRecord};
use mqdet_core::pipeline::{build_bank as bank_from_split, ExperimentConfig};
use mqdet_core::query_bank::VisionQueryBank;
use mqdet_core::raster::Raster;
use mqdet_core::synth::{generate_dataset, Dataset, Split, VocabSpec};
use mqdet_core::{FreezeMode, GateVariant, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{AblateArgs, BuildBankArgs, Common, EvalArgs, GenDataArgs, InferArgs, ModulateArgs, PretrainArgs, Usage};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_flag<T: FromStr>(flag: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| usage(format!("invalid value `{value}` for --{flag}: {e}")))
}

/// Data-generation threads from `MQDET_NUM_WORKERS` (default 1).
fn workers() -> Result<usize> {
    match std::env::var("MQDET_NUM_WORKERS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("MQDET_NUM_WORKERS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

/// Effective configuration and seed. A resolved-config.json from an
/// earlier run is accepted in place of a plain configuration.
fn load_config(common: &Common) -> Result<(ExperimentConfig, u64)> {
    let (cfg, file_seed) = match &common.config {
        None => (ExperimentConfig::default(), None),
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            match value.get("experiment") {
                Some(inner) => (
                    serde_json::from_value(inner.clone()).with_context(|| format!("parsing {}", path.display()))?,
                    value.get("seed").and_then(serde_json::Value::as_u64),
                ),
                None => (
                    serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?,
                    None,
                ),
            }
        }
    };
    let seed = common.seed.or(file_seed).unwrap_or(0);
    Ok((cfg.with_seed(seed), seed))
}

#[derive(Serialize)]
struct Resolved<'a, A: Serialize> {
    command: &'a str,
    seed: u64,
    experiment: &'a ExperimentConfig,
    args: &'a A,
}

/// Output directory bookkeeping shared by every command.
struct Run {
    command: &'static str,
    out: PathBuf,
    started: SystemTime,
    clock: Instant,
}

impl Run {
    fn start<A: Serialize>(command: &'static str, common: &Common, cfg: &ExperimentConfig, seed: u64, args: &A) -> Result<Self> {
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        let run = Self {
            command,
            out: common.out.clone(),
            started: SystemTime::now(),
            clock: Instant::now(),
        };
        run.write_json(
            "resolved-config.json",
            &Resolved {
                command,
                seed,
                experiment: cfg,
                args,
            },
        )?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        write_json(&self.path(name), value)
    }

    /// Wall-clock information lives here so that reports stay reproducible.
    fn finish(self) -> Result<()> {
        let started = self.started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.write_json(
            "run-info.json",
            &serde_json::json!({
                "command": self.command,
                "started_unix": started,
                "seconds": self.clock.elapsed().as_secs_f64(),
            }),
        )
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    for record in log {
        writeln!(file, "{}", serde_json::to_string(record)?)?;
    }
    Ok(())
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::read(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn read_model(dir: &Path) -> Result<Model> {
    Model::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn read_bank(dir: &Path) -> Result<VisionQueryBank> {
    VisionQueryBank::load(dir).with_context(|| format!("loading bank {}", dir.display()))
}

fn split_scenes(dataset: &Dataset, split: Split) -> Result<Vec<mqdet_core::synth::SceneSample>> {
    let scenes = dataset.split_scenes(split);
    if scenes.is_empty() {
        anyhow::bail!("split {} of the dataset is empty", split.name());
    }
    Ok(scenes)
}

fn summary(r: &EvalReport) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
    format!(
        "{} on {}: AP {} (ambiguous {}, novel {})",
        r.query_mode,
        r.split,
        pct(r.mean_ap),
        pct(r.ambiguous_mean_ap),
        pct(r.novel_mean_ap)
    )
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let (cfg, seed) = load_config(&args.common)?;
    let workers = workers()?;
    let run = Run::start("gen-data", &args.common, &cfg, seed, args)?;
    let vocab = VocabSpec::default_ambiguous();
    let dataset = generate_dataset(seed, &vocab, &cfg.sizes, cfg.model.image_size, workers)?;
    dataset.write(&run.out)?;
    log::info!("wrote {} scenes to {}", dataset.scenes.len(), run.out.display());
    run.finish()
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let (mut cfg, seed) = load_config(&args.common)?;
    let dataset = read_dataset(&args.data)?;
    cfg.model.vocab = dataset.vocab.text_names();
    cfg.model.image_size = dataset.image_size;
    let run = Run::start("pretrain-baseline", &args.common, &cfg, seed, args)?;
    let scenes = split_scenes(&dataset, Split::Pretrain)?;
    let (model, log) = pretrain_baseline(cfg.model.clone(), &dataset.vocab, &scenes, &cfg.pretrain)?;
    model.save(&run.path("model"))?;
    write_log(&run.path("pretrain-log.ndjson"), &log)?;
    if let Some(last) = log.last() {
        log::info!("pretrained {} steps, final grounding loss {:.4}", log.len(), last.loss_grounding);
    }
    run.finish()
}

pub fn build_bank(args: &BuildBankArgs) -> Result<()> {
    let (mut cfg, seed) = load_config(&args.common)?;
    let split: Split = parse_flag("split", &args.split)?;
    let model = read_model(&args.model)?;
    let dataset = read_dataset(&args.data)?;
    cfg.model = model.config.clone();
    let run = Run::start("build-bank", &args.common, &cfg, seed, args)?;
    let mut bank = bank_from_split(&model, &dataset, split)?;
    if let Some(path) = &args.exemplars {
        let n = bank.ingest_exemplars(&model, path, model.config.gamma)?;
        log::info!("added {n} exemplars from {}", path.display());
    }
    check_vocab(&model, &dataset.vocab, &bank)?;
    bank.save(&run.path("bank"))?;
    log::info!("bank counts per category: {:?}", bank.counts());
    run.finish()
}

fn rebuild_gcp(model: &Model, variant: Option<GateVariant>, layers: Option<Vec<usize>>, seed: u64) -> Result<Model> {
    let mut config = model.config.clone();
    if let Some(v) = variant {
        config.gate_variant = v;
    }
    if let Some(l) = layers {
        config.gcp_layers = l;
    }
    if config == model.config {
        return Ok(model.clone());
    }
    Ok(model.with_gcp_config(config, seed)?)
}

pub fn modulate(args: &ModulateArgs) -> Result<()> {
    let (mut cfg, seed) = load_config(&args.common)?;
    let variant = args.gate_variant.as_deref().map(|v| parse_flag::<GateVariant>("gate-variant", v)).transpose()?;
    if let Some(f) = &args.freeze {
        cfg.train.freeze = parse_flag::<FreezeMode>("freeze", f)?;
    }
    if let Some(rate) = args.mask_rate {
        cfg.train.mask_rate = rate;
    }
    let mut model = rebuild_gcp(&read_model(&args.model)?, variant, None, seed)?;
    if let Some(k) = args.k {
        model.config.queries_per_category = k;
    }
    let dataset = read_dataset(&args.data)?;
    let bank = read_bank(&args.bank)?;
    cfg.model = model.config.clone();
    let run = Run::start("modulate", &args.common, &cfg, seed, args)?;
    let scenes = split_scenes(&dataset, Split::Pretrain)?;
    let log = train_gcp(&mut model, &dataset.vocab, &scenes, &bank, &cfg.train)?;
    model.save(&run.path("model"))?;
    write_log(&run.path("train-log.ndjson"), &log)?;
    if let Some(last) = log.last() {
        log::info!(
            "modulated {} steps, final grounding loss {:.4}, gate scalar norm {:.4}",
            log.len(),
            last.loss_grounding,
            last.gate_scalar_l2
        );
    }
    run.finish()
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (mut cfg, seed) = load_config(&args.common)?;
    let mode: QueryMode = parse_flag("query-mode", &args.query_mode)?;
    let split: Split = parse_flag("split", &args.split)?;
    if mode != QueryMode::Text && args.bank.is_none() {
        return Err(usage(format!("--bank is required for --query-mode {mode}")));
    }
    if args.query_quality && args.bank.is_none() {
        return Err(usage("--bank is required with --query-quality"));
    }
    if let Some(k) = args.k {
        cfg.eval.k = k;
    }
    let model = read_model(&args.model)?;
    let dataset = read_dataset(&args.data)?;
    let bank = args.bank.as_deref().map(read_bank).transpose()?;
    cfg.model = model.config.clone();
    let run = Run::start("eval", &args.common, &cfg, seed, args)?;
    let scenes = dataset.split_scenes(split);
    let report = finetuning_free_eval(&model, &dataset.vocab, &scenes, split.name(), bank.as_ref(), mode, &cfg.eval)?;
    run.write_json("report.json", &report)?;
    log::info!("{}", summary(&report));

    if args.query_quality {
        let fewshot = split_scenes(&dataset, Split::Fewshot)?;
        let pools = build_exemplar_pools(&model, &dataset.vocab, &fewshot, model.config.gamma, cfg.eval.seed)?;
        let table = query_quality_harness(&model, &dataset.vocab, &scenes, split.name(), &pools, &cfg.eval)?;
        run.write_json("quality.json", &table)?;
        fs::write(run.path("quality.txt"), table.to_text())?;
        fs::write(run.path("quality.csv"), table.to_csv())?;
        eprint!("{}", table.to_text());
    }
    run.finish()
}

#[derive(Serialize)]
struct DetectionRecord {
    category: String,
    text_name: String,
    score: f64,
    bbox: [f64; 4],
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let (mut cfg, seed) = load_config(&args.common)?;
    let mode: QueryMode = parse_flag("query-mode", &args.query_mode)?;
    if mode != QueryMode::Text && args.bank.is_none() {
        return Err(usage(format!("--bank is required for --query-mode {mode}")));
    }
    if let Some(k) = args.k {
        cfg.eval.k = k;
    }
    let model = read_model(&args.model)?;
    let vocab_path = args.data.join("vocab.json");
    let vocab: VocabSpec = serde_json::from_str(
        &fs::read_to_string(&vocab_path).with_context(|| format!("reading {}", vocab_path.display()))?,
    )?;
    let image = Raster::read_ppm(&args.image).with_context(|| format!("reading {}", args.image.display()))?;
    let bank = args.bank.as_deref().map(read_bank).transpose()?;
    cfg.model = model.config.clone();
    let run = Run::start("infer", &args.common, &cfg, seed, args)?;

    let prompt = entry_prompt(&vocab);
    let keys = vocab.category_keys();
    let sets = match (&bank, mode) {
        (Some(bank), QueryMode::Vision | QueryMode::Multimodal) => {
            check_vocab(&model, &vocab, bank)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
            bank.sample_all(cfg.eval.k, &mut rng).into_iter().map(Some).collect()
        }
        _ => vec![None; prompt.len()],
    };
    let queries: Vec<MultiModalQuery> = prompt
        .iter()
        .zip(sets)
        .map(|(text, vision)| MultiModalQuery {
            text: text.clone(),
            vision: vision.filter(|v| v.nrows() > 0),
        })
        .collect();
    let flags = vec![mode == QueryMode::Vision; prompt.len()];
    let dets = detect(&model, &image, &queries, &flags, &cfg.eval.detect)?;
    let records: Vec<DetectionRecord> = dets
        .iter()
        .map(|d| DetectionRecord {
            category: keys[d.category].clone(),
            text_name: prompt[d.category].clone(),
            score: d.score,
            bbox: d.bbox,
        })
        .collect();
    run.write_json("detections.json", &records)?;
    for r in records.iter().take(10) {
        println!("{:<22} {:.3} {:?}", r.category, r.score, r.bbox);
    }
    run.finish()
}

/// One ablation setting: the model to modulate and how to train and
/// evaluate it.
fn ablation_setting(
    axis: &str,
    value: &str,
    base: &Model,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Model, TrainConfig, EvalOptions)> {
    let mut train = cfg.train.clone();
    let mut opts = cfg.eval;
    let model = match axis {
        "mask_rate" => {
            train.mask_rate = parse_flag("values", value)?;
            base.clone()
        }
        "freeze" => {
            train.freeze = parse_flag("values", value)?;
            base.clone()
        }
        "k" => {
            opts.k = parse_flag("values", value)?;
            base.clone()
        }
        "gate_variant" => rebuild_gcp(base, Some(parse_flag("values", value)?), None, seed)?,
        "gcp_layers" => {
            let layers = value
                .split('+')
                .map(|l| parse_flag::<usize>("values", l))
                .collect::<Result<Vec<_>>>()?;
            rebuild_gcp(base, None, Some(layers), seed)?
        }
        other => {
            return Err(usage(format!(
                "unknown --axis `{other}` (expected mask_rate, gate_variant, freeze, k or gcp_layers)"
            )))
        }
    };
    train.validate().map_err(|e| usage(e.to_string()))?;
    Ok((model, train, opts))
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let (cfg, seed) = load_config(&args.common)?;
    let mode: QueryMode = parse_flag("query-mode", &args.query_mode)?;
    let split: Split = parse_flag("split", &args.split)?;
    let base = read_model(&args.model)?;
    // validate every value before any training starts
    let settings = args
        .values
        .iter()
        .map(|v| ablation_setting(&args.axis, v, &base, &cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let dataset = read_dataset(&args.data)?;
    let mut resolved = cfg.clone();
    resolved.model = base.config.clone();
    let run = Run::start("ablate", &args.common, &resolved, seed, args)?;

    let train_scenes = split_scenes(&dataset, Split::Pretrain)?;
    let train_bank = bank_from_split(&base, &dataset, Split::Pretrain)?;
    let eval_scenes = dataset.split_scenes(split);
    let mut csv = String::from("axis,value,query_mode,split,ap,ap_ambiguous,ap_base,ap_novel\n");
    // settings that differ only in evaluation share one trained model
    let mut trained: Option<(TrainConfig, Model)> = None;
    for (value, (model, train, opts)) in args.values.iter().zip(settings) {
        let model = match &trained {
            Some((t, m)) if args.axis == "k" && *t == train => m.clone(),
            _ => {
                let mut model = model;
                let log = train_gcp(&mut model, &dataset.vocab, &train_scenes, &train_bank, &train)?;
                write_log(&run.path(&format!("{}={value}/train-log.ndjson", args.axis)), &log)?;
                trained = Some((train.clone(), model.clone()));
                model
            }
        };
        // the eval bank follows the model in case the image encoder was trained
        let eval_bank = bank_from_split(&model, &dataset, Split::Fewshot)?;
        let report = finetuning_free_eval(&model, &dataset.vocab, &eval_scenes, split.name(), Some(&eval_bank), mode, &opts)?;
        run.write_json(&format!("{}={value}/report.json", args.axis), &report)?;
        log::info!("{}={value}: {}", args.axis, summary(&report));
        let pct = |v: Option<f64>| v.map_or(String::new(), |v| format!("{:.2}", 100.0 * v));
        let _ = writeln!(
            csv,
            "{},{value},{mode},{},{},{},{},{}",
            args.axis,
            split.name(),
            pct(report.mean_ap),
            pct(report.ambiguous_mean_ap),
            pct(report.base_mean_ap),
            pct(report.novel_mean_ap)
        );
    }
    fs::write(run.path("ablation.csv"), &csv)?;
    eprint!("{csv}");
    run.finish()
}
