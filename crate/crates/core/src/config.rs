use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the conditional gate of a GCP layer computes its pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    /// `tanh(s * MLP(v_hat))` with a three-layer narrowing MLP.
    #[default]
    Mlp,
    /// `tanh(s)`, one scalar shared by every category.
    ScalarOnly,
    /// `tanh(s * (w . v_hat + b))`.
    Linear,
    /// `tanh(s * MLP([v_hat, t]))`.
    MlpConcat,
}

impl std::str::FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "scalar_only" => Ok(Self::ScalarOnly),
            "linear" => Ok(Self::Linear),
            "mlp_concat" => Ok(Self::MlpConcat),
            other => Err(Error::Config(format!("unknown gate variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for GateVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::ScalarOnly => "scalar_only",
            Self::Linear => "linear",
            Self::MlpConcat => "mlp_concat",
        })
    }
}

/// Which detector parameters stay frozen while training the GCP stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    /// The whole detector is frozen; only `gcp.*` trains.
    #[default]
    All,
    /// Nothing is frozen.
    None,
    /// The text encoder is released alongside the GCP stack; the image
    /// encoder and detection head stay frozen.
    TextEncoder,
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "none" => Ok(Self::None),
            "text-encoder" => Ok(Self::TextEncoder),
            other => Err(Error::Config(format!("unknown freeze mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::None => "none",
            Self::TextEncoder => "text-encoder",
        })
    }
}

/// Architecture and query settings of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub heads: usize,
    /// Text-encoder block indices followed by a GCP layer.
    pub gcp_layers: Vec<usize>,
    /// Token vocabulary: one embedding per distinct text name.
    pub vocab: Vec<String>,
    /// Area factor applied to exemplar boxes before pooling.
    pub gamma: f64,
    /// Bank capacity per category.
    pub bank_capacity: usize,
    /// Vision queries sampled per category per forward.
    pub queries_per_category: usize,
    pub mask_rate: f64,
    pub gate_variant: GateVariant,
    /// Add the vision queries back onto the output of their attention over
    /// the image (`v_bar = v + X-MHA(v, I)`).
    pub query_residual: bool,
    /// Hidden width multiplier of the encoder feed-forward layers.
    pub mlp_ratio: usize,
    /// Weight of the localization term relative to grounding.
    pub loc_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            patch_size: 8,
            image_size: 64,
            image_layers: 2,
            text_layers: 4,
            heads: 4,
            gcp_layers: vec![2, 3],
            vocab: Vec::new(),
            gamma: 2.25,
            bank_capacity: 5000,
            queries_per_category: 5,
            mask_rate: 0.4,
            gate_variant: GateVariant::Mlp,
            query_residual: true,
            mlp_ratio: 2,
            loc_weight: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_regions(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn token_index(&self, name: &str) -> Result<usize> {
        self.vocab
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::Vocabulary(name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size={} must be a multiple of patch_size={}",
                self.image_size, self.patch_size
            ));
        }
        if let Some(&bad) = self.gcp_layers.iter().find(|&&l| l >= self.text_layers) {
            return fail(format!("gcp layer {bad} outside [0, {})", self.text_layers));
        }
        let mut sorted = self.gcp_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.gcp_layers {
            return fail("gcp_layers must be strictly increasing".into());
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return fail(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        if !(1.0..).contains(&self.gamma) {
            return fail(format!("gamma {} must be >= 1", self.gamma));
        }
        if self.queries_per_category == 0 || self.queries_per_category > self.bank_capacity {
            return fail(format!(
                "need 1 <= k ({}) <= K ({})",
                self.queries_per_category, self.bank_capacity
            ));
        }
        let mut names = self.vocab.clone();
        names.sort();
        names.dedup();
        if names.len() != self.vocab.len() {
            return fail("vocab names must be unique".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Optimizer and schedule for GCP modulation and partial fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_gcp: f64,
    pub lr_gate: f64,
    pub weight_decay: f64,
    pub mask_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: String,
    pub freeze_detector: bool,
    /// Finer-grained freezing; `freeze_detector = false` implies `None`.
    pub freeze: FreezeMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate for detector parameters released by `freeze`.
    pub lr_detector: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_gcp: 1e-3,
            lr_gate: 5e-3,
            weight_decay: 1e-4,
            mask_rate: 0.4,
            epochs: 1,
            batch_size: 4,
            seed: 0,
            optimizer: "adamw".into(),
            freeze_detector: true,
            freeze: FreezeMode::All,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_detector: 1e-4,
        }
    }
}

impl TrainConfig {
    /// The large-scale hyper-parameters (GCP learning rate 1e-5). At toy
    /// scale these barely move the attention weights in one epoch.
    pub fn large_scale() -> Self {
        Self {
            lr_gcp: 1e-5,
            ..Self::default()
        }
    }

    pub fn effective_freeze(&self) -> FreezeMode {
        if self.freeze_detector {
            self.freeze
        } else {
            FreezeMode::None
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_gcp >= 0.0 && self.lr_gate >= 0.0 && self.lr_detector >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask_rate {} outside [0, 1]", self.mask_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.optimizer.eq_ignore_ascii_case("adamw") {
            return Err(Error::Config(format!("unsupported optimizer `{}`", self.optimizer)));
        }
        Ok(())
    }
}

/// Settings for training the text-queried baseline detector from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 1e-4,
            epochs: 16,
            batch_size: 4,
            seed: 0,
            warmup_steps: 50,
        }
    }
}
