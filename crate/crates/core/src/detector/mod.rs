//! The language-queried toy detector: parallel image and text encoders, a
//! per-cell detection head and region–word similarity classification.

mod checkpoint;
mod inference;
mod targets;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{CheckpointManifest, CHECKPOINT_FORMAT_VERSION};
pub use inference::{
    box_iou, detect, detect_from_logits, nms_per_class, scene_scores, DetectOptions, Detection,
    MultiModalQuery,
};
pub use targets::{
    assign_targets, grounding_loss, grounding_targets, localization_loss, Assignment, GtInstance,
};

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gcp::{gcp_forward, GcpStack, QueryBatch, GCP_PREFIX};
use crate::nn::{Block, Graph, LayerNorm, Linear};
use crate::params::{normal, ParamId, ParamStore};
use crate::raster::Raster;

/// Box offsets are clamped to this range before exponentiation.
const MAX_LOG_OFFSET: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub box_reg: Linear,
}

/// Parameter ids of every sub-module.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub head: DetectionHead,
    pub gcp: GcpStack,
}

impl Architecture {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let image = ImageEncoder {
            patch_embed: Linear::new(store, &mut rng, "image.patch_embed", patch_dim, d),
            pos_embed: store.insert("image.pos_embed", normal(&mut rng, cfg.num_regions(), d, 0.1)),
            blocks: (0..cfg.image_layers)
                .map(|i| Block::new(store, &mut rng, &format!("image.block{i}"), d, cfg.heads, cfg.mlp_ratio))
                .collect(),
            norm: LayerNorm::new(store, "image.norm", d),
        };
        let text = TextEncoder {
            token_embed: store.insert("text.token_embed", normal(&mut rng, cfg.vocab.len(), d, 1.0)),
            blocks: (0..cfg.text_layers)
                .map(|i| Block::new(store, &mut rng, &format!("text.block{i}"), d, cfg.heads, cfg.mlp_ratio))
                .collect(),
        };
        let head = DetectionHead {
            fc1: Linear::new(store, &mut rng, "head.fc1", d, d),
            fc2: Linear::new(store, &mut rng, "head.fc2", d, d),
            box_reg: Linear::new(store, &mut rng, "head.box", d, 4),
        };
        // the box regressor starts at the default cell box
        *store.get_mut(head.box_reg.weight) *= 0.01;
        let gcp = GcpStack::new(store, &mut rng, cfg);
        Self { image, text, head, gcp }
    }
}

/// Image encoder output: one `d`-dim row per grid cell, raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub grid: Array2<f64>,
}

impl ImageFeatures {
    pub fn num_regions(&self) -> usize {
        self.grid.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub tokens: Array2<f64>,
    pub mask_flags: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionOutputs {
    pub region_features: Array2<f64>,
    /// `[N x 4]` pixel boxes `(x1, y1, x2, y2)`.
    pub boxes: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityLogits {
    pub logits: Array2<f64>,
}

/// Inputs that switch on the GCP path of the text encoder.
pub struct GcpInputs<'a> {
    /// Per-category query matrices; zero rows mark an empty set.
    pub queries: &'a [Array2<f64>],
    pub image: &'a ImageFeatures,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub arch: Architecture,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let arch = Architecture::build(&config, &mut params, seed);
        Ok(Self { config, params, arch })
    }

    /// Rebuilds the architecture for `config` and copies `params` in by
    /// name. Every parameter must be present.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params.load_from(params)?;
        Ok(model)
    }

    /// Fresh GCP weights (zero gates), leaving the detector untouched.
    pub fn reset_gcp(&mut self, seed: u64) {
        let fresh = Self::new(self.config.clone(), seed).expect("config already validated");
        for (id, name, value) in fresh.params.iter() {
            if name.starts_with(GCP_PREFIX) {
                self.params.get_mut(id).assign(value);
            }
        }
    }

    /// A copy whose GCP stack is rebuilt for `config` (fresh, zero gates)
    /// with every detector parameter carried over. `config` may differ
    /// from the current one only in GCP settings.
    pub fn with_gcp_config(&self, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut fresh = Self::new(config, seed)?;
        let mut copied = 0;
        for (_, name, value) in self.params.iter().filter(|(_, n, _)| !n.starts_with(GCP_PREFIX)) {
            let id = fresh
                .params
                .id(name)
                .ok_or_else(|| Error::Config(format!("parameter `{name}` has no place in the new configuration")))?;
            if fresh.params.get(id).dim() != value.dim() {
                return Err(Error::Config(format!("parameter `{name}` changes shape under the new configuration")));
            }
            fresh.params.get_mut(id).assign(value);
            copied += 1;
        }
        let expected = fresh.params.iter().filter(|(_, n, _)| !n.starts_with(GCP_PREFIX)).count();
        if copied != expected {
            return Err(Error::Config("the new configuration changes the detector itself".into()));
        }
        Ok(fresh)
    }

    /// `true` for parameter ids whose name starts with `prefix`.
    pub fn mask_by_prefix(&self, prefixes: &[&str]) -> Vec<bool> {
        self.params
            .iter()
            .map(|(_, name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .collect()
    }

    pub fn grid_centers(&self) -> Vec<(f64, f64)> {
        let side = self.config.grid_side();
        let p = self.config.patch_size as f64;
        (0..side * side)
            .map(|i| (((i % side) as f64 + 0.5) * p, ((i / side) as f64 + 0.5) * p))
            .collect()
    }

    fn check_image(&self, image: &Raster) -> Result<()> {
        let s = self.config.image_size;
        if image.width != s || image.height != s {
            return Err(Error::Config(format!(
                "image is {}x{}, model expects {s}x{s}",
                image.width, image.height
            )));
        }
        Ok(())
    }

    pub fn image_graph(&self, g: &mut Graph, image: &Raster) -> Result<Var> {
        self.check_image(image)?;
        let patches = g.constant(image.patches(self.config.patch_size)?);
        let enc = &self.arch.image;
        let x = enc.patch_embed.forward(g, patches);
        let pos = g.p(enc.pos_embed);
        let mut x = g.tape.add(x, pos);
        for block in &enc.blocks {
            x = block.forward(g, x)?;
        }
        Ok(enc.norm.forward(g, x))
    }

    /// Region features and decoded, clipped boxes from the image grid.
    pub fn head_graph(&self, g: &mut Graph, grid: Var) -> Result<(Var, Var)> {
        let n = g.value(grid).nrows();
        if n != self.config.num_regions() {
            return Err(Error::Shape(format!(
                "grid has {n} rows, expected {}",
                self.config.num_regions()
            )));
        }
        let head = &self.arch.head;
        let h = head.fc1.forward(g, grid);
        let h = g.tape.relu(h);
        let regions = head.fc2.forward(g, h);
        let offsets = head.box_reg.forward(g, regions);
        let offsets = g.tape.clamp(offsets, -MAX_LOG_OFFSET, MAX_LOG_OFFSET);
        let dist = g.tape.exp(offsets);
        let half = self.config.patch_size as f64 / 2.0;
        let signs = g.constant(ndarray::arr2(&[[-half, -half, half, half]]));
        let rel = g.tape.mul_row(dist, signs);
        let mut centers = Array2::zeros((n, 4));
        for (i, (cx, cy)) in self.grid_centers().into_iter().enumerate() {
            centers.row_mut(i).assign(&ndarray::arr1(&[cx, cy, cx, cy]));
        }
        let centers = g.constant(centers);
        let boxes = g.tape.add(rel, centers);
        let boxes = g.tape.clamp(boxes, 0.0, self.config.image_size as f64);
        Ok((regions, boxes))
    }

    /// Token features for the prompt `names`. Masked categories read the
    /// `[MASK]` embedding. With `gcp`, the GCP layer for each configured
    /// block index rewrites the tokens after that block.
    pub fn text_graph(
        &self,
        g: &mut Graph,
        names: &[String],
        mask_flags: &[bool],
        gcp: Option<(&QueryBatch, Var)>,
    ) -> Result<Var> {
        if mask_flags.len() != names.len() {
            return Err(Error::Shape(format!(
                "{} mask flags for {} categories",
                mask_flags.len(),
                names.len()
            )));
        }
        if names.is_empty() {
            return Err(Error::Argument("empty category prompt".into()));
        }
        let table = g.p(self.arch.text.token_embed);
        let mask = g.p(self.arch.gcp.mask_token);
        let mut rows = Vec::with_capacity(names.len());
        for (name, &masked) in names.iter().zip(mask_flags) {
            let idx = self.config.token_index(name)?;
            rows.push(if masked { mask } else { g.tape.gather_rows(table, &[idx]) });
        }
        let mut x = if rows.len() == 1 { rows[0] } else { g.tape.concat_rows(&rows) };
        for (i, block) in self.arch.text.blocks.iter().enumerate() {
            x = block.forward(g, x)?;
            if let Some((queries, image)) = gcp {
                if let Some(pos) = self.config.gcp_layers.iter().position(|&l| l == i) {
                    x = gcp_forward(g, &self.arch.gcp.layers[pos], x, queries, image)?;
                }
            }
        }
        Ok(x)
    }

    pub fn encode_image(&self, image: &Raster) -> Result<ImageFeatures> {
        let mut g = Graph::new(&self.params, None);
        let grid = self.image_graph(&mut g, image)?;
        Ok(ImageFeatures {
            grid: g.value(grid).clone(),
        })
    }

    pub fn detection_head(&self, features: &ImageFeatures) -> Result<RegionOutputs> {
        let mut g = Graph::new(&self.params, None);
        let grid = g.constant(features.grid.clone());
        let (r, b) = self.head_graph(&mut g, grid)?;
        Ok(RegionOutputs {
            region_features: g.value(r).clone(),
            boxes: g.value(b).clone(),
        })
    }

    pub fn encode_text(
        &self,
        names: &[String],
        mask_flags: &[bool],
        gcp: Option<GcpInputs<'_>>,
    ) -> Result<TokenFeatures> {
        let mut g = Graph::new(&self.params, None);
        let gcp_vars = match gcp {
            Some(inputs) => {
                if inputs.queries.len() != names.len() {
                    return Err(Error::Shape(format!(
                        "{} query sets for {} categories",
                        inputs.queries.len(),
                        names.len()
                    )));
                }
                let batch = QueryBatch::new(&mut g, inputs.queries, self.config.d)?;
                let image = g.constant(inputs.image.grid.clone());
                Some((batch, image))
            }
            None => None,
        };
        let t = self.text_graph(&mut g, names, mask_flags, gcp_vars.as_ref().map(|(b, i)| (b, *i)))?;
        Ok(TokenFeatures {
            tokens: g.value(t).clone(),
            mask_flags: mask_flags.to_vec(),
        })
    }
}

/// `S = R T^T`.
pub fn region_word_logits(regions: &RegionOutputs, tokens: &TokenFeatures) -> Result<SimilarityLogits> {
    let (r, t) = (&regions.region_features, &tokens.tokens);
    if r.ncols() != t.ncols() {
        return Err(Error::Shape(format!(
            "region dim {} vs token dim {}",
            r.ncols(),
            t.ncols()
        )));
    }
    Ok(SimilarityLogits { logits: r.dot(&t.t()) })
}

/// Graph form of [`region_word_logits`].
pub fn logits_graph(g: &mut Graph, regions: Var, tokens: Var) -> Result<Var> {
    let (rd, td) = (g.value(regions).ncols(), g.value(tokens).ncols());
    if rd != td {
        return Err(Error::Shape(format!("region dim {rd} vs token dim {td}")));
    }
    let tt = g.tape.transpose(tokens);
    Ok(g.tape.matmul(regions, tt))
}

#[cfg(test)]
mod tests;
