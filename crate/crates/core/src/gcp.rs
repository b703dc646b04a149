//! Gated class-scalable perceiver layers.
//!
//! Each category token `t_i` is enriched by its own vision queries `V_i`:
//!
//! ```text
//! v_bar_i = X-MHA(V_i, I)            (queries attend over the image grid)
//! v_hat_i = X-MHA(t_i, v_bar_i)      (token attends over its own queries)
//! t_hat_i = t_i + tanh(gate(v_hat_i)) * v_hat_i
//! ```
//!
//! All categories are processed in one batched pass; a block-diagonal
//! [`ClassAttentionMask`] keeps every token on its own queries. The gate
//! pre-activation is scaled by a per-layer scalar initialised to zero, so a
//! fresh layer is an exact identity.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::Var;
use crate::config::{GateVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Attention, Graph, Linear};
use crate::params::{normal, ParamId, ParamStore};

/// Name prefix of every GCP parameter (including the mask token).
pub const GCP_PREFIX: &str = "gcp.";

#[derive(Debug, Clone)]
pub struct Gate {
    pub variant: GateVariant,
    pub scalar: ParamId,
    /// Narrowing MLP for `Mlp` / `MlpConcat`.
    pub mlp: Option<[Linear; 3]>,
    /// Single projection for `Linear`.
    pub linear: Option<Linear>,
}

impl Gate {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, variant: GateVariant) -> Self {
        let scalar = store.insert(format!("{name}.scalar"), Array2::zeros((1, 1)));
        let h1 = (d / 2).max(1);
        let h2 = (d / 4).max(1);
        let mlp_in = if variant == GateVariant::MlpConcat { 2 * d } else { d };
        let mlp = matches!(variant, GateVariant::Mlp | GateVariant::MlpConcat).then(|| {
            [
                Linear::new(store, rng, &format!("{name}.fc1"), mlp_in, h1),
                Linear::new(store, rng, &format!("{name}.fc2"), h1, h2),
                Linear::new(store, rng, &format!("{name}.fc3"), h2, 1),
            ]
        });
        let linear = (variant == GateVariant::Linear)
            .then(|| Linear::new(store, rng, &format!("{name}.proj"), d, 1));
        Self {
            variant,
            scalar,
            mlp,
            linear,
        }
    }

    /// Gate values `[n x 1]` in `(-1, 1)` for each row of `v_hat` (with the
    /// matching token row of `t` for the concatenating variant).
    pub fn forward(&self, g: &mut Graph, v_hat: Var, t: Var) -> Result<Var> {
        let s = g.p(self.scalar);
        let n = g.value(v_hat).nrows();
        let pre = match self.variant {
            GateVariant::ScalarOnly => g.constant(Array2::ones((n, 1))),
            GateVariant::Linear => {
                let lin = self.linear.as_ref().ok_or_else(missing_gate_weights)?;
                lin.forward(g, v_hat)
            }
            GateVariant::Mlp | GateVariant::MlpConcat => {
                let [fc1, fc2, fc3] = self.mlp.as_ref().ok_or_else(missing_gate_weights)?;
                let input = if self.variant == GateVariant::MlpConcat {
                    g.tape.concat_cols(&[v_hat, t])
                } else {
                    v_hat
                };
                let h = fc1.forward(g, input);
                let h = g.tape.relu(h);
                let h = fc2.forward(g, h);
                let h = g.tape.relu(h);
                fc3.forward(g, h)
            }
        };
        let scaled = g.tape.mul_scalar(pre, s);
        Ok(g.tape.tanh(scaled))
    }
}

fn missing_gate_weights() -> Error {
    Error::Config("gate weights do not match the configured variant".into())
}

#[derive(Debug, Clone)]
pub struct GcpLayer {
    /// Vision queries over the image grid.
    pub xmha_vi: Attention,
    /// Category token over its vision queries.
    pub xmha_tv: Attention,
    pub gate: Gate,
    pub query_residual: bool,
}

impl GcpLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        Self {
            xmha_vi: Attention::new(store, rng, &format!("{name}.xmha_vi"), cfg.d, cfg.heads),
            xmha_tv: Attention::new(store, rng, &format!("{name}.xmha_tv"), cfg.d, cfg.heads),
            gate: Gate::new(store, rng, &format!("{name}.gate"), cfg.d, cfg.gate_variant),
            query_residual: cfg.query_residual,
        }
    }
}

/// The GCP layers of a model plus the learned `[MASK]` token embedding.
#[derive(Debug, Clone)]
pub struct GcpStack {
    pub mask_token: ParamId,
    /// One layer per entry of `ModelConfig::gcp_layers`, same order.
    pub layers: Vec<GcpLayer>,
}

impl GcpStack {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let mask_token = store.insert("gcp.mask_token", normal(rng, 1, cfg.d, 1.0));
        let layers = cfg
            .gcp_layers
            .iter()
            .map(|l| GcpLayer::new(store, rng, &format!("gcp.layer{l}"), cfg))
            .collect();
        Self { mask_token, layers }
    }
}

/// Block-diagonal mask: token `i` may attend only to its own queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassAttentionMask {
    pub allowed: Array2<bool>,
}

pub fn build_class_attention_mask(counts: &[usize]) -> ClassAttentionMask {
    let total = counts.iter().sum();
    let mut allowed = Array2::from_elem((counts.len(), total), false);
    let mut start = 0;
    for (i, &c) in counts.iter().enumerate() {
        for j in start..start + c {
            allowed[[i, j]] = true;
        }
        start += c;
    }
    ClassAttentionMask { allowed }
}

/// Multi-head cross-attention: projections and attention only.
pub fn cross_attention(
    g: &mut Graph,
    weights: &Attention,
    queries: Var,
    keys_values: Var,
    mask: Option<&ClassAttentionMask>,
) -> Result<Var> {
    weights.forward(g, queries, keys_values, mask.map(|m| Rc::new(m.allowed.clone())))
}

/// Per-category vision queries stacked into one matrix. A category with
/// zero rows carries the empty-set marker and passes through unchanged.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub stacked: Option<Var>,
    pub counts: Vec<usize>,
}

impl QueryBatch {
    pub fn new(g: &mut Graph, per_category: &[Array2<f64>], d: usize) -> Result<Self> {
        let counts: Vec<usize> = per_category.iter().map(|q| q.nrows()).collect();
        for (i, q) in per_category.iter().enumerate() {
            if q.nrows() > 0 && q.ncols() != d {
                return Err(Error::Shape(format!(
                    "category {i}: vision queries have dim {}, model has {d}",
                    q.ncols()
                )));
            }
        }
        let nonempty: Vec<_> = per_category.iter().filter(|q| q.nrows() > 0).map(|q| q.view()).collect();
        let stacked = if nonempty.is_empty() {
            None
        } else {
            let m = ndarray::concatenate(ndarray::Axis(0), &nonempty).expect("equal widths checked");
            Some(g.constant(m))
        };
        Ok(Self { stacked, counts })
    }

    /// Every category without queries.
    pub fn empty(categories: usize) -> Self {
        Self {
            stacked: None,
            counts: vec![0; categories],
        }
    }
}

/// One GCP layer applied to the token matrix `t [|C| x d]`.
pub fn gcp_forward(
    g: &mut Graph,
    layer: &GcpLayer,
    t: Var,
    queries: &QueryBatch,
    image: Var,
) -> Result<Var> {
    let (c, d) = g.value(t).dim();
    if queries.counts.len() != c {
        return Err(Error::Shape(format!(
            "{} query sets for {c} category tokens",
            queries.counts.len()
        )));
    }
    let Some(stacked) = queries.stacked else {
        return Ok(t);
    };
    if g.value(stacked).ncols() != d {
        return Err(Error::Shape(format!(
            "vision queries have dim {}, tokens have {d}",
            g.value(stacked).ncols()
        )));
    }
    let active: Vec<usize> = (0..c).filter(|&i| queries.counts[i] > 0).collect();
    let active_counts: Vec<usize> = active.iter().map(|&i| queries.counts[i]).collect();

    let mut v_bar = cross_attention(g, &layer.xmha_vi, stacked, image, None)?;
    if layer.query_residual {
        v_bar = g.tape.add(stacked, v_bar);
    }
    let t_active = if active.len() == c { t } else { g.tape.gather_rows(t, &active) };
    let mask = build_class_attention_mask(&active_counts);
    let v_hat = cross_attention(g, &layer.xmha_tv, t_active, v_bar, Some(&mask))?;
    let gate = layer.gate.forward(g, v_hat, t_active)?;
    let delta = g.tape.mul_col(v_hat, gate);

    let delta = if active.len() == c {
        delta
    } else {
        // scatter: inactive categories read an all-zero row
        let zero = g.constant(Array2::zeros((1, d)));
        let padded = g.tape.concat_rows(&[delta, zero]);
        let mut slot = vec![active.len(); c];
        for (pos, &i) in active.iter().enumerate() {
            slot[i] = pos;
        }
        g.tape.gather_rows(padded, &slot)
    };
    Ok(g.tape.add(t, delta))
}
