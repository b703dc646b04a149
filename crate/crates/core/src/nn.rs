//! Parameterised layers built on the tape.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal, ParamId, ParamStore};

/// A forward pass in progress: the tape plus lazily bound parameter leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    trainable: Option<&'p [bool]>,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    /// `trainable[id]` marks parameters that receive gradients; `None`
    /// builds a gradient-free graph.
    pub fn new(store: &'p ParamStore, trainable: Option<&'p [bool]>) -> Self {
        if let Some(t) = trainable {
            assert_eq!(t.len(), store.len(), "trainable mask must cover every parameter");
        }
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = self.trainable.is_some_and(|t| t[id.0]);
        let v = self.tape.param(id, self.store.get(id).clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.tape.value(v)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: store.insert(format!("{name}.weight"), normal(rng, fan_in, fan_out, std)),
            bias: store.insert(format!("{name}.bias"), Array2::zeros((1, fan_out))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.p(self.weight);
        let b = g.p(self.bias);
        let y = g.tape.matmul(x, w);
        g.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Array2::ones((1, d))),
            bias: store.insert(format!("{name}.bias"), Array2::zeros((1, d))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.p(self.gain);
        let bias = g.p(self.bias);
        let n = g.tape.normalize(x, LN_EPS);
        let y = g.tape.mul_row(n, gain);
        g.tape.add_row(y, bias)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Multi-head scaled dot-product attention with query/key/value/output
/// projections and nothing else.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize) -> Self {
        Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d),
            heads,
        }
    }

    /// `queries [m x d]` attend over `keys_values [n x d]`. A `false` mask
    /// entry removes that key for that query; a row with no admitted key is
    /// an error.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        keys_values: Var,
        mask: Option<Rc<Array2<bool>>>,
    ) -> Result<Var> {
        let (m, d) = g.value(queries).dim();
        let (n, dk) = g.value(keys_values).dim();
        if d != dk {
            return Err(Error::Shape(format!("attention: query dim {d} vs key dim {dk}")));
        }
        if d % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide d={d}", self.heads)));
        }
        if let Some(mask) = &mask {
            if mask.dim() != (m, n) {
                return Err(Error::Shape(format!(
                    "attention mask {:?} does not match scores ({m}, {n})",
                    mask.dim()
                )));
            }
            if let Some(row) = mask.outer_iter().position(|r| !r.iter().any(|&a| a)) {
                return Err(Error::EmptyAttention { row });
            }
        }
        let q = self.wq.forward(g, queries);
        let k = self.wk.forward(g, keys_values);
        let v = self.wv.forward(g, keys_values);
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.tape.slice_cols(q, h * dh, (h + 1) * dh),
                    g.tape.slice_cols(k, h * dh, (h + 1) * dh),
                    g.tape.slice_cols(v, h * dh, (h + 1) * dh),
                )
            };
            let kt = g.tape.transpose(kh);
            let scores = g.tape.matmul(qh, kt);
            let scores = g.tape.scale(scores, scale);
            let probs = g.tape.softmax(scores, mask.clone());
            outs.push(g.tape.matmul(probs, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.tape.concat_cols(&outs) };
        Ok(self.wo.forward(g, merged))
    }
}

/// Pre-norm transformer block: self-attention then a ReLU feed-forward,
/// each wrapped in a residual.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), d, d * mlp_ratio),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), d * mlp_ratio, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, None)?;
        let x = g.tape.add(x, a);
        let h = self.ln2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.tape.relu(h);
        let h = self.fc2.forward(g, h);
        Ok(g.tape.add(x, h))
    }
}
