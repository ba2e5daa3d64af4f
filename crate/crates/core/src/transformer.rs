//! Pre-norm transformer blocks shared by the vision and text towers.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{BoolMask, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add_normal(format!("{prefix}.weight"), &[fan_in, fan_out], INIT_STD, rng),
            bias: bias.then(|| store.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    ln_attn: LayerNormParams,
    query: LinearParams,
    key: LinearParams,
    value: LinearParams,
    out: LinearParams,
    ln_mlp: LayerNormParams,
    fc_in: LinearParams,
    fc_out: LinearParams,
    n_heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        let hidden = MLP_RATIO * d;
        Self {
            ln_attn: LayerNormParams::new(store, &format!("{prefix}.ln_attn"), d),
            query: LinearParams::new(store, &format!("{prefix}.attn.query"), d, d, true, rng),
            // A key bias shifts every score of a query row equally, which the
            // softmax cancels; it would only be a parameter with zero gradient.
            key: LinearParams::new(store, &format!("{prefix}.attn.key"), d, d, false, rng),
            value: LinearParams::new(store, &format!("{prefix}.attn.value"), d, d, true, rng),
            out: LinearParams::new(store, &format!("{prefix}.attn.out"), d, d, true, rng),
            ln_mlp: LayerNormParams::new(store, &format!("{prefix}.ln_mlp"), d),
            fc_in: LinearParams::new(store, &format!("{prefix}.mlp.fc_in"), d, hidden, true, rng),
            fc_out: LinearParams::new(store, &format!("{prefix}.mlp.fc_out"), hidden, d, true, rng),
            n_heads,
        }
    }

    /// `x` holds `segments` stacked sequences of `mask.rows()` tokens each.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mask: &Rc<BoolMask>,
        segments: usize,
    ) -> Result<NodeId> {
        let h = self.ln_attn.apply(g, store, x)?;
        let q = self.query.apply(g, store, h)?;
        let k = self.key.apply(g, store, h)?;
        let v = self.value.apply(g, store, h)?;
        let a = g.attention(q, k, v, mask, segments, self.n_heads)?;
        let a = self.out.apply(g, store, a)?;
        let x = g.add(x, a)?;
        let h = self.ln_mlp.apply(g, store, x)?;
        let h = self.fc_in.apply(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc_out.apply(g, store, h)?;
        g.add(x, h)
    }
}
