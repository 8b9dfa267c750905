//! Parameterized building blocks shared by the towers and the fusion layers.
//!
//! Layers only hold [`ParamId`]s; values live in the owning model's
//! [`ParamStore`], so the same layer description works at any precision.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::numeric::{AttentionLayout, Graph, ParamId, ParamStore, Scalar, Var};

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.normal(format!("{name}.weight"), vec![d_in, d_out], std, rng)?;
        let bias = store.constant(format!("{name}.bias"), vec![d_out], 0.0)?;
        Ok(Linear { weight, bias, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn numel(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        let gain = store.constant(format!("{name}.gain"), vec![d], 1.0)?;
        let bias = store.constant(format!("{name}.bias"), vec![d], 0.0)?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two-layer ReLU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, d_ff, INIT_STD, rng)?,
            down: Linear::new(store, &format!("{name}.down"), d_ff, d, INIT_STD, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout)?;
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Queries come from width `d`; keys and values from width `d_kv`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        d_kv: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), d, d, INIT_STD, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d_kv, d, INIT_STD, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d_kv, d, INIT_STD, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, INIT_STD, rng)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        kv: Var,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, kv)?;
        let v = self.value.forward(g, store, kv)?;
        let a = g.attention(q, k, v, self.heads, layout)?;
        self.output.forward(g, store, a)
    }

    pub fn numel(d: usize, d_kv: usize) -> usize {
        2 * Linear::numel(d, d) + 2 * Linear::numel(d_kv, d)
    }
}
