//! Unimodal decoder-only transformer tower.
//!
//! Pre-norm residual blocks, learned absolute positions local to the tower's
//! own stream, and an output head tied to the token embedding table. The
//! same tower description runs standalone (pre-training, the
//! vocabulary-expansion baseline) or inside a zipped model.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::TowerPack;
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention, INIT_STD};
use crate::numeric::{AttentionLayout, Graph, ParamStore, Scalar, Tensor, Var};
use crate::seeding::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub tie_output_to_embedding: bool,
}

fn default_true() -> bool {
    true
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: key.to_string(), message });
        if self.vocab_size < 3 {
            return bad("vocab_size", format!("must be at least 3, got {}", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("n_heads", format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("d_ff", "d_ff and max_seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Exact number of scalar parameters of a tower with this config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let ln = 2 * d;
        let block = ln + MultiHeadAttention::numel(d, d) + ln + Linear::numel(d, self.d_ff) + Linear::numel(self.d_ff, d);
        let head = if self.tie_output_to_embedding { 0 } else { self.vocab_size * d };
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * block + ln + head
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &Arc<AttentionLayout>,
        dropout: f64,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, Arc::clone(layout))?;
        let a = g.dropout(a, dropout)?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h, dropout)?;
        let f = g.dropout(f, dropout)?;
        g.add(x, f)
    }
}

/// Parameter layout of one tower inside some [`ParamStore`].
#[derive(Clone, Debug)]
pub struct TowerLayout {
    pub config: BackboneConfig,
    pub tok_emb: crate::numeric::ParamId,
    pub pos_emb: crate::numeric::ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    /// Separate `[vocab, d]` output table when the head is untied.
    pub head: Option<crate::numeric::ParamId>,
}

impl TowerLayout {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init", 0);
        let d = config.d_model;
        let tok_emb = store.normal(format!("{prefix}tok_emb"), vec![config.vocab_size, d], INIT_STD, &mut rng)?;
        let pos_emb = store.normal(format!("{prefix}pos_emb"), vec![config.max_seq_len, d], INIT_STD, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let name = format!("{prefix}blocks.{i}");
            blocks.push(Block {
                ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d)?,
                attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, d, config.n_heads, &mut rng)?,
                ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
                ffn: FeedForward::new(store, &format!("{name}.ffn"), d, config.d_ff, &mut rng)?,
            });
        }
        let ln_final = LayerNorm::new(store, &format!("{prefix}ln_final"), d)?;
        let head = if config.tie_output_to_embedding {
            None
        } else {
            Some(store.normal(format!("{prefix}head"), vec![config.vocab_size, d], INIT_STD, &mut rng)?)
        };
        Ok(TowerLayout { config: config.clone(), tok_emb, pos_emb, blocks, ln_final, head })
    }

    pub fn check_pack(&self, pack: &TowerPack) -> Result<()> {
        if let Some(&(_, len)) = pack.spans.iter().find(|(_, len)| *len > self.config.max_seq_len) {
            return Err(Error::invalid(format!("sequence of length {len} exceeds max_seq_len {}", self.config.max_seq_len)));
        }
        if let Some(&t) = pack.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {t} out of range for vocabulary {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Token plus positional embeddings, `[rows, d]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pack: &TowerPack, dropout: f64) -> Result<Var> {
        self.check_pack(pack)?;
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let e = g.gather(tok, &pack.tokens)?;
        let p = g.gather(pos, &pack.positions)?;
        let x = g.add(e, p)?;
        g.dropout(x, dropout)
    }

    pub fn output_table(&self) -> crate::numeric::ParamId {
        self.head.unwrap_or(self.tok_emb)
    }

    /// Final norm followed by the (tied) output projection.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let n = self.ln_final.forward(g, store, h)?;
        let table = g.param(store, self.output_table());
        g.matmul_nt(n, table)
    }

    /// Logits for a subset of rows only.
    pub fn logits_rows<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var, rows: &[usize]) -> Result<Var> {
        let picked = g.gather(h, rows)?;
        self.logits(g, store, picked)
    }

    /// Runs all blocks; returns final hidden states (pre final norm) and the
    /// requested per-layer states (0 = embeddings, k = after block k).
    pub fn run_blocks<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        layout: &Arc<AttentionLayout>,
        dropout: f64,
        collect: &[usize],
    ) -> Result<(Var, BTreeMap<usize, Var>)> {
        let mut hidden = BTreeMap::new();
        if collect.contains(&0) {
            hidden.insert(0, x);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, store, x, layout, dropout)?;
            if collect.contains(&(i + 1)) {
                hidden.insert(i + 1, x);
            }
        }
        Ok((x, hidden))
    }
}

/// A standalone tower with its own parameters.
#[derive(Clone, Debug)]
pub struct DecoderBackbone<T> {
    pub config: BackboneConfig,
    pub layout: TowerLayout,
    pub params: ParamStore<T>,
}

/// Eval-mode output of [`DecoderBackbone::forward`].
#[derive(Clone, Debug)]
pub struct BackboneOutput<T> {
    pub logits: Tensor<T>,
    pub hidden: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> DecoderBackbone<T> {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = TowerLayout::register(&mut params, "", &config, seed)?;
        Ok(DecoderBackbone { config, layout, params })
    }

    /// Builds a tower of `config` shape around existing parameters.
    pub fn from_params(config: BackboneConfig, source: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.copy_from(source, prefix, "")?;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Eval-mode forward of a single sequence.
    pub fn forward(&self, tokens: &[usize], collect_hidden: &[usize]) -> Result<BackboneOutput<T>> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if let Some(&k) = collect_hidden.iter().find(|&&k| k > self.config.n_layers) {
            return Err(Error::invalid(format!("layer {k} out of range for {} layers", self.config.n_layers)));
        }
        let pack = TowerPack::from_sequences(&[tokens.to_vec()])?;
        let mut g = Graph::eval();
        let (logits, hidden) = self.forward_packed(&mut g, &pack, collect_hidden)?;
        Ok(BackboneOutput {
            logits: g.tensor(logits),
            hidden: hidden.into_iter().map(|(k, v)| (k, g.tensor(v))).collect(),
        })
    }

    /// Forward over a packed batch in the given graph; dropout follows the
    /// graph mode.
    pub fn forward_packed(
        &self,
        g: &mut Graph<T>,
        pack: &TowerPack,
        collect_hidden: &[usize],
    ) -> Result<(Var, BTreeMap<usize, Var>)> {
        let (h, hidden) = self.hidden_packed(g, pack, collect_hidden)?;
        Ok((self.layout.logits(g, &self.params, h)?, hidden))
    }

    pub fn hidden_packed(
        &self,
        g: &mut Graph<T>,
        pack: &TowerPack,
        collect_hidden: &[usize],
    ) -> Result<(Var, BTreeMap<usize, Var>)> {
        let p = if g.is_train() { self.config.dropout } else { 0.0 };
        let x = self.layout.embed(g, &self.params, pack, p)?;
        let layout = Arc::new(pack.self_layout()?);
        self.layout.run_blocks(g, &self.params, x, &layout, p, collect_hidden)
    }

    /// Mean next-token cross-entropy over a packed batch.
    pub fn lm_loss(&self, g: &mut Graph<T>, pack: &TowerPack) -> Result<Var> {
        let (logits, _) = self.forward_packed(g, pack, &[])?;
        let (targets, ignore) = pack.next_token_targets();
        g.cross_entropy(logits, &targets, &ignore)
    }

    /// Appends `extra` freshly initialized rows to the token embedding (and
    /// untied head), preserving every existing weight bit-exactly.
    pub fn expand_vocabulary(&self, extra: usize, seed: u64) -> Result<Self> {
        if extra == 0 {
            return Err(Error::invalid("vocabulary expansion needs at least one new token"));
        }
        let mut config = self.config.clone();
        config.vocab_size += extra;
        let mut grown = Self::new(config, seed)?;
        let d = self.config.d_model;
        let old_rows = self.config.vocab_size * d;
        let mut tables = vec![(self.layout.tok_emb, grown.layout.tok_emb)];
        if let (Some(a), Some(b)) = (self.layout.head, grown.layout.head) {
            tables.push((a, b));
        }
        let mut rng = substream(seed, "expand_vocabulary", 0);
        let init = Normal::new(0.0, INIT_STD).map_err(|e| Error::invalid(e.to_string()))?;
        for (old_id, new_id) in tables {
            let sample: Vec<T> = (0..extra * d).map(|_| T::from_f64_lossy(init.sample(&mut rng))).collect();
            let dst = grown.params.get_mut(new_id).data_mut();
            dst[..old_rows].copy_from_slice(self.params.get(old_id).data());
            dst[old_rows..].copy_from_slice(&sample);
        }
        for (id, name, t) in self.params.iter() {
            if id == self.layout.tok_emb || Some(id) == self.layout.head {
                continue;
            }
            let dst = grown.params.id(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            grown.params.get_mut(dst).data_mut().copy_from_slice(t.data());
            let flag = t.requires_grad();
            grown.params.get_mut(dst).set_requires_grad(flag);
        }
        Ok(grown)
    }

    pub fn cast<U: Scalar>(&self) -> DecoderBackbone<U> {
        DecoderBackbone { config: self.config.clone(), layout: self.layout.clone(), params: self.params.cast() }
    }
}
