//! The zipped two-tower model.
//!
//! Tower A (text) and tower B (speech) run in lockstep. At zip step `n` the
//! hidden state after A-layer `n * i_A` and after B-layer `n * i_B` are
//! each projected into the other tower's width and cross-attended by the
//! other tower through a tanh-gated cross-attention block. Both directions
//! read the other tower's state from before that step's cross update.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, DecoderBackbone, TowerLayout};
use crate::error::{Error, Result};
use crate::interleave::{InterleavedSequence, Modality, PackedBatch};
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention, INIT_STD};
use crate::numeric::{AttentionLayout, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::seeding::substream;

pub const TEXT_PREFIX: &str = "text.";
pub const SPEECH_PREFIX: &str = "speech.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZipperConfig {
    /// Layers of tower A between zips (`i_A`).
    pub interval_text: usize,
    /// Layers of tower B between zips (`i_B`).
    pub interval_speech: usize,
    pub n_zips: usize,
    pub proj_hidden: usize,
    #[serde(default = "default_input_proj_layers")]
    pub input_proj_layers: usize,
    #[serde(default = "default_true")]
    pub enable_input_proj_text: bool,
    #[serde(default = "default_true")]
    pub enable_input_proj_speech: bool,
    #[serde(default = "default_true")]
    pub freeze_text: bool,
    #[serde(default)]
    pub freeze_speech: bool,
    /// One key projection per direction shared by every zip step.
    #[serde(default)]
    pub share_cross_projections: bool,
    /// Train-mode dropout inside both towers.
    #[serde(default)]
    pub dropout: f64,
}

fn default_input_proj_layers() -> usize {
    3
}

fn default_true() -> bool {
    true
}

impl Default for ZipperConfig {
    fn default() -> Self {
        ZipperConfig {
            interval_text: 1,
            interval_speech: 1,
            n_zips: 4,
            proj_hidden: 64,
            input_proj_layers: 3,
            enable_input_proj_text: true,
            enable_input_proj_speech: true,
            freeze_text: true,
            freeze_speech: false,
            share_cross_projections: false,
            dropout: 0.0,
        }
    }
}

impl ZipperConfig {
    pub fn validate(&self, text: &BackboneConfig, speech: &BackboneConfig) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: key.to_string(), message });
        if self.interval_text == 0 || self.interval_speech == 0 {
            return bad("interval_text", "zip intervals must be positive".into());
        }
        if self.n_zips > text.n_layers / self.interval_text {
            return bad(
                "n_zips",
                format!("{} zips at interval {} need more than {} text layers", self.n_zips, self.interval_text, text.n_layers),
            );
        }
        if self.n_zips > speech.n_layers / self.interval_speech {
            return bad(
                "n_zips",
                format!(
                    "{} zips at interval {} need more than {} speech layers",
                    self.n_zips, self.interval_speech, speech.n_layers
                ),
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        if self.input_proj_layers == 0 || self.proj_hidden == 0 {
            return bad("input_proj_layers", "input projection needs at least one layer of positive width".into());
        }
        Ok(())
    }

    /// 1-indexed `(text_layer, speech_layer)` pairs joined at each zip step.
    pub fn schedule(&self) -> Vec<(usize, usize)> {
        (1..=self.n_zips).map(|n| (n * self.interval_text, n * self.interval_speech)).collect()
    }
}

/// `ReLU(MLP(x))` with widths `d -> hidden -> ... -> d`.
#[derive(Clone, Debug)]
pub struct InputProjection {
    pub layers: Vec<Linear>,
}

impl InputProjection {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        n_layers: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let d_in = if i == 0 { d } else { hidden };
            let d_out = if i + 1 == n_layers { d } else { hidden };
            // He-style scale.
            let std = (2.0 / d_in as f64).sqrt();
            layers.push(Linear::new(store, &format!("{name}.{i}"), d_in, d_out, std, rng)?);
        }
        Ok(InputProjection { layers })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, store, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }
}

/// Gated cross-attention followed by a gated feed-forward layer, reading
/// keys and values from the other tower through `ReLU(g(m))`.
#[derive(Clone, Debug)]
pub struct GatedCrossBlock {
    pub query: Modality,
    pub query_layer: usize,
    pub key_layer: usize,
    pub key_projection: Linear,
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub gate_attn: ParamId,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub gate_ffn: ParamId,
}

impl GatedCrossBlock {
    /// `x + tanh(a) * attn(norm(x), h)` then `x + tanh(b) * ffn(norm(x))`,
    /// where `h = ReLU(g(other))`. Without any visible key the attention
    /// term is zero and is skipped.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        other: Option<Var>,
        layout: &Arc<AttentionLayout>,
    ) -> Result<Var> {
        let mut x = x;
        if let Some(m) = other.filter(|_| !layout.blocks().is_empty()) {
            let h = self.key_projection.forward(g, store, m)?;
            let h = g.relu(h);
            let q = self.ln_attn.forward(g, store, x)?;
            let a = self.attn.forward(g, store, q, h, Arc::clone(layout))?;
            let alpha = g.param(store, self.gate_attn);
            let gate = g.tanh(alpha);
            let a = g.scale_by(a, gate)?;
            x = g.add(x, a)?;
        }
        let f = self.ln_ffn.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, f, 0.0)?;
        let beta = g.param(store, self.gate_ffn);
        let gate = g.tanh(beta);
        let f = g.scale_by(f, gate)?;
        g.add(x, f)
    }
}

/// Blocks of zip step `n`: one per direction.
#[derive(Clone, Debug)]
pub struct ZipStep {
    pub text_layer: usize,
    pub speech_layer: usize,
    pub into_text: GatedCrossBlock,
    pub into_speech: GatedCrossBlock,
}

#[derive(Clone, Debug)]
pub struct ZipperModel<T> {
    pub config: ZipperConfig,
    pub text: TowerLayout,
    pub speech: TowerLayout,
    pub input_proj_text: Option<InputProjection>,
    pub input_proj_speech: Option<InputProjection>,
    pub zips: Vec<ZipStep>,
    pub params: ParamStore<T>,
}

/// Logits of both towers for a packed batch. A tower with no rows in the
/// batch has no logits.
pub struct ZipperLogits {
    pub text: Option<Var>,
    pub speech: Option<Var>,
}

impl<T: Scalar> ZipperModel<T> {
    /// Zips two towers with freshly initialized fusion parameters; tower
    /// weights are taken from `text` and `speech` unchanged.
    pub fn new(config: ZipperConfig, text: &DecoderBackbone<T>, speech: &DecoderBackbone<T>, seed: u64) -> Result<Self> {
        let mut model = Self::init(config, &text.config, &speech.config, seed)?;
        model.params.copy_from(&text.params, "", TEXT_PREFIX)?;
        model.params.copy_from(&speech.params, "", SPEECH_PREFIX)?;
        model.apply_freeze();
        Ok(model)
    }

    /// Fully random model (randomly initialized towers).
    pub fn init(config: ZipperConfig, text_cfg: &BackboneConfig, speech_cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate(text_cfg, speech_cfg)?;
        let mut params = ParamStore::new();
        let text = TowerLayout::register(&mut params, TEXT_PREFIX, text_cfg, crate::seeding::derive_seed(seed, "text", 0))?;
        let speech =
            TowerLayout::register(&mut params, SPEECH_PREFIX, speech_cfg, crate::seeding::derive_seed(seed, "speech", 0))?;
        let mut rng = substream(seed, "fusion_init", 0);
        let (da, db) = (text_cfg.d_model, speech_cfg.d_model);
        let input_proj_text = if config.enable_input_proj_text {
            Some(InputProjection::new(&mut params, "proj_in.text", da, config.proj_hidden, config.input_proj_layers, &mut rng)?)
        } else {
            None
        };
        let input_proj_speech = if config.enable_input_proj_speech {
            Some(InputProjection::new(&mut params, "proj_in.speech", db, config.proj_hidden, config.input_proj_layers, &mut rng)?)
        } else {
            None
        };

        let mut shared: Option<(Linear, Linear)> = None;
        let mut zips = Vec::with_capacity(config.n_zips);
        for (n, (k, l)) in config.schedule().into_iter().enumerate() {
            let (to_text, to_speech) = match (&shared, config.share_cross_projections) {
                (Some(p), true) => p.clone(),
                _ => {
                    let name = if config.share_cross_projections { "zip.shared".to_string() } else { format!("zip.{n}") };
                    // g_B maps speech hidden states into text width, g_A the reverse.
                    let to_text = Linear::new(&mut params, &format!("{name}.into_text.key_proj"), db, da, INIT_STD, &mut rng)?;
                    let to_speech =
                        Linear::new(&mut params, &format!("{name}.into_speech.key_proj"), da, db, INIT_STD, &mut rng)?;
                    if config.share_cross_projections {
                        shared = Some((to_text.clone(), to_speech.clone()));
                    }
                    (to_text, to_speech)
                }
            };
            let into_text = Self::cross_block(&mut params, &format!("zip.{n}.into_text"), Modality::Text, k, l, to_text, text_cfg, &mut rng)?;
            let into_speech =
                Self::cross_block(&mut params, &format!("zip.{n}.into_speech"), Modality::Speech, l, k, to_speech, speech_cfg, &mut rng)?;
            zips.push(ZipStep { text_layer: k, speech_layer: l, into_text, into_speech });
        }
        let mut model = ZipperModel { config, text, speech, input_proj_text, input_proj_speech, zips, params };
        model.apply_freeze();
        Ok(model)
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_block(
        params: &mut ParamStore<T>,
        name: &str,
        query: Modality,
        query_layer: usize,
        key_layer: usize,
        key_projection: Linear,
        cfg: &BackboneConfig,
        rng: &mut impl rand::Rng,
    ) -> Result<GatedCrossBlock> {
        let d = cfg.d_model;
        Ok(GatedCrossBlock {
            query,
            query_layer,
            key_layer,
            key_projection,
            ln_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), d)?,
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), d, d, cfg.n_heads, rng)?,
            gate_attn: params.constant(format!("{name}.gate_attn"), vec![1], 0.0)?,
            ln_ffn: LayerNorm::new(params, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(params, &format!("{name}.ffn"), d, cfg.d_ff, rng)?,
            gate_ffn: params.constant(format!("{name}.gate_ffn"), vec![1], 0.0)?,
        })
    }

    /// Syncs per-parameter gradient flags with the freeze settings.
    pub fn apply_freeze(&mut self) {
        self.params.set_requires_grad_prefix("", true);
        if self.config.freeze_text {
            self.params.set_requires_grad_prefix(TEXT_PREFIX, false);
        }
        if self.config.freeze_speech {
            self.params.set_requires_grad_prefix(SPEECH_PREFIX, false);
        }
    }

    pub fn set_freeze(&mut self, freeze_text: bool, freeze_speech: bool) {
        self.config.freeze_text = freeze_text;
        self.config.freeze_speech = freeze_speech;
        self.apply_freeze();
    }

    /// Parameters the optimizer may update: everything except frozen towers.
    pub fn trainable_parameters(&self) -> Vec<(String, ParamId)> {
        self.params
            .iter()
            .filter(|(_, name, _)| {
                !(self.config.freeze_text && name.starts_with(TEXT_PREFIX)
                    || self.config.freeze_speech && name.starts_with(SPEECH_PREFIX))
            })
            .map(|(id, name, _)| (name.to_string(), id))
            .collect()
    }

    pub fn tower(&self, m: Modality) -> &TowerLayout {
        match m {
            Modality::Text => &self.text,
            Modality::Speech => &self.speech,
        }
    }

    /// Extracts one tower as a standalone backbone.
    pub fn tower_backbone(&self, m: Modality) -> Result<DecoderBackbone<T>> {
        let prefix = if m == Modality::Text { TEXT_PREFIX } else { SPEECH_PREFIX };
        DecoderBackbone::from_params(self.tower(m).config.clone(), &self.params, prefix)
    }

    fn train_dropout(&self, g: &Graph<T>) -> f64 {
        if g.is_train() {
            self.config.dropout
        } else {
            0.0
        }
    }

    fn tower_input(
        &self,
        g: &mut Graph<T>,
        tower: &TowerLayout,
        proj: Option<&InputProjection>,
        pack: &crate::interleave::TowerPack,
    ) -> Result<Option<Var>> {
        if pack.is_empty() {
            return Ok(None);
        }
        let x = tower.embed(g, &self.params, pack, self.train_dropout(g))?;
        Ok(Some(match proj {
            Some(p) => p.forward(g, &self.params, x)?,
            None => x,
        }))
    }

    fn run_layers(
        &self,
        g: &mut Graph<T>,
        tower: &TowerLayout,
        x: Option<Var>,
        range: std::ops::Range<usize>,
        layout: &Arc<AttentionLayout>,
    ) -> Result<Option<Var>> {
        let Some(mut x) = x else { return Ok(None) };
        for i in range {
            x = tower.blocks[i].forward(g, &self.params, x, layout, self.train_dropout(g))?;
        }
        Ok(Some(x))
    }

    /// Final hidden states (before the final norm) of both towers.
    pub fn forward_hidden(&self, g: &mut Graph<T>, batch: &PackedBatch) -> Result<(Option<Var>, Option<Var>)> {
        let mut xa = self.tower_input(g, &self.text, self.input_proj_text.as_ref(), &batch.text)?;
        let mut xb = self.tower_input(g, &self.speech, self.input_proj_speech.as_ref(), &batch.speech)?;
        let (mut ka, mut kb) = (0, 0);
        for zip in &self.zips {
            xa = self.run_layers(g, &self.text, xa, ka..zip.text_layer, &batch.text_self)?;
            xb = self.run_layers(g, &self.speech, xb, kb..zip.speech_layer, &batch.speech_self)?;
            ka = zip.text_layer;
            kb = zip.speech_layer;
            let (ma, mb) = (xa, xb);
            xa = match ma {
                Some(x) => Some(zip.into_text.forward(g, &self.params, x, mb, &batch.text_from_speech)?),
                None => None,
            };
            xb = match mb {
                Some(x) => Some(zip.into_speech.forward(g, &self.params, x, ma, &batch.speech_from_text)?),
                None => None,
            };
        }
        xa = self.run_layers(g, &self.text, xa, ka..self.text.blocks.len(), &batch.text_self)?;
        xb = self.run_layers(g, &self.speech, xb, kb..self.speech.blocks.len(), &batch.speech_self)?;
        Ok((xa, xb))
    }

    /// Per-tower logits over a packed batch.
    pub fn forward_batch(&self, g: &mut Graph<T>, batch: &PackedBatch) -> Result<ZipperLogits> {
        let (ha, hb) = self.forward_hidden(g, batch)?;
        let text = ha.map(|h| self.text.logits(g, &self.params, h)).transpose()?;
        let speech = hb.map(|h| self.speech.logits(g, &self.params, h)).transpose()?;
        Ok(ZipperLogits { text, speech })
    }

    /// Eval-mode (or train-mode) logits for one interleaved sequence:
    /// `(text [T_A, V_A], speech [T_B, V_B])`.
    pub fn forward_zipped(&self, seq: &InterleavedSequence, train_mode: bool) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        let batch = PackedBatch::new(std::slice::from_ref(seq))?;
        let mut g = if train_mode { Graph::train(0) } else { Graph::eval() };
        let out = self.forward_batch(&mut g, &batch)?;
        Ok((out.text.map(|v| g.tensor(v)), out.speech.map(|v| g.tensor(v))))
    }

    pub fn cast<U: Scalar>(&self) -> ZipperModel<U> {
        ZipperModel {
            config: self.config.clone(),
            text: self.text.clone(),
            speech: self.speech.clone(),
            input_proj_text: self.input_proj_text.clone(),
            input_proj_speech: self.input_proj_speech.clone(),
            zips: self.zips.clone(),
            params: self.params.cast(),
        }
    }
}
