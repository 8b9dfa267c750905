//! TOML experiment configuration.
//!
//! Every section is optional and falls back to the desk-scale defaults;
//! unknown keys are rejected. All randomness derives from the top-level
//! `seed` through named substreams.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::evalkit::{AblationSettings, EvalSettings, RunKind};
use crate::fusion::ZipperConfig;
use crate::synthdata::{CorpusSpec, TextTokenizer, MAX_SENTENCE_CHARS, SPEECH_VOCAB};
use crate::training::TrainSpec;

pub fn text_backbone_default() -> BackboneConfig {
    BackboneConfig {
        vocab_size: TextTokenizer::VOCAB,
        d_model: 64,
        n_layers: 4,
        n_heads: 4,
        d_ff: 128,
        max_seq_len: 128,
        dropout: 0.0,
        tie_output_to_embedding: true,
    }
}

pub fn speech_backbone_default() -> BackboneConfig {
    BackboneConfig { vocab_size: SPEECH_VOCAB, ..text_backbone_default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Also pre-train the text tower on the unpaired text split.
    pub text: bool,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings { steps: 1000, batch_size: 32, learning_rate: 1e-3, text: true }
    }
}

impl PretrainSettings {
    pub fn train_spec(&self, seed: u64) -> TrainSpec {
        TrainSpec { steps: self.steps, batch_size: self.batch_size, learning_rate: self.learning_rate, seed, ..TrainSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    /// Defaults to the top-level seed.
    pub seed: Option<u64>,
    pub n_pairs: usize,
    pub fraction: f64,
    pub noise: f64,
    pub n_unpaired_speech: usize,
    pub n_unpaired_text: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub code_len: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        let d = CorpusSpec::default();
        CorpusSettings {
            seed: None,
            n_pairs: d.n_pairs,
            fraction: 1.0,
            noise: d.noise,
            n_unpaired_speech: d.n_unpaired_speech,
            n_unpaired_text: d.n_unpaired_text,
            n_val: d.n_val,
            n_test: d.n_test,
            code_len: d.code_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub fractions: Vec<f64>,
    pub kinds: Vec<RunKind>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            fractions: crate::evalkit::DEFAULT_FRACTIONS.to_vec(),
            kinds: vec![RunKind::zipper(false), RunKind::zipper(true), RunKind::baseline()],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub dropout: f64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings { dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub text_backbone: BackboneConfig,
    pub speech_backbone: BackboneConfig,
    pub zipper: ZipperConfig,
    pub pretrain: PretrainSettings,
    pub train: TrainSpec,
    pub baseline: BaselineSettings,
    pub corpus: CorpusSettings,
    pub eval: EvalSettings,
    pub sweep: SweepSettings,
    pub ablation: AblationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            text_backbone: text_backbone_default(),
            speech_backbone: speech_backbone_default(),
            zipper: ZipperConfig::default(),
            pretrain: PretrainSettings::default(),
            train: TrainSpec::default(),
            baseline: BaselineSettings::default(),
            corpus: CorpusSettings::default(),
            eval: EvalSettings::default(),
            sweep: SweepSettings::default(),
            ablation: AblationSettings::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Dotted paths of `over` keys that `base` does not have.
fn unknown_keys(base: &toml::Table, over: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in over {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => unknown_keys(b, o, &path, out),
            (Some(_), _) => {}
            (None, _) => out.push(path),
        }
    }
}

fn bad<T>(key: &str, message: impl Into<String>) -> Result<T> {
    Err(Error::Config { key: key.to_string(), message: message.into() })
}

impl ExperimentConfig {
    /// Parses a TOML document layered over the defaults, so any key may be
    /// omitted, including individual fields of a section.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(s).map_err(|e| {
            let key = e.span().map(|sp| s[sp].trim().to_string()).unwrap_or_default();
            Error::Config { key, message: e.message().to_string() }
        })?;
        let mut merged = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| Error::Config { key: String::new(), message: e.to_string() })?;
        let defaults = merged.clone();
        merge(&mut merged, user.clone());
        let cfg: ExperimentConfig = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| {
            let message = e.message().to_string();
            let mut unknown = Vec::new();
            unknown_keys(&defaults, &user, "", &mut unknown);
            let key = unknown
                .iter()
                .find(|k| message.contains(&format!("`{}`", k.rsplit('.').next().unwrap_or(k))))
                .cloned()
                .unwrap_or_default();
            Error::Config { key, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config { key: String::new(), message: e.to_string() })
    }

    /// Cross-field checks: tower vocabularies, zip schedule, length budgets.
    pub fn validate(&self) -> Result<()> {
        let prefixed = |section: &str, e: Error| match e {
            Error::Config { key, message } => Error::Config { key: format!("{section}.{key}"), message },
            other => other,
        };
        self.text_backbone.validate().map_err(|e| prefixed("text_backbone", e))?;
        self.speech_backbone.validate().map_err(|e| prefixed("speech_backbone", e))?;
        if self.text_backbone.vocab_size != TextTokenizer::VOCAB {
            return bad("text_backbone.vocab_size", format!("must be {} for the character tokenizer", TextTokenizer::VOCAB));
        }
        if self.speech_backbone.vocab_size != SPEECH_VOCAB {
            return bad("speech_backbone.vocab_size", format!("must be {SPEECH_VOCAB} for the speech codebook"));
        }
        self.zipper.validate(&self.text_backbone, &self.speech_backbone).map_err(|e| prefixed("zipper", e))?;
        self.train.validate().map_err(|e| prefixed("train", e))?;
        if self.pretrain.batch_size == 0 {
            return bad("pretrain.batch_size", "must be positive");
        }
        if !(0.0..1.0).contains(&self.baseline.dropout) {
            return bad("baseline.dropout", "outside [0, 1)");
        }
        let c = &self.corpus;
        if !(c.fraction > 0.0 && c.fraction <= 1.0) {
            return bad("corpus.fraction", format!("{} outside (0, 1]", c.fraction));
        }
        if !(0.0..=1.0).contains(&c.noise) {
            return bad("corpus.noise", "outside [0, 1]");
        }
        if c.n_pairs == 0 || c.n_val == 0 {
            return bad("corpus.n_pairs", "paired and validation splits must be non-empty");
        }
        let text_len = MAX_SENTENCE_CHARS + 2;
        let speech_len = c.code_len * MAX_SENTENCE_CHARS + 2;
        if self.text_backbone.max_seq_len < text_len {
            return bad("text_backbone.max_seq_len", format!("must be at least {text_len}"));
        }
        if self.speech_backbone.max_seq_len < speech_len {
            return bad("speech_backbone.max_seq_len", format!("must be at least {speech_len}"));
        }
        if self.text_backbone.max_seq_len < text_len + speech_len {
            return bad(
                "text_backbone.max_seq_len",
                format!("the expanded single decoder needs {} positions for a flattened pair", text_len + speech_len),
            );
        }
        self.eval.validate().map_err(|e| prefixed("eval", e))?;
        if self.sweep.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("sweep.fractions", "every fraction must lie in (0, 1]");
        }
        for &n in &self.ablation.n_zips {
            let z = ZipperConfig { n_zips: n, ..self.zipper.clone() };
            z.validate(&self.text_backbone, &self.speech_backbone).map_err(|e| prefixed("ablation", e))?;
        }
        Ok(())
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        let c = &self.corpus;
        CorpusSpec {
            seed: c.seed.unwrap_or(self.seed),
            n_pairs: c.n_pairs,
            n_unpaired_speech: c.n_unpaired_speech,
            n_unpaired_text: c.n_unpaired_text,
            n_val: c.n_val,
            n_test: c.n_test,
            noise: c.noise,
            code_len: c.code_len,
        }
    }

    /// Fine-tuning spec with the experiment seed.
    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec { seed: self.seed, ..self.train.clone() }
    }
}
