//! Word error rate, significance testing and experiment analyses.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::backbone::DecoderBackbone;
use crate::error::{Error, Result};
use crate::fusion::{ZipperConfig, ZipperModel};
use crate::inference::{generate_baseline_batch, generate_batch, DecodePlan, Generation};
use crate::interleave::{InterleavedSequence, Modality, Segment};
use crate::seeding::derive_seed;
use crate::synthdata::{CorpusSpec, Example, SpeechCodebook, SyntheticCorpus, TextTokenizer, SPEECH_VOCAB};
use crate::training::{fine_tune, OptimizerState, SingleDecoder, TrainSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn from_counts(substitutions: usize, deletions: usize, insertions: usize, ref_words: usize) -> Self {
        let wer = (substitutions + deletions + insertions) as f64 / ref_words as f64;
        WerBreakdown { substitutions, deletions, insertions, ref_words, wer }
    }

    /// Pools counts; the result's WER is total errors over total words.
    pub fn pooled<'a>(items: impl IntoIterator<Item = &'a WerBreakdown>) -> Result<WerBreakdown> {
        let (mut s, mut d, mut i, mut n) = (0, 0, 0, 0);
        for b in items {
            s += b.substitutions;
            d += b.deletions;
            i += b.insertions;
            n += b.ref_words;
        }
        if n == 0 {
            return Err(Error::invalid("no reference words to pool"));
        }
        Ok(Self::from_counts(s, d, i, n))
    }
}

/// Word-level Levenshtein alignment. Among optimal alignments the
/// traceback prefers substitution (or match), then deletion, then insertion.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::invalid("reference has no words"));
    }
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut s, mut del, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 && cur == d[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            s += usize::from(r[i - 1] != h[j - 1]);
            i -= 1;
            j -= 1;
        } else if i > 0 && cur == d[(i - 1) * w + j] + 1 {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerBreakdown::from_counts(s, del, ins, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    pub significant: bool,
    /// Number of non-zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Largest sample size tested against the exact null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 12;

/// Ranks of `values` (1-based) with ties averaged.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired scores. Zero differences
/// are dropped; exact null for n up to [`WILCOXON_EXACT_MAX_N`], otherwise a
/// tie-corrected normal approximation.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alpha: f64) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n < 5 {
        return Err(Error::invalid(format!("need at least 5 non-zero differences, got {n}")));
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);
    let (p_value, exact) = if n <= WILCOXON_EXACT_MAX_N {
        (exact_p(&ranks, w_plus), true)
    } else {
        let mut tie_term = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
            let t = j as f64;
            tie_term += t * t * t - t;
            i += j;
        }
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
        ((2.0 * normal.sf(z.abs())).min(1.0), false)
    };
    Ok(WilcoxonResult { statistic, p_value, significant: p_value < alpha, n, exact })
}

/// Exact two-sided p-value: all `2^n` sign assignments of the given ranks
/// are equally likely under the null.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let total: f64 = counts.iter().sum();
    let obs = (w_plus * 2.0).round() as usize;
    let lower: f64 = counts[..=obs].iter().sum::<f64>() / total;
    let upper: f64 = counts[obs..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketWer {
    /// Inclusive upper edge on reference word count; `None` for overflow.
    pub upper: Option<usize>,
    pub pairs: usize,
    pub breakdown: Option<WerBreakdown>,
}

/// Pooled WER per reference-length bucket. Each pair goes to the first
/// bucket whose edge is at least its reference word count; longer pairs go
/// to a trailing overflow bucket.
pub fn bucket_wer_by_ref_length(pairs: &[(String, String)], edges: &[usize]) -> Result<Vec<BucketWer>> {
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bucket edges must be non-empty and strictly increasing"));
    }
    let mut per: Vec<Vec<WerBreakdown>> = vec![Vec::new(); edges.len() + 1];
    for (r, h) in pairs {
        let b = wer(r, h)?;
        let k = edges.iter().position(|&e| e >= b.ref_words).unwrap_or(edges.len());
        per[k].push(b);
    }
    Ok(per
        .iter()
        .enumerate()
        .map(|(k, items)| BucketWer {
            upper: edges.get(k).copied(),
            pairs: items.len(),
            breakdown: WerBreakdown::pooled(items).ok(),
        })
        .collect())
}

/// A fine-tuned model of either kind.
#[derive(Clone, Debug)]
pub enum FineTuned {
    Zipper(ZipperModel<f32>),
    Baseline(SingleDecoder<f32>),
}

/// Reference/hypothesis pairs of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Transcripts {
    pub pairs: Vec<(String, String)>,
    pub per_pair: Vec<WerBreakdown>,
    pub pooled: WerBreakdown,
}

impl Transcripts {
    /// Scores `(reference, hypothesis)` pairs.
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        let per_pair = pairs.iter().map(|(r, h)| wer(r, h)).collect::<Result<Vec<_>>>()?;
        let pooled = WerBreakdown::pooled(&per_pair)?;
        Ok(Transcripts { pairs, per_pair, pooled })
    }
}

pub const EVAL_BATCH: usize = 64;

impl FineTuned {
    fn decode(&self, prompts: &[InterleavedSequence], plan: &DecodePlan) -> Result<Vec<Generation>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(EVAL_BATCH) {
            out.extend(match self {
                FineTuned::Zipper(m) => generate_batch(m, chunk, plan)?,
                FineTuned::Baseline(m) => generate_baseline_batch(m, chunk, plan)?,
            });
        }
        Ok(out)
    }

    /// Speech prompt, text output.
    pub fn transcribe(&self, examples: &[Example], max_tokens: usize) -> Result<Transcripts> {
        let prompts = examples
            .iter()
            .map(|e| Ok(InterleavedSequence::new(vec![Segment::new(Modality::Speech, e.speech_tokens.clone())?])))
            .collect::<Result<Vec<_>>>()?;
        let gens = self.decode(&prompts, &DecodePlan::new(vec![Modality::Text], max_tokens)?)?;
        let pairs = examples.iter().zip(&gens).map(|(e, g)| (e.text.clone(), TextTokenizer.decode(&g.generated(0)[1..]))).collect();
        Transcripts::new(pairs)
    }

    /// Text prompt, speech output decoded by the codebook.
    pub fn synthesize(&self, examples: &[Example], codebook: &SpeechCodebook, max_tokens: usize) -> Result<Transcripts> {
        let prompts = examples
            .iter()
            .map(|e| Ok(InterleavedSequence::new(vec![Segment::new(Modality::Text, TextTokenizer.encode_framed(&e.text)?)?])))
            .collect::<Result<Vec<_>>>()?;
        let gens = self.decode(&prompts, &DecodePlan::new(vec![Modality::Speech], max_tokens)?)?;
        let pairs = examples
            .iter()
            .zip(&gens)
            .map(|(e, g)| {
                let toks = g.generated(0);
                let end = toks.iter().position(|&t| t == crate::synthdata::EOA).unwrap_or(toks.len());
                (e.text.clone(), codebook.decode(&toks[..end]))
            })
            .collect();
        Transcripts::new(pairs)
    }
}

/// Aligned-data fractions of the default sweep.
pub const DEFAULT_FRACTIONS: [f64; 6] = [0.001, 0.01, 0.03, 0.1, 0.3, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Validation examples per split.
    pub n_eval: usize,
    pub max_text_tokens: usize,
    pub max_speech_tokens: usize,
    pub alpha: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n_eval: 200, max_text_tokens: 48, max_speech_tokens: 96, alpha: 0.05 }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_eval == 0 || self.max_text_tokens == 0 || self.max_speech_tokens == 0 {
            return Err(Error::Config { key: "n_eval".into(), message: "evaluation sizes must be positive".into() });
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config { key: "alpha".into(), message: format!("{} outside (0, 1)", self.alpha) });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Zipper,
    SingleDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunKind {
    pub family: ModelFamily,
    #[serde(default)]
    pub freeze_text: bool,
    #[serde(default)]
    pub freeze_speech: bool,
}

impl RunKind {
    /// Zipper with the text tower frozen.
    pub fn zipper(freeze_speech: bool) -> Self {
        RunKind { family: ModelFamily::Zipper, freeze_text: true, freeze_speech }
    }

    /// Vocabulary-expanded text tower, fully trainable.
    pub fn baseline() -> Self {
        RunKind { family: ModelFamily::SingleDecoder, freeze_text: false, freeze_speech: false }
    }

    pub fn label(&self) -> String {
        match self.family {
            ModelFamily::SingleDecoder => "single_decoder".into(),
            ModelFamily::Zipper if self.freeze_speech => "zipper_frozen_speech".into(),
            ModelFamily::Zipper => "zipper".into(),
        }
    }
}

/// Pre-trained unimodal towers shared by every fine-tuning run.
#[derive(Clone, Debug)]
pub struct Towers {
    pub text: DecoderBackbone<f32>,
    pub speech: DecoderBackbone<f32>,
}

/// Everything a fine-tuning cell needs besides its kind, fraction and seed.
#[derive(Clone, Debug)]
pub struct ExperimentContext {
    pub towers: Towers,
    pub corpus: CorpusSpec,
    pub zipper: ZipperConfig,
    pub train: TrainSpec,
    pub baseline_dropout: f64,
    pub eval: EvalSettings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellScores {
    pub asr_clean: Transcripts,
    pub asr_other: Transcripts,
    pub tts_clean: Transcripts,
}

impl ExperimentContext {
    /// Builds and fine-tunes one model. `Ok(None)` means the run diverged.
    pub fn train_cell(
        &self,
        corpus: &SyntheticCorpus,
        kind: RunKind,
        zipper: &ZipperConfig,
        seed: u64,
    ) -> Result<Option<FineTuned>> {
        let spec = TrainSpec { seed, ..self.train.clone() };
        let mut opt = OptimizerState::new(spec.optimizer, spec.learning_rate);
        let outcome = match kind.family {
            ModelFamily::Zipper => {
                let cfg = ZipperConfig { freeze_text: kind.freeze_text, freeze_speech: kind.freeze_speech, ..zipper.clone() };
                let mut m =
                    ZipperModel::new(cfg, &self.towers.text, &self.towers.speech, derive_seed(seed, "fusion_init", 0))?;
                fine_tune(&mut m, &mut opt, &corpus.paired, &spec, None).map(|_| FineTuned::Zipper(m))
            }
            ModelFamily::SingleDecoder => {
                let mut m = SingleDecoder::from_text_tower(
                    &self.towers.text,
                    SPEECH_VOCAB,
                    self.baseline_dropout,
                    derive_seed(seed, "expand_vocabulary", 0),
                )?;
                fine_tune(&mut m, &mut opt, &corpus.paired, &spec, None).map(|_| FineTuned::Baseline(m))
            }
        };
        match outcome {
            Ok(m) => Ok(Some(m)),
            Err(Error::NonFiniteLoss { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn evaluate(&self, model: &FineTuned, corpus: &SyntheticCorpus) -> Result<CellScores> {
        let n = self.eval.n_eval;
        let clean = &corpus.val_clean[..n.min(corpus.val_clean.len())];
        let other = &corpus.val_other[..n.min(corpus.val_other.len())];
        Ok(CellScores {
            asr_clean: model.transcribe(clean, self.eval.max_text_tokens)?,
            asr_other: model.transcribe(other, self.eval.max_text_tokens)?,
            tts_clean: model.synthesize(clean, &corpus.codebook, self.eval.max_speech_tokens)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub kind: String,
    pub freeze_text: bool,
    pub freeze_speech: bool,
    pub seed: u64,
    pub clean_wer: f64,
    pub other_wer: f64,
    pub tts_clean_wer: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Writes rows with a header line, even when there are no rows.
pub fn write_csv<R: Serialize>(rows: &[R], header: &[&str], w: impl std::io::Write) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(header)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub const SWEEP_HEADER: [&str; 8] =
    ["fraction", "kind", "freeze_text", "freeze_speech", "seed", "clean_wer", "other_wer", "tts_clean_wer"];

impl SweepResult {
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        write_csv(&self.rows, &SWEEP_HEADER, w)
    }
}

/// Fine-tunes and evaluates every (fraction, kind, seed) cell. A diverged
/// run is recorded with infinite WER.
pub fn run_data_fraction_sweep(
    ctx: &ExperimentContext,
    fractions: &[f64],
    kinds: &[RunKind],
    seeds: &[u64],
) -> Result<SweepResult> {
    let mut rows = Vec::new();
    for &fraction in fractions {
        let corpus = SyntheticCorpus::generate(&ctx.corpus, fraction)?;
        for &kind in kinds {
            for &seed in seeds {
                let scores = match ctx.train_cell(&corpus, kind, &ctx.zipper, seed)? {
                    Some(m) => Some(ctx.evaluate(&m, &corpus)?),
                    None => None,
                };
                let wer_of = |f: fn(&CellScores) -> &Transcripts| scores.as_ref().map_or(f64::INFINITY, |s| f(s).pooled.wer);
                rows.push(SweepRow {
                    fraction,
                    kind: kind.label(),
                    freeze_text: kind.freeze_text,
                    freeze_speech: kind.freeze_speech,
                    seed,
                    clean_wer: wer_of(|s| &s.asr_clean),
                    other_wer: wer_of(|s| &s.asr_other),
                    tts_clean_wer: wer_of(|s| &s.tts_clean),
                });
            }
        }
    }
    Ok(SweepResult { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    InputProjText,
    InputProjSpeech,
    InputProjBoth,
    NCrossLayers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Zip counts tried by the cross-layer ablation.
    pub n_zips: Vec<usize>,
    pub seeds: Vec<u64>,
    pub fraction: f64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings { n_zips: vec![0, 1, 2, 4], seeds: vec![0], fraction: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: AblationKind,
    pub variant: String,
    pub seed: u64,
    pub asr_wer: f64,
    pub tts_wer: f64,
}

pub const ABLATION_HEADER: [&str; 5] = ["ablation", "variant", "seed", "asr_wer", "tts_wer"];

/// Variants of one ablation: label and zipper configuration.
pub fn ablation_variants(kind: AblationKind, base: &ZipperConfig, settings: &AblationSettings) -> Vec<(String, ZipperConfig)> {
    let with = |text: bool, speech: bool| ZipperConfig {
        enable_input_proj_text: text,
        enable_input_proj_speech: speech,
        ..base.clone()
    };
    match kind {
        AblationKind::InputProjText => vec![("text_proj_on".into(), with(true, true)), ("text_proj_off".into(), with(false, true))],
        AblationKind::InputProjSpeech => {
            vec![("speech_proj_on".into(), with(true, true)), ("speech_proj_off".into(), with(true, false))]
        }
        AblationKind::InputProjBoth => vec![("both_on".into(), with(true, true)), ("both_off".into(), with(false, false))],
        AblationKind::NCrossLayers => settings
            .n_zips
            .iter()
            .map(|&n| (format!("n_zips_{n}"), ZipperConfig { n_zips: n, ..base.clone() }))
            .collect(),
    }
}

/// Trains each variant (text tower frozen, speech tower trainable) and
/// reports validation-clean ASR and TTS WER.
pub fn run_ablation(ctx: &ExperimentContext, kind: AblationKind, settings: &AblationSettings) -> Result<Vec<AblationRow>> {
    let corpus = SyntheticCorpus::generate(&ctx.corpus, settings.fraction)?;
    let mut rows = Vec::new();
    for (variant, cfg) in ablation_variants(kind, &ctx.zipper, settings) {
        for &seed in &settings.seeds {
            let (asr_wer, tts_wer) = match ctx.train_cell(&corpus, RunKind::zipper(false), &cfg, seed)? {
                Some(m) => {
                    let s = ctx.evaluate(&m, &corpus)?;
                    (s.asr_clean.pooled.wer, s.tts_clean.pooled.wer)
                }
                None => (f64::INFINITY, f64::INFINITY),
            };
            rows.push(AblationRow { ablation: kind, variant: variant.clone(), seed, asr_wer, tts_wer });
        }
    }
    Ok(rows)
}
