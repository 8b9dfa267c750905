//! Next-token fine-tuning on mixed ASR/TTS examples.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::DecoderBackbone;
use crate::error::{Error, Result};
use crate::fusion::ZipperModel;
use crate::interleave::{flatten_single_stream, InterleavedSequence, Modality, PackedBatch, Segment, TowerPack};
use crate::numeric::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::seeding::{derive_seed, substream};
use crate::synthdata::{Example, TextTokenizer};

pub const LR_GRID: [f64; 4] = [5e-5, 1e-4, 5e-4, 1e-3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Factored second moments for matrices, no first moment.
    Adafactor { beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Moments {
    Adam { m: Vec<f64>, v: Vec<f64> },
    Factored { row: Vec<f64>, col: Vec<f64>, cols: usize },
    Full { v: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    moments: Vec<Option<Moments>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerState { kind, learning_rate, step: 0, moments: Vec::new() }
    }

    /// Applies one update to `ids` from their accumulated gradients.
    pub fn update<T: Scalar>(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) {
        let scaled: Vec<(ParamId, f64)> = ids.iter().map(|&id| (id, 1.0)).collect();
        self.update_scaled(store, &scaled);
    }

    /// Like [`OptimizerState::update`] with a learning-rate multiplier per parameter.
    pub fn update_scaled<T: Scalar>(&mut self, store: &mut ParamStore<T>, ids: &[(ParamId, f64)]) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.step as i32;
        for &(id, scale) in ids {
            let lr = self.learning_rate * scale;
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(|g| g.iter().map(|x| x.as_f64()).collect::<Vec<f64>>()) else { continue };
            let shape = tensor.shape().to_vec();
            let slot = &mut self.moments[id.index()];
            let data = tensor.data_mut();
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let Moments::Adam { m, v } =
                        slot.get_or_insert_with(|| Moments::Adam { m: vec![0.0; grad.len()], v: vec![0.0; grad.len()] })
                    else {
                        unreachable!()
                    };
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..grad.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                        let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        data[i] = T::from_f64_lossy(data[i].as_f64() - step);
                    }
                }
                OptimizerKind::Adafactor { beta2, eps } => {
                    let c2 = 1.0 - beta2.powi(t);
                    if shape.len() == 2 {
                        let (rows, cols) = (shape[0], shape[1]);
                        let Moments::Factored { row, col, .. } = slot
                            .get_or_insert_with(|| Moments::Factored { row: vec![0.0; rows], col: vec![0.0; cols], cols })
                        else {
                            unreachable!()
                        };
                        for r in 0..rows {
                            let s: f64 = grad[r * cols..(r + 1) * cols].iter().map(|g| g * g + eps).sum::<f64>() / cols as f64;
                            row[r] = beta2 * row[r] + (1.0 - beta2) * s;
                        }
                        for c in 0..cols {
                            let s: f64 = (0..rows).map(|r| grad[r * cols + c].powi(2) + eps).sum::<f64>() / rows as f64;
                            col[c] = beta2 * col[c] + (1.0 - beta2) * s;
                        }
                        let row_mean = row.iter().sum::<f64>() / rows as f64;
                        for r in 0..rows {
                            for c in 0..cols {
                                let v = row[r] * col[c] / row_mean / c2;
                                let i = r * cols + c;
                                data[i] = T::from_f64_lossy(data[i].as_f64() - lr * grad[i] / v.sqrt());
                            }
                        }
                    } else {
                        let Moments::Full { v } = slot.get_or_insert_with(|| Moments::Full { v: vec![0.0; grad.len()] }) else {
                            unreachable!()
                        };
                        for i in 0..grad.len() {
                            v[i] = beta2 * v[i] + (1.0 - beta2) * (grad[i] * grad[i] + eps);
                            data[i] = T::from_f64_lossy(data[i].as_f64() - lr * grad[i] / (v[i] / c2).sqrt());
                        }
                    }
                }
            }
        }
    }

    /// Flat moment buffers per parameter index, for checkpointing.
    pub fn export_moments(&self) -> Vec<(usize, Vec<Vec<f64>>)> {
        self.moments
            .iter()
            .enumerate()
            .filter_map(|(i, m)| {
                m.as_ref().map(|m| {
                    let bufs = match m {
                        Moments::Adam { m, v } => vec![m.clone(), v.clone()],
                        Moments::Factored { row, col, .. } => vec![row.clone(), col.clone()],
                        Moments::Full { v } => vec![v.clone()],
                    };
                    (i, bufs)
                })
            })
            .collect()
    }

    /// Inverse of [`OptimizerState::export_moments`].
    pub fn import_moments<T: Scalar>(&mut self, store: &ParamStore<T>, moments: Vec<(usize, Vec<Vec<f64>>)>) -> Result<()> {
        self.moments = vec![None; store.len()];
        for (i, mut bufs) in moments {
            if i >= store.len() {
                return Err(Error::Checkpoint(format!("optimizer state for unknown parameter index {i}")));
            }
            let shape = store.get(store.ids().nth(i).unwrap()).shape().to_vec();
            let m = match (self.kind, bufs.len()) {
                (OptimizerKind::Adam { .. }, 2) => {
                    let v = bufs.pop().unwrap();
                    Moments::Adam { m: bufs.pop().unwrap(), v }
                }
                (OptimizerKind::Adafactor { .. }, 2) if shape.len() == 2 => {
                    let col = bufs.pop().unwrap();
                    Moments::Factored { row: bufs.pop().unwrap(), col, cols: shape[1] }
                }
                (OptimizerKind::Adafactor { .. }, 1) => Moments::Full { v: bufs.pop().unwrap() },
                _ => return Err(Error::Checkpoint(format!("optimizer state for parameter {i} has the wrong layout"))),
            };
            self.moments[i] = Some(m);
        }
        Ok(())
    }
}

/// Global L2 norm of the gradients of `ids`.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId]) -> f64 {
    ids.iter()
        .filter_map(|&id| store.get(id).grad())
        .flat_map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = grad_norm(store, ids);
    if norm > max_norm {
        let s = max_norm / norm;
        for &id in ids {
            let t = store.get_mut(id);
            if t.grad().is_some() {
                t.grad_mut().iter_mut().for_each(|x| *x = T::from_f64_lossy(x.as_f64() * s));
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Asr,
    Tts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    #[default]
    AllTokens,
    TargetSegmentOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup to the base rate, then cosine decay to
    /// `final_scale` times the base rate at the last step.
    WarmupCosine { warmup_steps: u64, final_scale: f64 },
}

impl LrSchedule {
    /// Multiplier on the base rate at `step` of a `total`-step run.
    pub fn factor(&self, step: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine { warmup_steps, final_scale } => {
                if step < warmup_steps {
                    return (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total.saturating_sub(warmup_steps).max(1) as f64;
                let t = ((step - warmup_steps) as f64 / span).min(1.0);
                final_scale + (1.0 - final_scale) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub grad_clip_max_norm: f64,
    /// TTS examples per ASR example.
    #[serde(default = "default_mix")]
    pub task_mix: f64,
    #[serde(default)]
    pub loss_scope: LossScope,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Learning-rate multiplier for the cross-block gate scalars.
    #[serde(default = "default_gate_scale")]
    pub gate_lr_scale: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
}

fn default_gate_scale() -> f64 {
    1.0
}

fn default_clip() -> f64 {
    1.0
}

fn default_mix() -> f64 {
    1.0
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            steps: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            grad_clip_max_norm: 1.0,
            task_mix: 1.0,
            loss_scope: LossScope::AllTokens,
            optimizer: OptimizerKind::default(),
            gate_lr_scale: 1.0,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: key.to_string(), message });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} is not a valid rate", self.learning_rate));
        }
        if !(self.grad_clip_max_norm > 0.0) {
            return bad("grad_clip_max_norm", "must be positive".into());
        }
        if !(self.gate_lr_scale > 0.0 && self.gate_lr_scale.is_finite()) {
            return bad("gate_lr_scale", "must be positive".into());
        }
        if !(self.task_mix >= 0.0 && self.task_mix.is_finite()) {
            return bad("task_mix", "must be a non-negative ratio".into());
        }
        if let LrSchedule::WarmupCosine { final_scale, .. } = self.lr_schedule {
            if !(0.0..=1.0).contains(&final_scale) {
                return bad("lr_schedule.final_scale", format!("{final_scale} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Scheduled rate at `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        self.learning_rate * self.lr_schedule.factor(step, self.steps)
    }

    /// Probability that a sampled example is ASR.
    pub fn asr_fraction(&self) -> f64 {
        1.0 / (1.0 + self.task_mix)
    }
}

/// ASR puts speech first, TTS text first; each segment is framed by its
/// tower's begin/end tokens.
pub fn make_example(pair: &Example, task: Task) -> Result<InterleavedSequence> {
    let text = Segment::new(Modality::Text, TextTokenizer.encode_framed(&pair.text)?)?;
    let speech = Segment::new(Modality::Speech, pair.speech_tokens.clone())?;
    Ok(InterleavedSequence::new(match task {
        Task::Asr => vec![speech, text],
        Task::Tts => vec![text, speech],
    }))
}

pub fn sample_task(rng: &mut impl Rng, spec: &TrainSpec) -> Task {
    if rng.random_bool(spec.asr_fraction()) {
        Task::Asr
    } else {
        Task::Tts
    }
}

/// Example indices and tasks of batch `step`: consecutive slices of
/// per-epoch permutations, so the order depends only on `(seed, step)`.
pub fn batch_plan(n_examples: usize, spec: &TrainSpec, step: u64) -> Vec<(usize, Task)> {
    let b = spec.batch_size as u64;
    let n = n_examples as u64;
    let mut out = Vec::with_capacity(spec.batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in step * b..(step + 1) * b {
        let (epoch, pos) = (k / n, (k % n) as usize);
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n_examples).collect();
            perm.shuffle(&mut substream(spec.seed, "batch_order", epoch));
            cached = Some((epoch, perm));
        }
        let idx = cached.as_ref().unwrap().1[pos];
        let task = sample_task(&mut substream(spec.seed, "task", k), spec);
        out.push((idx, task));
    }
    out
}

/// Marks rows whose next token lies outside its sequence's final segment.
fn restrict_to_target(pack: &TowerPack, last_segment: &[usize], ignore: &mut [bool]) {
    for (s, &(off, len)) in pack.spans.iter().enumerate() {
        for i in off..off + len.saturating_sub(1) {
            if pack.segment[i + 1] != last_segment[s] {
                ignore[i] = true;
            }
        }
    }
}

/// A model that can be fine-tuned on interleaved sequences.
pub trait Trainable<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn trainable_ids(&self) -> Vec<ParamId>;
    /// Parameters that take the gate learning-rate multiplier.
    fn gate_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }
    fn loss(&self, g: &mut Graph<T>, batch: &[InterleavedSequence], scope: LossScope) -> Result<Var>;
}

impl<T: Scalar> Trainable<T> for ZipperModel<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn trainable_ids(&self) -> Vec<ParamId> {
        self.trainable_parameters().into_iter().map(|(_, id)| id).collect()
    }

    fn gate_ids(&self) -> Vec<ParamId> {
        self.zips.iter().flat_map(|z| [&z.into_text, &z.into_speech]).flat_map(|b| [b.gate_attn, b.gate_ffn]).collect()
    }

    /// Mean over towers of each tower's next-token cross-entropy.
    fn loss(&self, g: &mut Graph<T>, batch: &[InterleavedSequence], scope: LossScope) -> Result<Var> {
        let packed = PackedBatch::new(batch)?;
        let last: Vec<usize> = batch.iter().map(|s| s.segments.len() - 1).collect();
        let logits = self.forward_batch(g, &packed)?;
        let mut terms = Vec::new();
        for (pack, lg) in [(&packed.text, logits.text), (&packed.speech, logits.speech)] {
            let Some(lg) = lg else { continue };
            let (targets, mut ignore) = pack.next_token_targets();
            if scope == LossScope::TargetSegmentOnly {
                restrict_to_target(pack, &last, &mut ignore);
            }
            if ignore.iter().all(|&m| m) {
                continue;
            }
            terms.push(g.cross_entropy(lg, &targets, &ignore)?);
        }
        let Some(mut total) = terms.first().copied() else { return Err(Error::EmptyLoss) };
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok(g.scale(total, 1.0 / terms.len() as f64))
    }
}

/// Vocabulary-expansion baseline: one tower over the flattened sequence,
/// speech ids shifted past the text vocabulary.
#[derive(Clone, Debug)]
pub struct SingleDecoder<T> {
    pub backbone: DecoderBackbone<T>,
    pub speech_offset: usize,
}

impl<T: Scalar> SingleDecoder<T> {
    /// Expands a text tower by the full speech vocabulary.
    pub fn from_text_tower(text: &DecoderBackbone<T>, speech_vocab: usize, dropout: f64, seed: u64) -> Result<Self> {
        let mut backbone = text.expand_vocabulary(speech_vocab, seed)?;
        backbone.config.dropout = dropout;
        backbone.params.set_requires_grad_prefix("", true);
        Ok(SingleDecoder { speech_offset: text.config.vocab_size, backbone })
    }

    pub fn flatten(&self, seq: &InterleavedSequence) -> Vec<usize> {
        flatten_single_stream(seq, self.speech_offset)
    }
}

impl<T: Scalar> Trainable<T> for SingleDecoder<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.backbone.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.backbone.params
    }

    fn trainable_ids(&self) -> Vec<ParamId> {
        self.backbone.params.ids().collect()
    }

    fn loss(&self, g: &mut Graph<T>, batch: &[InterleavedSequence], scope: LossScope) -> Result<Var> {
        let flat: Vec<Vec<usize>> = batch.iter().map(|s| self.flatten(s)).collect();
        let mut pack = TowerPack::from_sequences(&flat)?;
        for (seq, &(off, _)) in batch.iter().zip(&pack.spans.clone()) {
            let mut row = off;
            for (si, seg) in seq.segments.iter().enumerate() {
                pack.segment[row..row + seg.tokens.len()].fill(si);
                row += seg.tokens.len();
            }
        }
        let (logits, _) = self.backbone.forward_packed(g, &pack, &[])?;
        let (targets, mut ignore) = pack.next_token_targets();
        if scope == LossScope::TargetSegmentOnly {
            let last: Vec<usize> = batch.iter().map(|s| s.segments.len() - 1).collect();
            restrict_to_target(&pack, &last, &mut ignore);
        }
        g.cross_entropy(logits, &targets, &ignore)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

/// One optimization step: loss, backward, clip, update. Returns the loss
/// and the pre-clip gradient norm.
pub fn train_step<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    opt: &mut OptimizerState,
    batch: &[InterleavedSequence],
    spec: &TrainSpec,
    step: u64,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let ids = model.trainable_ids();
    model.params_mut().zero_grad();
    let mut g = Graph::train(derive_seed(spec.seed, "dropout", step));
    let loss = model.loss(&mut g, batch, spec.loss_scope)?;
    let value = g.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    g.backward(loss, model.params_mut())?;
    drop(g);
    let norm = clip_grad_norm(model.params_mut(), &ids, spec.grad_clip_max_norm);
    let lr = spec.learning_rate_at(step);
    opt.learning_rate = lr;
    let gates = model.gate_ids();
    let scaled: Vec<(ParamId, f64)> =
        ids.iter().map(|&id| (id, if gates.contains(&id) { spec.gate_lr_scale } else { 1.0 })).collect();
    opt.update_scaled(model.params_mut(), &scaled);
    Ok(StepMetrics { step, loss: value, grad_norm: norm, learning_rate: lr })
}

/// Runs `spec.steps` steps (continuing from `opt.step`) over `pairs`,
/// logging each step as a JSON line when `log` is given.
pub fn fine_tune<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    opt: &mut OptimizerState,
    pairs: &[Example],
    spec: &TrainSpec,
    log: Option<&mut dyn Write>,
) -> Result<Vec<StepMetrics>> {
    fine_tune_until(model, opt, pairs, spec, spec.steps, log)
}

/// Like [`fine_tune`] but stops once `opt.step` reaches `until` (capped at
/// `spec.steps`), so a run can be split into pieces without changing its
/// schedule.
pub fn fine_tune_until<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    opt: &mut OptimizerState,
    pairs: &[Example],
    spec: &TrainSpec,
    until: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepMetrics>> {
    spec.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let mut out = Vec::new();
    while opt.step < until.min(spec.steps) {
        let step = opt.step;
        let batch = batch_plan(pairs.len(), spec, step)
            .into_iter()
            .map(|(i, task)| make_example(&pairs[i], task))
            .collect::<Result<Vec<_>>>()?;
        let m = train_step(model, opt, &batch, spec, step)?;
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n")?;
        }
        out.push(m);
    }
    Ok(out)
}

/// Plain language-model training of a standalone tower on token streams.
pub fn pretrain<T: Scalar>(
    model: &mut DecoderBackbone<T>,
    streams: &[Vec<usize>],
    spec: &TrainSpec,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepMetrics>> {
    spec.validate()?;
    if streams.is_empty() {
        return Err(Error::invalid("empty pre-training corpus"));
    }
    let ids: Vec<ParamId> = model.params.ids().collect();
    let mut opt = OptimizerState::new(spec.optimizer, spec.learning_rate);
    let mut out = Vec::new();
    for step in 0..spec.steps {
        let batch: Vec<Vec<usize>> =
            batch_plan(streams.len(), spec, step).into_iter().map(|(i, _)| streams[i].clone()).collect();
        let pack = TowerPack::from_sequences(&batch)?;
        model.params.zero_grad();
        let mut g = Graph::train(derive_seed(spec.seed, "dropout", step));
        let loss = model.lm_loss(&mut g, &pack)?;
        let value = g.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        g.backward(loss, &mut model.params)?;
        drop(g);
        let norm = clip_grad_norm(&mut model.params, &ids, spec.grad_clip_max_norm);
        opt.learning_rate = spec.learning_rate_at(step);
        opt.update(&mut model.params, &ids);
        let m = StepMetrics { step, loss: value, grad_norm: norm, learning_rate: opt.learning_rate };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n")?;
        }
        out.push(m);
    }
    Ok(out)
}

/// Mean next-token loss of a tower over `streams` in eval mode.
pub fn heldout_loss<T: Scalar>(model: &DecoderBackbone<T>, streams: &[Vec<usize>], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in streams.chunks(batch_size.max(1)) {
        let pack = TowerPack::from_sequences(chunk)?;
        let mut g = Graph::eval();
        let loss = model.lm_loss(&mut g, &pack)?;
        let n = pack.next_token_targets().1.iter().filter(|&&m| !m).count();
        total += g.scalar(loss).as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / count as f64)
}

/// Picks the rate minimizing the geometric mean of (clean, other) WER;
/// ties go to the larger rate. Non-finite metrics count as diverged.
pub fn lr_search(candidates: &[(f64, f64, f64)]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("no learning-rate candidates"));
    }
    let mut best: Option<(f64, f64)> = None;
    for &(lr, clean, other) in candidates {
        let score = (clean * other).sqrt();
        if !score.is_finite() {
            continue;
        }
        best = match best {
            Some((b_lr, b_score)) if b_score < score || (b_score == score && b_lr > lr) => Some((b_lr, b_score)),
            _ => Some((lr, score)),
        };
    }
    best.map(|b| b.0).ok_or_else(|| Error::invalid("every learning-rate candidate diverged"))
}
