//! Modality-sequenced autoregressive decoding.
//!
//! Every step recomputes the full forward pass over the current sequences;
//! there is no key/value cache.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ZipperModel;
use crate::interleave::{InterleavedSequence, Modality, PackedBatch, Segment, TowerPack};
use crate::numeric::{Graph, Scalar};
use crate::seeding::substream;
use crate::synthdata;
use crate::training::SingleDecoder;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    /// Argmax; ties go to the lowest token id.
    #[default]
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodePlan {
    pub modalities: Vec<Modality>,
    /// Generated-token budget per planned segment, excluding its start token.
    pub max_tokens: Vec<usize>,
    #[serde(default)]
    pub sampling: Sampling,
}

impl DecodePlan {
    pub fn new(modalities: Vec<Modality>, max_tokens: usize) -> Result<Self> {
        let plan = DecodePlan { max_tokens: vec![max_tokens; modalities.len()], modalities, sampling: Sampling::Greedy };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::invalid("decode plan needs at least one modality"));
        }
        if self.max_tokens.len() != self.modalities.len() || self.max_tokens.contains(&0) {
            return Err(Error::invalid("every planned segment needs a positive token budget"));
        }
        if let Sampling::Temperature { tau, .. } = self.sampling {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::invalid(format!("temperature {tau} must be positive")));
            }
        }
        Ok(())
    }
}

/// Start and end markers of a segment in a tower's own vocabulary.
pub fn segment_markers(m: Modality) -> (usize, usize) {
    match m {
        Modality::Text => (synthdata::BOS, synthdata::EOS),
        Modality::Speech => (synthdata::BOA, synthdata::EOA),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub sequence: InterleavedSequence,
    /// Per planned segment: stopped on budget or length limit rather than
    /// an end marker.
    pub truncated: Vec<bool>,
}

impl Generation {
    /// Tokens of the `k`-th generated segment, start marker included.
    pub fn generated(&self, k: usize) -> &[usize] {
        let n = self.sequence.segments.len() - self.truncated.len();
        &self.sequence.segments[n + k].tokens
    }
}

fn pick<T: Scalar>(row: &[T], sampling: Sampling, rng: &mut ChaCha8Rng) -> usize {
    match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        }
        Sampling::Temperature { tau, .. } => {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|v| ((v.as_f64() - max) / tau).exp()).collect();
            let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
            for (i, x) in w.iter().enumerate() {
                if u < *x {
                    return i;
                }
                u -= x;
            }
            w.len() - 1
        }
    }
}

fn sampling_rngs(sampling: Sampling, n: usize) -> Vec<ChaCha8Rng> {
    let seed = match sampling {
        Sampling::Temperature { seed, .. } => seed,
        Sampling::Greedy => 0,
    };
    (0..n).map(|i| substream(seed, "sampling", i as u64)).collect()
}

struct Decoder {
    active: Vec<bool>,
    truncated: Vec<Vec<bool>>,
    rngs: Vec<ChaCha8Rng>,
}

impl Decoder {
    fn new(n: usize, sampling: Sampling) -> Self {
        Decoder { active: vec![false; n], truncated: vec![Vec::new(); n], rngs: sampling_rngs(sampling, n) }
    }
}

/// Decodes every prompt under the same plan; sequences are batched.
pub fn generate_batch<T: Scalar>(
    model: &ZipperModel<T>,
    prompts: &[InterleavedSequence],
    plan: &DecodePlan,
) -> Result<Vec<Generation>> {
    plan.validate()?;
    let mut seqs = prompts.to_vec();
    let mut dec = Decoder::new(seqs.len(), plan.sampling);
    for (k, &m) in plan.modalities.iter().enumerate() {
        let (start, end) = segment_markers(m);
        let limit = model.tower(m).config.max_seq_len;
        for (i, s) in seqs.iter_mut().enumerate() {
            if s.stream_len(m) + 1 > limit {
                return Err(Error::invalid(format!("prompt {i} leaves no room for a {m} segment")));
            }
            s.push(Segment::new(m, vec![start])?);
            dec.active[i] = true;
            dec.truncated[i].push(false);
        }
        let mut produced = 0;
        while dec.active.iter().any(|&a| a) {
            let idx: Vec<usize> = (0..seqs.len()).filter(|&i| dec.active[i]).collect();
            let batch_seqs: Vec<InterleavedSequence> = idx.iter().map(|&i| seqs[i].clone()).collect();
            let batch = PackedBatch::new(&batch_seqs)?;
            let mut g = Graph::eval();
            let (ha, hb) = model.forward_hidden(&mut g, &batch)?;
            let h = match m {
                Modality::Text => ha,
                Modality::Speech => hb,
            }
            .ok_or_else(|| Error::invalid("generating tower has no rows"))?;
            let pack = batch.tower(m);
            let rows: Vec<usize> = pack.spans.iter().map(|&(off, len)| off + len - 1).collect();
            let logits = model.tower(m).logits_rows(&mut g, &model.params, h, &rows)?;
            let v = g.shape(logits)[1];
            let values = g.value(logits).to_vec();
            produced += 1;
            for (r, &i) in idx.iter().enumerate() {
                let tok = pick(&values[r * v..(r + 1) * v], plan.sampling, &mut dec.rngs[i]);
                let seg = seqs[i].segments.last_mut().unwrap();
                seg.tokens.push(tok);
                if tok == end {
                    dec.active[i] = false;
                } else if produced >= plan.max_tokens[k] || seqs[i].stream_len(m) >= limit {
                    dec.active[i] = false;
                    *dec.truncated[i].last_mut().unwrap() = true;
                }
            }
        }
    }
    Ok(seqs.into_iter().zip(dec.truncated).map(|(sequence, truncated)| Generation { sequence, truncated }).collect())
}

pub fn generate<T: Scalar>(model: &ZipperModel<T>, prompt: &InterleavedSequence, plan: &DecodePlan) -> Result<Generation> {
    Ok(generate_batch(model, std::slice::from_ref(prompt), plan)?.remove(0))
}

/// Baseline decoding on the flattened stream. Each planned segment only
/// samples ids of its own modality.
pub fn generate_baseline_batch<T: Scalar>(
    model: &SingleDecoder<T>,
    prompts: &[InterleavedSequence],
    plan: &DecodePlan,
) -> Result<Vec<Generation>> {
    plan.validate()?;
    let off = model.speech_offset;
    let vocab = model.backbone.config.vocab_size;
    let limit = model.backbone.config.max_seq_len;
    let mut seqs = prompts.to_vec();
    let mut dec = Decoder::new(seqs.len(), plan.sampling);
    for (k, &m) in plan.modalities.iter().enumerate() {
        let (start, end) = segment_markers(m);
        let range = match m {
            Modality::Text => 0..off,
            Modality::Speech => off..vocab,
        };
        for (i, s) in seqs.iter_mut().enumerate() {
            if s.total_tokens() + 1 > limit {
                return Err(Error::invalid(format!("prompt {i} leaves no room for a {m} segment")));
            }
            s.push(Segment::new(m, vec![start])?);
            dec.active[i] = true;
            dec.truncated[i].push(false);
        }
        let mut produced = 0;
        while dec.active.iter().any(|&a| a) {
            let idx: Vec<usize> = (0..seqs.len()).filter(|&i| dec.active[i]).collect();
            let flat: Vec<Vec<usize>> = idx.iter().map(|&i| model.flatten(&seqs[i])).collect();
            let pack = TowerPack::from_sequences(&flat)?;
            let mut g = Graph::eval();
            let (h, _) = model.backbone.hidden_packed(&mut g, &pack, &[])?;
            let rows: Vec<usize> = pack.spans.iter().map(|&(o, len)| o + len - 1).collect();
            let logits = model.backbone.layout.logits_rows(&mut g, &model.backbone.params, h, &rows)?;
            let values = g.value(logits).to_vec();
            produced += 1;
            for (r, &i) in idx.iter().enumerate() {
                let row = &values[r * vocab + range.start..r * vocab + range.end];
                let tok = pick(row, plan.sampling, &mut dec.rngs[i]);
                let seg = seqs[i].segments.last_mut().unwrap();
                seg.tokens.push(tok);
                if tok == end {
                    dec.active[i] = false;
                } else if produced >= plan.max_tokens[k] || seqs[i].total_tokens() >= limit {
                    dec.active[i] = false;
                    *dec.truncated[i].last_mut().unwrap() = true;
                }
            }
        }
    }
    Ok(seqs.into_iter().zip(dec.truncated).map(|(sequence, truncated)| Generation { sequence, truncated }).collect())
}

/// Single-prompt form of [`generate_baseline_batch`].
pub fn generate_baseline<T: Scalar>(
    model: &SingleDecoder<T>,
    prompt: &InterleavedSequence,
    plan: &DecodePlan,
) -> Result<Generation> {
    Ok(generate_baseline_batch(model, std::slice::from_ref(prompt), plan)?.remove(0))
}
