//! Interleaved two-modality sequences and every attention mask derived from
//! them.
//!
//! A sequence is an ordered list of segments, each owned by one tower. The
//! flattened order of all tokens assigns each a global linear index. A token
//! may cross-attend to a token of the other tower only if that token's
//! linear index is strictly smaller.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{AttentionBlock, AttentionLayout, BoolMask};

/// Linear index carried by padding tokens; never attended across towers.
pub const PAD_LINEAR_INDEX: usize = usize::MAX;

/// Tower A carries text, tower B carries speech tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Speech,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Text => Modality::Speech,
            Modality::Speech => Modality::Text,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Speech => "speech",
        })
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" | "a" => Ok(Modality::Text),
            "speech" | "b" => Ok(Modality::Speech),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub modality: Modality,
    pub tokens: Vec<usize>,
}

impl Segment {
    pub fn new(modality: Modality, tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("segment must contain at least one token"));
        }
        Ok(Segment { modality, tokens })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleavedSequence {
    pub segments: Vec<Segment>,
}

impl InterleavedSequence {
    pub fn new(segments: Vec<Segment>) -> Self {
        InterleavedSequence { segments }
    }

    pub fn push(&mut self, segment: Segment) {
        self.segments.push(segment);
    }

    pub fn total_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn stream_len(&self, modality: Modality) -> usize {
        self.segments.iter().filter(|s| s.modality == modality).map(|s| s.tokens.len()).sum()
    }

    pub fn last_segment(&self, modality: Modality) -> Option<&Segment> {
        self.segments.iter().rev().find(|s| s.modality == modality)
    }
}

/// One tower's view of an interleaved sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stream {
    pub tokens: Vec<usize>,
    /// Global linear index of each token.
    pub linear: Vec<usize>,
    /// Index of the segment each token came from.
    pub segment: Vec<usize>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Streams {
    pub text: Stream,
    pub speech: Stream,
}

impl Streams {
    pub fn get(&self, modality: Modality) -> &Stream {
        match modality {
            Modality::Text => &self.text,
            Modality::Speech => &self.speech,
        }
    }
}

/// Order-preserving partition of a sequence into per-tower streams.
pub fn build_streams(seq: &InterleavedSequence) -> Result<Streams> {
    if seq.segments.is_empty() {
        return Err(Error::invalid("interleaved sequence has no segments"));
    }
    let mut streams = Streams::default();
    let mut linear = 0;
    for (si, seg) in seq.segments.iter().enumerate() {
        if seg.tokens.is_empty() {
            return Err(Error::invalid(format!("segment {si} is empty")));
        }
        let stream = match seg.modality {
            Modality::Text => &mut streams.text,
            Modality::Speech => &mut streams.speech,
        };
        for &t in &seg.tokens {
            stream.tokens.push(t);
            stream.linear.push(linear);
            stream.segment.push(si);
            linear += 1;
        }
    }
    Ok(streams)
}

/// `allowed[q][k]` iff key `k` strictly precedes query `q` in linear order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossMask(BoolMask);

impl CrossMask {
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.0.get(q, k)
    }

    pub fn as_mask(&self) -> &BoolMask {
        &self.0
    }

    pub fn into_mask(self) -> BoolMask {
        self.0
    }
}

fn check_increasing(name: &str, idx: &[usize]) -> Result<()> {
    for w in idx.windows(2) {
        let ok = w[0] < w[1] || (w[0] == PAD_LINEAR_INDEX && w[1] == PAD_LINEAR_INDEX);
        if !ok {
            return Err(Error::invalid(format!("{name} linear indices are not strictly increasing")));
        }
    }
    Ok(())
}

pub fn build_cross_mask(lin_query: &[usize], lin_key: &[usize]) -> Result<CrossMask> {
    check_increasing("query", lin_query)?;
    check_increasing("key", lin_key)?;
    Ok(CrossMask(BoolMask::from_fn(lin_query.len(), lin_key.len(), |q, k| {
        lin_key[k] != PAD_LINEAR_INDEX && lin_key[k] < lin_query[q]
    })))
}

pub fn build_self_mask(len: usize) -> Result<BoolMask> {
    if len == 0 {
        return Err(Error::invalid("self mask needs at least one position"));
    }
    Ok(BoolMask::causal(len))
}

/// Packed rows of one tower for a batch of sequences.
#[derive(Clone, Debug, Default)]
pub struct TowerPack {
    pub tokens: Vec<usize>,
    /// Position of each row within its own sequence's stream.
    pub positions: Vec<usize>,
    pub linear: Vec<usize>,
    pub segment: Vec<usize>,
    /// Row offset and length of each sequence's stream.
    pub spans: Vec<(usize, usize)>,
}

impl TowerPack {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push_stream(&mut self, s: &Stream) {
        self.spans.push((self.tokens.len(), s.len()));
        self.tokens.extend_from_slice(&s.tokens);
        self.positions.extend(0..s.len());
        self.linear.extend_from_slice(&s.linear);
        self.segment.extend_from_slice(&s.segment);
    }

    /// Packs plain single-tower token sequences.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        let mut pack = TowerPack::default();
        for s in seqs {
            if s.is_empty() {
                return Err(Error::invalid("empty token sequence"));
            }
            let stream = Stream { tokens: s.clone(), linear: (0..s.len()).collect(), segment: vec![0; s.len()] };
            pack.push_stream(&stream);
        }
        Ok(pack)
    }

    /// Causal self-attention blocks, one per non-empty sequence.
    pub fn self_layout(&self) -> Result<AttentionLayout> {
        let blocks = self
            .spans
            .iter()
            .filter(|(_, len)| *len > 0)
            .map(|&(off, len)| {
                Ok(AttentionBlock { q_offset: off, k_offset: off, mask: Arc::new(build_self_mask(len)?) })
            })
            .collect::<Result<Vec<_>>>()?;
        AttentionLayout::new(blocks)
    }

    /// Next-token targets within each sequence's stream; the last row of
    /// every stream has no target and is ignored.
    pub fn next_token_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let mut targets = vec![0; self.rows()];
        let mut ignore = vec![true; self.rows()];
        for &(off, len) in &self.spans {
            for i in off..off + len.saturating_sub(1) {
                targets[i] = self.tokens[i + 1];
                ignore[i] = false;
            }
        }
        (targets, ignore)
    }
}

/// Both towers' packed rows plus every attention layout needed by the
/// zipped forward pass.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    pub text: TowerPack,
    pub speech: TowerPack,
    pub text_self: Arc<AttentionLayout>,
    pub speech_self: Arc<AttentionLayout>,
    /// Text queries attending to speech keys.
    pub text_from_speech: Arc<AttentionLayout>,
    /// Speech queries attending to text keys.
    pub speech_from_text: Arc<AttentionLayout>,
    /// Modality of each sequence's final segment.
    pub last_modality: Vec<Modality>,
}

impl PackedBatch {
    pub fn new(seqs: &[InterleavedSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut text = TowerPack::default();
        let mut speech = TowerPack::default();
        let mut tfs = Vec::new();
        let mut sft = Vec::new();
        let mut last_modality = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let st = build_streams(seq)?;
            let (toff, soff) = (text.rows(), speech.rows());
            text.push_stream(&st.text);
            speech.push_stream(&st.speech);
            if !st.text.is_empty() && !st.speech.is_empty() {
                // Blocks without any visible key are left out; their query rows read zeros.
                let m = build_cross_mask(&st.text.linear, &st.speech.linear)?.into_mask();
                if !m.none() {
                    tfs.push(AttentionBlock { q_offset: toff, k_offset: soff, mask: Arc::new(m) });
                }
                let m = build_cross_mask(&st.speech.linear, &st.text.linear)?.into_mask();
                if !m.none() {
                    sft.push(AttentionBlock { q_offset: soff, k_offset: toff, mask: Arc::new(m) });
                }
            }
            last_modality.push(seq.segments.last().map(|s| s.modality).unwrap_or(Modality::Text));
        }
        Ok(PackedBatch {
            text_self: Arc::new(text.self_layout()?),
            speech_self: Arc::new(speech.self_layout()?),
            text_from_speech: Arc::new(AttentionLayout::new(tfs)?),
            speech_from_text: Arc::new(AttentionLayout::new(sft)?),
            text,
            speech,
            last_modality,
        })
    }

    pub fn tower(&self, m: Modality) -> &TowerPack {
        match m {
            Modality::Text => &self.text,
            Modality::Speech => &self.speech,
        }
    }
}

/// Flattens a sequence into one token stream, shifting speech ids by
/// `speech_offset` (vocabulary-expansion layout).
pub fn flatten_single_stream(seq: &InterleavedSequence, speech_offset: usize) -> Vec<usize> {
    seq.segments
        .iter()
        .flat_map(|s| {
            let off = if s.modality == Modality::Speech { speech_offset } else { 0 };
            s.tokens.iter().map(move |&t| t + off)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(parts: &[(Modality, &[usize])]) -> InterleavedSequence {
        InterleavedSequence::new(parts.iter().map(|(m, t)| Segment::new(*m, t.to_vec()).unwrap()).collect())
    }

    #[test]
    fn single_modality_streams() {
        let st = build_streams(&seq(&[(Modality::Text, &[10, 11])])).unwrap();
        assert_eq!(st.text.tokens, vec![10, 11]);
        assert_eq!(st.text.linear, vec![0, 1]);
        assert!(st.speech.is_empty());
    }

    #[test]
    fn speech_then_text_streams() {
        let st = build_streams(&seq(&[(Modality::Speech, &[5, 6]), (Modality::Text, &[7])])).unwrap();
        assert_eq!(st.speech.tokens, vec![5, 6]);
        assert_eq!(st.speech.linear, vec![0, 1]);
        assert_eq!(st.text.tokens, vec![7]);
        assert_eq!(st.text.linear, vec![2]);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(build_streams(&InterleavedSequence::default()).is_err());
        let bad = InterleavedSequence::new(vec![Segment { modality: Modality::Text, tokens: vec![] }]);
        assert!(build_streams(&bad).is_err());
        assert!(Segment::new(Modality::Text, vec![]).is_err());
        assert!(build_self_mask(0).is_err());
    }

    #[test]
    fn asr_layout_cross_masks() {
        let st = build_streams(&seq(&[(Modality::Speech, &[1, 2, 3]), (Modality::Text, &[4, 5])])).unwrap();
        assert!(build_cross_mask(&st.text.linear, &st.speech.linear).unwrap().as_mask().all());
        assert!(build_cross_mask(&st.speech.linear, &st.text.linear).unwrap().as_mask().none());
    }

    #[test]
    fn non_monotone_rejected() {
        assert!(build_cross_mask(&[2, 1], &[0]).is_err());
        assert!(build_cross_mask(&[1], &[3, 3]).is_err());
    }

    #[test]
    fn padding_keys_never_visible() {
        let m = build_cross_mask(&[5, 6], &[1, PAD_LINEAR_INDEX, PAD_LINEAR_INDEX]).unwrap();
        assert!(m.allowed(0, 0) && m.allowed(1, 0));
        assert!(!m.allowed(1, 1) && !m.allowed(1, 2));
    }

    #[test]
    fn packed_targets_stay_within_streams() {
        let pack = TowerPack::from_sequences(&[vec![1, 2, 3], vec![4, 5]]).unwrap();
        let (t, ig) = pack.next_token_targets();
        assert_eq!(pack.positions, vec![0, 1, 2, 0, 1]);
        assert_eq!(ig, vec![false, false, true, false, true]);
        assert_eq!(&t[..2], &[2, 3]);
        assert_eq!(t[3], 5);
    }

    #[test]
    fn flatten_offsets_speech() {
        let s = seq(&[(Modality::Speech, &[0, 7]), (Modality::Text, &[1, 2])]);
        assert_eq!(flatten_single_stream(&s, 31), vec![31, 38, 1, 2]);
    }
}
