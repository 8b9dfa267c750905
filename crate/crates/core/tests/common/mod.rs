#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use zipper_core::backbone::BackboneConfig;
use zipper_core::fusion::{ZipperConfig, ZipperModel};
use zipper_core::interleave::{InterleavedSequence, Modality, Segment};
use zipper_core::numeric::Scalar;

pub fn tiny_tower(vocab: usize, max_seq_len: usize) -> BackboneConfig {
    BackboneConfig {
        vocab_size: vocab,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len,
        dropout: 0.0,
        tie_output_to_embedding: true,
    }
}

pub fn tiny_zipper_config(n_zips: usize) -> ZipperConfig {
    ZipperConfig { n_zips, proj_hidden: 16, ..ZipperConfig::default() }
}

/// Tiny zipped model with text vocab 31 and a reduced speech vocab.
pub fn tiny_zipper<T: Scalar>(n_zips: usize, seed: u64) -> ZipperModel<T> {
    ZipperModel::init(tiny_zipper_config(n_zips), &tiny_tower(31, 24), &tiny_tower(40, 24), seed).unwrap()
}

/// Sets every cross-attention and feed-forward gate to `value`.
pub fn set_gates<T: Scalar>(model: &mut ZipperModel<T>, value: f64) {
    let ids: Vec<_> =
        model.zips.iter().flat_map(|z| [&z.into_text, &z.into_speech]).flat_map(|b| [b.gate_attn, b.gate_ffn]).collect();
    for id in ids {
        model.params.get_mut(id).data_mut()[0] = T::from_f64_lossy(value);
    }
}

pub fn vocab(m: Modality) -> usize {
    match m {
        Modality::Text => 31,
        Modality::Speech => 40,
    }
}

/// Random interleaving of `n_segments` segments, each tower stream at most
/// `max_stream` tokens long.
pub fn random_sequence(rng: &mut ChaCha8Rng, n_segments: usize, max_stream: usize) -> InterleavedSequence {
    let mut seq = InterleavedSequence::default();
    let mut m = if rng.random_bool(0.5) { Modality::Text } else { Modality::Speech };
    let per = (max_stream / n_segments.div_ceil(2)).max(1);
    for _ in 0..n_segments {
        let len = rng.random_range(1..=per);
        let tokens = (0..len).map(|_| rng.random_range(0..vocab(m))).collect();
        seq.push(Segment::new(m, tokens).unwrap());
        if rng.random_bool(0.7) {
            m = m.other();
        }
    }
    seq
}

pub fn seq(parts: &[(Modality, &[usize])]) -> InterleavedSequence {
    InterleavedSequence::new(parts.iter().map(|(m, t)| Segment::new(*m, t.to_vec()).unwrap()).collect())
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}
