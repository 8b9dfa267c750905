mod common;

use common::random_sequence;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zipper_core::interleave::{
    build_cross_mask, build_self_mask, build_streams, InterleavedSequence, Modality, PackedBatch, Segment, Streams,
};

/// Rebuilds segments from the per-tower streams alone.
fn reassemble(st: &Streams) -> InterleavedSequence {
    let mut tagged: Vec<(usize, usize, Modality, usize)> = Vec::new();
    for m in [Modality::Text, Modality::Speech] {
        let s = st.get(m);
        for i in 0..s.len() {
            tagged.push((s.linear[i], s.segment[i], m, s.tokens[i]));
        }
    }
    tagged.sort_by_key(|t| t.0);
    let mut out = InterleavedSequence::default();
    let mut current: Option<usize> = None;
    for (_, seg, m, tok) in tagged {
        if current == Some(seg) {
            out.segments.last_mut().unwrap().tokens.push(tok);
        } else {
            out.push(Segment::new(m, vec![tok]).unwrap());
            current = Some(seg);
        }
    }
    out
}

#[test]
fn streams_round_trip_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let s = random_sequence(&mut rng, 4, 20);
        let st = build_streams(&s).unwrap();
        assert_eq!(st.text.len() + st.speech.len(), s.total_tokens());
        for stream in [&st.text, &st.speech] {
            assert!(stream.linear.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(reassemble(&st), s);
    }
}

#[test]
fn three_segment_mask_matches_brute_force() {
    let s = common::seq(&[(Modality::Text, &[1, 2]), (Modality::Speech, &[3, 4]), (Modality::Text, &[5])]);
    let st = build_streams(&s).unwrap();
    assert_eq!(st.text.linear, vec![0, 1, 4]);
    assert_eq!(st.speech.linear, vec![2, 3]);
    let m = build_cross_mask(&st.text.linear, &st.speech.linear).unwrap();
    let expected = [[false, false], [false, false], [true, true]];
    for (q, row) in expected.iter().enumerate() {
        for (k, &e) in row.iter().enumerate() {
            assert_eq!(m.allowed(q, k), e);
        }
    }
    let r = build_cross_mask(&st.speech.linear, &st.text.linear).unwrap();
    for q in 0..2 {
        for k in 0..3 {
            assert_eq!(r.allowed(q, k), k < 2);
        }
    }
}

#[test]
fn self_mask_small_cases() {
    let m = build_self_mask(1).unwrap();
    assert!(m.get(0, 0));
    let m = build_self_mask(3).unwrap();
    let sums: Vec<usize> = (0..3).map(|i| (0..3).filter(|&j| m.get(i, j)).count()).collect();
    assert_eq!(sums, vec![1, 2, 3]);
}

fn strictly_increasing() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(1usize..4, 0..12).prop_map(|gaps| {
        gaps.iter()
            .scan(0usize, |acc, g| {
                *acc += g;
                Some(*acc)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn self_mask_is_lower_triangular(t in 1usize..40) {
        let m = build_self_mask(t).unwrap();
        for i in 0..t {
            for j in 0..t {
                prop_assert_eq!(m.get(i, j), j <= i);
            }
        }
    }

    #[test]
    fn cross_mask_is_strict_precedence(q in strictly_increasing(), k in strictly_increasing()) {
        let m = build_cross_mask(&q, &k).unwrap();
        for (i, &lq) in q.iter().enumerate() {
            for (j, &lk) in k.iter().enumerate() {
                prop_assert_eq!(m.allowed(i, j), lk < lq);
            }
        }
        prop_assert_eq!(build_cross_mask(&q, &k).unwrap(), m);
    }

    #[test]
    fn packed_batches_preserve_stream_spans(seed in 0u64..500, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<_> = (0..n).map(|_| random_sequence(&mut rng, 3, 12)).collect();
        let batch = PackedBatch::new(&seqs).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let st = build_streams(s).unwrap();
            for m in [Modality::Text, Modality::Speech] {
                let (off, len) = batch.tower(m).spans[i];
                prop_assert_eq!(len, st.get(m).len());
                prop_assert_eq!(&batch.tower(m).tokens[off..off + len], st.get(m).tokens.as_slice());
                prop_assert_eq!(&batch.tower(m).linear[off..off + len], st.get(m).linear.as_slice());
            }
        }
    }
}
