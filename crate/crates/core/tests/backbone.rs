use std::path::PathBuf;

use proptest::prelude::*;
use zipper_core::backbone::{BackboneConfig, DecoderBackbone};
use zipper_core::config::{speech_backbone_default, text_backbone_default};
use zipper_core::synthdata::SPEECH_VOCAB;
use zipper_core::training::{heldout_loss, pretrain, TrainSpec};

fn small() -> BackboneConfig {
    BackboneConfig {
        vocab_size: 31,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        dropout: 0.0,
        tie_output_to_embedding: true,
    }
}

#[test]
fn single_token_logits_shape() {
    let m = DecoderBackbone::<f32>::new(small(), 1).unwrap();
    for t in [0, 7, 30] {
        let out = m.forward(&[t], &[]).unwrap();
        assert_eq!(out.logits.shape(), &[1, 31]);
    }
}

#[test]
fn appending_a_token_keeps_earlier_logits() {
    let m = DecoderBackbone::<f32>::new(small(), 2).unwrap();
    let a = m.forward(&[1, 4, 9, 3], &[]).unwrap();
    let b = m.forward(&[1, 4, 9, 3, 12], &[]).unwrap();
    for (x, y) in a.logits.data().iter().zip(&b.logits.data()[..4 * 31]) {
        assert!((x - y).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn logits_ignore_future_tokens(
        tokens in proptest::collection::vec(0usize..31, 2..16),
        t in 0usize..15,
        seed in 0u64..4,
    ) {
        let t = t % (tokens.len() - 1);
        let m = DecoderBackbone::<f64>::new(small(), seed).unwrap();
        let base = m.forward(&tokens, &[]).unwrap();
        let mut perturbed = tokens.clone();
        for (i, v) in perturbed.iter_mut().enumerate().skip(t + 1) {
            *v = (*v + 7 + i) % 31;
        }
        let other = m.forward(&perturbed, &[]).unwrap();
        let n = (t + 1) * 31;
        for (x, y) in base.logits.data()[..n].iter().zip(&other.logits.data()[..n]) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Golden {
    tokens: Vec<usize>,
    shape: Vec<usize>,
    logits: Vec<f32>,
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/backbone_seed7.json")
}

/// Set `ZIPPER_BLESS=1` to regenerate the stored logits.
#[test]
fn untrained_logits_match_golden_file() {
    let m = DecoderBackbone::<f32>::new(small(), 7).unwrap();
    let tokens = vec![1, 5, 9, 3, 2];
    let out = m.forward(&tokens, &[]).unwrap();
    let path = golden_path();
    if std::env::var_os("ZIPPER_BLESS").is_some() {
        let g = Golden { tokens, shape: out.logits.shape().to_vec(), logits: out.logits.data().to_vec() };
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&g).unwrap()).unwrap();
        return;
    }
    let g: Golden = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(g.tokens, tokens);
    assert_eq!(g.shape, out.logits.shape());
    for (i, (a, b)) in g.logits.iter().zip(out.logits.data()).enumerate() {
        assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "logit {i} drifted: {a} vs {b}");
    }
}

#[test]
fn hidden_states_are_collected_per_layer() {
    let m = DecoderBackbone::<f32>::new(small(), 3).unwrap();
    let out = m.forward(&[1, 2, 3], &[0, 1, 2]).unwrap();
    assert_eq!(out.hidden.len(), 3);
    for h in out.hidden.values() {
        assert_eq!(h.shape(), &[3, 16]);
    }
    assert!(m.forward(&[1], &[3]).is_err());
}

#[test]
fn reference_parameter_count() {
    let cfg = text_backbone_default();
    assert_eq!(cfg.param_count(), 144_192);
    let m = DecoderBackbone::<f32>::new(cfg.clone(), 0).unwrap();
    assert_eq!(m.param_count(), cfg.param_count());
    let untied = BackboneConfig { tie_output_to_embedding: false, ..cfg };
    assert_eq!(DecoderBackbone::<f32>::new(untied.clone(), 0).unwrap().param_count(), untied.param_count());
    assert_eq!(untied.param_count(), 144_192 + 31 * 64);
}

#[test]
fn output_head_shares_embedding_storage() {
    let mut m = DecoderBackbone::<f64>::new(small(), 4).unwrap();
    assert_eq!(m.layout.output_table(), m.layout.tok_emb);
    let before = m.forward(&[1, 2], &[]).unwrap();
    let v = 17;
    let row = &mut m.params.get_mut(m.layout.tok_emb).data_mut()[v * 16..(v + 1) * 16];
    row.iter_mut().for_each(|x| *x += 0.5);
    let after = m.forward(&[1, 2], &[]).unwrap();
    for t in 0..2 {
        for c in 0..31 {
            let changed = before.logits.data()[t * 31 + c] != after.logits.data()[t * 31 + c];
            assert_eq!(changed, c == v, "position {t} column {c}");
        }
    }
}

#[test]
fn vocabulary_expansion_preserves_old_weights() {
    let text = DecoderBackbone::<f32>::new(text_backbone_default(), 11).unwrap();
    let grown = text.expand_vocabulary(SPEECH_VOCAB, 5).unwrap();
    assert_eq!(grown.config.vocab_size, 31 + 1026);
    assert_eq!(grown.config.vocab_size, 1057);
    for (_, name, t) in text.params.iter() {
        let g = grown.params.by_name(name).unwrap();
        let n = t.numel();
        assert_eq!(&g.data()[..n], t.data(), "{name}");
    }
    let emb = grown.params.get(grown.layout.tok_emb);
    let extra = &emb.data()[31 * 64..];
    let mean = extra.iter().map(|&x| f64::from(x)).sum::<f64>() / extra.len() as f64;
    let std = (extra.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / extra.len() as f64).sqrt();
    assert!(mean.abs() < 0.002 && (std - 0.02).abs() < 0.002, "mean {mean} std {std}");

    let tokens = [1, 8, 12, 3, 20, 2];
    let a = text.forward(&tokens, &[]).unwrap();
    let b = grown.forward(&tokens, &[]).unwrap();
    for t in 0..tokens.len() {
        let old = &a.logits.data()[t * 31..(t + 1) * 31];
        let new = &b.logits.data()[t * 1057..t * 1057 + 31];
        assert_eq!(old, new);
        let rank = |row: &[f32]| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
            idx
        };
        assert_eq!(rank(old), rank(new));
    }
    assert!(text.expand_vocabulary(0, 5).is_err());
}

#[test]
fn rejects_overlong_and_out_of_range_inputs() {
    let m = DecoderBackbone::<f32>::new(small(), 0).unwrap();
    assert!(m.forward(&[1; 17], &[]).is_err());
    assert!(m.forward(&[1; 16], &[]).is_ok());
    assert!(m.forward(&[31], &[]).is_err());
    assert!(m.forward(&[], &[]).is_err());
    let bad = BackboneConfig { n_heads: 3, ..small() };
    assert!(DecoderBackbone::<f32>::new(bad, 0).is_err());
    let bad = BackboneConfig { vocab_size: 2, ..small() };
    assert!(DecoderBackbone::<f32>::new(bad, 0).is_err());
}

fn speech_streams(n: usize, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let spec = zipper_core::synthdata::CorpusSpec {
        seed,
        n_pairs: 20,
        n_unpaired_speech: n,
        n_unpaired_text: 10,
        n_val: 40,
        n_test: 10,
        ..Default::default()
    };
    let c = zipper_core::synthdata::SyntheticCorpus::generate(&spec, 1.0).unwrap();
    let train = c.unpaired_speech.iter().map(|e| e.speech_tokens.clone()).collect();
    let held = c.val_clean.iter().map(|e| e.speech_tokens.clone()).collect();
    (train, held)
}

fn tiny_speech() -> BackboneConfig {
    BackboneConfig { d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, max_seq_len: 96, ..speech_backbone_default() }
}

#[test]
fn zero_step_pretraining_is_identity() {
    let (train, _) = speech_streams(50, 1);
    let mut m = DecoderBackbone::<f32>::new(tiny_speech(), 0).unwrap();
    let init = m.params.clone();
    let spec = TrainSpec { steps: 0, batch_size: 4, ..TrainSpec::default() };
    pretrain(&mut m, &train, &spec, None).unwrap();
    assert!(m.params.bit_equal(&init));
    assert!(pretrain(&mut m, &[], &spec, None).is_err());
}

#[test]
fn pretraining_is_deterministic_and_lowers_heldout_loss() {
    let (train, held) = speech_streams(400, 2);
    let spec = TrainSpec { steps: 150, batch_size: 8, learning_rate: 3e-3, seed: 9, ..TrainSpec::default() };
    let run = || {
        let mut m = DecoderBackbone::<f32>::new(tiny_speech(), 3).unwrap();
        let before = heldout_loss(&m, &held, 16).unwrap();
        let log = pretrain(&mut m, &train, &spec, None).unwrap();
        (m, before, log)
    };
    let (a, before, log_a) = run();
    let (b, _, log_b) = run();
    assert!(a.params.bit_equal(&b.params));
    assert_eq!(log_a, log_b);
    let after = heldout_loss(&a, &held, 16).unwrap();
    assert!(after < 0.8 * before, "held-out loss {before} -> {after}");
}
