use zipper_core::config::ExperimentConfig;
use zipper_core::Error;

fn key_of(r: zipper_core::Result<ExperimentConfig>) -> String {
    match r {
        Err(Error::Config { key, .. }) => key,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn empty_file_gives_defaults() {
    let c = ExperimentConfig::from_toml_str("").unwrap();
    assert_eq!(c, ExperimentConfig::default());
    assert_eq!(c.text_backbone.n_layers, 4);
    assert_eq!(c.text_backbone.d_model, 64);
    assert_eq!(c.zipper.n_zips, 4);
    assert_eq!(c.corpus_spec().n_pairs, 10_000);
}

#[test]
fn toml_round_trip() {
    let src = r#"
        seed = 7
        out = "runs/x"
        [zipper]
        n_zips = 2
        interval_text = 2
        interval_speech = 2
        [train]
        steps = 50
        batch_size = 8
        learning_rate = 0.0005
        [corpus]
        n_pairs = 300
        fraction = 0.1
        [sweep]
        fractions = [0.1, 1.0]
        seeds = [3]
        kinds = [{ family = "single_decoder" }]
        [ablation]
        n_zips = [0, 2]
    "#;
    let c = ExperimentConfig::from_toml_str(src).unwrap();
    assert_eq!((c.seed, c.zipper.n_zips, c.train.steps), (7, 2, 50));
    assert_eq!(c.corpus_spec().seed, 7);
    assert_eq!(c.train_spec().seed, 7);
    assert_eq!(c.sweep.kinds.len(), 1);
    let again = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
    assert_eq!(again, c);
}

#[test]
fn unknown_keys_name_the_offender() {
    assert!(key_of(ExperimentConfig::from_toml_str("sede = 1")).contains("sede"));
    assert!(key_of(ExperimentConfig::from_toml_str("[zipper]\nn_zipz = 3")).contains("n_zipz"));
    assert!(key_of(ExperimentConfig::from_toml_str("[nonsense]\na = 1")).contains("nonsense"));
}

#[test]
fn cross_field_validation() {
    let cases = [
        ("[zipper]\nn_zips = 5", "zipper"),
        ("[zipper]\ndropout = 1.0", "zipper"),
        ("[text_backbone]\nvocab_size = 40", "text_backbone.vocab_size"),
        ("[speech_backbone]\nmax_seq_len = 60", "speech_backbone.max_seq_len"),
        ("[text_backbone]\nmax_seq_len = 80", "text_backbone.max_seq_len"),
        ("[corpus]\nfraction = 0.0", "corpus.fraction"),
        ("[corpus]\nfraction = 1.5", "corpus.fraction"),
        ("[baseline]\ndropout = 1.0", "baseline.dropout"),
        ("[sweep]\nfractions = [0.5, 2.0]", "sweep.fractions"),
        ("[train]\nbatch_size = 0", "train"),
        ("[eval]\nalpha = 1.5", "eval"),
        ("[ablation]\nn_zips = [0, 9]", "ablation"),
        ("[text_backbone]\nn_heads = 3", "text_backbone"),
    ];
    for (src, prefix) in cases {
        let key = key_of(ExperimentConfig::from_toml_str(src));
        assert!(key.starts_with(prefix), "{src:?} gave key {key:?}");
    }
}

#[test]
fn load_reads_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "seed = 3\n").unwrap();
    assert_eq!(ExperimentConfig::load(&p).unwrap().seed, 3);
    assert!(matches!(ExperimentConfig::load(dir.path().join("missing.toml")), Err(Error::Io(_))));
}
