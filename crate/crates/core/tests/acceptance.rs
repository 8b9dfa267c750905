//! Acceptance suite: one PASS/FAIL line per criterion and a summary line.
//! `ZIPPER_ACCEPT=1,7,8` runs a subset; `ZIPPER_ACCEPT_STRICT=1` exits
//! non-zero when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{random_sequence, set_gates, tiny_tower, tiny_zipper};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zipper_core::backbone::DecoderBackbone;
use zipper_core::checkpoint::{Checkpoint, CheckpointMeta, ModelSpec};
use zipper_core::config::{speech_backbone_default, text_backbone_default};
use zipper_core::evalkit::*;
use zipper_core::fusion::{ZipperConfig, ZipperModel};
use zipper_core::inference::{generate, DecodePlan};
use zipper_core::interleave::{build_streams, InterleavedSequence, Modality, Segment};
use zipper_core::numeric::gradcheck::check_params;
use zipper_core::numeric::{Graph, ParamId, Tensor};
use zipper_core::seeding::derive_seed;
use zipper_core::synthdata::{encode_speech, CorpusSpec, SyntheticCorpus, TextTokenizer, SPEECH_VOCAB};
use zipper_core::training::*;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const INDEPENDENCE_TOL: f64 = 1e-12;
const CAUSALITY_TOL: f64 = 1e-6;
const CAUSALITY_CASES: usize = 200;
const FREEZE_STEPS: u64 = 500;
const FULL_DATA_ASR_MAX: f64 = 0.05;
const NO_ZIP_ASR_MIN: f64 = 0.50;
const DESK_TARGET: Duration = Duration::from_secs(60 * 60);
const SEEDS: [u64; 3] = [0, 1, 2];

const PRETRAIN_STEPS: u64 = 1600;
const PRETRAIN_BATCH: usize = 32;

fn desk_train() -> TrainSpec {
    TrainSpec {
        steps: 3000,
        batch_size: 16,
        learning_rate: 4e-3,
        gate_lr_scale: 20.0,
        lr_schedule: LrSchedule::WarmupCosine { warmup_steps: 200, final_scale: 0.1 },
        ..TrainSpec::default()
    }
}

fn report(id: &str, title: &str, pass: bool, detail: String) -> bool {
    println!("[{}] criterion {id:<3} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn logits(model: &ZipperModel<f64>, s: &InterleavedSequence) -> (Vec<f64>, Vec<f64>) {
    let (a, b) = model.forward_zipped(s, false).unwrap();
    let flat = |t: Option<Tensor<f64>>| t.map(|t| t.data().to_vec()).unwrap_or_default();
    (flat(a), flat(b))
}

fn gradient_fidelity() -> bool {
    let t0 = Instant::now();
    let mut model = tiny_zipper::<f64>(2, 12);
    model.set_freeze(false, false);
    set_gates(&mut model, 0.4);
    let batch = vec![
        common::seq(&[(Modality::Speech, &[0, 5, 17, 33, 1]), (Modality::Text, &[1, 9, 14, 2])]),
        common::seq(&[(Modality::Text, &[1, 20, 3, 2]), (Modality::Speech, &[0, 8, 39, 1])]),
    ];
    let mut g = Graph::eval();
    let loss = model.loss(&mut g, &batch, LossScope::AllTokens).unwrap();
    model.params.zero_grad();
    g.backward(loss, &mut model.params).unwrap();
    drop(g);
    let ids: Vec<ParamId> = model.params.ids().collect();
    let structure = model.clone();
    let r = check_params(&mut model.params, &ids, 1e-6, 1e-5, None, |p| {
        let m = ZipperModel { params: p.clone(), ..structure.clone() };
        let mut g = Graph::eval();
        let l = m.loss(&mut g, &batch, LossScope::AllTokens).unwrap();
        g.scalar(l)
    });
    let elapsed = t0.elapsed();
    report(
        "1",
        "gradient fidelity",
        r.passes(GRAD_TOL) && elapsed < GRAD_BUDGET,
        format!(
            "{} elements of {} tensors, max rel err {:.2e} (< {GRAD_TOL:.0e}), {:.1}s (< {}s)",
            r.checked,
            ids.len(),
            r.max_rel_err,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

/// Replaces every token of `m` with a fresh random one.
fn resample(rng: &mut ChaCha8Rng, s: &InterleavedSequence, m: Modality) -> InterleavedSequence {
    let mut out = s.clone();
    for seg in out.segments.iter_mut().filter(|g| g.modality == m) {
        for t in &mut seg.tokens {
            *t = rng.random_range(0..common::vocab(m));
        }
    }
    out
}

fn zero_gate_independence() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let model = tiny_zipper::<f64>(2, 3);
    for _ in 0..50 {
        let s = random_sequence(&mut rng, 3, 16);
        let (a, b) = logits(&model, &s);
        let (a2, _) = logits(&model, &resample(&mut rng, &s, Modality::Speech));
        let (_, b2) = logits(&model, &resample(&mut rng, &s, Modality::Text));
        worst = worst.max(common::max_abs_diff(&a, &a2)).max(common::max_abs_diff(&b, &b2));
    }
    let init = worst;

    let mut model = tiny_zipper::<f64>(0, 4);
    model.set_freeze(false, false);
    let spec = TrainSpec { steps: 200, batch_size: 4, learning_rate: 3e-3, ..TrainSpec::default() };
    let mut opt = OptimizerState::new(spec.optimizer, spec.learning_rate);
    for step in 0..spec.steps {
        let batch: Vec<_> = (0..4).map(|_| random_sequence(&mut rng, 3, 16)).collect();
        train_step(&mut model, &mut opt, &batch, &spec, step).unwrap();
    }
    let mut trained: f64 = 0.0;
    for _ in 0..50 {
        let s = random_sequence(&mut rng, 3, 16);
        let (a, b) = logits(&model, &s);
        let (a2, _) = logits(&model, &resample(&mut rng, &s, Modality::Speech));
        let (_, b2) = logits(&model, &resample(&mut rng, &s, Modality::Text));
        trained = trained.max(common::max_abs_diff(&a, &a2)).max(common::max_abs_diff(&b, &b2));
    }
    report(
        "2",
        "zero-gate independence",
        init <= INDEPENDENCE_TOL && trained <= INDEPENDENCE_TOL,
        format!("max |dlogits| at init {init:.1e}, n_zips=0 after 200 steps {trained:.1e} (<= {INDEPENDENCE_TOL:.0e})"),
    )
}

fn cross_modal_causality() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = tiny_zipper::<f64>(2, 6);
    set_gates(&mut model, 0.8);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < CAUSALITY_CASES {
        let s = random_sequence(&mut rng, 3, 16);
        if s.segments.len() != 3 || s.total_tokens() < 2 {
            continue;
        }
        cases += 1;
        let t = rng.random_range(0..s.total_tokens() - 1);
        let mut p = s.clone();
        let mut lin = 0;
        for seg in &mut p.segments {
            for tok in &mut seg.tokens {
                if lin > t {
                    *tok = rng.random_range(0..common::vocab(seg.modality));
                }
                lin += 1;
            }
        }
        let st = build_streams(&s).unwrap();
        let (a, b) = logits(&model, &s);
        let (a2, b2) = logits(&model, &p);
        for (m, x, y) in [(Modality::Text, &a, &a2), (Modality::Speech, &b, &b2)] {
            let v = common::vocab(m);
            for (row, &l) in st.get(m).linear.iter().enumerate() {
                if l <= t {
                    worst = worst.max(common::max_abs_diff(&x[row * v..(row + 1) * v], &y[row * v..(row + 1) * v]));
                }
            }
        }
    }
    report(
        "3",
        "cross-modal causality",
        worst < CAUSALITY_TOL,
        format!("{cases} fuzz cases, max |dlogits| at linear index <= t: {worst:.1e} (< {CAUSALITY_TOL:.0e})"),
    )
}

fn text_params_match(model: &ZipperModel<f32>, tower: &Checkpoint) -> (usize, usize) {
    let mut same = 0;
    for p in &tower.params {
        let id = model.params.id(&format!("text.{}", p.name)).expect("text parameter");
        let t = model.params.get(id);
        if t.shape() == p.shape.as_slice() && t.data().iter().zip(&p.values).all(|(a, b)| a.to_bits() == b.to_bits()) {
            same += 1;
        }
    }
    (same, tower.params.len())
}

fn freeze_contract(desk: Option<&FullData>) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = tiny_zipper::<f32>(2, 8);
    model.set_freeze(true, false);
    let text = model.tower_backbone(Modality::Text).unwrap();
    let meta = CheckpointMeta { model: ModelSpec::of_backbone(&text), step: 0, seed: 8, optimizer: None, config: None };
    let ck = Checkpoint::from_bytes(&Checkpoint::from_store(meta, &text.params, None).to_bytes().unwrap()).unwrap();
    let before = model.params.clone();
    let spec = TrainSpec { steps: FREEZE_STEPS, batch_size: 4, learning_rate: 1e-3, gate_lr_scale: 10.0, ..TrainSpec::default() };
    let mut opt = OptimizerState::new(spec.optimizer, spec.learning_rate);
    for step in 0..FREEZE_STEPS {
        let batch: Vec<_> = (0..4).map(|_| random_sequence(&mut rng, 2, 12)).collect();
        train_step(&mut model, &mut opt, &batch, &spec, step).unwrap();
    }
    let (same, total) = text_params_match(&model, &ck);
    let moved = model.params.iter().filter(|(id, _, t)| t.data() != before.get(*id).data()).count();
    let mut pass = same == total && moved > 0;
    let mut detail = format!("{same}/{total} text tensors bit-identical after {FREEZE_STEPS} steps, {moved} other tensors moved");
    if let Some(d) = desk {
        let (s2, t2) = text_params_match(&d.zipper, &d.text_checkpoint);
        pass &= s2 == t2;
        detail += &format!("; desk-scale run {s2}/{t2} after {} steps", desk_train().steps);
    }
    report("4", "freeze contract", pass, detail)
}

struct Desk {
    ctx: ExperimentContext,
    corpus: SyntheticCorpus,
    text_checkpoint: Checkpoint,
    pretrain_time: Duration,
}

struct FullData {
    zipper: ZipperModel<f32>,
    text_checkpoint: Checkpoint,
    asr: f64,
    hello: String,
    elapsed: Duration,
}

fn pretrain_desk() -> Desk {
    let t0 = Instant::now();
    let spec = CorpusSpec::default();
    let corpus = SyntheticCorpus::generate(&spec, 1.0).unwrap();
    let streams: Vec<Vec<usize>> = corpus.unpaired_speech.iter().map(|e| e.speech_tokens.clone()).collect();
    let text_streams: Vec<Vec<usize>> =
        corpus.unpaired_text.iter().map(|e| TextTokenizer.encode_framed(&e.text).unwrap()).collect();
    let pre = |seed: u64| TrainSpec {
        steps: PRETRAIN_STEPS,
        batch_size: PRETRAIN_BATCH,
        learning_rate: 1e-3,
        seed,
        ..TrainSpec::default()
    };
    let mut speech = DecoderBackbone::<f32>::new(speech_backbone_default(), derive_seed(0, "tower_init", 0)).unwrap();
    let log = pretrain(&mut speech, &streams, &pre(derive_seed(0, "pretrain", 0)), None).unwrap();
    let speech_loss = (log[0].loss, log.iter().rev().take(50).map(|m| m.loss).sum::<f64>() / 50.0);
    let mut text = DecoderBackbone::<f32>::new(text_backbone_default(), derive_seed(0, "tower_init", 1)).unwrap();
    pretrain(&mut text, &text_streams, &pre(derive_seed(0, "pretrain", 1)), None).unwrap();
    let meta = CheckpointMeta { model: ModelSpec::of_backbone(&text), step: PRETRAIN_STEPS, seed: 0, optimizer: None, config: None };
    let text_checkpoint = Checkpoint::from_store(meta, &text.params, None);
    let ctx = ExperimentContext {
        towers: Towers { text, speech },
        corpus: spec,
        zipper: ZipperConfig::default(),
        train: desk_train(),
        baseline_dropout: 0.1,
        eval: EvalSettings::default(),
    };
    println!(
        "       desk towers pre-trained in {:.0}s ({} unpaired speech sentences, speech loss {:.3} -> {:.3})",
        t0.elapsed().as_secs_f64(),
        corpus.unpaired_speech.len(),
        speech_loss.0,
        speech_loss.1
    );
    Desk { ctx, corpus, text_checkpoint, pretrain_time: t0.elapsed() }
}

fn train_zipper(desk: &Desk, corpus: &SyntheticCorpus, cfg: &ZipperConfig, seed: u64) -> Option<FineTuned> {
    desk.ctx.train_cell(corpus, RunKind::zipper(false), cfg, seed).unwrap()
}

fn wer_or_inf(desk: &Desk, m: &Option<FineTuned>, corpus: &SyntheticCorpus, f: fn(&CellScores) -> f64) -> f64 {
    m.as_ref().map_or(f64::INFINITY, |m| f(&desk.ctx.evaluate(m, corpus).unwrap()))
}

fn full_data_run(desk: &Desk) -> FullData {
    let t0 = Instant::now();
    let Some(FineTuned::Zipper(zipper)) = train_zipper(desk, &desk.corpus, &desk.ctx.zipper, 0) else {
        panic!("full-data zipper run diverged");
    };
    let model = FineTuned::Zipper(zipper);
    let n = desk.ctx.eval.n_eval.min(desk.corpus.val_clean.len());
    let asr = model.transcribe(&desk.corpus.val_clean[..n], desk.ctx.eval.max_text_tokens).unwrap().pooled.wer;
    let FineTuned::Zipper(zipper) = model else { unreachable!() };
    let prompt = InterleavedSequence::new(vec![Segment::new(
        Modality::Speech,
        encode_speech(&desk.corpus.codebook, "hello world", 0.0, 0).unwrap(),
    )
    .unwrap()]);
    let gen = generate(&zipper, &prompt, &DecodePlan::new(vec![Modality::Text], 48).unwrap()).unwrap();
    let hello = TextTokenizer.decode(&gen.generated(0)[1..]);
    FullData { zipper, text_checkpoint: desk.text_checkpoint.clone(), asr, hello, elapsed: t0.elapsed() }
}

/// Validation-clean WERs of the Zipper and the baseline over [`SEEDS`].
fn seeded_pairs(desk: &Desk, fraction: f64, metric: fn(&CellScores) -> f64) -> (Vec<f64>, Vec<f64>, usize) {
    let corpus = SyntheticCorpus::generate(&desk.ctx.corpus, fraction).unwrap();
    let (mut zip, mut base) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let z = train_zipper(desk, &corpus, &desk.ctx.zipper, seed);
        zip.push(wer_or_inf(desk, &z, &corpus, metric));
        let b = desk.ctx.train_cell(&corpus, RunKind::baseline(), &desk.ctx.zipper, seed).unwrap();
        base.push(wer_or_inf(desk, &b, &corpus, metric));
    }
    (zip, base, corpus.paired.len())
}

fn desk_learning(desk: &Desk, full: &FullData) -> (bool, bool) {
    let a = report(
        "5a",
        "desk-scale learning (fraction 1.0)",
        full.asr <= FULL_DATA_ASR_MAX,
        format!(
            "zipper (frozen text, unfrozen speech) val-clean ASR WER {:.4} (<= {FULL_DATA_ASR_MAX}); \"hello world\" -> {:?}; {:.0}s",
            full.asr,
            full.hello,
            full.elapsed.as_secs_f64()
        ),
    );
    let t0 = Instant::now();
    let (zip, base, pairs) = seeded_pairs(desk, 0.01, |s| s.asr_clean.pooled.wer);
    let total = desk.pretrain_time + full.elapsed + t0.elapsed();
    let (mz, mb) = (median(zip.clone()), median(base.clone()));
    let b = report(
        "5b",
        "data-fraction trend (fraction 0.01)",
        mz < mb,
        format!(
            "median val-clean ASR WER zipper {mz:.4} {zip:.3?} < baseline {mb:.4} {base:.3?}; {pairs} pairs; \
             criterion 5 took {:.1} min (target {} min)",
            total.as_secs_f64() / 60.0,
            DESK_TARGET.as_secs() / 60
        ),
    );
    (a, b)
}

fn tts_advantage(desk: &Desk) -> bool {
    let t0 = Instant::now();
    let (zip, base, pairs) = seeded_pairs(desk, 0.1, |s| s.tts_clean.pooled.wer);
    let (mz, mb) = (median(zip.clone()), median(base.clone()));
    report(
        "6",
        "TTS advantage (fraction 0.1)",
        mz < mb,
        format!(
            "median oracle-decoded TTS WER zipper {mz:.4} {zip:.3?} < baseline {mb:.4} {base:.3?}; {pairs} pairs; {:.0}s",
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn edit_distance_oracle(r: &[&str], h: &[&str]) -> usize {
    match (r, h) {
        ([], _) => h.len(),
        (_, []) => r.len(),
        ([a, rr @ ..], [b, hr @ ..]) => (edit_distance_oracle(rr, hr) + usize::from(a != b))
            .min(edit_distance_oracle(rr, h) + 1)
            .min(edit_distance_oracle(r, hr) + 1),
    }
}

fn wer_oracle() -> bool {
    let mut all: Vec<Vec<&str>> = vec![vec![]];
    for len in 1..=4 {
        for mask in 0..(1u32 << len) {
            all.push((0..len).map(|i| if mask >> i & 1 == 1 { "b" } else { "a" }).collect());
        }
    }
    let mut checked = 0;
    let mut mismatches = 0;
    for r in all.iter().filter(|r| !r.is_empty()) {
        for h in &all {
            let w = wer(&r.join(" "), &h.join(" ")).unwrap();
            checked += 1;
            if w.errors() != edit_distance_oracle(r, h) {
                mismatches += 1;
            }
        }
    }
    report("7", "WER oracle equivalence", mismatches == 0, format!("{checked} ref/hyp pairs, {mismatches} mismatches"))
}

fn enumerated_p(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let ranks = average_ranks(&nz.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let obs: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let n = nz.len();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        le += u64::from(w <= obs + 1e-9);
        ge += u64::from(w >= obs - 1e-9);
    }
    (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
}

fn wilcoxon_exactness() -> bool {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 5..=8usize {
        for mask in 0u32..(1 << n) {
            let a: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { (i + 1) as f64 } else { -((i + 1) as f64) }).collect();
            let r = wilcoxon_signed_rank(&a, &vec![0.0; n], 0.05).unwrap();
            worst = worst.max((r.p_value - enumerated_p(&a)).abs());
            cases += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    while cases < 2000 {
        let n = rng.random_range(5..=8);
        let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-3i8..=3))).collect();
        if a.iter().filter(|d| **d != 0.0).count() < 5 {
            continue;
        }
        let r = wilcoxon_signed_rank(&a, &vec![0.0; n], 0.05).unwrap();
        worst = worst.max((r.p_value - enumerated_p(&a)).abs());
        cases += 1;
    }
    let five = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5], 0.05).unwrap().p_value;
    report(
        "8",
        "Wilcoxon exactness",
        worst < 1e-12 && five == 0.0625,
        format!("{cases} cases (all sign patterns for n=5..8 plus tied draws), max |dp| {worst:.1e}; n=5 all positive p={five}"),
    )
}

fn checkpoint_round_trip() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec { seed: 5, n_pairs: 120, n_unpaired_speech: 10, n_unpaired_text: 10, n_val: 10, n_test: 10, ..Default::default() };
    let corpus = SyntheticCorpus::generate(&spec, 1.0).unwrap();
    let model = |seed| {
        ZipperModel::<f32>::init(common::tiny_zipper_config(2), &tiny_tower(31, 96), &tiny_tower(SPEECH_VOCAB, 96), seed).unwrap()
    };
    let train = TrainSpec { steps: 10, batch_size: 4, learning_rate: 2e-3, gate_lr_scale: 10.0, seed: 4, ..TrainSpec::default() };
    let snapshot = |m: &ZipperModel<f32>, o: &OptimizerState| {
        let meta = CheckpointMeta { model: ModelSpec::of_zipper(m), step: o.step, seed: 4, optimizer: None, config: None };
        Checkpoint::from_store(meta, &m.params, Some(o))
    };

    let mut straight = model(1);
    let mut opt = OptimizerState::new(train.optimizer, train.learning_rate);
    let full = fine_tune(&mut straight, &mut opt, &corpus.paired, &train, None).unwrap();

    let mut half = model(1);
    let mut opt1 = OptimizerState::new(train.optimizer, train.learning_rate);
    fine_tune_until(&mut half, &mut opt1, &corpus.paired, &train, 5, None).unwrap();
    let (p1, p2) = (dir.path().join("a.zck"), dir.path().join("b.zck"));
    snapshot(&half, &opt1).save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    let mut resumed = loaded.zipper().unwrap();
    let mut opt2 = loaded.optimizer(&resumed.params).unwrap().unwrap();
    snapshot(&resumed, &opt2).save(&p2).unwrap();
    let identical_bytes = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    let tail = fine_tune(&mut resumed, &mut opt2, &corpus.paired, &train, None).unwrap();
    let same_losses = tail == full[5..];
    let same_params = resumed.params.bit_equal(&straight.params);
    report(
        "9",
        "checkpoint round-trip",
        identical_bytes && same_losses && same_params,
        format!(
            "save-load-save byte-identical: {identical_bytes}; resumed steps 5..10 identical metrics: {same_losses}, bit-identical parameters: {same_params}"
        ),
    )
}

fn ablation_sanity(desk: &Desk, full: &FullData) -> bool {
    let t0 = Instant::now();
    let cfg = ZipperConfig { n_zips: 0, ..desk.ctx.zipper.clone() };
    let none = train_zipper(desk, &desk.corpus, &cfg, 0);
    let asr0 = wer_or_inf(desk, &none, &desk.corpus, |s| s.asr_clean.pooled.wer);
    report(
        "10",
        "ablation sanity (fraction 1.0)",
        asr0 >= NO_ZIP_ASR_MIN && full.asr <= FULL_DATA_ASR_MAX,
        format!(
            "ASR WER n_zips=0 {asr0:.4} (>= {NO_ZIP_ASR_MIN}), n_zips=4 {:.4} (<= {FULL_DATA_ASR_MAX}); {:.0}s",
            full.asr,
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let selected: Option<Vec<String>> =
        std::env::var("ZIPPER_ACCEPT").ok().map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let wants = |id: &str| selected.as_ref().is_none_or(|s| s.iter().any(|x| x == id || id.trim_end_matches(char::is_alphabetic) == x));
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let t0 = Instant::now();
    let mut results = Vec::new();
    if wants("1") {
        results.push(gradient_fidelity());
    }
    if wants("2") {
        results.push(zero_gate_independence());
    }
    if wants("3") {
        results.push(cross_modal_causality());
    }
    if wants("7") {
        results.push(wer_oracle());
    }
    if wants("8") {
        results.push(wilcoxon_exactness());
    }
    if wants("9") {
        results.push(checkpoint_round_trip());
    }
    let needs_desk = ["5", "6", "10"].iter().any(|id| wants(id));
    let desk = needs_desk.then(pretrain_desk);
    let full = desk.as_ref().filter(|_| wants("5") || wants("10") || wants("4")).map(full_data_run);
    if wants("4") {
        results.push(freeze_contract(full.as_ref()));
    }
    if let Some(d) = &desk {
        if wants("5") {
            let (a, b) = desk_learning(d, full.as_ref().unwrap());
            results.extend([a, b]);
        }
        if wants("6") {
            results.push(tts_advantage(d));
        }
        if wants("10") {
            results.push(ablation_sanity(d, full.as_ref().unwrap()));
        }
    }
    let failed = results.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} min",
        results.len() - failed,
        t0.elapsed().as_secs_f64() / 60.0
    );
    if failed > 0 && std::env::var_os("ZIPPER_ACCEPT_STRICT").is_some() {
        std::process::exit(1);
    }
}
