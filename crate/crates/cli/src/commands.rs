use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use zipper_core::backbone::{BackboneConfig, DecoderBackbone};
use zipper_core::checkpoint::{Checkpoint, CheckpointMeta, ModelSpec};
use zipper_core::config::ExperimentConfig;
use zipper_core::evalkit::{
    bucket_wer_by_ref_length, run_ablation, run_data_fraction_sweep, wilcoxon_signed_rank, write_csv, AblationKind,
    ExperimentContext, FineTuned, Towers, Transcripts, ABLATION_HEADER,
};
use zipper_core::fusion::ZipperModel;
use zipper_core::inference::{self, generate_baseline, DecodePlan, Sampling};
use zipper_core::interleave::{InterleavedSequence, Modality, Segment};
use zipper_core::seeding::derive_seed;
use zipper_core::synthdata::{decode_speech, encode_speech, Example, SpeechCodebook, SyntheticCorpus, TextTokenizer, SPEECH_VOCAB};
use zipper_core::training::{fine_tune_until, pretrain as pretrain_tower, OptimizerState, SingleDecoder, StepMetrics};

use crate::{AblationArg, Common};

pub const SPEECH_TOWER: &str = "speech_tower.zck";
pub const TEXT_TOWER: &str = "text_tower.zck";
pub const MODEL: &str = "model.zck";

struct Run {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
}

impl Run {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        if let Some(o) = &c.out {
            cfg.out = o.clone();
        }
        fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
        Ok(Run { seed: cfg.seed, out: cfg.out.clone(), cfg })
    }

    fn meta(&self, model: ModelSpec, step: u64) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta { model, step, seed: self.seed, optimizer: None, config: Some(serde_json::to_value(&self.cfg)?) })
    }

    fn corpus(&self, fraction: f64) -> Result<SyntheticCorpus> {
        Ok(SyntheticCorpus::generate(&self.cfg.corpus_spec(), fraction)?)
    }

    fn log(&self, name: &str, append: bool) -> Result<BufWriter<File>> {
        let path = self.out.join(name);
        let f = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(&path)?;
        Ok(BufWriter::new(f))
    }

    fn csv<R: Serialize>(&self, name: &str, rows: &[R], header: &[&str]) -> Result<()> {
        let path = self.out.join(name);
        write_csv(rows, header, BufWriter::new(File::create(&path)?))?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

/// Loads a tower checkpoint into a tower built from `config`, so any shape
/// disagreement is reported against the configuration.
fn load_tower(path: &Path, config: &BackboneConfig) -> Result<DecoderBackbone<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    let mut tower = DecoderBackbone::new(config.clone(), 0)?;
    ck.apply_to(&mut tower.params).with_context(|| format!("{} does not match the configured tower", path.display()))?;
    Ok(tower)
}

fn load_towers(run: &Run, dir: &Path) -> Result<Towers> {
    Ok(Towers {
        text: load_tower(&dir.join(TEXT_TOWER), &run.cfg.text_backbone)?,
        speech: load_tower(&dir.join(SPEECH_TOWER), &run.cfg.speech_backbone)?,
    })
}

fn load_model(path: &Path) -> Result<(Checkpoint, FineTuned)> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    let model = match &ck.meta.model {
        ModelSpec::Zipper { .. } => FineTuned::Zipper(ck.zipper()?),
        ModelSpec::SingleDecoder { .. } => FineTuned::Baseline(ck.single_decoder()?),
        ModelSpec::Backbone { .. } => bail!("{} holds a single pre-trained tower, not a fine-tuned model", path.display()),
    };
    Ok((ck, model))
}

pub fn pretrain(c: &Common) -> Result<()> {
    let run = Run::new(c)?;
    let corpus = run.corpus(1.0)?;
    let speech_streams: Vec<Vec<usize>> = corpus.unpaired_speech.iter().map(|e| e.speech_tokens.clone()).collect();
    let text_streams =
        corpus.unpaired_text.iter().map(|e| TextTokenizer.encode_framed(&e.text)).collect::<zipper_core::Result<Vec<_>>>()?;
    let jobs = [
        ("speech", SPEECH_TOWER, &run.cfg.speech_backbone, speech_streams, true),
        ("text", TEXT_TOWER, &run.cfg.text_backbone, text_streams, run.cfg.pretrain.text),
    ];
    for (i, (name, file, config, streams, train)) in jobs.into_iter().enumerate() {
        let mut tower = DecoderBackbone::<f32>::new(config.clone(), derive_seed(run.seed, "tower_init", i as u64))?;
        let mut steps = 0;
        if train {
            let spec = run.cfg.pretrain.train_spec(derive_seed(run.seed, "pretrain", i as u64));
            let mut log = run.log(&format!("pretrain_{name}_metrics.jsonl"), false)?;
            let metrics = pretrain_tower(&mut tower, &streams, &spec, Some(&mut log))?;
            log.flush()?;
            steps = spec.steps;
            if let (Some(a), Some(b)) = (metrics.first(), metrics.last()) {
                println!("{name} tower: {} steps, loss {:.4} -> {:.4}", spec.steps, a.loss, b.loss);
            }
        }
        let path = run.out.join(file);
        Checkpoint::from_store(run.meta(ModelSpec::of_backbone(&tower), steps)?, &tower.params, None).save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,

    /// Directory holding the pre-trained tower checkpoints.
    #[arg(long)]
    pub from: Option<PathBuf>,

    /// Freeze the text tower.
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub freeze_a: bool,

    /// Freeze the speech tower.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub freeze_b: bool,

    /// Train the vocabulary-expanded single decoder instead.
    #[arg(long)]
    pub baseline: bool,

    /// Continue from the model checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,

    /// Write the model checkpoint every N steps as well as at the end.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

/// Drops log lines for steps the checkpoint does not contain.
fn trim_log(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    let mut kept = String::new();
    for line in text.lines() {
        let m: StepMetrics = serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
        if m.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let run = Run::new(&a.common)?;
    let corpus = run.corpus(run.cfg.corpus.fraction)?;
    let spec = run.cfg.train_spec();
    let model_path = run.out.join(MODEL);
    let (mut model, mut opt) = if a.resume {
        let (ck, model) = load_model(&model_path)?;
        let params = match &model {
            FineTuned::Zipper(m) => &m.params,
            FineTuned::Baseline(m) => &m.backbone.params,
        };
        let opt = ck.optimizer(params)?.context("checkpoint has no optimizer state to resume from")?;
        println!("resuming at step {}", opt.step);
        trim_log(&run.out.join("train_metrics.jsonl"), opt.step)?;
        (model, opt)
    } else {
        let dir = a.from.as_deref().context("--from <DIR> with pre-trained towers is required unless --resume is given")?;
        let towers = load_towers(&run, dir)?;
        let model = if a.baseline {
            let seed = derive_seed(run.seed, "expand_vocabulary", 0);
            FineTuned::Baseline(SingleDecoder::from_text_tower(&towers.text, SPEECH_VOCAB, run.cfg.baseline.dropout, seed)?)
        } else {
            let mut zc = run.cfg.zipper.clone();
            zc.freeze_text = a.freeze_a;
            zc.freeze_speech = a.freeze_b;
            FineTuned::Zipper(ZipperModel::new(zc, &towers.text, &towers.speech, derive_seed(run.seed, "fusion_init", 0))?)
        };
        (model, OptimizerState::new(spec.optimizer, spec.learning_rate))
    };
    let mut log = run.log("train_metrics.jsonl", a.resume)?;
    let every = a.checkpoint_every.filter(|&n| n > 0).unwrap_or(spec.steps.max(1));
    let mut last: Option<StepMetrics> = None;
    loop {
        let until = opt.step + every;
        let metrics = match &mut model {
            FineTuned::Zipper(m) => fine_tune_until(m, &mut opt, &corpus.paired, &spec, until, Some(&mut log))?,
            FineTuned::Baseline(m) => fine_tune_until(m, &mut opt, &corpus.paired, &spec, until, Some(&mut log))?,
        };
        log.flush()?;
        last = metrics.last().cloned().or(last);
        let ck = match &model {
            FineTuned::Zipper(m) => Checkpoint::from_store(run.meta(ModelSpec::of_zipper(m), opt.step)?, &m.params, Some(&opt)),
            FineTuned::Baseline(m) => {
                Checkpoint::from_store(run.meta(ModelSpec::of_single_decoder(m), opt.step)?, &m.backbone.params, Some(&opt))
            }
        };
        ck.save(&model_path)?;
        if opt.step >= spec.steps {
            break;
        }
    }
    if let Some(m) = last {
        println!("step {} loss {:.4}", m.step + 1, m.loss);
    }
    println!("wrote {}", model_path.display());
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,

    /// Fine-tuned model checkpoint. Defaults to the one in the output directory.
    #[arg(long)]
    pub model: Option<PathBuf>,

    /// Second model to compare against with a sentence-level Wilcoxon test.
    #[arg(long)]
    pub compare: Option<PathBuf>,

    /// Score the gold speech tokens through the oracle decoder instead of a model.
    #[arg(long, conflicts_with_all = ["model", "compare"])]
    pub oracle: bool,

    /// Reference-length bucket edges in words.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub buckets: Vec<usize>,
}

#[derive(Serialize)]
struct EvalRow<'a> {
    split: &'a str,
    task: &'a str,
    pairs: usize,
    ref_words: usize,
    substitutions: usize,
    deletions: usize,
    insertions: usize,
    wer: f64,
}

pub const EVAL_HEADER: [&str; 8] = ["split", "task", "pairs", "ref_words", "substitutions", "deletions", "insertions", "wer"];

#[derive(Serialize)]
struct BucketRow<'a> {
    split: &'a str,
    task: &'a str,
    upper: Option<usize>,
    pairs: usize,
    wer: Option<f64>,
}

/// `upper` is empty for the overflow bucket.
pub const BUCKET_HEADER: [&str; 5] = ["split", "task", "upper", "pairs", "wer"];

#[derive(Serialize)]
struct SignificanceRow<'a> {
    split: &'a str,
    task: &'a str,
    n: usize,
    statistic: f64,
    p_value: f64,
    significant: bool,
    exact: bool,
}

pub const SIGNIFICANCE_HEADER: [&str; 7] = ["split", "task", "n", "statistic", "p_value", "significant", "exact"];

#[derive(Serialize)]
struct TranscriptLine<'a> {
    split: &'a str,
    task: &'a str,
    reference: &'a str,
    hypothesis: &'a str,
    wer: f64,
}

fn score(model: &FineTuned, corpus: &SyntheticCorpus, run: &Run, split: &[Example], task: &str) -> Result<Transcripts> {
    let e = &run.cfg.eval;
    Ok(match task {
        "asr" => model.transcribe(split, e.max_text_tokens)?,
        _ => model.synthesize(split, &corpus.codebook, e.max_speech_tokens)?,
    })
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let run = Run::new(&a.common)?;
    let corpus = run.corpus(1.0)?;
    let n = run.cfg.eval.n_eval;
    let take = |s: &'static str, v: &[Example]| (s, v[..n.min(v.len())].to_vec());
    let splits = [
        take("val_clean", &corpus.val_clean),
        take("val_other", &corpus.val_other),
        take("test_clean", &corpus.test_clean),
        take("test_other", &corpus.test_other),
    ];
    let cells: Vec<(&str, &str, &[Example])> = splits
        .iter()
        .flat_map(|(name, ex)| {
            let tts = if name.ends_with("clean") { Some((*name, "tts", ex.as_slice())) } else { None };
            std::iter::once((*name, "asr", ex.as_slice())).chain(tts)
        })
        .filter(|(_, task, _)| !a.oracle || *task == "tts")
        .collect();

    let primary = if a.oracle { None } else { Some(load_model(&a.model.clone().unwrap_or_else(|| run.out.join(MODEL)))?.1) };
    let secondary = a.compare.as_deref().map(load_model).transpose()?.map(|(_, m)| m);

    let mut rows = Vec::new();
    let mut buckets = Vec::new();
    let mut tests = Vec::new();
    let mut lines = run.log("transcripts.jsonl", false)?;
    for &(split, task, examples) in &cells {
        let t = match &primary {
            Some(m) => score(m, &corpus, &run, examples, task)?,
            None => Transcripts::new(
                examples.iter().map(|e| (e.text.clone(), decode_speech(&corpus.codebook, &e.speech_tokens))).collect(),
            )?,
        };
        let p = &t.pooled;
        rows.push(EvalRow {
            split,
            task,
            pairs: t.pairs.len(),
            ref_words: p.ref_words,
            substitutions: p.substitutions,
            deletions: p.deletions,
            insertions: p.insertions,
            wer: p.wer,
        });
        for b in bucket_wer_by_ref_length(&t.pairs, &a.buckets)? {
            buckets.push(BucketRow { split, task, upper: b.upper, pairs: b.pairs, wer: b.breakdown.map(|x| x.wer) });
        }
        for ((r, h), w) in t.pairs.iter().zip(&t.per_pair) {
            serde_json::to_writer(&mut lines, &TranscriptLine { split, task, reference: r, hypothesis: h, wer: w.wer })?;
            lines.write_all(b"\n")?;
        }
        if let Some(other) = &secondary {
            let u = score(other, &corpus, &run, examples, task)?;
            let x: Vec<f64> = t.per_pair.iter().map(|w| w.wer).collect();
            let y: Vec<f64> = u.per_pair.iter().map(|w| w.wer).collect();
            match wilcoxon_signed_rank(&x, &y, run.cfg.eval.alpha) {
                Ok(r) => tests.push(SignificanceRow {
                    split,
                    task,
                    n: r.n,
                    statistic: r.statistic,
                    p_value: r.p_value,
                    significant: r.significant,
                    exact: r.exact,
                }),
                Err(e) => eprintln!("{split}/{task}: no test ({e})"),
            }
        }
        println!("{split:<10} {task}  WER {:.4}  ({} pairs)", p.wer, t.pairs.len());
    }
    lines.flush()?;
    run.csv("eval.csv", &rows, &EVAL_HEADER)?;
    run.csv("eval_buckets.csv", &buckets, &BUCKET_HEADER)?;
    if secondary.is_some() {
        run.csv("significance.csv", &tests, &SIGNIFICANCE_HEADER)?;
    }
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct TowersArgs {
    #[command(flatten)]
    pub common: Common,

    /// Directory holding the pre-trained tower checkpoints.
    #[arg(long)]
    pub from: PathBuf,
}

fn context(run: &Run, dir: &Path) -> Result<ExperimentContext> {
    Ok(ExperimentContext {
        towers: load_towers(run, dir)?,
        corpus: run.cfg.corpus_spec(),
        zipper: run.cfg.zipper.clone(),
        train: run.cfg.train_spec(),
        baseline_dropout: run.cfg.baseline.dropout,
        eval: run.cfg.eval.clone(),
    })
}

pub fn sweep(a: &TowersArgs) -> Result<()> {
    let run = Run::new(&a.common)?;
    let ctx = context(&run, &a.from)?;
    let s = &run.cfg.sweep;
    let result = run_data_fraction_sweep(&ctx, &s.fractions, &s.kinds, &s.seeds)?;
    for r in &result.rows {
        println!("{:<7} {:<22} seed {}  clean {:.4}  other {:.4}  tts {:.4}", r.fraction, r.kind, r.seed, r.clean_wer, r.other_wer, r.tts_clean_wer);
    }
    let path = run.out.join("sweep.csv");
    result.write_csv(BufWriter::new(File::create(&path)?))?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[command(flatten)]
    pub towers: TowersArgs,

    #[arg(long, value_enum)]
    pub kind: AblationArg,
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let run = Run::new(&a.towers.common)?;
    let ctx = context(&run, &a.towers.from)?;
    let (kind, name) = match a.kind {
        AblationArg::InputProjText => (AblationKind::InputProjText, "input_proj_text"),
        AblationArg::InputProjSpeech => (AblationKind::InputProjSpeech, "input_proj_speech"),
        AblationArg::InputProjBoth => (AblationKind::InputProjBoth, "input_proj_both"),
        AblationArg::NCrossLayers => (AblationKind::NCrossLayers, "n_cross_layers"),
    };
    let rows = run_ablation(&ctx, kind, &run.cfg.ablation)?;
    for r in &rows {
        println!("{:<16} seed {}  asr {:.4}  tts {:.4}", r.variant, r.seed, r.asr_wer, r.tts_wer);
    }
    run.csv(&format!("ablation_{name}.csv"), &rows, &ABLATION_HEADER)
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,

    /// Fine-tuned model checkpoint. Defaults to the one in the output directory.
    #[arg(long)]
    pub model: Option<PathBuf>,

    /// Output modalities in order.
    #[arg(long, value_delimiter = ',', default_value = "text")]
    pub plan: Vec<Modality>,

    /// Text prompt.
    #[arg(long, group = "prompt")]
    pub text: Option<String>,

    /// Sentence encoded into a clean speech-token prompt.
    #[arg(long, group = "prompt")]
    pub speech_of: Option<String>,

    /// Raw speech-token prompt, comma separated.
    #[arg(long, group = "prompt", value_delimiter = ',')]
    pub speech_tokens: Option<Vec<usize>>,

    /// Per-segment generation budget (defaults to the eval settings).
    #[arg(long)]
    pub max_tokens: Option<usize>,

    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    pub temperature: Option<f64>,
}

fn prompt_from_args(a: &GenerateArgs, codebook: &SpeechCodebook) -> Result<InterleavedSequence> {
    let seg = if let Some(t) = &a.text {
        Segment::new(Modality::Text, TextTokenizer.encode_framed(t)?)?
    } else if let Some(s) = &a.speech_of {
        Segment::new(Modality::Speech, encode_speech(codebook, s, 0.0, 0)?)?
    } else if let Some(t) = &a.speech_tokens {
        if let Some(bad) = t.iter().find(|&&x| x >= SPEECH_VOCAB) {
            bail!("speech token {bad} outside the {SPEECH_VOCAB}-entry vocabulary");
        }
        Segment::new(Modality::Speech, t.clone())?
    } else {
        bail!("one of --text, --speech-of or --speech-tokens is required");
    };
    Ok(InterleavedSequence::new(vec![seg]))
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let run = Run::new(&a.common)?;
    let codebook = SpeechCodebook::new(run.cfg.corpus_spec().seed, run.cfg.corpus.code_len)?;
    let prompt = prompt_from_args(a, &codebook)?;
    let (_, model) = load_model(&a.model.clone().unwrap_or_else(|| run.out.join(MODEL)))?;
    let e = &run.cfg.eval;
    let budgets = a
        .plan
        .iter()
        .map(|m| {
            a.max_tokens.unwrap_or(match m {
                Modality::Text => e.max_text_tokens,
                Modality::Speech => e.max_speech_tokens,
            })
        })
        .collect();
    let sampling = match a.temperature {
        Some(tau) => Sampling::Temperature { tau, seed: derive_seed(run.seed, "sampling", 0) },
        None => Sampling::Greedy,
    };
    let plan = DecodePlan { modalities: a.plan.clone(), max_tokens: budgets, sampling };
    let gen = match &model {
        FineTuned::Zipper(m) => inference::generate(m, &prompt, &plan)?,
        FineTuned::Baseline(m) => generate_baseline(m, &prompt, &plan)?,
    };
    for (k, m) in plan.modalities.iter().enumerate() {
        let toks = gen.generated(k);
        let flag = if gen.truncated[k] { "\t(truncated)" } else { "" };
        match m {
            Modality::Text => println!("text\t{}{flag}", TextTokenizer.decode(&toks[1..])),
            Modality::Speech => {
                let ids: Vec<String> = toks.iter().map(ToString::to_string).collect();
                println!("speech\t{}\t{}{flag}", ids.join(" "), decode_speech(&codebook, toks));
            }
        }
    }
    Ok(())
}
