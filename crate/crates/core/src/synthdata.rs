//! Seeded synthetic bimodal corpus.
//!
//! Text is character-tokenized. "Speech" is a deterministic injective
//! codebook mapping each character to `c` content tokens, framed by
//! begin/end-of-audio markers, with optional per-token resampling noise.
//! [`SpeechCodebook::decode`] inverts the mapping by nearest codeword.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::substream;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const BOA: usize = 0;
pub const EOA: usize = 1;
pub const SPEECH_CONTENT: usize = 1024;
pub const SPEECH_SPECIALS: usize = 2;
pub const SPEECH_VOCAB: usize = SPEECH_CONTENT + SPEECH_SPECIALS;

const ALPHABET: &str = " 'abcdefghijklmnopqrstuvwxyz";
const TEXT_SPECIALS: usize = 3;

#[derive(Clone, Debug, Default)]
pub struct TextTokenizer;

impl TextTokenizer {
    pub const VOCAB: usize = TEXT_SPECIALS + ALPHABET.len();

    pub fn vocab_size(&self) -> usize {
        Self::VOCAB
    }

    pub fn char_index(c: char) -> Option<usize> {
        ALPHABET.find(c)
    }

    pub fn alphabet() -> impl Iterator<Item = char> {
        ALPHABET.chars()
    }

    /// Character ids without framing tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                Self::char_index(c)
                    .map(|i| i + TEXT_SPECIALS)
                    .ok_or_else(|| Error::invalid(format!("character {c:?} outside the text alphabet")))
            })
            .collect()
    }

    /// `BOS text EOS`.
    pub fn encode_framed(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text)?);
        ids.push(EOS);
        Ok(ids)
    }

    /// Drops specials and stops at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&t| t != EOS)
            .filter(|&&t| (TEXT_SPECIALS..Self::VOCAB).contains(&t))
            .map(|&t| ALPHABET.as_bytes()[t - TEXT_SPECIALS] as char)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechCodebook {
    code_len: usize,
    /// Content codes (0..1024) per alphabet character.
    codes: Vec<Vec<usize>>,
}

impl SpeechCodebook {
    /// Draws `ALPHABET.len() * code_len` distinct content codes, so every
    /// codeword is distinct and no code token is shared between characters.
    pub fn new(seed: u64, code_len: usize) -> Result<Self> {
        let n = ALPHABET.len();
        if code_len == 0 || n * code_len > SPEECH_CONTENT {
            return Err(Error::invalid(format!("code length {code_len} does not fit the speech vocabulary")));
        }
        let mut rng = substream(seed, "codebook", 0);
        let mut pool: Vec<usize> = (0..SPEECH_CONTENT).collect();
        pool.shuffle(&mut rng);
        let codes = pool[..n * code_len].chunks(code_len).map(<[usize]>::to_vec).collect();
        Ok(SpeechCodebook { code_len, codes })
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    /// Content codes for character `c`.
    pub fn code(&self, c: char) -> Option<&[usize]> {
        TextTokenizer::char_index(c).map(|i| self.codes[i].as_slice())
    }

    /// `BOA codes EOA` as speech-vocabulary ids. Each content token is
    /// independently replaced by a uniform content token with probability
    /// `noise`.
    pub fn encode(&self, text: &str, noise: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::invalid(format!("noise {noise} outside [0, 1]")));
        }
        let mut out = Vec::with_capacity(2 + self.code_len * text.len());
        out.push(BOA);
        for c in text.chars() {
            let code = self.code(c).ok_or_else(|| Error::invalid(format!("character {c:?} outside the text alphabet")))?;
            for &t in code {
                let t = if noise > 0.0 && rng.random_bool(noise) { rng.random_range(0..SPEECH_CONTENT) } else { t };
                out.push(t + SPEECH_SPECIALS);
            }
        }
        out.push(EOA);
        Ok(out)
    }

    /// Nearest-codeword decoding of every `code_len` chunk of content
    /// tokens, Hamming distance, ties to the lowest character. A trailing
    /// partial chunk is matched on its available positions.
    pub fn decode(&self, tokens: &[usize]) -> String {
        let content: Vec<usize> =
            tokens.iter().filter(|&&t| (SPEECH_SPECIALS..SPEECH_VOCAB).contains(&t)).map(|&t| t - SPEECH_SPECIALS).collect();
        let mut order: Vec<(char, usize)> = TextTokenizer::alphabet().enumerate().map(|(i, c)| (c, i)).collect();
        order.sort();
        content
            .chunks(self.code_len)
            .map(|chunk| {
                let mut best = (usize::MAX, ' ');
                for &(c, i) in &order {
                    let d = chunk.iter().zip(&self.codes[i]).filter(|(a, b)| a != b).count();
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            })
            .collect()
    }
}

pub fn encode_speech(codebook: &SpeechCodebook, text: &str, noise: f64, seed: u64) -> Result<Vec<usize>> {
    codebook.encode(text, noise, &mut substream(seed, "speech_noise", 0))
}

pub fn decode_speech(codebook: &SpeechCodebook, tokens: &[usize]) -> String {
    codebook.decode(tokens)
}

pub const WORDS: &[&str] = &[
    "a", "about", "after", "again", "all", "and", "any", "are", "back", "bird", "black", "blue", "boat", "book", "bread",
    "bright", "can't", "city", "cold", "come", "day", "dog", "don't", "door", "down", "each", "early", "every", "far",
    "field", "fire", "fish", "five", "fox", "from", "garden", "give", "good", "green", "had", "hand", "have", "he",
    "hello", "her", "here", "high", "hill", "home", "house", "i'm", "it's", "just", "keep", "king", "lake", "late",
    "light", "little", "long", "made", "man", "many", "moon", "more", "morning", "night", "now", "old", "one", "open",
    "our", "over", "queen", "quick", "rain", "red", "river", "road", "run", "said", "sea", "she", "ship", "small", "snow",
    "song", "stone", "sun", "that", "the", "they", "three", "tree", "two", "under", "very", "walk", "warm", "water",
    "we", "what", "when", "white", "wind", "with", "world", "year", "yes", "you", "zoo",
];

/// Upper bound on sentence length in characters.
pub const MAX_SENTENCE_CHARS: usize = 40;

fn sentence(rng: &mut impl Rng) -> String {
    loop {
        let n = rng.random_range(2..=4);
        let s = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ");
        if s.len() <= MAX_SENTENCE_CHARS {
            return s;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Paired,
    UnpairedSpeech,
    UnpairedText,
    ValClean,
    ValOther,
    TestClean,
    TestOther,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub speech_tokens: Vec<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_pairs: usize,
    pub n_unpaired_speech: usize,
    pub n_unpaired_text: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: f64,
    pub code_len: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            n_pairs: 10_000,
            n_unpaired_speech: 50_000,
            n_unpaired_text: 50_000,
            n_val: 200,
            n_test: 200,
            noise: 0.05,
            code_len: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub codebook: SpeechCodebook,
    /// Retained paired examples (after subsampling).
    pub paired: Vec<Example>,
    pub unpaired_speech: Vec<Example>,
    pub unpaired_text: Vec<Example>,
    pub val_clean: Vec<Example>,
    pub val_other: Vec<Example>,
    pub test_clean: Vec<Example>,
    pub test_other: Vec<Example>,
}

impl SyntheticCorpus {
    /// Generates every split; sentences are unique across the whole corpus.
    /// Evaluation splits are drawn first so their content does not depend
    /// on the training split sizes.
    pub fn generate(spec: &CorpusSpec, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
        }
        let keep = (fraction * spec.n_pairs as f64).round() as usize;
        if keep == 0 {
            return Err(Error::invalid(format!("fraction {fraction} of {} pairs keeps no examples", spec.n_pairs)));
        }
        let codebook = SpeechCodebook::new(spec.seed, spec.code_len)?;
        let mut seen = HashSet::new();
        let mut make = |split: Split, n: usize, noise: f64| -> Result<Vec<Example>> {
            let name = serde_json::to_string(&split)?;
            let mut rng = substream(spec.seed, &format!("sentences.{name}"), 0);
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let text = sentence(&mut rng);
                if !seen.insert(text.clone()) {
                    continue;
                }
                let i = out.len();
                let mut noise_rng = substream(spec.seed, &format!("noise.{name}"), i as u64);
                let speech_tokens = codebook.encode(&text, noise, &mut noise_rng)?;
                out.push(Example { id: format!("{}-{i:06}", name.trim_matches('"')), text, speech_tokens, split });
            }
            Ok(out)
        };
        let val_clean = make(Split::ValClean, spec.n_val, 0.0)?;
        let val_other = make(Split::ValOther, spec.n_val, spec.noise)?;
        let test_clean = make(Split::TestClean, spec.n_test, 0.0)?;
        let test_other = make(Split::TestOther, spec.n_test, spec.noise)?;
        let all_pairs = make(Split::Paired, spec.n_pairs, 0.0)?;
        let unpaired_speech = make(Split::UnpairedSpeech, spec.n_unpaired_speech, 0.0)?;
        let unpaired_text = make(Split::UnpairedText, spec.n_unpaired_text, 0.0)?;

        let mut order: Vec<usize> = (0..all_pairs.len()).collect();
        order.shuffle(&mut substream(spec.seed, "subsample", 0));
        let mut kept: Vec<usize> = order[..keep].to_vec();
        kept.sort_unstable();
        let paired = kept.into_iter().map(|i| all_pairs[i].clone()).collect();
        Ok(SyntheticCorpus {
            spec: spec.clone(),
            codebook,
            paired,
            unpaired_speech,
            unpaired_text,
            val_clean,
            val_other,
            test_clean,
            test_other,
        })
    }

    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.paired
            .iter()
            .chain(&self.unpaired_speech)
            .chain(&self.unpaired_text)
            .chain(&self.val_clean)
            .chain(&self.val_other)
            .chain(&self.test_clean)
            .chain(&self.test_other)
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Paired => &self.paired,
            Split::UnpairedSpeech => &self.unpaired_speech,
            Split::UnpairedText => &self.unpaired_text,
            Split::ValClean => &self.val_clean,
            Split::ValOther => &self.val_other,
            Split::TestClean => &self.test_clean,
            Split::TestOther => &self.test_other,
        }
    }

    /// One JSON record per line.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for ex in self.examples() {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Default-sized corpus of `n_pairs` pairs, keeping `fraction` of them.
pub fn make_corpus(seed: u64, n_pairs: usize, fraction: f64) -> Result<SyntheticCorpus> {
    SyntheticCorpus::generate(&CorpusSpec { seed, n_pairs, ..CorpusSpec::default() }, fraction)
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
