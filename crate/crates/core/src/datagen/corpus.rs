//! Synthetic "speech" corpus.
//!
//! Lexical tokens are syllables grouped into acoustic classes: every class has
//! several spellings (`ka`, `kha`, `kya`, …) that share one acoustic
//! signature, so the audio pins down a token's class but not its spelling.
//! Frequent words are learnable by memorising their spelling; rare words are
//! not, which is exactly the gap a biasing list can close.
//!
//! Each token emits `frames_per_token` frames of its embedding plus Gaussian
//! noise. Words are separated by a pause token with its own embedding.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab, FIRST_LEXICAL, SEP};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const CONSONANTS: [char; 14] = ['k', 't', 'm', 'r', 's', 'n', 'p', 'l', 'd', 'f', 'g', 'z', 'b', 'v'];
const VOWELS: [char; 5] = ['a', 'o', 'i', 'u', 'e'];
const SPELLING_MARKS: [&str; 4] = ["", "h", "y", "w"];

/// Corpus generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Number of acoustically distinct syllable classes.
    pub acoustic_classes: usize,
    /// Homophonous spellings per class (1–4).
    pub spellings_per_class: usize,
    /// Word vocabulary size.
    pub lexicon_size: usize,
    /// How many of the words are rare.
    pub rare_words: usize,
    /// Inclusive range of tokens per word.
    pub word_len: [usize; 2],
    /// Inclusive range of words per utterance.
    pub words_per_utt: [usize; 2],
    pub frames_per_token: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-frame feature noise.
    pub noise: f64,
    /// Standard deviation of the per-spelling offset around a class centre.
    pub homophone_spread: f64,
    /// Upper bound on the fraction of training utterances any one rare word
    /// appears in.
    pub rare_max_fraction: f64,
    /// Probability that a training word slot holds a rare word.
    pub rare_slot_prob: f64,
    /// Probability that a test word slot holds a rare word (every test
    /// utterance gets at least one).
    pub test_rare_slot_prob: f64,
    /// Zipf exponent of common-word frequencies.
    pub zipf_exponent: f64,
    pub train_utts: usize,
    pub test_utts: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            acoustic_classes: 12,
            spellings_per_class: 2,
            lexicon_size: 300,
            rare_words: 240,
            word_len: [2, 3],
            words_per_utt: [3, 5],
            frames_per_token: 2,
            feature_dim: 16,
            noise: 0.5,
            homophone_spread: 0.0,
            rare_max_fraction: 0.02,
            rare_slot_prob: 0.15,
            test_rare_slot_prob: 0.3,
            zipf_exponent: 1.0,
            train_utts: 2000,
            test_utts: 200,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lexicon_size < 4 {
            return bad("lexicon needs at least 4 words");
        }
        if self.rare_words >= self.lexicon_size {
            return bad("rare-word count must be below the lexicon size");
        }
        if self.acoustic_classes == 0 || self.acoustic_classes > CONSONANTS.len() * VOWELS.len() {
            return bad("acoustic_classes must be in 1..=70");
        }
        if !(1..=SPELLING_MARKS.len()).contains(&self.spellings_per_class) {
            return bad("spellings_per_class must be in 1..=4");
        }
        if self.word_len[0] == 0 || self.word_len[0] > self.word_len[1] {
            return bad("word_len must be a nonempty range of positive lengths");
        }
        if self.words_per_utt[0] == 0 || self.words_per_utt[0] > self.words_per_utt[1] {
            return bad("words_per_utt must be a nonempty range of positive counts");
        }
        if self.frames_per_token == 0 || self.feature_dim == 0 {
            return bad("frames_per_token and feature_dim must be ≥ 1");
        }
        if !(self.noise >= 0.0) || !(self.homophone_spread >= 0.0) {
            return bad("noise and homophone_spread must be ≥ 0");
        }
        for p in [self.rare_max_fraction, self.rare_slot_prob, self.test_rare_slot_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        let distinct = (self.word_len[0]..=self.word_len[1])
            .map(|l| (self.acoustic_classes * self.spellings_per_class).saturating_pow(l as u32))
            .fold(0usize, usize::saturating_add);
        if distinct < 2 * self.lexicon_size {
            return bad("token inventory too small for the requested lexicon");
        }
        Ok(())
    }

    pub fn lexical_tokens(&self) -> usize {
        self.acoustic_classes * self.spellings_per_class
    }
}

/// One word of the lexicon.
#[derive(Clone, Debug, PartialEq)]
pub struct LexEntry {
    pub word: String,
    pub tokens: Vec<TokenId>,
    pub rare: bool,
}

/// Word ↔ token-sequence dictionary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    entries: Vec<LexEntry>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn new(entries: Vec<LexEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.word.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate lexicon word `{}`", e.word)));
            }
        }
        Ok(Lexicon { entries, index })
    }

    pub fn entries(&self) -> &[LexEntry] {
        &self.entries
    }

    pub fn get(&self, word: &str) -> Option<&LexEntry> {
        self.index.get(word).map(|&i| &self.entries[i])
    }

    pub fn rare(&self) -> impl Iterator<Item = &LexEntry> {
        self.entries.iter().filter(|e| e.rare)
    }

    pub fn common(&self) -> impl Iterator<Item = &LexEntry> {
        self.entries.iter().filter(|e| !e.rare)
    }

    /// Token sequence of a word sequence, separators between words.
    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for (i, w) in words.iter().enumerate() {
            let e = self
                .get(w.as_ref())
                .ok_or_else(|| Error::Data(format!("word `{}` not in lexicon", w.as_ref())))?;
            if i > 0 {
                out.push(SEP);
            }
            out.extend_from_slice(&e.tokens);
        }
        Ok(out)
    }
}

/// One synthetic utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    /// Token ids with separators between words.
    pub transcript: Vec<TokenId>,
    pub words: Vec<String>,
    /// T×D acoustic features.
    pub features: Tensor,
    /// Rare words present in `words`, without repeats.
    pub rare_words: Vec<String>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// Token range of every word in `transcript`.
    pub fn word_token_ranges(&self) -> Vec<Range<usize>> {
        word_ranges(&self.transcript)
    }
}

pub(crate) fn word_ranges(transcript: &[TokenId]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &t) in transcript.iter().enumerate() {
        if t == SEP {
            if i > start {
                out.push(start..i);
            }
            start = i + 1;
        }
    }
    if transcript.len() > start {
        out.push(start..transcript.len());
    }
    out
}

/// A generated corpus with its token and word inventories.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub lexicon: Lexicon,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Per-token acoustic embeddings (rows for reserved ids other than the
/// separator are zero and never emitted).
#[derive(Clone, Debug)]
pub struct Frontend {
    pub embeddings: Tensor,
    pub frames_per_token: usize,
    pub noise: f64,
}

impl Frontend {
    /// Renders a transcript into T×D features.
    pub fn render<R: Rng + ?Sized>(&self, transcript: &[TokenId], rng: &mut R) -> Tensor {
        let d = self.embeddings.cols();
        let mut data = Vec::with_capacity(transcript.len() * self.frames_per_token * d);
        for &tok in transcript {
            let e = self.embeddings.row(tok);
            for _ in 0..self.frames_per_token {
                for &x in e {
                    let n: f64 = if self.noise > 0.0 {
                        self.noise * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    data.push(x + n);
                }
            }
        }
        Tensor::new(vec![transcript.len() * self.frames_per_token, d], data)
            .expect("frame count matches data")
    }
}

fn syllable(class: usize, spelling: usize) -> String {
    let c = CONSONANTS[class % CONSONANTS.len()];
    let v = VOWELS[class / CONSONANTS.len()];
    format!("{c}{}{v}", SPELLING_MARKS[spelling])
}

/// Token id of (class, spelling).
fn lexical_id(class: usize, spelling: usize, spellings: usize) -> TokenId {
    FIRST_LEXICAL + class * spellings + spelling
}

/// Acoustic class of a lexical token under `cfg`.
pub fn acoustic_class(cfg: &CorpusConfig, id: TokenId) -> Option<usize> {
    (id >= FIRST_LEXICAL).then(|| (id - FIRST_LEXICAL) / cfg.spellings_per_class)
}

/// Builds the token inventory implied by `cfg`.
pub fn build_vocab(cfg: &CorpusConfig) -> Result<Vocab> {
    let mut lexical = Vec::with_capacity(cfg.lexical_tokens());
    for c in 0..cfg.acoustic_classes {
        for s in 0..cfg.spellings_per_class {
            lexical.push(syllable(c, s));
        }
    }
    Vocab::new(lexical)
}

/// Generates vocabulary, lexicon, acoustic frontend, and train/test splits.
/// A pure function of `(cfg, seed)`.
pub fn synth_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    Ok(synth_corpus_with_frontend(cfg, seed)?.0)
}

pub fn synth_corpus_with_frontend(cfg: &CorpusConfig, seed: u64) -> Result<(Corpus, Frontend)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = build_vocab(cfg)?;
    let d = cfg.feature_dim;

    let centers = Tensor::randn(&[cfg.acoustic_classes, d], 1.0, &mut rng);
    let mut embeddings = Tensor::zeros(&[vocab.len(), d]);
    let pause = Tensor::randn(&[1, d], 1.0, &mut rng);
    embeddings.row_mut(SEP).copy_from_slice(pause.data());
    for c in 0..cfg.acoustic_classes {
        for s in 0..cfg.spellings_per_class {
            let id = lexical_id(c, s, cfg.spellings_per_class);
            let offset = Tensor::randn(&[1, d], cfg.homophone_spread, &mut rng);
            for ((dst, &ctr), &off) in embeddings.row_mut(id).iter_mut().zip(centers.row(c)).zip(offset.data()) {
                *dst = ctr + off;
            }
        }
    }
    let frontend = Frontend {
        embeddings,
        frames_per_token: cfg.frames_per_token,
        noise: cfg.noise,
    };

    let n_common = cfg.lexicon_size - cfg.rare_words;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(cfg.lexicon_size);
    while entries.len() < cfg.lexicon_size {
        let len = rng.random_range(cfg.word_len[0]..=cfg.word_len[1]);
        let tokens: Vec<TokenId> = (0..len)
            .map(|_| {
                let c = rng.random_range(0..cfg.acoustic_classes);
                let s = rng.random_range(0..cfg.spellings_per_class);
                lexical_id(c, s, cfg.spellings_per_class)
            })
            .collect();
        if !seen.insert(tokens.clone()) {
            continue;
        }
        let word: String = tokens.iter().map(|&t| vocab.token(t).unwrap()).collect();
        entries.push(LexEntry {
            word,
            tokens,
            rare: entries.len() >= n_common,
        });
    }
    let lexicon = Lexicon::new(entries)?;

    let common: Vec<usize> = (0..n_common).collect();
    let zipf = WeightedIndex::new(
        (0..n_common).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent)),
    )
    .map_err(|e| Error::Config(format!("common-word weights: {e}")))?;
    let rare: Vec<usize> = (n_common..cfg.lexicon_size).collect();
    let cap = (cfg.rare_max_fraction * cfg.train_utts as f64).floor() as usize;
    let mut rare_use = vec![0usize; cfg.lexicon_size];

    let make = |rng: &mut ChaCha8Rng, id: String, word_ids: Vec<usize>| -> Result<Utterance> {
        let words: Vec<String> = word_ids
            .iter()
            .map(|&i| lexicon.entries()[i].word.clone())
            .collect();
        let transcript = lexicon.tokenize(&words)?;
        let mut rare_words = Vec::new();
        for &i in &word_ids {
            let e = &lexicon.entries()[i];
            if e.rare && !rare_words.contains(&e.word) {
                rare_words.push(e.word.clone());
            }
        }
        let features = frontend.render(&transcript, rng);
        Ok(Utterance {
            id,
            transcript,
            words,
            features,
            rare_words,
        })
    };

    let mut train = Vec::with_capacity(cfg.train_utts);
    for n in 0..cfg.train_utts {
        let len = rng.random_range(cfg.words_per_utt[0]..=cfg.words_per_utt[1]);
        let mut ids = Vec::with_capacity(len);
        for _ in 0..len {
            let want_rare = rng.random::<f64>() < cfg.rare_slot_prob;
            let pick = if want_rare {
                let open: Vec<usize> = rare
                    .iter()
                    .copied()
                    .filter(|&r| rare_use[r] < cap && !ids.contains(&r))
                    .collect();
                open.choose(&mut rng).copied()
            } else {
                None
            };
            ids.push(pick.unwrap_or_else(|| common[zipf.sample(&mut rng)]));
        }
        let mut counted = HashSet::new();
        for &i in &ids {
            if i >= n_common && counted.insert(i) {
                rare_use[i] += 1;
            }
        }
        train.push(make(&mut rng, format!("train-{n:05}"), ids)?);
    }

    let mut test = Vec::with_capacity(cfg.test_utts);
    for n in 0..cfg.test_utts {
        let len = rng.random_range(cfg.words_per_utt[0]..=cfg.words_per_utt[1]);
        let mut ids: Vec<usize> = (0..len)
            .map(|_| {
                if rng.random::<f64>() < cfg.test_rare_slot_prob {
                    *rare.choose(&mut rng).unwrap()
                } else {
                    common[zipf.sample(&mut rng)]
                }
            })
            .collect();
        if ids.iter().all(|&i| i < n_common) {
            let slot = rng.random_range(0..len);
            ids[slot] = *rare.choose(&mut rng).unwrap();
        }
        test.push(make(&mut rng, format!("test-{n:04}"), ids)?);
    }

    Ok((
        Corpus {
            vocab,
            lexicon,
            train,
            test,
        },
        frontend,
    ))
}
