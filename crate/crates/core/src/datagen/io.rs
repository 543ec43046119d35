//! On-disk corpus layout.
//!
//! A corpus directory holds:
//!
//! * `vocab.txt`: one token per line, line number = token id.
//! * `lexicon.txt`: `word<TAB>space-separated token ids<TAB>rare|common`.
//! * `train.jsonl`, `test.jsonl`: one JSON object per utterance with fields
//!   `id`, `text` (space-separated words), `tokens`, `rare_words`, `frames`,
//!   `dim` and `features` (row-major, `frames × dim` numbers).
//! * `distractors.txt`: one bias phrase per line, words separated by spaces.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bias::BiasPhrase;
use super::corpus::{Corpus, LexEntry, Lexicon, Utterance};
use super::vocab::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const DISTRACTOR_FILE: &str = "distractors.txt";

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    tokens: Vec<TokenId>,
    rare_words: Vec<String>,
    frames: usize,
    dim: usize,
    features: Vec<f64>,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut w = create(path)?;
    for t in vocab.tokens() {
        writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    Vocab::from_tokens(lines(path)?)
}

pub fn write_lexicon(path: &Path, lexicon: &Lexicon) -> Result<()> {
    let mut w = create(path)?;
    for e in lexicon.entries() {
        let ids: Vec<String> = e.tokens.iter().map(|t| t.to_string()).collect();
        let kind = if e.rare { "rare" } else { "common" };
        writeln!(w, "{}\t{}\t{kind}", e.word, ids.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_lexicon(path: &Path) -> Result<Lexicon> {
    let mut entries = Vec::new();
    for (n, line) in lines(path)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(path, n + 1, "expected 3 tab-separated columns"));
        }
        let tokens = cols[1]
            .split_whitespace()
            .map(|s| s.parse::<TokenId>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, n + 1, e.to_string()))?;
        let rare = match cols[2] {
            "rare" => true,
            "common" => false,
            other => return Err(parse_err(path, n + 1, format!("unknown word class `{other}`"))),
        };
        entries.push(LexEntry {
            word: cols[0].to_string(),
            tokens,
            rare,
        });
    }
    Lexicon::new(entries)
}

pub fn write_utterances(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut w = create(path)?;
    for u in utts {
        let rec = Record {
            id: u.id.clone(),
            text: u.words.join(" "),
            tokens: u.transcript.clone(),
            rare_words: u.rare_words.clone(),
            frames: u.features.rows(),
            dim: u.features.cols(),
            features: u.features.data().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_utterances(path: &Path) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (n, line) in lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(path, n + 1, e.to_string()))?;
        let features = Tensor::new(vec![rec.frames, rec.dim], rec.features)
            .map_err(|e| parse_err(path, n + 1, e.to_string()))?;
        let words: Vec<String> = rec.text.split_whitespace().map(str::to_string).collect();
        if rec.rare_words.iter().any(|r| !words.contains(r)) {
            return Err(parse_err(path, n + 1, "rare word missing from text"));
        }
        if rec.tokens.is_empty() {
            return Err(parse_err(path, n + 1, "empty transcript"));
        }
        out.push(Utterance {
            id: rec.id,
            transcript: rec.tokens,
            words,
            features,
            rare_words: rec.rare_words,
        });
    }
    Ok(out)
}

pub fn write_distractors(path: &Path, pool: &[BiasPhrase]) -> Result<()> {
    let mut w = create(path)?;
    for p in pool {
        writeln!(w, "{}", p.text()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a phrase-per-line file, tokenising words through `lexicon`.
pub fn read_distractors(path: &Path, lexicon: &Lexicon) -> Result<Vec<BiasPhrase>> {
    let mut out = Vec::new();
    for (n, line) in lines(path)?.iter().enumerate() {
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            continue;
        }
        let tokens = lexicon
            .tokenize(&words)
            .map_err(|e| parse_err(path, n + 1, e.to_string()))?;
        out.push(BiasPhrase::new(words, tokens));
    }
    Ok(out)
}

/// Writes every corpus file into `dir`, creating it if needed.
pub fn write_corpus(dir: &Path, corpus: &Corpus, pool: &[BiasPhrase]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_vocab(&dir.join(VOCAB_FILE), &corpus.vocab)?;
    write_lexicon(&dir.join(LEXICON_FILE), &corpus.lexicon)?;
    write_utterances(&dir.join(TRAIN_FILE), &corpus.train)?;
    write_utterances(&dir.join(TEST_FILE), &corpus.test)?;
    write_distractors(&dir.join(DISTRACTOR_FILE), pool)
}

/// Reads what [`write_corpus`] wrote.
pub fn read_corpus(dir: &Path) -> Result<(Corpus, Vec<BiasPhrase>)> {
    let vocab = read_vocab(&dir.join(VOCAB_FILE))?;
    let lexicon = read_lexicon(&dir.join(LEXICON_FILE))?;
    let train = read_utterances(&dir.join(TRAIN_FILE))?;
    let test = read_utterances(&dir.join(TEST_FILE))?;
    let pool = read_distractors(&dir.join(DISTRACTOR_FILE), &lexicon)?;
    for u in train.iter().chain(&test) {
        if let Some(&bad) = u.transcript.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::Data(format!("utterance {} uses token {bad} outside the vocabulary", u.id)));
        }
    }
    Ok((
        Corpus {
            vocab,
            lexicon,
            train,
            test,
        },
        pool,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{bias::distractor_pool, corpus::synth_corpus, CorpusConfig};

    #[test]
    fn corpus_round_trips_bit_exactly() {
        let cfg = CorpusConfig {
            lexicon_size: 40,
            rare_words: 20,
            train_utts: 12,
            test_utts: 5,
            ..CorpusConfig::default()
        };
        let corpus = synth_corpus(&cfg, 9).unwrap();
        let pool = distractor_pool(&corpus.lexicon);
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus, &pool).unwrap();
        let (back, pool_back) = read_corpus(dir.path()).unwrap();
        assert_eq!(back.vocab, corpus.vocab);
        assert_eq!(back.lexicon, corpus.lexicon);
        assert_eq!(back.train, corpus.train);
        assert_eq!(back.test, corpus.test);
        assert_eq!(pool_back, pool);
    }

    #[test]
    fn malformed_lines_report_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.txt");
        fs::write(&p, "ka\t6\trare\nbad line\n").unwrap();
        match read_lexicon(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
