//! Test-set decoding, scoring and report files.
//!
//! N-best file, one hypothesis per line:
//! `id  rank  score_tr  score_ctc|-  joint  tokens  text` (tab-separated).
//! Reference file: `id  reference text  bias words` (tab-separated). The two
//! together are enough to recompute every metric.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{build_test_bias_list, BiasList, BiasPhrase, TokenId, Utterance, Vocab};
use crate::decoding::{beam_search, emit_mask, DecodeConfig, Hypothesis};
use crate::error::{Error, Result};
use crate::metrics::{format_report, ErrorBreakdown};
use crate::transducer_model::{Model, Transcriber};

use super::config::ExperimentConfig;

/// Decoder output for one test utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedUtterance {
    pub id: String,
    pub reference: Vec<String>,
    /// Words of the utterance's bias list, sorted.
    pub bias_words: Vec<String>,
    pub nbest: Vec<Hypothesis>,
    pub nbest_words: Vec<Vec<String>>,
}

impl DecodedUtterance {
    pub fn best_words(&self) -> &[String] {
        self.nbest_words.first().map_or(&[], |w| w.as_slice())
    }
}

/// Scores of one bias-list size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub m: usize,
    pub breakdown: ErrorBreakdown,
}

/// The test bias list of size `m` for the `index`-th test utterance; a pure
/// function of `(seed, m, index)`.
pub fn test_bias_list(utt: &Utterance, index: usize, pool: &[BiasPhrase], m: usize, l_max: usize, seed: u64) -> Result<BiasList> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((m as u64) << 32) | index as u64);
    build_test_bias_list(utt, pool, m, l_max, &mut rng)
}

/// Decodes `utts` with size-`m` bias lists using `dec`; biasing is bypassed
/// for the baseline preset.
pub fn decode_test_set(
    model: &Model,
    vocab: &Vocab,
    utts: &[Utterance],
    pool: &[BiasPhrase],
    m: usize,
    cfg: &ExperimentConfig,
    dec: &DecodeConfig,
) -> Result<Vec<DecodedUtterance>> {
    let mask = emit_mask(vocab.len());
    let bypass = !cfg.preset.biasing();
    let mut out = Vec::with_capacity(utts.len());
    for (i, utt) in utts.iter().enumerate() {
        let list = test_bias_list(utt, i, pool, m, cfg.train.l_max, cfg.seed)?;
        let tr = Transcriber::new(model, &list, &utt.features, bypass)?;
        let ctc = (dec.mu_ctc != 0.0).then(|| tr.ctc_logp());
        let nbest = beam_search(&tr, ctc, &mask, dec)?;
        let mut bias_words: Vec<String> = list.word_set().into_iter().collect();
        bias_words.sort();
        let nbest_words = nbest.iter().map(|h| vocab.words(&h.tokens)).collect();
        out.push(DecodedUtterance { id: utt.id.clone(), reference: utt.words.clone(), bias_words, nbest, nbest_words });
    }
    Ok(out)
}

/// Corpus counts of the best hypotheses.
pub fn score(decoded: &[DecodedUtterance]) -> ErrorBreakdown {
    let mut b = ErrorBreakdown::default();
    for d in decoded {
        let bias: HashSet<String> = d.bias_words.iter().cloned().collect();
        b.add_utterance(&d.reference, d.best_words(), &bias);
    }
    b
}

/// The evaluated prefix of the test set.
pub fn eval_utterances<'a>(test: &'a [Utterance], cfg: &ExperimentConfig) -> &'a [Utterance] {
    &test[..cfg.eval.max_utts.map_or(test.len(), |n| n.min(test.len()))]
}

/// Decodes and scores the test set at every configured bias size.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    test: &[Utterance],
    pool: &[BiasPhrase],
    cfg: &ExperimentConfig,
) -> Result<Vec<(ReportRow, Vec<DecodedUtterance>)>> {
    let utts = eval_utterances(test, cfg);
    cfg.eval
        .bias_sizes
        .iter()
        .map(|&m| {
            let decoded = decode_test_set(model, vocab, utts, pool, m, cfg, &cfg.decoder())?;
            Ok((ReportRow { m, breakdown: score(&decoded) }, decoded))
        })
        .collect()
}

/// Table of `WER (U-WER/B-WER)` cells, one row per system and one column per
/// bias size.
pub fn format_table(rows: &[(String, Vec<ReportRow>)]) -> String {
    let sizes: Vec<usize> = {
        let mut s: Vec<usize> = rows.iter().flat_map(|(_, r)| r.iter().map(|r| r.m)).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let mut out = String::from("system");
    for m in &sizes {
        write!(out, "\tM={m}").unwrap();
    }
    out.push('\n');
    for (name, r) in rows {
        out.push_str(name);
        let by_m: BTreeMap<usize, &ReportRow> = r.iter().map(|r| (r.m, r)).collect();
        for m in &sizes {
            let cell = by_m.get(m).map_or_else(|| "-".to_string(), |r| format_report(&r.breakdown));
            write!(out, "\t{cell}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn tokens_text(t: &[TokenId]) -> String {
    t.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_nbest(path: &Path, decoded: &[DecodedUtterance]) -> Result<()> {
    let mut out = String::new();
    for d in decoded {
        for (rank, (h, words)) in d.nbest.iter().zip(&d.nbest_words).enumerate() {
            let ctc = h.score_ctc.map_or_else(|| "-".to_string(), |c| c.to_string());
            writeln!(
                out,
                "{}\t{rank}\t{}\t{ctc}\t{}\t{}\t{}",
                d.id,
                h.score_tr,
                h.joint,
                tokens_text(&h.tokens),
                words.join(" ")
            )
            .unwrap();
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_references(path: &Path, decoded: &[DecodedUtterance]) -> Result<()> {
    let mut out = String::new();
    for d in decoded {
        writeln!(out, "{}\t{}\t{}", d.id, d.reference.join(" "), d.bias_words.join(" ")).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Best hypothesis words per utterance id, in file order.
pub fn read_nbest(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| Error::Parse { path: path.to_path_buf(), line: n + 1, msg: msg.to_string() };
        if f.len() != 7 {
            return Err(bad("expected 7 tab-separated fields"));
        }
        let rank: usize = f[1].parse().map_err(|_| bad("bad rank"))?;
        if rank == 0 {
            out.push((f[0].to_string(), words(f[6])));
        }
    }
    Ok(out)
}

/// `(id, reference words, bias words)` per line.
pub fn read_references(path: &Path) -> Result<Vec<(String, Vec<String>, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: "expected 3 tab-separated fields".into(),
                });
            }
            Ok((f[0].to_string(), words(f[1]), words(f[2])))
        })
        .collect()
}

/// Recomputes the breakdown from an N-best file and its reference file. An
/// utterance without hypotheses scores as an empty output.
pub fn score_files(nbest: &Path, references: &Path) -> Result<ErrorBreakdown> {
    let hyps: BTreeMap<String, Vec<String>> = read_nbest(nbest)?.into_iter().collect();
    let mut b = ErrorBreakdown::default();
    for (id, reference, bias) in read_references(references)? {
        let bias: HashSet<String> = bias.into_iter().collect();
        let empty = Vec::new();
        b.add_utterance(&reference, hyps.get(&id).unwrap_or(&empty), &bias);
    }
    Ok(b)
}
