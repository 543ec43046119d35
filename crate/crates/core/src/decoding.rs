//! Greedy CTC readout, CTC prefix scoring, and frame-synchronous transducer
//! beam search with optional CTC prefix scores in the ranking.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{TokenId, Vocab, BLANK, DUMMY};
use crate::error::{Error, Result};
use crate::numerics::{log_add_exp, Tensor};
use crate::transducer_model::{DecoderState, Transcriber};

/// Beam-search settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub mu_ctc: f64,
    pub mu_tr: f64,
    pub max_symbols_per_frame: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 10,
            mu_ctc: 0.2,
            mu_tr: 0.8,
            max_symbols_per_frame: 3,
        }
    }
}

impl DecodeConfig {
    /// Transducer-only search with beam `beam`.
    pub fn transducer_only(beam: usize) -> Self {
        DecodeConfig { beam, mu_ctc: 0.0, mu_tr: 1.0, ..Self::default() }
    }

    /// Weights `(mu_ctc, 1 − mu_ctc)`.
    pub fn with_mu_ctc(self, mu_ctc: f64) -> Self {
        DecodeConfig { mu_ctc, mu_tr: 1.0 - mu_ctc, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mu_ctc) || !(0.0..=1.0).contains(&self.mu_tr) {
            return Err(Error::Config("decoder weights must lie in [0, 1]".into()));
        }
        if (self.mu_ctc + self.mu_tr - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mu_ctc + mu_tr must be 1, got {} + {}",
                self.mu_ctc, self.mu_tr
            )));
        }
        Ok(())
    }
}

/// Per-frame argmax, repeats collapsed, blanks and dummies removed.
pub fn ctc_greedy(logp: &Tensor) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..logp.rows() {
        let row = logp.row(t);
        let best = (0..row.len())
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal).then(b.cmp(&a)))
            .unwrap_or(BLANK);
        if Some(best) != prev && best != BLANK && best != DUMMY {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Running CTC masses of one prefix: at every frame, the log-probability
/// of having emitted exactly the prefix ending in a label (`nonblank`) or
/// in a blank (`blank`).
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPrefixState {
    nonblank: Vec<f64>,
    blank: Vec<f64>,
    last: Option<TokenId>,
}

/// CTC prefix scorer over `T' × V` log-posteriors.
#[derive(Clone, Copy, Debug)]
pub struct PrefixScorer<'a> {
    logp: &'a Tensor,
}

impl<'a> PrefixScorer<'a> {
    pub fn new(logp: &'a Tensor) -> Self {
        PrefixScorer { logp }
    }

    /// State of the empty prefix.
    pub fn initial(&self) -> CtcPrefixState {
        let t_len = self.logp.rows();
        let mut blank = Vec::with_capacity(t_len);
        let mut acc = 0.0;
        for t in 0..t_len {
            acc += self.logp.at(t, BLANK);
            blank.push(acc);
        }
        CtcPrefixState { nonblank: vec![f64::NEG_INFINITY; t_len], blank, last: None }
    }

    /// Extends the prefix of `state` by `c`. Returns the new state and the
    /// log-probability that the CTC output starts with the extended prefix.
    pub fn extend(&self, state: &CtcPrefixState, c: TokenId) -> Result<(CtcPrefixState, f64)> {
        if c == BLANK {
            return Err(Error::Contract("prefix extension by the blank".into()));
        }
        let t_len = self.logp.rows();
        let mut nonblank = vec![f64::NEG_INFINITY; t_len];
        let mut blank = vec![f64::NEG_INFINITY; t_len];
        if t_len == 0 {
            return Ok((CtcPrefixState { nonblank, blank, last: Some(c) }, f64::NEG_INFINITY));
        }
        if state.last.is_none() {
            nonblank[0] = self.logp.at(0, c);
        }
        let mut psi = nonblank[0];
        for t in 1..t_len {
            let phi = if state.last == Some(c) {
                state.blank[t - 1]
            } else {
                log_add_exp(state.blank[t - 1], state.nonblank[t - 1])
            };
            let lc = self.logp.at(t, c);
            nonblank[t] = log_add_exp(nonblank[t - 1], phi) + lc;
            blank[t] = log_add_exp(blank[t - 1], nonblank[t - 1]) + self.logp.at(t, BLANK);
            psi = log_add_exp(psi, phi + lc);
        }
        Ok((CtcPrefixState { nonblank, blank, last: Some(c) }, psi))
    }

    /// Log-probability that the CTC output is exactly the prefix.
    pub fn full_score(&self, state: &CtcPrefixState) -> f64 {
        match (state.nonblank.last(), state.blank.last()) {
            (Some(&n), Some(&b)) => log_add_exp(n, b),
            _ => {
                if state.last.is_none() {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

/// A transducer the beam search can query.
pub trait TransducerScorer {
    type State: Clone;
    fn frames(&self) -> usize;
    fn vocab(&self) -> usize;
    fn initial_state(&self) -> Result<Self::State>;
    fn extend(&self, state: &Self::State, token: TokenId) -> Result<Self::State>;
    /// Log-posteriors over the vocabulary at frame `t`.
    fn log_probs(&self, t: usize, state: &Self::State) -> Result<Vec<f64>>;
}

impl TransducerScorer for Transcriber<'_> {
    type State = DecoderState;

    fn frames(&self) -> usize {
        Transcriber::frames(self)
    }

    fn vocab(&self) -> usize {
        Transcriber::vocab(self)
    }

    fn initial_state(&self) -> Result<DecoderState> {
        Transcriber::initial_state(self)
    }

    fn extend(&self, state: &DecoderState, token: TokenId) -> Result<DecoderState> {
        Transcriber::extend(self, state, token)
    }

    fn log_probs(&self, t: usize, state: &DecoderState) -> Result<Vec<f64>> {
        Transcriber::log_probs(self, t, state)
    }
}

/// A finished hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Transducer log-probability summed over merged alignments.
    pub score_tr: f64,
    /// CTC log-probability of the full sequence; absent for transducer-only
    /// search.
    pub score_ctc: Option<f64>,
    pub joint: f64,
}

/// Ids a decoder may emit: the word separator and lexical tokens.
pub fn emit_mask(vocab: usize) -> Vec<bool> {
    (0..vocab).map(Vocab::is_emittable).collect()
}

struct Hyp<S> {
    prefix: Vec<TokenId>,
    tr: f64,
    state: S,
    ctc: f64,
}

enum Move {
    Advance,
    Emit(TokenId),
}

struct Candidate {
    from: usize,
    mv: Move,
    tr: f64,
    ctc: f64,
    joint: f64,
}

struct CtcCache<'a> {
    scorer: PrefixScorer<'a>,
    memo: HashMap<Vec<TokenId>, (CtcPrefixState, f64)>,
}

impl<'a> CtcCache<'a> {
    fn new(scorer: PrefixScorer<'a>) -> Self {
        let mut memo = HashMap::new();
        memo.insert(Vec::new(), (scorer.initial(), 0.0));
        CtcCache { scorer, memo }
    }

    fn prefix_score(&mut self, prefix: &[TokenId], c: TokenId) -> Result<f64> {
        let mut key = prefix.to_vec();
        key.push(c);
        if let Some((_, psi)) = self.memo.get(&key) {
            return Ok(*psi);
        }
        let parent = match self.memo.get(prefix) {
            Some((s, _)) => s.clone(),
            None => self.state_of(prefix)?,
        };
        let (state, psi) = self.scorer.extend(&parent, c)?;
        self.memo.insert(key, (state, psi));
        Ok(psi)
    }

    fn state_of(&mut self, prefix: &[TokenId]) -> Result<CtcPrefixState> {
        if let Some((s, _)) = self.memo.get(prefix) {
            return Ok(s.clone());
        }
        let (&c, head) = prefix.split_last().expect("empty prefix is memoised");
        self.prefix_score(head, c)?;
        Ok(self.memo[prefix].0.clone())
    }

    fn full_score(&mut self, prefix: &[TokenId]) -> Result<f64> {
        let s = self.state_of(prefix)?;
        Ok(self.scorer.full_score(&s))
    }
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.joint.partial_cmp(&a.joint).unwrap_or(Ordering::Equal)
}

/// Frame-synchronous beam search. Within a frame, every hypothesis either
/// advances (blank) or emits a token; the best `beam` of all candidates by
/// joint score survive each expansion round, advanced hypotheses merge by
/// prefix into the next frame, and at most `max_symbols_per_frame` tokens are
/// emitted per frame. With `ctc` present and `mu_ctc > 0` the joint score adds
/// CTC prefix scores during search and full-sequence CTC scores for the final
/// ranking. Returns up to `beam` hypotheses, best first.
pub fn beam_search<M: TransducerScorer>(
    model: &M,
    ctc: Option<&Tensor>,
    mask: &[bool],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if mask.len() != model.vocab() {
        return Err(Error::dim("beam_search", format!("mask of {} for vocabulary {}", mask.len(), model.vocab())));
    }
    let use_ctc = cfg.mu_ctc != 0.0;
    let mut cache = match (use_ctc, ctc) {
        (true, Some(lp)) => {
            if lp.rows() != model.frames() || lp.cols() != model.vocab() {
                return Err(Error::dim("beam_search", format!("CTC posteriors {:?}", lp.shape())));
            }
            Some(CtcCache::new(PrefixScorer::new(lp)))
        }
        (true, None) => return Err(Error::Contract("mu_ctc > 0 needs CTC posteriors".into())),
        (false, _) => None,
    };
    let joint = |tr: f64, c: f64| if use_ctc { cfg.mu_tr * tr + cfg.mu_ctc * c } else { cfg.mu_tr * tr };
    let emittable: Vec<TokenId> = (0..mask.len()).filter(|&i| mask[i] && i != BLANK).collect();

    let mut active = vec![Hyp { prefix: Vec::new(), tr: 0.0, state: model.initial_state()?, ctc: 0.0 }];
    for t in 0..model.frames() {
        let mut next: Vec<Hyp<M::State>> = Vec::new();
        let mut index: HashMap<Vec<TokenId>, usize> = HashMap::new();
        let mut frontier = std::mem::take(&mut active);
        for level in 0..=cfg.max_symbols_per_frame {
            if frontier.is_empty() {
                break;
            }
            let mut cands = Vec::new();
            for (i, h) in frontier.iter().enumerate() {
                let lp = model.log_probs(t, &h.state)?;
                let tr = h.tr + lp[BLANK];
                cands.push(Candidate { from: i, mv: Move::Advance, tr, ctc: h.ctc, joint: joint(tr, h.ctc) });
                if level < cfg.max_symbols_per_frame {
                    for &c in &emittable {
                        let tr = h.tr + lp[c];
                        let ctc = match cache.as_mut() {
                            Some(cache) => cache.prefix_score(&h.prefix, c)?,
                            None => 0.0,
                        };
                        cands.push(Candidate { from: i, mv: Move::Emit(c), tr, ctc, joint: joint(tr, ctc) });
                    }
                }
            }
            cands.sort_by(rank);
            cands.truncate(cfg.beam);
            let mut emitted = Vec::new();
            for cand in cands {
                let h = &frontier[cand.from];
                match cand.mv {
                    Move::Advance => match index.get(&h.prefix) {
                        Some(&j) => next[j].tr = log_add_exp(next[j].tr, cand.tr),
                        None => {
                            index.insert(h.prefix.clone(), next.len());
                            next.push(Hyp { prefix: h.prefix.clone(), tr: cand.tr, state: h.state.clone(), ctc: h.ctc });
                        }
                    },
                    Move::Emit(c) => {
                        let mut prefix = h.prefix.clone();
                        prefix.push(c);
                        emitted.push(Hyp { prefix, tr: cand.tr, state: model.extend(&h.state, c)?, ctc: cand.ctc });
                    }
                }
            }
            frontier = emitted;
        }
        let mut order: Vec<usize> = (0..next.len()).collect();
        order.sort_by(|&a, &b| {
            joint(next[b].tr, next[b].ctc)
                .partial_cmp(&joint(next[a].tr, next[a].ctc))
                .unwrap_or(Ordering::Equal)
        });
        order.truncate(cfg.beam);
        let mut slots: Vec<Option<Hyp<M::State>>> = next.into_iter().map(Some).collect();
        active = order.into_iter().map(|i| slots[i].take().unwrap()).collect();
    }

    let mut out = Vec::with_capacity(active.len());
    for h in active {
        let score_ctc = match cache.as_mut() {
            Some(cache) => Some(cache.full_score(&h.prefix)?),
            None => None,
        };
        let j = joint(h.tr, score_ctc.unwrap_or(0.0));
        out.push(Hypothesis { tokens: h.prefix, score_tr: h.tr, score_ctc, joint: j });
    }
    out.sort_by(|a, b| b.joint.partial_cmp(&a.joint).unwrap_or(Ordering::Equal));
    Ok(out)
}

/// Transducer-only beam search; `cfg`'s decoder weights are ignored.
pub fn rnnt_beam_search<M: TransducerScorer>(model: &M, mask: &[bool], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    let cfg = DecodeConfig { mu_ctc: 0.0, mu_tr: 1.0, ..*cfg };
    beam_search(model, None, mask, &cfg)
}

/// Transducer-driven joint decoding with CTC prefix scores; the best
/// hypothesis.
pub fn joint_decode(model: &Transcriber<'_>, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let mask = emit_mask(model.vocab());
    let nbest = beam_search(model, Some(model.ctc_logp()), &mask, cfg)?;
    nbest
        .into_iter()
        .next()
        .ok_or_else(|| Error::Evaluation("beam search returned no hypothesis".into()))
}
