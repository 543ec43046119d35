//! Biasing lists: random transcript spans during training, rare words plus
//! distractors at test time.

use std::collections::HashSet;
use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::corpus::{word_ranges, Lexicon, Utterance};
use super::vocab::{TokenId, NO_BIAS, PAD, SEP};
use crate::error::{Error, Result};

/// Default maximum tokenised phrase length.
pub const DEFAULT_L_MAX: usize = 10;

/// One biasing phrase: whole words and their unpadded token sequence
/// (separators between words).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BiasPhrase {
    pub words: Vec<String>,
    pub tokens: Vec<TokenId>,
}

impl BiasPhrase {
    pub fn new(words: Vec<String>, tokens: Vec<TokenId>) -> Self {
        BiasPhrase { words, tokens }
    }

    /// The `<no_bias>` entry.
    pub fn no_bias() -> Self {
        BiasPhrase {
            words: Vec::new(),
            tokens: vec![NO_BIAS],
        }
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// `<no_bias>` followed by M distinct phrases of at most `l_max` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasList {
    phrases: Vec<BiasPhrase>,
    l_max: usize,
}

impl BiasList {
    /// A list holding only `<no_bias>`.
    pub fn new(l_max: usize) -> Result<Self> {
        if l_max == 0 {
            return Err(Error::Config("l_max must be ≥ 1".into()));
        }
        Ok(BiasList {
            phrases: vec![BiasPhrase::no_bias()],
            l_max,
        })
    }

    /// Builds a list from real phrases, dropping duplicates.
    pub fn from_phrases(phrases: impl IntoIterator<Item = BiasPhrase>, l_max: usize) -> Result<Self> {
        let mut list = Self::new(l_max)?;
        for p in phrases {
            list.push(p)?;
        }
        Ok(list)
    }

    /// Appends a phrase unless an identical one is present. Returns whether
    /// it was added.
    pub fn push(&mut self, phrase: BiasPhrase) -> Result<bool> {
        if phrase.tokens.is_empty() || phrase.tokens.len() > self.l_max {
            return Err(Error::Data(format!(
                "bias phrase `{}` has {} tokens, allowed 1..={}",
                phrase.text(),
                phrase.tokens.len(),
                self.l_max
            )));
        }
        if phrase.tokens.iter().any(|&t| t == PAD || t == NO_BIAS) {
            return Err(Error::Data(format!("bias phrase `{}` contains a reserved token", phrase.text())));
        }
        if self.phrases.iter().any(|p| p.tokens == phrase.tokens) {
            return Ok(false);
        }
        self.phrases.push(phrase);
        Ok(true)
    }

    /// Number of real phrases.
    pub fn m(&self) -> usize {
        self.phrases.len() - 1
    }

    /// M + 1.
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// All entries, `<no_bias>` first.
    pub fn phrases(&self) -> &[BiasPhrase] {
        &self.phrases
    }

    /// Entry `i` padded with `PAD` to `l_max` tokens.
    pub fn padded(&self, i: usize) -> Vec<TokenId> {
        let mut t = self.phrases[i].tokens.clone();
        t.resize(self.l_max, PAD);
        t
    }

    /// Every word occurring in a real phrase.
    pub fn word_set(&self) -> HashSet<String> {
        self.phrases[1..]
            .iter()
            .flat_map(|p| p.words.iter().cloned())
            .collect()
    }

    /// Reorders the real phrases; `<no_bias>` stays first.
    pub fn shuffle<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.phrases[1..].shuffle(rng);
    }
}

/// Token spans of `transcript` covered by list phrases: at each word start,
/// the longest phrase matching whole words is taken, then scanning resumes
/// after it.
pub fn covered_spans(transcript: &[TokenId], list: &BiasList) -> Vec<Range<usize>> {
    let words = word_ranges(transcript);
    let mut out = Vec::new();
    let mut w = 0;
    while w < words.len() {
        let start = words[w].start;
        let mut best: Option<(usize, usize)> = None;
        for p in &list.phrases()[1..] {
            let end = start + p.tokens.len();
            if end > transcript.len() || transcript[start..end] != p.tokens[..] {
                continue;
            }
            if end < transcript.len() && transcript[end] != SEP {
                continue;
            }
            if best.is_none_or(|(e, _)| end > e) {
                best = Some((end, p.words.len()));
            }
        }
        match best {
            Some((end, n_words)) => {
                out.push(start..end);
                w += n_words.max(1);
            }
            None => w += 1,
        }
    }
    out
}

/// Samples 0, 1 or 2 phrases per utterance uniformly and builds the batch
/// list with every utterance's covered spans.
pub fn sample_training_bias<R: Rng + ?Sized>(
    batch: &[&Utterance],
    l_max: usize,
    rng: &mut R,
) -> Result<(BiasList, Vec<Vec<Range<usize>>>)> {
    let draws: Vec<usize> = batch.iter().map(|_| rng.random_range(0..=2)).collect();
    training_bias_with_draws(batch, &draws, l_max, rng)
}

/// As [`sample_training_bias`] with the per-utterance phrase counts given.
/// Spans drawn from one utterance are 1–2 words, do not overlap, and fit in
/// `l_max` tokens; an utterance with too few candidates yields fewer.
pub fn training_bias_with_draws<R: Rng + ?Sized>(
    batch: &[&Utterance],
    draws: &[usize],
    l_max: usize,
    rng: &mut R,
) -> Result<(BiasList, Vec<Vec<Range<usize>>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("training bias needs a nonempty batch".into()));
    }
    if draws.len() != batch.len() {
        return Err(Error::Contract("one draw count per utterance".into()));
    }
    let mut list = BiasList::new(l_max)?;
    for (utt, &n) in batch.iter().zip(draws) {
        let ranges = utt.word_token_ranges();
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for w in 0..ranges.len() {
            for len in 1..=2 {
                let last = w + len - 1;
                if last < ranges.len() && ranges[last].end - ranges[w].start <= l_max {
                    candidates.push((w, len));
                }
            }
        }
        let mut taken: Vec<(usize, usize)> = Vec::new();
        for _ in 0..n {
            let open: Vec<(usize, usize)> = candidates
                .iter()
                .copied()
                .filter(|&(w, len)| taken.iter().all(|&(tw, tl)| w + len <= tw || tw + tl <= w))
                .collect();
            let Some(&(w, len)) = open.choose(rng) else {
                break;
            };
            taken.push((w, len));
            let tokens = utt.transcript[ranges[w].start..ranges[w + len - 1].end].to_vec();
            list.push(BiasPhrase::new(utt.words[w..w + len].to_vec(), tokens))?;
        }
    }
    let spans = batch.iter().map(|u| covered_spans(&u.transcript, &list)).collect();
    Ok((list, spans))
}

/// The utterance's rare words plus distractors sampled from `pool`, exactly
/// `m` real phrases in random order.
pub fn build_test_bias_list<R: Rng + ?Sized>(
    utt: &Utterance,
    pool: &[BiasPhrase],
    m: usize,
    l_max: usize,
    rng: &mut R,
) -> Result<BiasList> {
    let mut list = BiasList::new(l_max)?;
    if m == 0 {
        return Ok(list);
    }
    let ranges = utt.word_token_ranges();
    let mut rare = Vec::new();
    for word in &utt.rare_words {
        let i = utt
            .words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Data(format!("rare word `{word}` not in utterance {}", utt.id)))?;
        let tokens = utt.transcript[ranges[i].clone()].to_vec();
        rare.push(BiasPhrase::new(vec![word.clone()], tokens));
    }
    if rare.len() > m {
        return Err(Error::Config(format!(
            "utterance {} has {} rare words, more than M={m}",
            utt.id,
            rare.len()
        )));
    }
    for p in rare {
        list.push(p)?;
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    for i in order {
        if list.m() == m {
            break;
        }
        list.push(pool[i].clone())?;
    }
    if list.m() < m {
        return Err(Error::Config(format!(
            "distractor pool exhausted: filled {} of M={m} for {}",
            list.m(),
            utt.id
        )));
    }
    list.shuffle(rng);
    Ok(list)
}

/// Every rare lexicon word as a single-word phrase.
pub fn distractor_pool(lexicon: &Lexicon) -> Vec<BiasPhrase> {
    lexicon
        .rare()
        .map(|e| BiasPhrase::new(vec![e.word.clone()], e.tokens.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::vocab::FIRST_LEXICAL;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Utterance whose words are single letters, each word `len` tokens.
    fn utt(id: &str, words: &[&str], base: TokenId, len: usize, rare: &[&str]) -> Utterance {
        let mut transcript = Vec::new();
        for (i, _) in words.iter().enumerate() {
            if i > 0 {
                transcript.push(SEP);
            }
            for j in 0..len {
                transcript.push(base + i * len + j);
            }
        }
        Utterance {
            id: id.into(),
            features: Tensor::zeros(&[transcript.len(), 1]),
            transcript,
            words: words.iter().map(|s| s.to_string()).collect(),
            rare_words: rare.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn phrase(word: &str, tokens: &[TokenId]) -> BiasPhrase {
        BiasPhrase::new(vec![word.into()], tokens.to_vec())
    }

    #[test]
    fn zero_draws_give_only_no_bias() {
        let u = utt("a", &["x", "y", "z"], FIRST_LEXICAL, 1, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (list, spans) = training_bias_with_draws(&[&u, &u], &[0, 0], DEFAULT_L_MAX, &mut rng).unwrap();
        assert_eq!(list.m(), 0);
        assert_eq!(list.len(), 1);
        assert_eq!(list.phrases()[0], BiasPhrase::no_bias());
        assert!(spans.iter().all(Vec::is_empty));
    }

    #[test]
    fn four_utterances_two_draws_each() {
        let us: Vec<Utterance> = (0..4)
            .map(|k| {
                let names: Vec<String> = (0..4).map(|i| format!("w{k}{i}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                utt(&format!("u{k}"), &refs, FIRST_LEXICAL + 10 * k, 2, &[])
            })
            .collect();
        let batch: Vec<&Utterance> = us.iter().collect();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (list, spans) = training_bias_with_draws(&batch, &[2; 4], DEFAULT_L_MAX, &mut rng).unwrap();
            assert_eq!(list.m(), 8);
            assert_eq!(list.len(), 9);
            for s in &spans {
                assert_eq!(s.len(), 2);
            }
        }
    }

    #[test]
    fn phrases_never_exceed_l_max() {
        let u = utt("a", &["p", "q", "r", "s"], FIRST_LEXICAL, 3, &[]);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (list, _) = training_bias_with_draws(&[&u], &[2], 4, &mut rng).unwrap();
            assert!(list.phrases().iter().all(|p| p.tokens.len() <= 4));
            assert_eq!(list.m(), 2);
            assert!(list.phrases()[1..].iter().all(|p| p.words.len() == 1));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (list, _) = training_bias_with_draws(&[&u], &[2], 2, &mut rng).unwrap();
        assert_eq!(list.m(), 0);
    }

    #[test]
    fn covered_spans_prefer_longest_whole_word_match() {
        // tokens: a=6 | b=7 | c=8
        let t = vec![6, SEP, 7, SEP, 8];
        let list = BiasList::from_phrases(
            [
                phrase("b", &[7]),
                BiasPhrase::new(vec!["b".into(), "c".into()], vec![7, SEP, 8]),
            ],
            10,
        )
        .unwrap();
        assert_eq!(covered_spans(&t, &list), vec![2..5]);
        // Matches must end on a word boundary.
        let t2 = vec![7, 9, SEP, 8];
        let list2 = BiasList::from_phrases([phrase("b", &[7])], 10).unwrap();
        assert!(covered_spans(&t2, &list2).is_empty());
        // Repeated occurrences are all covered.
        let t3 = vec![7, SEP, 6, SEP, 7];
        assert_eq!(covered_spans(&t3, &list2), vec![0..1, 4..5]);
    }

    #[test]
    fn test_list_has_rare_words_and_distractors() {
        let u = utt("t", &["a", "b", "c"], FIRST_LEXICAL, 1, &["a", "c"]);
        let pool: Vec<BiasPhrase> = (0..20)
            .map(|i| phrase(&format!("d{i}"), &[100 + i]))
            .chain([phrase("a", &[FIRST_LEXICAL])])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let list = build_test_bias_list(&u, &pool, 10, DEFAULT_L_MAX, &mut rng).unwrap();
        assert_eq!(list.len(), 11);
        assert_eq!(list.phrases()[0], BiasPhrase::no_bias());
        let words = list.word_set();
        assert!(words.contains("a") && words.contains("c"));
        let distinct: HashSet<&Vec<TokenId>> = list.phrases().iter().map(|p| &p.tokens).collect();
        assert_eq!(distinct.len(), 11);

        let zero = build_test_bias_list(&u, &pool, 0, DEFAULT_L_MAX, &mut rng).unwrap();
        assert_eq!(zero.len(), 1);
    }

    #[test]
    fn duplicate_rare_word_in_pool_appears_once() {
        let u = utt("t", &["a"], FIRST_LEXICAL, 1, &["a"]);
        let pool = vec![phrase("a", &[FIRST_LEXICAL]), phrase("d", &[50])];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let list = build_test_bias_list(&u, &pool, 2, DEFAULT_L_MAX, &mut rng).unwrap();
        assert_eq!(list.m(), 2);
        let n_a = list.phrases().iter().filter(|p| p.words == ["a"]).count();
        assert_eq!(n_a, 1);
    }

    #[test]
    fn exhausted_pool_is_a_config_error() {
        let u = utt("t", &["a"], FIRST_LEXICAL, 1, &["a"]);
        let pool = vec![phrase("d", &[50])];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            build_test_bias_list(&u, &pool, 5, DEFAULT_L_MAX, &mut rng),
            Err(Error::Config(_))
        ));
        let u2 = utt("t", &["a", "b"], FIRST_LEXICAL, 1, &["a", "b"]);
        assert!(matches!(
            build_test_bias_list(&u2, &pool, 1, DEFAULT_L_MAX, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn padding_and_overlong_phrases() {
        let mut list = BiasList::new(4).unwrap();
        list.push(phrase("x", &[7, 8])).unwrap();
        assert_eq!(list.padded(1), vec![7, 8, PAD, PAD]);
        assert_eq!(list.padded(0), vec![NO_BIAS, PAD, PAD, PAD]);
        assert!(list.push(phrase("y", &[7, 8, 9, 10, 11])).is_err());
        assert!(!list.push(phrase("x2", &[7, 8])).unwrap());
    }
}
