//! Vocabulary, synthetic corpus and biasing-list construction.

pub mod bias;
pub mod corpus;
pub mod io;
pub mod vocab;

pub use bias::{
    build_test_bias_list, covered_spans, distractor_pool, sample_training_bias, training_bias_with_draws,
    BiasList, BiasPhrase, DEFAULT_L_MAX,
};
pub use corpus::{
    acoustic_class, build_vocab, synth_corpus, synth_corpus_with_frontend, Corpus, CorpusConfig, Frontend,
    LexEntry, Lexicon, Utterance,
};
pub use vocab::{TokenId, Vocab, BLANK, DUMMY, FIRST_LEXICAL, NO_BIAS, PAD, SEP, SOS};
