//! Benchmark fixtures shared by the criterion targets.

use ctxbias_core::datagen::{BiasList, BiasPhrase, FIRST_LEXICAL};
use ctxbias_core::transducer_model::{Model, ModelConfig};
use ctxbias_core::Tensor;

/// A randomly initialised model of the default shape over a 30-token
/// vocabulary.
pub fn default_model(seed: u64) -> Model {
    let cfg = ModelConfig { vocab: 30, ..ModelConfig::default() };
    Model::new(cfg, seed).expect("default config is valid")
}

/// `m` two-token phrases over the lexical range.
pub fn bias_list(m: usize, vocab: usize) -> BiasList {
    let lexical = vocab - FIRST_LEXICAL;
    let phrases = (0..m).map(|i| {
        let a = FIRST_LEXICAL + i % lexical;
        let b = FIRST_LEXICAL + (i / lexical + 3 * i) % lexical;
        BiasPhrase::new(vec![format!("p{i}")], vec![a, b])
    });
    BiasList::from_phrases(phrases, 10).expect("phrases fit")
}

/// Log-softmax rows of a deterministic `rows × cols` pattern.
pub fn log_probs(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i * 37 % 101) as f64 / 25.0).sin()).collect();
    Tensor::new(vec![rows, cols], data).unwrap().log_softmax(1).unwrap()
}
