use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = usize;

/// CTC / transducer blank.
pub const BLANK: TokenId = 0;
/// Dummy label standing in for every non-bias token of a biasing-loss target.
pub const DUMMY: TokenId = 1;
/// Padding inside fixed-length bias phrases.
pub const PAD: TokenId = 2;
/// Start-of-sequence input of the predictor.
pub const SOS: TokenId = 3;
/// The "do not bias" context entry.
pub const NO_BIAS: TokenId = 4;
/// Word separator; acoustically a short pause.
pub const SEP: TokenId = 5;
/// First id available to lexical tokens.
pub const FIRST_LEXICAL: TokenId = 6;

const RESERVED: [&str; FIRST_LEXICAL] = ["<blank>", "#", "<pad>", "<sos>", "<no_bias>", "|"];

/// Token inventory. Ids below [`FIRST_LEXICAL`] are reserved.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Reserved symbols followed by `lexical` token strings.
    pub fn new<S: Into<String>>(lexical: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(lexical.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its full token list (reserved symbols first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < FIRST_LEXICAL || tokens[..FIRST_LEXICAL] != RESERVED {
            return Err(Error::Data("vocabulary does not start with the reserved symbols".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id < FIRST_LEXICAL
    }

    /// Whether a decoder may output `id`: lexical tokens and the separator.
    pub fn is_emittable(id: TokenId) -> bool {
        id == SEP || id >= FIRST_LEXICAL
    }

    /// Splits a token sequence into words at separators, concatenating the
    /// surface strings of lexical tokens. Other reserved ids are ignored.
    pub fn words(&self, ids: &[TokenId]) -> Vec<String> {
        let mut words = Vec::new();
        let mut cur = String::new();
        for &id in ids {
            if id == SEP {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
            } else if id >= FIRST_LEXICAL {
                if let Some(t) = self.tokens.get(id) {
                    cur.push_str(t);
                }
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words
    }
}
