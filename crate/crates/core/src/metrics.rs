//! Word alignment and the WER / U-WER / B-WER decomposition.
//!
//! Substitutions and deletions count against the reference word's class
//! (biased if it occurs in any phrase of the bias list), insertions against
//! the inserted hypothesis word's class. Corpus figures are ratios of summed
//! counts.

use std::collections::HashSet;
use std::fmt;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

/// One edit operation; positions index the reference and hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Sub { r: usize, h: usize },
    Del { r: usize },
    Ins { h: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
}

impl Alignment {
    pub fn distance(&self) -> usize {
        self.ops.iter().filter(|op| !matches!(op, EditOp::Match { .. })).count()
    }

    /// The hypothesis, rebuilt from `reference` and the operations.
    pub fn replay<S: Clone>(&self, reference: &[S], hypothesis: &[S]) -> Vec<S> {
        self.ops
            .iter()
            .filter_map(|op| match *op {
                EditOp::Match { r, .. } => Some(reference[r].clone()),
                EditOp::Sub { h, .. } | EditOp::Ins { h } => Some(hypothesis[h].clone()),
                EditOp::Del { .. } => None,
            })
            .collect()
    }
}

/// Minimal Levenshtein alignment. Among equal-cost paths, the backtrace
/// prefers match, then substitution, deletion, insertion.
pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = d[i - 1][j - 1] + usize::from(!same);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if same && d[i][j] == d[i - 1][j - 1] {
                ops.push(EditOp::Match { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && d[i][j] == d[i - 1][j - 1] + 1 {
                ops.push(EditOp::Sub { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(EditOp::Del { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Ins { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    Alignment { ops }
}

/// Edit counts of one word class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub sub: u64,
    pub del: u64,
    pub ins: u64,
    /// Reference words of this class.
    pub words: u64,
}

impl EditCounts {
    pub fn errors(&self) -> u64 {
        self.sub + self.del + self.ins
    }

    /// Percent error rate, or `None` with no reference words.
    pub fn rate(&self) -> Option<f64> {
        (self.words > 0).then(|| 100.0 * self.errors() as f64 / self.words as f64)
    }
}

impl AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
        self.words += o.words;
    }
}

/// Edit counts split by bias membership.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub bias: EditCounts,
    pub unbias: EditCounts,
}

impl ErrorBreakdown {
    pub fn total(&self) -> EditCounts {
        let mut t = self.bias;
        t += self.unbias;
        t
    }

    pub fn wer(&self) -> Option<f64> {
        self.total().rate()
    }

    pub fn u_wer(&self) -> Option<f64> {
        self.unbias.rate()
    }

    pub fn b_wer(&self) -> Option<f64> {
        self.bias.rate()
    }

    /// Adds one utterance.
    pub fn add_utterance<S: AsRef<str>>(&mut self, reference: &[S], hypothesis: &[S], bias: &HashSet<String>) {
        let class = |w: &S| bias.contains(w.as_ref());
        for w in reference {
            self.counts_mut(class(w)).words += 1;
        }
        for op in align(reference, hypothesis).ops {
            match op {
                EditOp::Match { .. } => {}
                EditOp::Sub { r, .. } => self.counts_mut(class(&reference[r])).sub += 1,
                EditOp::Del { r } => self.counts_mut(class(&reference[r])).del += 1,
                EditOp::Ins { h } => self.counts_mut(insertion_is_biased(&hypothesis[h], bias)).ins += 1,
            }
        }
    }

    fn counts_mut(&mut self, biased: bool) -> &mut EditCounts {
        if biased {
            &mut self.bias
        } else {
            &mut self.unbias
        }
    }
}

impl AddAssign for ErrorBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.bias += o.bias;
        self.unbias += o.unbias;
    }
}

/// Class of an inserted word: that of the hypothesis word itself.
pub fn insertion_is_biased<S: AsRef<str>>(word: &S, bias: &HashSet<String>) -> bool {
    bias.contains(word.as_ref())
}

/// Corpus breakdown over `(reference, hypothesis, bias words)` triples.
pub fn wer_breakdown<S: AsRef<str>>(items: &[(Vec<S>, Vec<S>, HashSet<String>)]) -> ErrorBreakdown {
    let mut b = ErrorBreakdown::default();
    for (r, h, bias) in items {
        b.add_utterance(r, h, bias);
    }
    b
}

/// Undefined-rate marker.
pub const UNDEFINED: &str = "–";

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| UNDEFINED.to_string(), |v| format!("{v:.2}"))
}

/// `"W.WW (U.UU/B.BB)"`.
pub fn format_report(b: &ErrorBreakdown) -> String {
    format!("{} ({}/{})", fmt_rate(b.wer()), fmt_rate(b.u_wer()), fmt_rate(b.b_wer()))
}

impl fmt::Display for ErrorBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_report(self))
    }
}
