//! The batch training objective.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::context::ib_target;
use crate::datagen::{BiasList, Utterance};
use crate::error::{Error, Result};
use crate::losses::{combine_node, ctc_node, mean_ctc_node, rnnt_node, LossNodes, LossWeights};
use crate::numerics::{Graph, Tensor, Var};

use super::{context_embeddings, forward_utterance, ForwardOptions, Model};

/// Batch-mean value of every loss component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub interctc: f64,
    /// Absent when the biasing loss weight is zero.
    pub ib: Option<f64>,
    pub transducer: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// First non-finite component, by name.
    pub fn non_finite_term(&self) -> Option<(&'static str, f64)> {
        let terms = [
            ("ctc", Some(self.ctc)),
            ("interctc", Some(self.interctc)),
            ("ib", self.ib),
            ("transducer", Some(self.transducer)),
            ("total", Some(self.total)),
        ];
        terms
            .into_iter()
            .find_map(|(n, v)| v.filter(|v| !v.is_finite()).map(|v| (n, v)))
    }
}

/// One batch element: the utterance and its bias-phrase spans.
pub struct BatchItem<'a> {
    pub utt: &'a Utterance,
    pub covered: &'a [Range<usize>],
}

/// Builds the mean total objective over `batch` sharing `list`. The
/// biasing-loss branch is skipped entirely when `weights.ib == 0`.
pub fn batch_objective(
    g: &mut Graph,
    model: &Model,
    list: &BiasList,
    batch: &[BatchItem<'_>],
    weights: &LossWeights,
    bypass_cb: bool,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    weights.validate()?;
    let use_ib = weights.ib != 0.0;
    if model.cfg.taps.is_empty() && (weights.ic != 0.0 || use_ib) {
        return Err(Error::Config("intermediate losses need at least one tap layer".into()));
    }
    let opts = ForwardOptions { bypass_cb, ib_heads: use_ib };
    let ctx = context_embeddings(g, model, list)?;
    let share = 1.0 / batch.len() as f64;
    let mut totals = Vec::with_capacity(batch.len());
    let mut sums = LossBreakdown { ib: use_ib.then_some(0.0), ..LossBreakdown::default() };
    for item in batch {
        let u = item.utt;
        let fw = forward_utterance(g, model, ctx, &u.features, &u.transcript, opts)?;
        let enc = &fw.encoder;
        let ctc = ctc_node(g, enc.ctc_logp, &u.transcript)?;
        let interctc = if enc.taps.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let taps: Vec<Var> = enc.taps.iter().map(|t| t.raw_logp).collect();
            mean_ctc_node(g, &taps, &u.transcript)?
        };
        let ib = if use_ib {
            let target = ib_target(&u.transcript, item.covered)?;
            let taps: Vec<Var> = enc.taps.iter().filter_map(|t| t.fused_logp).collect();
            Some(mean_ctc_node(g, &taps, &target)?)
        } else {
            None
        };
        let transducer = rnnt_node(g, fw.lattice, enc.frames, &u.transcript)?;
        let nodes = LossNodes { ctc, interctc, ib, transducer };
        let total = combine_node(g, &nodes, weights)?;
        sums.ctc += share * g.value(ctc).item();
        sums.interctc += share * g.value(interctc).item();
        if let (Some(acc), Some(v)) = (sums.ib.as_mut(), ib) {
            *acc += share * g.value(v).item();
        }
        sums.transducer += share * g.value(transducer).item();
        totals.push((total, share));
    }
    let loss = g.weighted_sum(&totals)?;
    sums.total = g.value(loss).item();
    Ok((loss, sums))
}
