//! Training objectives: CTC, intermediate CTC, intermediate biasing, the
//! transducer lattice loss, and their weighted combination.
//!
//! All lattice arithmetic is in the log domain with `-inf` as log zero.
//! The CTC and transducer losses return their own gradients (from the
//! forward/backward tables) so that they can enter a [`Graph`] as external
//! nodes.

use serde::{Deserialize, Serialize};

use crate::datagen::{TokenId, BLANK};
use crate::error::{Error, Result};
use crate::numerics::tensor::{log_add_exp, log_softmax_in_place};
use crate::numerics::{Graph, Tensor, Var};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Mixing weights of the encoder and total objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Share of the encoder objective in the total (rest goes to the transducer).
    pub ae: f64,
    /// Share of intermediate CTC within the encoder objective.
    pub ic: f64,
    /// Additive weight of the intermediate biasing loss.
    pub ib: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ae: 0.3,
            ic: 0.66,
            ib: 0.03,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.ae) || !unit.contains(&self.ic) || !(self.ib >= 0.0) {
            return Err(Error::Config(format!("loss weights out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Encoder objective `(1-λic)·ctc + λic·inter + λib·ib`.
pub fn encoder_objective(ctc: f64, interctc: f64, ib: f64, w: &LossWeights) -> f64 {
    (1.0 - w.ic) * ctc + w.ic * interctc + w.ib * ib
}

/// Total objective `λae·L_AE + (1-λae)·L_Tr`.
pub fn combine_objectives(ctc: f64, interctc: f64, ib: f64, transducer: f64, w: &LossWeights) -> f64 {
    w.ae * encoder_objective(ctc, interctc, ib, w) + (1.0 - w.ae) * transducer
}

/// Forward/backward tables of one CTC evaluation.
#[derive(Clone, Debug)]
pub struct CtcLattice {
    /// Target with blanks interleaved: `∅ y1 ∅ y2 … ∅`.
    pub expanded: Vec<TokenId>,
    /// `alpha[t][s]`, log mass of prefixes ending in state `s` at frame `t`.
    pub alpha: Vec<Vec<f64>>,
    /// `beta[t][s]`, log mass of suffixes from state `s` at frame `t`
    /// (including the emission at `t`).
    pub beta: Vec<Vec<f64>>,
    pub log_likelihood_alpha: f64,
    pub log_likelihood_beta: f64,
}

fn check_target(target: &[TokenId], vocab: usize, what: &str) -> Result<()> {
    for &y in target {
        if y == BLANK {
            return Err(Error::Contract(format!("{what} target contains the blank id")));
        }
        if y >= vocab {
            return Err(Error::Data(format!("{what} target id {y} ≥ vocabulary {vocab}")));
        }
    }
    Ok(())
}

/// Minimum frame count a CTC target needs: one per label plus one blank
/// between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[TokenId]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Builds the CTC forward/backward tables for log-posteriors `logp` (T×V).
pub fn ctc_lattice(logp: &Tensor, target: &[TokenId]) -> Result<CtcLattice> {
    let (t_len, vocab) = logp.require_matrix("ctc_loss")?;
    check_target(target, vocab, "CTC")?;
    let need = ctc_min_frames(target);
    if t_len < need {
        return Err(Error::Infeasible(format!(
            "CTC target of {} labels needs ≥ {need} frames, got {t_len}",
            target.len()
        )));
    }
    let mut expanded = Vec::with_capacity(2 * target.len() + 1);
    expanded.push(BLANK);
    for &y in target {
        expanded.push(y);
        expanded.push(BLANK);
    }
    let s_len = expanded.len();
    // s may skip from s-2 when both are distinct labels.
    let can_skip = |s: usize| s >= 2 && expanded[s] != BLANK && expanded[s] != expanded[s - 2];

    let mut alpha = vec![vec![NEG_INF; s_len]; t_len];
    alpha[0][0] = logp.at(0, expanded[0]);
    if s_len > 1 {
        alpha[0][1] = logp.at(0, expanded[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add_exp(a, alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                a = log_add_exp(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if a == NEG_INF { NEG_INF } else { a + logp.at(t, expanded[s]) };
        }
    }

    let mut beta = vec![vec![NEG_INF; s_len]; t_len];
    let last = t_len - 1;
    beta[last][s_len - 1] = logp.at(last, expanded[s_len - 1]);
    if s_len > 1 {
        beta[last][s_len - 2] = logp.at(last, expanded[s_len - 2]);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = log_add_exp(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add_exp(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = if b == NEG_INF { NEG_INF } else { b + logp.at(t, expanded[s]) };
        }
    }

    let ll_alpha = if s_len > 1 {
        log_add_exp(alpha[last][s_len - 1], alpha[last][s_len - 2])
    } else {
        alpha[last][0]
    };
    let ll_beta = if s_len > 1 {
        log_add_exp(beta[0][0], beta[0][1])
    } else {
        beta[0][0]
    };
    Ok(CtcLattice {
        expanded,
        alpha,
        beta,
        log_likelihood_alpha: ll_alpha,
        log_likelihood_beta: ll_beta,
    })
}

/// CTC negative log-likelihood of `target` under log-posteriors `logp`
/// (T×V, blank id 0), with its gradient with respect to `logp`.
pub fn ctc_loss(logp: &Tensor, target: &[TokenId]) -> Result<(f64, Tensor)> {
    let lat = ctc_lattice(logp, target)?;
    let ll = lat.log_likelihood_alpha;
    if ll == NEG_INF {
        return Err(Error::Infeasible(
            "CTC target has zero probability under the given posteriors".into(),
        ));
    }
    let (t_len, vocab) = (logp.shape()[0], logp.shape()[1]);
    let mut grad = Tensor::zeros(&[t_len, vocab]);
    for t in 0..t_len {
        for (s, &k) in lat.expanded.iter().enumerate() {
            let occ = lat.alpha[t][s] + lat.beta[t][s];
            if occ == NEG_INF {
                continue;
            }
            // alpha and beta both include the emission at t.
            let d = (occ - logp.at(t, k) - ll).exp();
            grad.row_mut(t)[k] -= d;
        }
    }
    Ok((-ll, grad))
}

/// Mean CTC loss over taps, each against the same target.
pub fn interctc_loss(tap_logp: &[Tensor], target: &[TokenId]) -> Result<f64> {
    mean_ctc(tap_logp, target, "intermediate CTC")
}

/// Mean CTC loss of biasing-fused taps against the dummy-substituted target.
pub fn ib_loss(fused_tap_logp: &[Tensor], ib_target: &[TokenId]) -> Result<f64> {
    mean_ctc(fused_tap_logp, ib_target, "intermediate biasing")
}

fn mean_ctc(taps: &[Tensor], target: &[TokenId], what: &str) -> Result<f64> {
    if taps.is_empty() {
        return Err(Error::Config(format!("{what} loss needs at least one tap layer")));
    }
    let mut total = 0.0;
    for lp in taps {
        total += ctc_loss(lp, target)?.0;
    }
    Ok(total / taps.len() as f64)
}

/// Forward/backward tables of one transducer evaluation over the
/// T×(U+1) grid of (frame, emitted-label-count) nodes.
#[derive(Clone, Debug)]
pub struct RnntLattice {
    /// `alpha[t][u]`: log mass of reaching node (t, u).
    pub alpha: Vec<Vec<f64>>,
    /// `beta[t][u]`: log mass of finishing from node (t, u).
    pub beta: Vec<Vec<f64>>,
    pub log_likelihood_alpha: f64,
    pub log_likelihood_beta: f64,
}

/// Normalised log-probabilities `[t][u][k]` of a T×(U+1)×V logit lattice.
fn lattice_log_probs(logits: &Tensor, target: &[TokenId]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[1] != target.len() + 1 {
        return Err(Error::dim(
            "rnnt_loss",
            format!("logits {shape:?} for a target of {} labels", target.len()),
        ));
    }
    let (t_len, u1, vocab) = (shape[0], shape[1], shape[2]);
    check_target(target, vocab, "transducer")?;
    if t_len == 0 {
        return Err(Error::Infeasible("transducer lattice with zero frames".into()));
    }
    let mut lp = logits.data().to_vec();
    for row in lp.chunks_mut(vocab) {
        log_softmax_in_place(row);
    }
    Ok((t_len, u1, vocab, lp))
}

fn rnnt_tables(t_len: usize, u1: usize, vocab: usize, lp: &[f64], target: &[TokenId]) -> RnntLattice {
    let at = |t: usize, u: usize, k: usize| lp[(t * u1 + u) * vocab + k];
    let u_len = u1 - 1;
    let mut alpha = vec![vec![NEG_INF; u1]; t_len];
    alpha[0][0] = 0.0;
    for t in 0..t_len {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = NEG_INF;
            if t > 0 {
                a = alpha[t - 1][u] + at(t - 1, u, BLANK);
            }
            if u > 0 {
                a = log_add_exp(a, alpha[t][u - 1] + at(t, u - 1, target[u - 1]));
            }
            alpha[t][u] = a;
        }
    }
    let mut beta = vec![vec![NEG_INF; u1]; t_len];
    beta[t_len - 1][u_len] = at(t_len - 1, u_len, BLANK);
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let mut b = NEG_INF;
            if t + 1 < t_len {
                b = beta[t + 1][u] + at(t, u, BLANK);
            }
            if u < u_len {
                b = log_add_exp(b, beta[t][u + 1] + at(t, u, target[u]));
            }
            beta[t][u] = b;
        }
    }
    let ll_alpha = alpha[t_len - 1][u_len] + at(t_len - 1, u_len, BLANK);
    let ll_beta = beta[0][0];
    RnntLattice {
        alpha,
        beta,
        log_likelihood_alpha: ll_alpha,
        log_likelihood_beta: ll_beta,
    }
}

/// Transducer forward/backward tables for logits shaped T×(U+1)×V.
pub fn rnnt_lattice(logits: &Tensor, target: &[TokenId]) -> Result<RnntLattice> {
    let (t_len, u1, vocab, lp) = lattice_log_probs(logits, target)?;
    Ok(rnnt_tables(t_len, u1, vocab, &lp, target))
}

/// Transducer negative log-likelihood of `target` for logits shaped
/// T×(U+1)×V (blank id 0), with its gradient with respect to the logits.
pub fn rnnt_loss(logits: &Tensor, target: &[TokenId]) -> Result<(f64, Tensor)> {
    let (t_len, u1, vocab, lp) = lattice_log_probs(logits, target)?;
    let lat = rnnt_tables(t_len, u1, vocab, &lp, target);
    let ll = lat.log_likelihood_alpha;
    if ll == NEG_INF {
        return Err(Error::Infeasible("transducer target has zero probability".into()));
    }
    let u_len = u1 - 1;
    let mut grad = vec![0.0; t_len * u1 * vocab];
    for t in 0..t_len {
        for u in 0..u1 {
            let a = lat.alpha[t][u];
            if a == NEG_INF {
                continue;
            }
            let base = (t * u1 + u) * vocab;
            // d(-ll)/d logp for the two outgoing arcs of node (t, u).
            let next_blank = if t + 1 < t_len {
                lat.beta[t + 1][u]
            } else if u == u_len {
                0.0
            } else {
                NEG_INF
            };
            let g_blank = -(a + lp[base + BLANK] + next_blank - ll).exp();
            let (label, g_label) = if u < u_len {
                let k = target[u];
                (Some(k), -(a + lp[base + k] + lat.beta[t][u + 1] - ll).exp())
            } else {
                (None, 0.0)
            };
            // through log-softmax: d/dz_j = g_j - p_j Σ_i g_i
            let g_sum = g_blank + g_label;
            for k in 0..vocab {
                grad[base + k] = -lp[base + k].exp() * g_sum;
            }
            grad[base + BLANK] += g_blank;
            if let Some(k) = label {
                grad[base + k] += g_label;
            }
        }
    }
    Ok((-ll, Tensor::new(vec![t_len, u1, vocab], grad)?))
}

/// Adds a CTC loss node over the log-posterior node `logp`.
pub fn ctc_node(g: &mut Graph, logp: Var, target: &[TokenId]) -> Result<Var> {
    let (loss, grad) = ctc_loss(g.value(logp), target)?;
    g.external(logp, loss, grad)
}

/// Mean of CTC nodes over taps.
pub fn mean_ctc_node(g: &mut Graph, taps: &[Var], target: &[TokenId]) -> Result<Var> {
    if taps.is_empty() {
        return Err(Error::Config("CTC tap loss needs at least one tap".into()));
    }
    let w = 1.0 / taps.len() as f64;
    let mut terms = Vec::with_capacity(taps.len());
    for &lp in taps {
        terms.push((ctc_node(g, lp, target)?, w));
    }
    g.weighted_sum(&terms)
}

/// Adds a transducer loss node over a (T·(U+1))×V logit node.
pub fn rnnt_node(g: &mut Graph, logits: Var, frames: usize, target: &[TokenId]) -> Result<Var> {
    let v = g.value(logits);
    let vocab = v.cols();
    let lattice = v.reshape(&[frames, target.len() + 1, vocab])?;
    let (loss, grad) = rnnt_loss(&lattice, target)?;
    let grad = grad.reshape(g.value(logits).shape())?;
    g.external(logits, loss, grad)
}

/// Loss component nodes of one utterance. `ib` is absent when the biasing
/// loss is disabled.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub ctc: Var,
    pub interctc: Var,
    pub ib: Option<Var>,
    pub transducer: Var,
}

/// Total objective node with the same association order as
/// [`combine_objectives`].
pub fn combine_node(g: &mut Graph, parts: &LossNodes, w: &LossWeights) -> Result<Var> {
    let mut enc = vec![(parts.ctc, 1.0 - w.ic), (parts.interctc, w.ic)];
    if let Some(ib) = parts.ib {
        enc.push((ib, w.ib));
    }
    let ae = g.weighted_sum(&enc)?;
    g.weighted_sum(&[(ae, w.ae), (parts.transducer, 1.0 - w.ae)])
}
