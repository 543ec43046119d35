//! Contextual biasing: multi-head cross-attention from hidden states to
//! context embeddings, added back to the hidden states.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::init_matrix;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Shape of one biasing block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbConfig {
    pub width: usize,
    pub heads: usize,
    /// Whether the concatenated heads pass through an output projection.
    pub output_projection: bool,
}

impl CbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Name of the value projection of block `prefix`.
pub fn value_param(prefix: &str) -> String {
    format!("{prefix}.wv")
}

/// Adds `{prefix}.wq`, `.wk`, `.wv` and optionally `.wo` to `store`.
pub fn init_cb_params<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &CbConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let s = cfg.width;
    for p in ["wq", "wk", "wv"] {
        init_matrix(store, &format!("{prefix}.{p}"), s, s, rng);
    }
    if cfg.output_projection {
        init_matrix(store, &format!("{prefix}.wo"), s, s, rng);
    }
    Ok(())
}

/// Graph handles produced by [`cb_attend`].
#[derive(Clone, Debug)]
pub struct Attention {
    /// Per-head `T' × (M+1)` attention weights.
    pub scores: Vec<Var>,
    /// `T' × S` bias vectors.
    pub bias: Var,
    /// `T' × S` fused states `h + bias`.
    pub fused: Var,
}

/// `A = softmax(h Wq (ctx Wk)ᵀ / √(S/heads))` per head, `e = A · ctx Wv`
/// (heads concatenated, then `Wo` if present) and `h' = h + e`.
pub fn cb_attend(g: &mut Graph, store: &ParamStore, prefix: &str, heads: usize, h: Var, ctx: Var) -> Result<Attention> {
    let s = g.value(h).cols();
    if g.value(ctx).cols() != s {
        return Err(Error::dim(
            "cb_attend",
            format!("hidden {:?} vs context {:?}", g.value(h).shape(), g.value(ctx).shape()),
        ));
    }
    if g.value(ctx).rows() == 0 {
        return Err(Error::Contract("context needs at least the <no_bias> row".into()));
    }
    if heads == 0 || s % heads != 0 {
        return Err(Error::Config(format!("width {s} is not divisible into {heads} heads")));
    }
    let wq = g.param_from(store, &format!("{prefix}.wq"))?;
    let wk = g.param_from(store, &format!("{prefix}.wk"))?;
    let wv = g.param_from(store, &value_param(prefix))?;
    let q = g.matmul(h, wq)?;
    let k = g.matmul(ctx, wk)?;
    let v = g.matmul(ctx, wv)?;
    let dh = s / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice(q, 1, lo, hi)?, g.slice(k, 1, lo, hi)?, g.slice(v, 1, lo, hi)?)
        };
        let logits = g.matmul_t(qh, kh)?;
        let logits = g.scale(logits, scale);
        let a = g.softmax(logits);
        outs.push(g.matmul(a, vh)?);
        scores.push(a);
    }
    let mut e = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let wo_name = format!("{prefix}.wo");
    if store.contains_key(&wo_name) {
        let wo = g.param_from(store, &wo_name)?;
        e = g.matmul(e, wo)?;
    }
    let fused = g.add(h, e)?;
    Ok(Attention { scores, bias: e, fused })
}

/// Plain-tensor result of [`cb_attend_eval`].
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub scores: Vec<Tensor>,
    pub bias: Tensor,
    pub fused: Tensor,
}

/// Evaluation wrapper of [`cb_attend`].
pub fn cb_attend_eval(store: &ParamStore, prefix: &str, heads: usize, h: &Tensor, ctx: &Tensor) -> Result<AttentionOutput> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let cv = g.constant(ctx.clone());
    let a = cb_attend(&mut g, store, prefix, heads, hv, cv)?;
    Ok(AttentionOutput {
        scores: a.scores.iter().map(|&v| g.value(v).clone()).collect(),
        bias: g.value(a.bias).clone(),
        fused: g.value(a.fused).clone(),
    })
}
