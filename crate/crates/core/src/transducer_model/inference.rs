//! Step-wise evaluation for decoding: the encoder runs once, the predictor
//! advances one label at a time.

use crate::biasing::cb_attend_eval;
use crate::datagen::{BiasList, TokenId, BLANK, SOS};
use crate::error::{Error, Result};
use crate::numerics::layers::{add_row_in_place, get, linear_eval, lstm_step_eval};
use crate::numerics::tensor::log_softmax_in_place;
use crate::numerics::{Graph, Tensor};

use super::{context_embeddings, encode, ForwardOptions, Model};

/// Predictor state after some label history.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    h: Vec<f64>,
    c: Vec<f64>,
    /// Joiner-side projection of the (biased) predictor output.
    proj: Vec<f64>,
}

/// A model bound to one utterance and one biasing list.
#[derive(Debug)]
pub struct Transcriber<'m> {
    model: &'m Model,
    ctx: Tensor,
    enc_proj: Tensor,
    ctc_logp: Tensor,
    bypass_cb: bool,
}

impl<'m> Transcriber<'m> {
    pub fn new(model: &'m Model, list: &BiasList, x: &Tensor, bypass_cb: bool) -> Result<Self> {
        let opts = ForwardOptions { bypass_cb, ib_heads: false };
        let mut g = Graph::new();
        let ctx = context_embeddings(&mut g, model, list)?;
        let enc = encode(&mut g, model, ctx, x, opts)?;
        let enc_proj = linear_eval(&model.params, "joint.enc", g.value(enc.last_fused))?;
        Ok(Transcriber {
            model,
            ctx: g.value(ctx).clone(),
            enc_proj,
            ctc_logp: g.value(enc.ctc_logp).clone(),
            bypass_cb,
        })
    }

    pub fn frames(&self) -> usize {
        self.enc_proj.rows()
    }

    pub fn vocab(&self) -> usize {
        self.model.cfg.vocab
    }

    /// Final CTC head log-posteriors, `T' × V`.
    pub fn ctc_logp(&self) -> &Tensor {
        &self.ctc_logp
    }

    /// State after the start symbol.
    pub fn initial_state(&self) -> Result<DecoderState> {
        let s = self.model.cfg.width;
        self.step(SOS, &vec![0.0; s], &vec![0.0; s])
    }

    /// State after additionally emitting `token`.
    pub fn extend(&self, state: &DecoderState, token: TokenId) -> Result<DecoderState> {
        if token == BLANK {
            return Err(Error::Contract("the predictor never consumes the blank".into()));
        }
        self.step(token, &state.h, &state.c)
    }

    fn step(&self, token: TokenId, h: &[f64], c: &[f64]) -> Result<DecoderState> {
        let p = &self.model.params;
        let table = get(p, "pred.embed")?;
        if token >= table.rows() {
            return Err(Error::dim("predictor", format!("token {token} of {}", table.rows())));
        }
        let (h2, c2) = lstm_step_eval(p, "pred.lstm", table.row(token), h, c)?;
        let out = Tensor::new(vec![1, h2.len()], h2.clone())?;
        let out = if self.bypass_cb {
            out
        } else {
            cb_attend_eval(p, "joint.pred_cb", self.model.cfg.cb_heads, &out, &self.ctx)?.fused
        };
        let proj = out.matmul(get(p, "joint.pred")?)?.into_data();
        Ok(DecoderState { h: h2, c: c2, proj })
    }

    /// Joiner log-posteriors over the vocabulary at frame `t`.
    pub fn log_probs(&self, t: usize, state: &DecoderState) -> Result<Vec<f64>> {
        if t >= self.frames() {
            return Err(Error::dim("log_probs", format!("frame {t} of {}", self.frames())));
        }
        let p = &self.model.params;
        let z: Vec<f64> = self
            .enc_proj
            .row(t)
            .iter()
            .zip(&state.proj)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let z = Tensor::new(vec![1, z.len()], z)?;
        let mut logits = z.matmul(get(p, "joint.out.w")?)?;
        add_row_in_place(&mut logits, get(p, "joint.out.b")?)?;
        let mut out = logits.into_data();
        log_softmax_in_place(&mut out);
        Ok(out)
    }
}
