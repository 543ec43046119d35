//! The contextual transducer: self-attention encoder with biasing taps,
//! LSTM predictor, joiner, and biasing blocks in front of the joiner.
//!
//! Parameter names:
//!
//! | prefix | contents |
//! |---|---|
//! | `ctx.*` | context encoder |
//! | `enc.in` | input projection |
//! | `enc.l{n}.*` | block `n` (1-based): `ln1`, `q`, `k`, `v`, `o`, `ln2`, `ff1`, `ff2` |
//! | `enc.ln_out` | final layer norm, also applied before every tap head |
//! | `enc.tap{k}.cb`, `.ctc`, `.ib` | biasing block and heads of tap `k` |
//! | `enc.ctc` | final CTC head |
//! | `pred.embed`, `pred.lstm` | predictor |
//! | `joint.enc_cb`, `joint.pred_cb` | biasing blocks in front of the joiner |
//! | `joint.enc`, `joint.pred`, `joint.out` | joiner |

pub mod checkpoint;
pub mod inference;
pub mod objective;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biasing::{cb_attend, init_cb_params, value_param, Attention, CbConfig};
use crate::context::{encode_bias_list_graph, init_context_params, ContextEncoderConfig};
use crate::datagen::{TokenId, BLANK, SOS};
use crate::error::{Error, Result};
use crate::numerics::layers::{init_linear, init_lstm, init_matrix, linear, LstmVars};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub use checkpoint::Checkpoint;
pub use inference::{DecoderState, Transcriber};
pub use objective::{batch_objective, BatchItem, LossBreakdown};

/// Network shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input feature width D.
    pub feature_dim: usize,
    /// Output vocabulary size, blank included.
    pub vocab: usize,
    /// Model width S.
    pub width: usize,
    /// Encoder blocks N.
    pub layers: usize,
    /// Self-attention heads.
    pub heads: usize,
    /// Feed-forward inner width.
    pub ffn: usize,
    /// Tap layers K (1-based, each below N).
    pub taps: Vec<usize>,
    /// Consecutive frames stacked into one encoder input.
    pub subsample: usize,
    /// Context-encoder token embedding width.
    pub context_embed: usize,
    /// Heads of every biasing block.
    pub cb_heads: usize,
    pub cb_output_projection: bool,
    /// Whether a tap's fused states replace the encoder stream.
    pub propagate_fused: bool,
    /// Joiner hidden width.
    pub joint: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            vocab: 30,
            width: 64,
            layers: 6,
            heads: 4,
            ffn: 128,
            taps: vec![2, 4],
            subsample: 1,
            context_embed: 64,
            cb_heads: 4,
            cb_output_projection: true,
            propagate_fused: true,
            joint: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.vocab < 2 || self.layers == 0 || self.ffn == 0 || self.joint == 0 {
            return bad("feature_dim, layers, ffn and joint must be positive and vocab ≥ 2".into());
        }
        if self.subsample == 0 {
            return bad("subsample must be ≥ 1".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.taps.iter().any(|&k| k == 0 || k >= self.layers) {
            return bad(format!("taps {:?} must lie in 1..{}", self.taps, self.layers));
        }
        let distinct: BTreeSet<_> = self.taps.iter().collect();
        if distinct.len() != self.taps.len() {
            return bad(format!("taps {:?} repeat a layer", self.taps));
        }
        CbConfig { width: self.width, heads: self.cb_heads, output_projection: self.cb_output_projection }.validate()?;
        self.context().validate()
    }

    pub fn context(&self) -> ContextEncoderConfig {
        ContextEncoderConfig {
            vocab: self.vocab,
            embed: self.context_embed,
            width: self.width,
        }
    }

    fn cb(&self) -> CbConfig {
        CbConfig {
            width: self.width,
            heads: self.cb_heads,
            output_projection: self.cb_output_projection,
        }
    }

    /// Taps in ascending order.
    pub fn sorted_taps(&self) -> Vec<usize> {
        let mut k = self.taps.clone();
        k.sort_unstable();
        k
    }

    /// Encoder frames for `frames` input frames.
    pub fn encoder_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample)
    }
}

fn tap_prefix(k: usize) -> String {
    format!("enc.tap{k}")
}

/// Prefixes of every biasing block of a model.
pub fn cb_prefixes(cfg: &ModelConfig) -> Vec<String> {
    let mut out: Vec<String> = cfg.sorted_taps().iter().map(|&k| format!("{}.cb", tap_prefix(k))).collect();
    out.push("joint.enc_cb".into());
    out.push("joint.pred_cb".into());
    out
}

/// Names of every biasing value projection.
pub fn value_projection_names(cfg: &ModelConfig) -> Vec<String> {
    cb_prefixes(cfg).iter().map(|p| value_param(p)).collect()
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Randomly initialised model; a pure function of `(cfg, seed)`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (s, v) = (cfg.width, cfg.vocab);
        init_context_params(&mut p, &cfg.context(), &mut rng)?;
        init_linear(&mut p, "enc.in", cfg.feature_dim * cfg.subsample, s, &mut rng);
        for n in 1..=cfg.layers {
            let b = format!("enc.l{n}");
            init_norm(&mut p, &format!("{b}.ln1"), s);
            for proj in ["q", "k", "v", "o"] {
                init_linear(&mut p, &format!("{b}.{proj}"), s, s, &mut rng);
            }
            init_norm(&mut p, &format!("{b}.ln2"), s);
            init_linear(&mut p, &format!("{b}.ff1"), s, cfg.ffn, &mut rng);
            init_linear(&mut p, &format!("{b}.ff2"), cfg.ffn, s, &mut rng);
            init_norm(&mut p, &format!("{b}.ln3"), s);
        }
        init_norm(&mut p, "enc.ln_out", s);
        for k in cfg.sorted_taps() {
            let t = tap_prefix(k);
            init_cb_params(&mut p, &format!("{t}.cb"), &cfg.cb(), &mut rng)?;
            init_linear(&mut p, &format!("{t}.ctc"), s, v, &mut rng);
            init_linear(&mut p, &format!("{t}.ib"), s, v, &mut rng);
        }
        init_linear(&mut p, "enc.ctc", s, v, &mut rng);
        p.insert("pred.embed".into(), Tensor::randn(&[v, s], 1.0, &mut rng));
        init_lstm(&mut p, "pred.lstm", s, s, &mut rng);
        init_cb_params(&mut p, "joint.enc_cb", &cfg.cb(), &mut rng)?;
        init_cb_params(&mut p, "joint.pred_cb", &cfg.cb(), &mut rng)?;
        init_linear(&mut p, "joint.enc", s, cfg.joint, &mut rng);
        init_matrix(&mut p, "joint.pred", s, cfg.joint, &mut rng);
        init_linear(&mut p, "joint.out", cfg.joint, v, &mut rng);
        Ok(Model { cfg, params: p })
    }

    /// Sets every biasing value projection to zero, which turns all biasing
    /// blocks into the identity.
    pub fn zero_value_projections(&mut self) {
        for name in value_projection_names(&self.cfg) {
            if let Some(t) = self.params.get_mut(&name) {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checkpoint with the config under `meta.model` and parameters in the
    /// `params` group.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let cfg = serde_json::to_value(&self.cfg).map_err(|e| Error::Data(e.to_string()))?;
        let mut ck = Checkpoint::new(serde_json::json!({ "model": cfg }));
        ck.groups.insert("params".into(), self.params.clone());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
            .map_err(|e| Error::Data(format!("checkpoint model config: {e}")))?;
        let params = ck.group("params")?.clone();
        let reference = Model::new(cfg.clone(), 0)?;
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Data(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Data(format!("checkpoint lacks parameter `{name}`"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Data("checkpoint has unexpected parameters".into()));
        }
        Ok(Model { cfg, params })
    }
}

fn init_norm(p: &mut ParamStore, prefix: &str, width: usize) {
    p.insert(format!("{prefix}.g"), Tensor::full(&[1, width], 1.0));
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[1, width]));
}

fn norm(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param_from(p, &format!("{prefix}.g"))?;
    let bias = g.param_from(p, &format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias)
}

/// Forward-pass switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Skip every biasing block (`h' = h`), giving the plain network.
    pub bypass_cb: bool,
    /// Build the biasing-loss heads.
    pub ib_heads: bool,
}

/// One tap's outputs.
#[derive(Clone, Debug)]
pub struct TapOutput {
    pub layer: usize,
    pub raw: Var,
    pub fused: Var,
    pub attention: Option<Attention>,
    /// Log-posteriors of the raw-state head (intermediate CTC).
    pub raw_logp: Var,
    /// Log-posteriors of the fused-state head (biasing loss).
    pub fused_logp: Option<Var>,
}

/// Encoder outputs for one utterance.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub frames: usize,
    pub taps: Vec<TapOutput>,
    /// Normalised final states.
    pub last: Var,
    /// Final states after the encoder-side joiner biasing block.
    pub last_fused: Var,
    pub ctc_logp: Var,
}

/// Stacks `factor` consecutive frames, repeating the last frame to fill the
/// final group.
pub fn stack_frames(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (t, d) = x.require_matrix("stack_frames")?;
    if factor == 1 {
        return Ok(x.clone());
    }
    if t == 0 {
        return Err(Error::Contract("empty feature sequence".into()));
    }
    let out_t = t.div_ceil(factor);
    let mut data = Vec::with_capacity(out_t * d * factor);
    for o in 0..out_t {
        for j in 0..factor {
            data.extend_from_slice(x.row((o * factor + j).min(t - 1)));
        }
    }
    Tensor::new(vec![out_t, d * factor], data)
}

/// Sinusoidal absolute position table, `frames × width`.
pub fn positional_encoding(frames: usize, width: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[frames, width]);
    for t in 0..frames {
        let row = pe.row_mut(t);
        for i in 0..width {
            let pair = (i / 2) as f64 * 2.0;
            let angle = t as f64 / 10000f64.powf(pair / width as f64);
            row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn self_attention(g: &mut Graph, p: &ParamStore, prefix: &str, heads: usize, x: Var) -> Result<Var> {
    let s = g.value(x).cols();
    let q = linear(g, p, &format!("{prefix}.q"), x)?;
    let k = linear(g, p, &format!("{prefix}.k"), x)?;
    let v = linear(g, p, &format!("{prefix}.v"), x)?;
    let dh = s / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice(q, 1, lo, hi)?, g.slice(k, 1, lo, hi)?, g.slice(v, 1, lo, hi)?)
        };
        let a = g.matmul_t(qh, kh)?;
        let a = g.scale(a, scale);
        let a = g.softmax(a);
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, p, &format!("{prefix}.o"), cat)
}

/// One block: pre-norm self-attention and ReLU feed-forward layers, each
/// with a residual connection, then a closing layer norm.
fn encoder_block(g: &mut Graph, p: &ParamStore, n: usize, heads: usize, x: Var) -> Result<Var> {
    let b = format!("enc.l{n}");
    let y = norm(g, p, &format!("{b}.ln1"), x)?;
    let y = self_attention(g, p, &b, heads, y)?;
    let x = g.add(x, y)?;
    let y = norm(g, p, &format!("{b}.ln2"), x)?;
    let y = linear(g, p, &format!("{b}.ff1"), y)?;
    let y = g.relu(y);
    let y = linear(g, p, &format!("{b}.ff2"), y)?;
    let x = g.add(x, y)?;
    norm(g, p, &format!("{b}.ln3"), x)
}

fn head_logp(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let z = linear(g, p, prefix, x)?;
    Ok(g.log_softmax(z))
}

fn maybe_cb(g: &mut Graph, p: &ParamStore, prefix: &str, heads: usize, h: Var, ctx: Var, opts: ForwardOptions) -> Result<(Var, Option<Attention>)> {
    if opts.bypass_cb {
        return Ok((h, None));
    }
    let a = cb_attend(g, p, prefix, heads, h, ctx)?;
    Ok((a.fused, Some(a)))
}

/// Encodes one utterance's `T × D` features against the context embeddings
/// `ctx`.
pub fn encode(g: &mut Graph, model: &Model, ctx: Var, x: &Tensor, opts: ForwardOptions) -> Result<EncoderOutput> {
    let cfg = &model.cfg;
    let p = &model.params;
    if x.cols() != cfg.feature_dim {
        return Err(Error::dim("encode", format!("features {:?} vs feature_dim {}", x.shape(), cfg.feature_dim)));
    }
    let stacked = stack_frames(x, cfg.subsample)?;
    let frames = stacked.rows();
    let xin = g.constant(stacked);
    let h = linear(g, p, "enc.in", xin)?;
    let pe = g.constant(positional_encoding(frames, cfg.width));
    let mut h = g.add(h, pe)?;

    let taps = cfg.sorted_taps();
    let mut outs = Vec::with_capacity(taps.len());
    for n in 1..=cfg.layers {
        h = encoder_block(g, p, n, cfg.heads, h)?;
        if taps.contains(&n) {
            let t = tap_prefix(n);
            let (fused, attention) = maybe_cb(g, p, &format!("{t}.cb"), cfg.cb_heads, h, ctx, opts)?;
            let raw_n = norm(g, p, "enc.ln_out", h)?;
            let raw_logp = head_logp(g, p, &format!("{t}.ctc"), raw_n)?;
            let fused_logp = if opts.ib_heads {
                let f = norm(g, p, "enc.ln_out", fused)?;
                Some(head_logp(g, p, &format!("{t}.ib"), f)?)
            } else {
                None
            };
            outs.push(TapOutput { layer: n, raw: h, fused, attention, raw_logp, fused_logp });
            if cfg.propagate_fused {
                h = fused;
            }
        }
    }
    let last = norm(g, p, "enc.ln_out", h)?;
    let ctc_logp = head_logp(g, p, "enc.ctc", last)?;
    let (last_fused, _) = maybe_cb(g, p, "joint.enc_cb", cfg.cb_heads, last, ctx, opts)?;
    Ok(EncoderOutput { frames, taps: outs, last, last_fused, ctc_logp })
}

/// Predictor states for inputs `[sos, y₁ … y_U]` after the predictor-side
/// biasing block: `(U+1) × S`.
pub fn predict(g: &mut Graph, model: &Model, ctx: Var, target: &[TokenId], opts: ForwardOptions) -> Result<Var> {
    let p = &model.params;
    if target.contains(&BLANK) {
        return Err(Error::Contract("predictor input contains the blank".into()));
    }
    let table = g.param_from(p, "pred.embed")?;
    let lstm = LstmVars::load(g, p, "pred.lstm")?;
    let mut inputs = Vec::with_capacity(target.len() + 1);
    inputs.push(SOS);
    inputs.extend_from_slice(target);
    let emb = g.gather_rows(table, &inputs)?;
    let zero = g.constant(Tensor::zeros(&[1, lstm.hidden()]));
    let (mut h, mut c) = (zero, zero);
    let mut states = Vec::with_capacity(inputs.len());
    for u in 0..inputs.len() {
        let x = g.slice(emb, 0, u, u + 1)?;
        (h, c) = lstm.step(g, x, h, c)?;
        states.push(h);
    }
    let hp = if states.len() == 1 { states[0] } else { g.concat(&states, 0)? };
    let (fused, _) = maybe_cb(g, p, "joint.pred_cb", model.cfg.cb_heads, hp, ctx, opts)?;
    Ok(fused)
}

/// Joiner logits for every (frame, label-position) pair: row `t·(U+1) + u`
/// holds `out(tanh(enc_t·We + b + pred_u·Wp))`.
pub fn join(g: &mut Graph, model: &Model, enc: Var, pred: Var) -> Result<Var> {
    let p = &model.params;
    let e = linear(g, p, "joint.enc", enc)?;
    let wp = g.param_from(p, "joint.pred")?;
    let q = g.matmul(pred, wp)?;
    let z = g.outer_add(e, q)?;
    let z = g.tanh(z);
    linear(g, p, "joint.out", z)
}

/// Every differentiable output of one utterance.
#[derive(Clone, Debug)]
pub struct UtteranceForward {
    pub encoder: EncoderOutput,
    /// `(T'·(U+1)) × V` joiner logits.
    pub lattice: Var,
}

/// Context embeddings of the batch's shared list.
pub fn context_embeddings(g: &mut Graph, model: &Model, list: &crate::datagen::BiasList) -> Result<Var> {
    encode_bias_list_graph(g, &model.params, list)
}

pub fn forward_utterance(
    g: &mut Graph,
    model: &Model,
    ctx: Var,
    x: &Tensor,
    target: &[TokenId],
    opts: ForwardOptions,
) -> Result<UtteranceForward> {
    let encoder = encode(g, model, ctx, x, opts)?;
    let pred = predict(g, model, ctx, target, opts)?;
    let lattice = join(g, model, encoder.last_fused, pred)?;
    Ok(UtteranceForward { encoder, lattice })
}
