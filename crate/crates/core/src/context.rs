//! Context encoder (bias phrases to fixed-size embeddings) and intermediate
//! biasing targets.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{BiasList, TokenId, DUMMY};
use crate::error::{Error, Result};
use crate::numerics::layers::{init_linear, init_lstm, linear, LstmVars};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

const LAYERS: usize = 2;

/// Shape of the context encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEncoderConfig {
    pub vocab: usize,
    /// Token embedding width E.
    pub embed: usize,
    /// Output width S; each recurrent direction has S/2 units.
    pub width: usize,
}

impl ContextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!("context width {} must be even and positive", self.width)));
        }
        if self.embed == 0 || self.vocab == 0 {
            return Err(Error::Config("context embed and vocab sizes must be positive".into()));
        }
        Ok(())
    }
}

fn lstm_prefix(layer: usize, dir: &str) -> String {
    format!("ctx.l{layer}.{dir}")
}

/// Adds `ctx.*` parameters to `store`.
pub fn init_context_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &ContextEncoderConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let half = cfg.width / 2;
    store.insert("ctx.embed".into(), Tensor::randn(&[cfg.vocab, cfg.embed], 1.0, rng));
    for layer in 0..LAYERS {
        let input = if layer == 0 { cfg.embed } else { cfg.width };
        for dir in ["fw", "bw"] {
            init_lstm(store, &lstm_prefix(layer, dir), input, half, rng);
        }
    }
    init_linear(store, "ctx.proj", cfg.width, cfg.width, rng);
    Ok(())
}

/// Runs every padded phrase of `list` through the two-layer bidirectional
/// LSTM over all `l_max` positions, concatenates the forward state after the
/// last position with the backward state after the first, and projects to S.
/// Returns the `(M+1) × S` embedding matrix, row 0 for `<no_bias>`.
pub fn encode_bias_list_graph(g: &mut Graph, store: &ParamStore, list: &BiasList) -> Result<Var> {
    let table = g.param_from(store, "ctx.embed")?;
    let vocab = g.value(table).rows();
    let n = list.len();
    let l_max = list.l_max();
    let padded: Vec<Vec<TokenId>> = (0..n).map(|i| list.padded(i)).collect();
    if let Some(&bad) = padded.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::Data(format!("bias phrase token {bad} outside a vocabulary of {vocab}")));
    }

    let mut inputs: Vec<Var> = Vec::with_capacity(l_max);
    for pos in 0..l_max {
        let ids: Vec<TokenId> = padded.iter().map(|p| p[pos]).collect();
        inputs.push(g.gather_rows(table, &ids)?);
    }

    let mut fw_last = None;
    let mut bw_first = None;
    for layer in 0..LAYERS {
        let fw = LstmVars::load(g, store, &lstm_prefix(layer, "fw"))?;
        let bw = LstmVars::load(g, store, &lstm_prefix(layer, "bw"))?;
        let zero = g.constant(Tensor::zeros(&[n, fw.hidden()]));

        let mut fw_out = Vec::with_capacity(l_max);
        let (mut h, mut c) = (zero, zero);
        for &x in &inputs {
            (h, c) = fw.step(g, x, h, c)?;
            fw_out.push(h);
        }
        let mut bw_out = vec![zero; l_max];
        let (mut h, mut c) = (zero, zero);
        for pos in (0..l_max).rev() {
            (h, c) = bw.step(g, inputs[pos], h, c)?;
            bw_out[pos] = h;
        }
        fw_last = Some(fw_out[l_max - 1]);
        bw_first = Some(bw_out[0]);
        if layer + 1 < LAYERS {
            inputs = (0..l_max)
                .map(|pos| g.concat(&[fw_out[pos], bw_out[pos]], 1))
                .collect::<Result<_>>()?;
        }
    }
    let fin = g.concat(&[fw_last.unwrap(), bw_first.unwrap()], 1)?;
    linear(g, store, "ctx.proj", fin)
}

/// Evaluation wrapper of [`encode_bias_list_graph`].
pub fn encode_bias_list(store: &ParamStore, list: &BiasList) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = encode_bias_list_graph(&mut g, store, list)?;
    Ok(g.value(v).clone())
}

/// Keeps tokens inside `covered` verbatim and replaces every other token by
/// the dummy label, one for one.
pub fn ib_target(transcript: &[TokenId], covered: &[Range<usize>]) -> Result<Vec<TokenId>> {
    let mut sorted: Vec<&Range<usize>> = covered.iter().collect();
    sorted.sort_by_key(|r| r.start);
    for w in sorted.windows(2) {
        if w[0].end > w[1].start {
            return Err(Error::Data(format!("overlapping bias spans {:?} and {:?}", w[0], w[1])));
        }
    }
    let mut out = vec![DUMMY; transcript.len()];
    for r in sorted {
        if r.start > r.end || r.end > transcript.len() {
            return Err(Error::Data(format!(
                "bias span {r:?} outside a transcript of {} tokens",
                transcript.len()
            )));
        }
        out[r.clone()].copy_from_slice(&transcript[r.clone()]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{BiasPhrase, Vocab, NO_BIAS, SEP};
    use crate::numerics::param_grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phrase(tokens: &[TokenId]) -> BiasPhrase {
        BiasPhrase::new(vec![format!("{tokens:?}")], tokens.to_vec())
    }

    #[test]
    fn paper_example_keeps_only_the_bias_word() {
        let vocab = Vocab::new(["fauchelevent", "thought", "i", "am", "lost"]).unwrap();
        let ids: Vec<TokenId> = ["fauchelevent", "thought", "i", "am", "lost"]
            .iter()
            .map(|w| vocab.id(w).unwrap())
            .collect();
        let out = ib_target(&ids, &[0..1]).unwrap();
        assert_eq!(out, vec![ids[0], DUMMY, DUMMY, DUMMY, DUMMY]);
    }

    #[test]
    fn target_rules() {
        let t = [7, 8, 9];
        assert_eq!(ib_target(&t, &[]).unwrap(), vec![DUMMY; 3]);
        assert_eq!(ib_target(&t, &[1..3]).unwrap(), vec![DUMMY, 8, 9]);
        assert_eq!(ib_target(&t, &[0..3]).unwrap(), t.to_vec());
        assert_eq!(ib_target(&t, &[2..3, 0..1]).unwrap(), vec![7, DUMMY, 9]);
        assert!(matches!(ib_target(&t, &[0..2, 1..3]), Err(Error::Data(_))));
        assert!(matches!(ib_target(&t, &[2..4]), Err(Error::Data(_))));
        let once = ib_target(&t, &[1..2]).unwrap();
        assert_eq!(ib_target(&once, &[1..2]).unwrap(), once);
    }

    fn cfg() -> ContextEncoderConfig {
        ContextEncoderConfig { vocab: 12, embed: 3, width: 4 }
    }

    #[test]
    fn zero_parameters_give_zero_embeddings() {
        let mut store = ParamStore::new();
        init_context_params(&mut store, &cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for t in store.values_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let list = BiasList::from_phrases([phrase(&[7, 8]), phrase(&[9])], 4).unwrap();
        let e = encode_bias_list(&store, &list).unwrap();
        assert_eq!(e.shape(), &[3, 4]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_and_identical_rows() {
        let mut store = ParamStore::new();
        init_context_params(&mut store, &cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut list = BiasList::from_phrases([phrase(&[7, SEP, 8])], 5).unwrap();
        let e = encode_bias_list(&store, &list).unwrap();
        assert_eq!(e.shape(), &[2, 4]);
        // A duplicate under other words still encodes identically.
        list.push(BiasPhrase::new(vec!["other".into()], vec![9])).unwrap();
        let e2 = encode_bias_list(&store, &list).unwrap();
        assert_eq!(e.row(1), e2.row(1));
        assert_eq!(e.row(0), e2.row(0));
        let bad = BiasList::from_phrases([phrase(&[40])], 5).unwrap();
        assert!(matches!(encode_bias_list(&store, &bad), Err(Error::Data(_))));
    }

    #[test]
    fn one_token_phrase_matches_hand_recurrence() {
        // One unit per direction, l_max = 1, embedding width 1.
        let c = ContextEncoderConfig { vocab: 8, embed: 1, width: 2 };
        let mut store = ParamStore::new();
        init_context_params(&mut store, &c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut emb = Tensor::zeros(&[8, 1]);
        emb.row_mut(NO_BIAS)[0] = -0.4;
        emb.row_mut(7)[0] = 0.9;
        store.insert("ctx.embed".into(), emb);
        let w = |a: [f64; 4]| Tensor::from_rows(&[a]).unwrap();
        let cells = [
            ("ctx.l0.fw", [0.5, -0.3, 0.8, 0.1], [0.1, 0.0, 0.2, -0.1]),
            ("ctx.l0.bw", [-0.2, 0.6, 0.4, 0.7], [0.0, 0.5, -0.3, 0.2]),
        ];
        for (p, wi, b) in cells {
            store.insert(format!("{p}.w_ih"), w(wi));
            store.insert(format!("{p}.w_hh"), w([0.3, 0.3, 0.3, 0.3]));
            store.insert(format!("{p}.b"), w(b));
        }
        let l1 = [
            ("ctx.l1.fw", [[0.7, 0.2, -0.5, 0.3], [-0.1, 0.4, 0.6, 0.2]], [0.0, 1.0, 0.0, 0.0]),
            ("ctx.l1.bw", [[0.2, -0.6, 0.3, 0.5], [0.9, 0.1, -0.4, 0.0]], [0.1, 0.0, 0.0, 0.3]),
        ];
        for (p, wi, b) in l1 {
            store.insert(format!("{p}.w_ih"), Tensor::from_rows(&wi).unwrap());
            store.insert(format!("{p}.w_hh"), w([0.3, 0.3, 0.3, 0.3]));
            store.insert(format!("{p}.b"), w(b));
        }
        store.insert("ctx.proj.w".into(), Tensor::from_rows(&[[1.0, 0.5], [-2.0, 0.25]]).unwrap());
        store.insert("ctx.proj.b".into(), Tensor::row_vector(&[0.1, -0.1]));

        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        // From zero state, one step: c = i·g, h = o·tanh(c).
        let cell = |x: &[f64], wi: &[[f64; 4]], b: [f64; 4]| {
            let z: Vec<f64> = (0..4)
                .map(|k| x.iter().zip(wi).map(|(xi, row)| xi * row[k]).sum::<f64>() + b[k])
                .collect();
            let c = s(z[0]) * z[2].tanh();
            s(z[3]) * c.tanh()
        };
        let embed = |x: f64| {
            let f0 = cell(&[x], &[[0.5, -0.3, 0.8, 0.1]], [0.1, 0.0, 0.2, -0.1]);
            let b0 = cell(&[x], &[[-0.2, 0.6, 0.4, 0.7]], [0.0, 0.5, -0.3, 0.2]);
            let f1 = cell(&[f0, b0], &[[0.7, 0.2, -0.5, 0.3], [-0.1, 0.4, 0.6, 0.2]], [0.0, 1.0, 0.0, 0.0]);
            let b1 = cell(&[f0, b0], &[[0.2, -0.6, 0.3, 0.5], [0.9, 0.1, -0.4, 0.0]], [0.1, 0.0, 0.0, 0.3]);
            [f1 * 1.0 + b1 * -2.0 + 0.1, f1 * 0.5 + b1 * 0.25 - 0.1]
        };

        let list = BiasList::from_phrases([phrase(&[7])], 1).unwrap();
        let e = encode_bias_list(&store, &list).unwrap();
        for (row, x) in [(0, -0.4), (1, 0.9)] {
            let want = embed(x);
            for k in 0..2 {
                assert!((e.at(row, k) - want[k]).abs() < 1e-14, "row {row}: {} vs {}", e.at(row, k), want[k]);
            }
        }
        assert_eq!(list.padded(0), vec![NO_BIAS]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        init_context_params(&mut store, &cfg(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let list = BiasList::from_phrases([phrase(&[7, 8]), phrase(&[9])], 3).unwrap();
        let errs = param_grad_check(
            |g, s| {
                let e = encode_bias_list_graph(g, s, &list)?;
                let w = Tensor::new(vec![3, 4], (0..12).map(|i| 0.3 + 0.17 * ((i * 7) % 11) as f64).collect())?;
                let m = g.mask(e, w)?;
                Ok(g.sum(m))
            },
            &store,
            1e-6,
            None,
        )
        .unwrap();
        for (name, err) in errs {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
