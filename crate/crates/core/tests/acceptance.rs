//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p ctxbias-core --test acceptance`.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxbias_core::biasing::{cb_attend, init_cb_params, CbConfig};
use ctxbias_core::context::{encode_bias_list_graph, ib_target, init_context_params, ContextEncoderConfig};
use ctxbias_core::datagen::{
    covered_spans, distractor_pool, synth_corpus, BiasList, BiasPhrase, TokenId, Utterance, Vocab, BLANK, DUMMY,
    FIRST_LEXICAL, SEP,
};
use ctxbias_core::decoding::{beam_search, emit_mask, rnnt_beam_search, DecodeConfig};
use ctxbias_core::harness::{evaluate, train_run, ExperimentConfig, Preset, Trainer};
use ctxbias_core::losses::{ctc_loss, rnnt_loss, LossWeights};
use ctxbias_core::metrics::{align, format_report, ErrorBreakdown};
use ctxbias_core::numerics::{grad_check, graph_grad_check, param_grad_check};
use ctxbias_core::transducer_model::{batch_objective, BatchItem, Model, ModelConfig, Transcriber};
use ctxbias_core::{Graph, ParamStore, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn log_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn random_logits(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.5, rng)
}

fn random_target(u: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    (0..u).map(|_| rng.random_range(1..vocab)).collect()
}

/// Sum over all `V^T` frame paths that collapse to `target`.
fn ctc_enumerate(logp: &Tensor, target: &[TokenId]) -> f64 {
    let (t_len, v) = (logp.rows(), logp.cols());
    let mut terms = Vec::new();
    for code in 0..v.pow(t_len as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..t_len)
            .map(|_| {
                let k = c % v;
                c /= v;
                k
            })
            .collect();
        let mut out = Vec::new();
        let mut prev = None;
        for &k in &path {
            if k != BLANK && prev != Some(k) {
                out.push(k);
            }
            prev = Some(k);
        }
        if out == target {
            terms.push(path.iter().enumerate().map(|(t, &k)| logp.at(t, k)).sum());
        }
    }
    log_sum(terms)
}

/// Sum over every interleaving of `T` blanks and `U` labels that ends in a
/// blank, walking the `(t, u)` lattice of normalised logits.
fn rnnt_enumerate(logits: &Tensor, target: &[TokenId]) -> f64 {
    let (t_len, u1, v) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let lp = logits.reshape(&[t_len * u1, v]).unwrap().log_softmax(1).unwrap();
    let slots = t_len + target.len() - 1;
    let mut terms = Vec::new();
    for mask in 0u32..(1 << slots) {
        if mask.count_ones() as usize != target.len() {
            continue;
        }
        let (mut t, mut u, mut s) = (0, 0, 0.0);
        for i in 0..slots {
            if mask & (1 << i) != 0 {
                s += lp.at(t * u1 + u, target[u]);
                u += 1;
            } else {
                s += lp.at(t * u1 + u, BLANK);
                t += 1;
            }
        }
        s += lp.at(t * u1 + u, BLANK);
        terms.push(s);
    }
    log_sum(terms)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut ctc_cases, mut rnnt_cases, mut worst) = (0, 0, 0.0f64);
    while ctc_cases < 150 {
        let t = rng.random_range(1..=5);
        let v = rng.random_range(2..=3);
        let u = rng.random_range(0..=3);
        let logp = random_logits(&[t, v], &mut rng).log_softmax(1).unwrap();
        let target = random_target(u, v, &mut rng);
        let oracle = ctc_enumerate(&logp, &target);
        match ctc_loss(&logp, &target) {
            Ok((loss, _)) => {
                worst = worst.max((-loss - oracle).abs());
                ctc_cases += 1;
            }
            Err(_) if oracle == f64::NEG_INFINITY => {}
            Err(e) => return Err(format!("ctc rejected a feasible case: {e}")),
        }
    }
    while rnnt_cases < 150 {
        let t = rng.random_range(1..=5);
        let v = rng.random_range(2..=3);
        let u = rng.random_range(0..=3);
        let target = random_target(u, v, &mut rng);
        let logits = random_logits(&[t, u + 1, v], &mut rng);
        let (loss, _) = rnnt_loss(&logits, &target).map_err(|e| e.to_string())?;
        worst = worst.max((-loss - rnnt_enumerate(&logits, &target)).abs());
        rnnt_cases += 1;
    }
    check(
        worst < 1e-8,
        format!("{ctc_cases} ctc + {rnnt_cases} transducer cases, max |Δ log p| = {worst:.1e}"),
    )
}

fn weights(rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|i| 0.2 + 0.13 * ((i * 5) % 9) as f64).collect()).unwrap()
}

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        vocab: FIRST_LEXICAL + 3,
        width: 8,
        layers: 2,
        heads: 2,
        ffn: 8,
        taps: vec![1],
        subsample: 1,
        context_embed: 4,
        cb_heads: 2,
        cb_output_projection: true,
        propagate_fused: true,
        joint: 6,
    }
}

fn utterance(frames: usize, dim: usize, transcript: Vec<TokenId>, seed: u64) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = transcript.iter().filter(|&&t| t == SEP).count() + 1;
    Utterance {
        id: format!("u{seed}"),
        features: Tensor::randn(&[frames, dim], 1.0, &mut rng),
        words: (0..words).map(|i| format!("w{i}")).collect(),
        transcript,
        rare_words: Vec::new(),
    }
}

fn phrase(tokens: &[TokenId]) -> BiasPhrase {
    BiasPhrase::new(vec![format!("{tokens:?}")], tokens.to_vec())
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut report = Vec::new();

    let logp = random_logits(&[5, 4], &mut rng).log_softmax(1).unwrap();
    report.push(("ctc", grad_check(|x| ctc_loss(x, &[1, 2, 2]), &logp, 1e-6)));

    let logits = random_logits(&[4, 3, 4], &mut rng);
    report.push(("transducer", grad_check(|x| rnnt_loss(x, &[3, 1]), &logits, 1e-6)));

    let cb = CbConfig { width: 6, heads: 2, output_projection: true };
    let mut store = ParamStore::new();
    init_cb_params(&mut store, "cb", &cb, &mut rng).unwrap();
    let h = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let ctx = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let attend = |g: &mut Graph, s: &ParamStore, h: Tensor| {
        let (hv, cv) = (g.input(h), g.constant(ctx.clone()));
        let a = cb_attend(g, s, "cb", 2, hv, cv)?;
        let m = g.mask(a.fused, weights(4, 6))?;
        Ok(g.sum(m))
    };
    let params = param_grad_check(|g, s| attend(g, s, h.clone()), &store, 1e-6, None);
    report.push(("cb attention (params)", params.map(|r| r.into_iter().map(|(_, e)| e).fold(0.0, f64::max))));
    report.push((
        "cb attention (states)",
        graph_grad_check(
            |g, x| {
                let cv = g.constant(ctx.clone());
                let a = cb_attend(g, &store, "cb", 2, x, cv)?;
                let m = g.mask(a.fused, weights(4, 6))?;
                Ok(g.sum(m))
            },
            &h,
            1e-6,
        ),
    ));

    let ce = ContextEncoderConfig { vocab: FIRST_LEXICAL + 3, embed: 3, width: 4 };
    let mut store = ParamStore::new();
    init_context_params(&mut store, &ce, &mut rng).unwrap();
    let list = BiasList::from_phrases([phrase(&[6, 7]), phrase(&[8])], 3).unwrap();
    let enc = param_grad_check(
        |g, s| {
            let e = encode_bias_list_graph(g, s, &list)?;
            let m = g.mask(e, weights(3, 4))?;
            Ok(g.sum(m))
        },
        &store,
        1e-6,
        None,
    );
    report.push(("context encoder", enc.map(|r| r.into_iter().map(|(_, e)| e).fold(0.0, f64::max))));

    let model = Model::new(tiny_model_cfg(), 5).unwrap();
    let u1 = utterance(6, 3, vec![6, SEP, 7], 1);
    let u2 = utterance(5, 3, vec![8, 7], 2);
    let list = BiasList::from_phrases([phrase(&[6]), phrase(&[8, 7])], 4).unwrap();
    let s1 = covered_spans(&u1.transcript, &list);
    let s2 = covered_spans(&u2.transcript, &list);
    let w = LossWeights { ib: 0.5, ..LossWeights::default() };
    let full = param_grad_check(
        |g, s| {
            let m = Model { params: s.clone(), ..model.clone() };
            let batch = [BatchItem { utt: &u1, covered: &s1 }, BatchItem { utt: &u2, covered: &s2 }];
            Ok(batch_objective(g, &m, &list, &batch, &w, false)?.0)
        },
        &model.params,
        1e-5,
        None,
    );
    report.push(("tiny model N=2 S=8", full.map(|r| r.into_iter().map(|(_, e)| e).fold(0.0, f64::max))));

    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, r) in report {
        let e = r.map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}"));
    }
    check(worst < 1e-3, format!("max rel err {worst:.1e} [{}]", parts.join(", ")))
}

fn criterion_3() -> Outcome {
    let words = ["fauchelevent", "thought", "i", "am", "lost"];
    let vocab = Vocab::new(words).map_err(|e| e.to_string())?;
    let mut ids: Vec<TokenId> = Vec::new();
    for w in words {
        if !ids.is_empty() {
            ids.push(SEP);
        }
        ids.push(vocab.id(w).unwrap());
    }
    let list = BiasList::from_phrases([BiasPhrase::new(vec![words[0].into()], vec![ids[0]])], 10).unwrap();
    let target = ib_target(&ids, &covered_spans(&ids, &list)).map_err(|e| e.to_string())?;
    let separators_dummy = ids.iter().zip(&target).all(|(&i, &t)| i != SEP || t == DUMMY);
    let text: Vec<&str> = ids
        .iter()
        .zip(&target)
        .filter(|(&i, _)| i != SEP)
        .map(|(_, &t)| if t == DUMMY { "#" } else { vocab.token(t).unwrap() })
        .collect();
    let text = text.join(" ");
    check(
        text == "fauchelevent # # # #" && separators_dummy && target.len() == ids.len(),
        format!("\"{text}\", separators dummy: {separators_dummy}"),
    )
}

/// Desk-scale configuration shared by criteria 4 to 6.
fn desk_config(preset: Preset) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(preset);
    cfg.model.width = 32;
    cfg.model.ffn = 64;
    cfg.model.joint = 32;
    cfg.model.context_embed = 32;
    cfg.train.batch = 4;
    cfg.train.epochs = 20;
    cfg.train.base_lr = 2e-3;
    cfg.eval.bias_sizes = vec![10, 100];
    cfg.eval.max_utts = Some(200);
    cfg
}

struct DeskResults {
    baseline: Vec<ErrorBreakdown>,
    ib: Vec<ErrorBreakdown>,
    ib_joint: Vec<ErrorBreakdown>,
    bitwise: bool,
    seconds: f64,
}

fn desk_experiment() -> Result<DeskResults, String> {
    let start = Instant::now();
    let base = desk_config(Preset::Baseline);
    let corpus = synth_corpus(&base.data, base.seed).map_err(|e| e.to_string())?;
    let pool = distractor_pool(&corpus.lexicon);
    let run = |cfg: &ExperimentConfig| -> Result<(Model, Vec<ErrorBreakdown>), String> {
        let (model, _) = train_run(cfg, &corpus.train, None, |_| {}).map_err(|e| e.to_string())?;
        let rows = evaluate(&model, &corpus.vocab, &corpus.test, &pool, cfg).map_err(|e| e.to_string())?;
        Ok((model, rows.into_iter().map(|(r, _)| r.breakdown).collect()))
    };
    let (_, baseline) = run(&base)?;
    let ib_cfg = desk_config(Preset::Ib);
    let (model, ib) = run(&ib_cfg)?;
    let joint_cfg = ExperimentConfig { preset: Preset::IbJoint, ..ib_cfg.clone() };
    let ib_joint = evaluate(&model, &corpus.vocab, &corpus.test, &pool, &joint_cfg)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(r, _)| r.breakdown)
        .collect();

    let mask = emit_mask(corpus.vocab.len());
    let mut bitwise = true;
    for (i, u) in corpus.test.iter().take(10).enumerate() {
        let list = ctxbias_core::harness::test_bias_list(u, i, &pool, 100, ib_cfg.train.l_max, ib_cfg.seed)
            .map_err(|e| e.to_string())?;
        let tr = Transcriber::new(&model, &list, &u.features, false).map_err(|e| e.to_string())?;
        let dec = DecodeConfig::default().with_mu_ctc(0.0);
        let joint = beam_search(&tr, Some(tr.ctc_logp()), &mask, &dec).map_err(|e| e.to_string())?;
        let plain = rnnt_beam_search(&tr, &mask, &dec).map_err(|e| e.to_string())?;
        bitwise &= joint == plain;
    }
    Ok(DeskResults { baseline, ib, ib_joint, bitwise, seconds: start.elapsed().as_secs_f64() })
}

fn pct(x: Option<f64>) -> f64 {
    x.unwrap_or(f64::NAN)
}

fn criterion_4(r: &DeskResults) -> Outcome {
    let (b, i) = (&r.baseline[0], &r.ib[0]);
    let (bb, ib) = (pct(b.b_wer()), pct(i.b_wer()));
    let (bw, iw) = (pct(b.wer()), pct(i.wer()));
    check(
        ib <= 0.7 * bb && iw <= bw && r.seconds < 1800.0,
        format!(
            "M=10 baseline {} vs ib {}; B-WER ratio {:.2}, {:.0} s",
            format_report(b),
            format_report(i),
            ib / bb,
            r.seconds
        ),
    )
}

fn criterion_5(r: &DeskResults) -> Outcome {
    let (m10, m100) = (pct(r.ib[0].b_wer()), pct(r.ib[1].b_wer()));
    check(m10 <= m100, format!("ib B-WER M=10 {m10:.2} vs M=100 {m100:.2}"))
}

fn criterion_6(r: &DeskResults) -> Outcome {
    let (j, i) = (pct(r.ib_joint[1].u_wer()), pct(r.ib[1].u_wer()));
    check(
        j <= i && r.bitwise,
        format!("M=100 U-WER ib-joint {j:.2} vs ib {i:.2}; μ_ctc=0 bitwise identical: {}", r.bitwise),
    )
}

fn criterion_7() -> Outcome {
    let cfg = ModelConfig {
        feature_dim: 4,
        vocab: FIRST_LEXICAL + 4,
        width: 8,
        layers: 3,
        taps: vec![1, 2],
        ..tiny_model_cfg()
    };
    let mut model = Model::new(cfg, 9).map_err(|e| e.to_string())?;
    model.zero_value_projections();
    let u1 = utterance(8, 4, vec![6, 7, SEP, 9], 3);
    let u2 = utterance(7, 4, vec![8, SEP, 6], 4);
    let list = BiasList::from_phrases([phrase(&[6, 7]), phrase(&[8]), phrase(&[9, 9])], 4).unwrap();
    let s1 = covered_spans(&u1.transcript, &list);
    let s2 = covered_spans(&u2.transcript, &list);
    let w = LossWeights { ib: 0.0, ..LossWeights::default() };
    let batch = [BatchItem { utt: &u1, covered: &s1 }, BatchItem { utt: &u2, covered: &s2 }];
    let objective = |bypass: bool| {
        let mut g = Graph::new();
        batch_objective(&mut g, &model, &list, &batch, &w, bypass).map(|(_, parts)| parts)
    };
    let (with_cb, without) = (objective(false).map_err(|e| e.to_string())?, objective(true).map_err(|e| e.to_string())?);
    let losses_equal = with_cb == without;

    let mask = emit_mask(model.cfg.vocab);
    let dec = DecodeConfig { beam: 4, ..DecodeConfig::default() };
    let mut decodes_equal = true;
    for u in [&u1, &u2] {
        let a = Transcriber::new(&model, &list, &u.features, false).map_err(|e| e.to_string())?;
        let b = Transcriber::new(&model, &list, &u.features, true).map_err(|e| e.to_string())?;
        decodes_equal &= a.ctc_logp() == b.ctc_logp();
        let ja = beam_search(&a, Some(a.ctc_logp()), &mask, &dec).map_err(|e| e.to_string())?;
        let jb = beam_search(&b, Some(b.ctc_logp()), &mask, &dec).map_err(|e| e.to_string())?;
        decodes_equal &= ja == jb;
    }
    check(
        losses_equal && decodes_equal,
        format!("total {} vs {}; decodes equal: {decodes_equal}", with_cb.total, without.total),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let lexicon: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.random_range(0..8);
        (0..n).map(|_| lexicon[rng.random_range(0..lexicon.len())].clone()).collect()
    };
    let mut exact = true;
    for _ in 0..1000 {
        let (r, h) = (sentence(&mut rng), sentence(&mut rng));
        let bias: HashSet<String> = lexicon.iter().filter(|_| rng.random_bool(0.3)).cloned().collect();
        let mut b = ErrorBreakdown::default();
        b.add_utterance(&r, &h, &bias);
        exact &= b.total().errors() == b.bias.errors() + b.unbias.errors();
        exact &= b.total().errors() as usize == align(&r, &h).distance();
        let mut none = ErrorBreakdown::default();
        none.add_utterance(&r, &h, &HashSet::new());
        exact &= none.u_wer() == none.wer() && none.bias.errors() == 0;
    }
    let table = ErrorBreakdown {
        bias: ctxbias_core::metrics::EditCounts { sub: 15830, del: 0, ins: 0, words: 100000 },
        unbias: ctxbias_core::metrics::EditCounts { sub: 17658, del: 0, ins: 0, words: 810000 },
    };
    let text = format_report(&table);
    check(exact && text == "3.68 (2.18/15.83)", format!("1000 triples decompose: {exact}; report \"{text}\""))
}

fn criterion_9() -> Outcome {
    let mut cfg = ExperimentConfig::preset(Preset::Ib);
    cfg.data.train_utts = 10;
    cfg.data.test_utts = 1;
    cfg.train.batch = 10;
    cfg.train.warmup = 100;
    cfg.train.epochs = 500;
    cfg.train.max_steps = Some(500);
    let corpus = synth_corpus(&cfg.data, 21).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(&cfg, &corpus.train).map_err(|e| e.to_string())?;
    let first = trainer.step().map_err(|e| e.to_string())?;
    let initial = first.loss.total;
    let mut reached = None;
    while !trainer.finished() {
        let p = trainer.step().map_err(|e| e.to_string())?;
        if p.loss.total < 0.2 * initial {
            reached = Some((p.step, p.loss.total));
            break;
        }
    }
    match reached {
        Some((step, loss)) => Ok(format!("initial {initial:.2}, {loss:.2} at step {step}")),
        None => Err(format!("initial {initial:.2}, never below 20% in 500 steps")),
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} {status}: {name}: {detail}");
    };
    report(1, "loss oracles", criterion_1());
    report(2, "gradient checks", criterion_2());
    report(3, "biasing target", criterion_3());
    match desk_experiment() {
        Ok(r) => {
            report(4, "contextualization", criterion_4(&r));
            report(5, "distractor trend", criterion_5(&r));
            report(6, "joint decoding", criterion_6(&r));
        }
        Err(e) => {
            for (n, name) in [(4, "contextualization"), (5, "distractor trend"), (6, "joint decoding")] {
                report(n, name, Err(e.clone()));
            }
        }
    }
    report(7, "baseline reduction", criterion_7());
    report(8, "metric decomposition", criterion_8());
    report(9, "overfit", criterion_9());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
