use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctxbias_bench::{bias_list, default_model, log_probs};
use ctxbias_core::biasing::cb_attend_eval;
use ctxbias_core::context::encode_bias_list;
use ctxbias_core::decoding::{beam_search, emit_mask, DecodeConfig};
use ctxbias_core::losses::{ctc_loss, rnnt_loss};
use ctxbias_core::transducer_model::Transcriber;
use ctxbias_core::Tensor;

fn losses(c: &mut Criterion) {
    let target: Vec<usize> = (0..12).map(|i| 6 + (i * 5) % 24).collect();
    let ctc_in = log_probs(40, 30);
    c.bench_function("ctc_loss T=40 U=12 V=30", |b| b.iter(|| ctc_loss(&ctc_in, &target).unwrap()));
    let rnnt_in = log_probs(40 * 13, 30);
    c.bench_function("rnnt_loss T=40 U=12 V=30", |b| b.iter(|| rnnt_loss(&rnnt_in, &target).unwrap()));
}

fn biasing(c: &mut Criterion) {
    let model = default_model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = Tensor::randn(&[30, model.cfg.width], 1.0, &mut rng);
    let mut group = c.benchmark_group("biasing");
    for m in [10, 100] {
        let list = bias_list(m, model.cfg.vocab);
        group.bench_with_input(BenchmarkId::new("context_encoder", m), &list, |b, l| {
            b.iter(|| encode_bias_list(&model.params, l).unwrap())
        });
        let ctx = encode_bias_list(&model.params, &list).unwrap();
        group.bench_with_input(BenchmarkId::new("cb_attention", m), &ctx, |b, ctx| {
            b.iter(|| cb_attend_eval(&model.params, "joint.enc_cb", model.cfg.cb_heads, &h, ctx).unwrap())
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let model = default_model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[30, model.cfg.feature_dim], 1.0, &mut rng);
    let list = bias_list(10, model.cfg.vocab);
    let tr = Transcriber::new(&model, &list, &x, false).unwrap();
    let mask = emit_mask(model.cfg.vocab);
    let mut group = c.benchmark_group("beam_search");
    group.sample_size(10);
    group.bench_function("transducer k=10", |b| {
        b.iter(|| beam_search(&tr, None, &mask, &DecodeConfig::transducer_only(10)).unwrap())
    });
    group.bench_function("joint k=10", |b| {
        b.iter(|| beam_search(&tr, Some(tr.ctc_logp()), &mask, &DecodeConfig::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, losses, biasing, decoding);
criterion_main!(benches);
