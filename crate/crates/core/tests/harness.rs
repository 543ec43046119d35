use ctxbias_core::datagen::{distractor_pool, synth_corpus, Corpus};
use ctxbias_core::harness::{
    decode_test_set, read_curves, read_nbest, read_references, score, score_files, train_run, write_nbest,
    write_references, ExperimentConfig, Preset, Trainer,
};
use ctxbias_core::Error;

fn small(preset: Preset) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(preset);
    cfg.data.train_utts = 12;
    cfg.data.test_utts = 3;
    cfg.model.width = 16;
    cfg.model.ffn = 16;
    cfg.model.joint = 16;
    cfg.model.context_embed = 8;
    cfg.train.batch = 4;
    cfg.train.epochs = 2;
    cfg.decode.beam = 3;
    cfg
}

fn corpus(cfg: &ExperimentConfig) -> Corpus {
    synth_corpus(&cfg.data, cfg.seed).unwrap()
}

#[test]
fn resumed_training_is_bit_identical() {
    let cfg = small(Preset::Ib);
    let c = corpus(&cfg);
    let (straight, curves) = train_run(&cfg, &c.train, None, |_| {}).unwrap();
    assert_eq!(curves.len(), 6);

    let dir = tempfile::tempdir().unwrap();
    let half = ExperimentConfig { train: ctxbias_core::harness::TrainConfig { max_steps: Some(2), ..cfg.train.clone() }, ..cfg.clone() };
    train_run(&half, &c.train, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(read_curves(&dir.path().join("curves.jsonl")).unwrap().len(), 2);
    let (resumed, rest) = train_run(&cfg, &c.train, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(rest, curves[2..]);
    assert_eq!(resumed.params, straight.params);
    assert_eq!(read_curves(&dir.path().join("curves.jsonl")).unwrap(), curves);
}

#[test]
fn non_finite_loss_stops_with_divergence() {
    let cfg = small(Preset::Ib);
    let mut c = corpus(&cfg);
    for u in &mut c.train {
        u.features.data_mut()[0] = f64::NAN;
    }
    let mut t = Trainer::new(&cfg, &c.train).unwrap();
    match t.step() {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(t.step_count(), 0);
}

#[test]
fn decoded_files_rescore_identically() {
    let cfg = small(Preset::IbJoint);
    let c = corpus(&cfg);
    let pool = distractor_pool(&c.lexicon);
    let (model, _) = train_run(&cfg, &c.train, None, |_| {}).unwrap();
    let decoded = decode_test_set(&model, &c.vocab, &c.test, &pool, 10, &cfg, &cfg.decoder()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (n, r) = (dir.path().join("nbest.tsv"), dir.path().join("refs.tsv"));
    write_nbest(&n, &decoded).unwrap();
    write_references(&r, &decoded).unwrap();
    assert_eq!(score_files(&n, &r).unwrap(), score(&decoded));
    let best = read_nbest(&n).unwrap();
    let refs = read_references(&r).unwrap();
    assert_eq!(best.len(), decoded.len());
    for ((d, (id, words)), (rid, reference, bias)) in decoded.iter().zip(&best).zip(&refs) {
        assert_eq!((&d.id, &d.id), (id, rid));
        assert_eq!(words.as_slice(), d.best_words());
        assert_eq!(reference, &d.reference);
        assert_eq!(bias, &d.bias_words);
        assert!(d.nbest.iter().all(|h| h.score_ctc.is_some()));
    }
}
