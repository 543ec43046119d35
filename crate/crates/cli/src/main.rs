use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ctxbias_core::datagen::io::{read_corpus, write_corpus};
use ctxbias_core::datagen::{distractor_pool, synth_corpus, BiasPhrase, Corpus};
use ctxbias_core::decoding::DecodeConfig;
use ctxbias_core::harness::{
    ablate, decode_test_set, eval_utterances, format_table, load_model, nbest_path, references_path, score_files,
    train_run, write_nbest, write_references, write_report, CurvePoint, ExperimentConfig, Preset, ReportRow,
};

#[derive(Parser)]
#[command(name = "ctxbias", version, about = "Contextual biasing transducer with intermediate biasing loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a corpus and its distractor pool.
    GenData(GenData),
    /// Train a model; resumes if the run directory has a checkpoint.
    Train(Train),
    /// Decode the test set with bias lists of one size.
    Decode(Decode),
    /// Score a run at several bias sizes, decoding where needed.
    Score(Score),
    /// Compare tap-layer sets, and joint against transducer-only decoding.
    Ablate(Ablate),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML); preset defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, preset: Option<Preset>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::preset(preset.unwrap_or(Preset::Ib)),
        };
        if let Some(p) = preset {
            cfg.apply_preset(p);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train_utts: Option<usize>,
    #[arg(long)]
    test_utts: Option<usize>,
}

#[derive(Args)]
struct Schedule {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Evaluate only the first N test utterances.
    #[arg(long)]
    max_utts: Option<usize>,
}

impl Schedule {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if self.max_steps.is_some() {
            cfg.train.max_steps = self.max_steps;
        }
        if self.max_utts.is_some() {
            cfg.eval.max_utts = self.max_utts;
        }
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    schedule: Schedule,
}

#[derive(Args)]
struct Decode {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "bias-size")]
    bias_size: usize,
    /// Joint CTC / transducer decoding.
    #[arg(long)]
    joint: bool,
    #[arg(long)]
    beam: Option<usize>,
    /// CTC weight of joint decoding; implies --joint.
    #[arg(long = "mu-ctc")]
    mu_ctc: Option<f64>,
    /// N-best output; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reference output; defaults to the run directory.
    #[arg(long)]
    refs: Option<PathBuf>,
    #[arg(long)]
    max_utts: Option<usize>,
}

#[derive(Args)]
struct Score {
    #[arg(long)]
    run: PathBuf,
    /// Corpus to decode from when N-best files are missing.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 10, 50, 100])]
    sizes: Vec<usize>,
    #[arg(long)]
    max_utts: Option<usize>,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    schedule: Schedule,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
}

fn load_data(dir: &Path, cfg: &ExperimentConfig) -> Result<(Corpus, Vec<BiasPhrase>)> {
    let (corpus, pool) = read_corpus(dir).with_context(|| format!("reading corpus from {}", dir.display()))?;
    if corpus.vocab.len() != cfg.model.vocab {
        bail!("corpus vocabulary has {} tokens, model expects {}", corpus.vocab.len(), cfg.model.vocab);
    }
    let dim = corpus.train.first().map_or(cfg.model.feature_dim, |u| u.features.cols());
    if dim != cfg.model.feature_dim {
        bail!("corpus features have dimension {dim}, model expects {}", cfg.model.feature_dim);
    }
    Ok((corpus, pool))
}

fn progress(label: &str) -> impl FnMut(&CurvePoint) + '_ {
    move |p| {
        if p.step % 50 == 0 {
            eprintln!("{label} step {} epoch {} lr {:.2e} loss {:.4}", p.step, p.epoch, p.lr, p.loss.total);
        }
    }
}

fn run_config(run: &Path) -> Result<ExperimentConfig> {
    let path = run.join(ctxbias_core::harness::train::CONFIG_FILE);
    Ok(ExperimentConfig::load(&path).with_context(|| format!("no run config at {}", path.display()))?)
}

fn gen_data(a: &GenData) -> Result<()> {
    let mut cfg = a.cfg.load(None)?;
    if let Some(n) = a.train_utts {
        cfg.data.train_utts = n;
    }
    if let Some(n) = a.test_utts {
        cfg.data.test_utts = n;
    }
    let corpus = synth_corpus(&cfg.data, cfg.seed)?;
    let pool = distractor_pool(&corpus.lexicon);
    write_corpus(&a.out, &corpus, &pool)?;
    println!(
        "wrote {} train / {} test utterances, {} distractors to {}",
        corpus.train.len(),
        corpus.test.len(),
        pool.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &Train) -> Result<()> {
    let mut cfg = a.cfg.load(a.preset)?;
    a.schedule.apply(&mut cfg);
    let (corpus, _) = load_data(&a.data, &cfg)?;
    let (_, curves) = train_run(&cfg, &corpus.train, Some(&a.out), progress(cfg.preset.name()))?;
    match curves.last() {
        Some(p) => println!("step {} total loss {:.4}", p.step, p.loss.total),
        None => println!("nothing to do: run already complete"),
    }
    Ok(())
}

fn decoder_for(cfg: &ExperimentConfig, joint: bool, beam: Option<usize>, mu_ctc: Option<f64>) -> DecodeConfig {
    let mut dec = cfg.decode;
    if let Some(b) = beam {
        dec.beam = b;
    }
    if joint || mu_ctc.is_some() || cfg.preset == Preset::IbJoint {
        dec.with_mu_ctc(mu_ctc.unwrap_or(dec.mu_ctc))
    } else {
        dec.with_mu_ctc(0.0)
    }
}

fn decode_to_files(
    run: &Path,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    pool: &[BiasPhrase],
    m: usize,
    dec: &DecodeConfig,
    nbest: &Path,
    refs: &Path,
) -> Result<()> {
    let model = load_model(run)?;
    let utts = eval_utterances(&corpus.test, cfg);
    let decoded = decode_test_set(&model, &corpus.vocab, utts, pool, m, cfg, dec)?;
    write_nbest(nbest, &decoded)?;
    write_references(refs, &decoded)?;
    Ok(())
}

fn decode(a: &Decode) -> Result<()> {
    let mut cfg = run_config(&a.run)?;
    if a.max_utts.is_some() {
        cfg.eval.max_utts = a.max_utts;
    }
    let dec = decoder_for(&cfg, a.joint, a.beam, a.mu_ctc);
    dec.validate()?;
    let (corpus, pool) = load_data(&a.data, &cfg)?;
    let nbest = a.out.clone().unwrap_or_else(|| nbest_path(&a.run, a.bias_size));
    let refs = a.refs.clone().unwrap_or_else(|| references_path(&a.run, a.bias_size));
    decode_to_files(&a.run, &cfg, &corpus, &pool, a.bias_size, &dec, &nbest, &refs)?;
    println!("wrote {} and {}", nbest.display(), refs.display());
    Ok(())
}

fn score(a: &Score) -> Result<()> {
    let mut cfg = run_config(&a.run)?;
    if a.max_utts.is_some() {
        cfg.eval.max_utts = a.max_utts;
    }
    let mut data = None;
    let mut rows = Vec::new();
    for &m in &a.sizes {
        let (nbest, refs) = (nbest_path(&a.run, m), references_path(&a.run, m));
        if !nbest.exists() || !refs.exists() {
            let Some(dir) = &a.data else {
                bail!("{} is missing; pass --data to decode it", nbest.display());
            };
            if data.is_none() {
                data = Some(load_data(dir, &cfg)?);
            }
            let (corpus, pool) = data.as_ref().unwrap();
            decode_to_files(&a.run, &cfg, corpus, pool, m, &cfg.decoder(), &nbest, &refs)?;
        }
        rows.push(ReportRow { m, breakdown: score_files(&nbest, &refs)? });
    }
    let table = vec![(cfg.preset.to_string(), rows)];
    write_report(&a.run, &table)?;
    print!("{}", format_table(&table));
    Ok(())
}

fn ablation(a: &Ablate) -> Result<()> {
    let mut cfg = a.cfg.load(Some(Preset::Ib))?;
    a.schedule.apply(&mut cfg);
    if let Some(s) = &a.sizes {
        cfg.eval.bias_sizes = s.clone();
    }
    let (corpus, pool) = load_data(&a.data, &cfg)?;
    let table = ablate(&cfg, &corpus, &pool, Some(&a.out), |label, p| progress(label)(p))?;
    print!("{}", format_table(&table));
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Decode(a) => decode(&a),
        Command::Score(a) => score(&a),
        Command::Ablate(a) => ablation(&a),
    }
}
