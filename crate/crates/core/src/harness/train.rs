//! The training loop.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_training_bias, Utterance};
use crate::error::{Error, Result};
use crate::numerics::Graph;
use crate::transducer_model::{batch_objective, value_projection_names, BatchItem, Checkpoint, LossBreakdown, Model};

use super::config::ExperimentConfig;
use super::optim::{adam_step, clip_global_norm, lr_schedule, OptimState};

/// File names inside a run directory.
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const CURVES_FILE: &str = "curves.jsonl";

const EPOCH_STREAM: u64 = 1 << 63;

/// Logged values of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

/// Optimisation state of one run. Every step draws its batch and bias list
/// from random streams keyed by `(seed, step)`, so a resumed run continues
/// exactly as an uninterrupted one.
pub struct Trainer<'a> {
    cfg: ExperimentConfig,
    train: &'a [Utterance],
    model: Model,
    optim: OptimState,
    frozen: Vec<String>,
    bypass: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &ExperimentConfig, train: &'a [Utterance]) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("no training utterances".into()));
        }
        let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
        let frozen = if cfg.preset.biasing() {
            Vec::new()
        } else {
            model.zero_value_projections();
            value_projection_names(&cfg.model)
        };
        let optim = OptimState::new(cfg.optim, &model.params);
        Ok(Trainer { cfg: cfg.clone(), train, model, optim, frozen, bypass: !cfg.preset.biasing() })
    }

    /// Restores a trainer from [`Trainer::checkpoint`] output.
    pub fn resume(cfg: &ExperimentConfig, train: &'a [Utterance], ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg, train)?;
        let model = Model::from_checkpoint(ck)?;
        if model.cfg != cfg.model {
            return Err(Error::Config("checkpoint model differs from the configuration".into()));
        }
        t.model = model;
        t.optim.step = ck.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Data("checkpoint lacks a step counter".into()))?;
        t.optim.m = ck.group("adam.m")?.clone();
        t.optim.v = ck.group("adam.v")?.clone();
        for (name, p) in &t.model.params {
            for moments in [&t.optim.m, &t.optim.v] {
                if moments.get(name).map(|m| m.shape()) != Some(p.shape()) {
                    return Err(Error::Data(format!("optimiser moments for `{name}` missing or misshapen")));
                }
            }
        }
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.optim.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.train.batch)
    }

    pub fn total_steps(&self) -> u64 {
        let full = (self.cfg.train.epochs * self.steps_per_epoch()) as u64;
        self.cfg.train.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn finished(&self) -> bool {
        self.optim.step >= self.total_steps()
    }

    fn batch_indices(&self, step: u64) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let epoch = step as usize / spe;
        let i = step as usize % spe;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(EPOCH_STREAM | epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let b = self.cfg.train.batch;
        (epoch, order[i * b..((i + 1) * b).min(order.len())].to_vec())
    }

    /// Loss and gradients of the next step's batch, without updating.
    fn evaluate(&self, step: u64) -> Result<(usize, LossBreakdown, crate::numerics::ParamStore)> {
        let (epoch, idx) = self.batch_indices(step);
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &self.train[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        let (list, spans) = sample_training_bias(&batch, self.cfg.train.l_max, &mut rng)?;
        let items: Vec<BatchItem> = batch
            .iter()
            .zip(&spans)
            .map(|(u, s)| BatchItem { utt: u, covered: s })
            .collect();
        let mut g = Graph::with_frozen(self.frozen.iter().cloned());
        let (loss, parts) = batch_objective(&mut g, &self.model, &list, &items, &self.cfg.loss, self.bypass)?;
        if let Some((term, value)) = parts.non_finite_term() {
            return Err(Error::Divergence { step, term: term.to_string(), value });
        }
        let grads = g.backward(loss)?.for_params(&self.model.params);
        Ok((epoch, parts, grads))
    }

    /// Runs one optimisation step.
    pub fn step(&mut self) -> Result<CurvePoint> {
        let step = self.optim.step;
        let (epoch, loss, mut grads) = self.evaluate(step)?;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.train.clip_norm.unwrap_or(f64::INFINITY));
        let lr = lr_schedule(step + 1, self.cfg.train.base_lr, self.cfg.train.warmup);
        let terms = format!(
            "ctc={} interctc={} ib={:?} transducer={}",
            loss.ctc, loss.interctc, loss.ib, loss.transducer
        );
        adam_step(&mut self.model.params, &grads, &mut self.optim, lr, &terms)?;
        Ok(CurvePoint { step: step + 1, epoch, lr, grad_norm, loss })
    }

    /// Model, optimiser moments and step counter.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        ck.meta["step"] = self.optim.step.into();
        ck.meta["preset"] = self.cfg.preset.name().into();
        ck.groups.insert("adam.m".into(), self.optim.m.clone());
        ck.groups.insert("adam.v".into(), self.optim.v.clone());
        Ok(ck)
    }
}

/// Trains to completion, writing the resolved config, per-step curves and
/// checkpoints under `out`. Resumes from an existing checkpoint there. On
/// divergence the last checkpoint written stays in place.
pub fn train_run(
    cfg: &ExperimentConfig,
    train: &[Utterance],
    out: Option<&Path>,
    mut progress: impl FnMut(&CurvePoint),
) -> Result<(Model, Vec<CurvePoint>)> {
    let mut trainer = match out.map(|d| d.join(CHECKPOINT_FILE)) {
        Some(p) if p.exists() => Trainer::resume(cfg, train, &Checkpoint::load(&p)?)?,
        _ => Trainer::new(cfg, train)?,
    };
    let mut curves_out = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            cfg.save(&dir.join(CONFIG_FILE))?;
            let path = dir.join(CURVES_FILE);
            if path.exists() {
                let done = trainer.step_count();
                let kept: Vec<CurvePoint> = read_curves(&path)?.into_iter().filter(|p| p.step <= done).collect();
                let mut text = String::new();
                for p in &kept {
                    text.push_str(&serde_json::to_string(p).map_err(|e| Error::Data(e.to_string()))?);
                    text.push('\n');
                }
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };
    let mut curves = Vec::new();
    let every = cfg.train.checkpoint_every;
    while !trainer.finished() {
        let point = trainer.step()?;
        progress(&point);
        if let Some((w, path)) = curves_out.as_mut() {
            let line = serde_json::to_string(&point).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            if every > 0 && point.step % every == 0 {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                trainer.checkpoint()?.save(&out.unwrap().join(CHECKPOINT_FILE))?;
            }
        }
        curves.push(point);
    }
    if let (Some((mut w, path)), Some(dir)) = (curves_out, out) {
        w.flush().map_err(|e| Error::io(&path, e))?;
        trainer.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok((trainer.into_model(), curves))
}

/// Reads a curves file.
pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: path.to_path_buf(), line: n + 1, msg: e.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::synth_corpus;
    use crate::harness::config::Preset;

    fn small(preset: Preset) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(preset);
        cfg.data.train_utts = 12;
        cfg.data.test_utts = 2;
        cfg.model.width = 16;
        cfg.model.ffn = 16;
        cfg.model.joint = 16;
        cfg.model.context_embed = 8;
        cfg.train.batch = 4;
        cfg
    }

    #[test]
    fn frozen_zero_biasing_follows_the_bypassed_trajectory() {
        let cfg = small(Preset::Baseline);
        let corpus = synth_corpus(&cfg.data, 1).unwrap();
        let mut bypassed = Trainer::new(&cfg, &corpus.train).unwrap();
        let mut attended = Trainer::new(&cfg, &corpus.train).unwrap();
        attended.bypass = false;
        for _ in 0..3 {
            assert_eq!(bypassed.step().unwrap(), attended.step().unwrap());
        }
        assert_eq!(bypassed.model().params, attended.model().params);
        for name in value_projection_names(&cfg.model) {
            assert!(attended.model().params[&name].data().iter().all(|&w| w == 0.0));
        }
    }
}
