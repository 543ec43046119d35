//! End-to-end runs: train, decode every bias size, write reports; and the
//! tap-layer ablation.

use std::fs;
use std::path::{Path, PathBuf};

use crate::datagen::{BiasPhrase, Corpus};
use crate::error::{Error, Result};
use crate::transducer_model::{Checkpoint, Model};

use super::config::{ExperimentConfig, Preset};
use super::eval::{evaluate, format_table, score_files, write_nbest, write_references, ReportRow};
use super::train::{train_run, CurvePoint, CHECKPOINT_FILE};

pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

pub fn nbest_path(run: &Path, m: usize) -> PathBuf {
    run.join(format!("nbest_M{m}.tsv"))
}

pub fn references_path(run: &Path, m: usize) -> PathBuf {
    run.join(format!("refs_M{m}.tsv"))
}

/// Loads the model of a finished run.
pub fn load_model(run: &Path) -> Result<Model> {
    Model::from_checkpoint(&Checkpoint::load(&run.join(CHECKPOINT_FILE))?)
}

/// Decodes the test set at every configured bias size, writes N-best and
/// reference files under `run`, and returns the rows rescored from those
/// files.
pub fn decode_and_score(
    model: &Model,
    corpus: &Corpus,
    pool: &[BiasPhrase],
    cfg: &ExperimentConfig,
    run: Option<&Path>,
) -> Result<Vec<ReportRow>> {
    let results = evaluate(model, &corpus.vocab, &corpus.test, pool, cfg)?;
    let mut rows = Vec::with_capacity(results.len());
    for (row, decoded) in results {
        if let Some(dir) = run {
            let (n, r) = (nbest_path(dir, row.m), references_path(dir, row.m));
            write_nbest(&n, &decoded)?;
            write_references(&r, &decoded)?;
            if score_files(&n, &r)? != row.breakdown {
                return Err(Error::Evaluation(format!("M={} scores differ after reading back", row.m)));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Writes the table and the raw counts.
pub fn write_report(dir: &Path, rows: &[(String, Vec<ReportRow>)]) -> Result<()> {
    let table = dir.join(REPORT_FILE);
    fs::write(&table, format_table(rows)).map_err(|e| Error::io(&table, e))?;
    let json = dir.join(REPORT_JSON);
    let value: serde_json::Value = rows
        .iter()
        .map(|(name, r)| (name.clone(), serde_json::to_value(r).unwrap()))
        .collect::<serde_json::Map<_, _>>()
        .into();
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

/// Trains `cfg` and evaluates it; with `out`, everything lands there.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    pool: &[BiasPhrase],
    out: Option<&Path>,
    progress: impl FnMut(&CurvePoint),
) -> Result<(Model, Vec<ReportRow>)> {
    let (model, _) = train_run(cfg, &corpus.train, out, progress)?;
    let rows = decode_and_score(&model, corpus, pool, cfg, out)?;
    if let Some(dir) = out {
        write_report(dir, &[(cfg.preset.to_string(), rows.clone())])?;
    }
    Ok((model, rows))
}

/// Tap-layer sets compared by [`ablate`].
pub const ABLATION_TAPS: [&[usize]; 3] = [&[3], &[2, 4], &[1, 2, 3, 4, 5]];

fn taps_label(taps: &[usize]) -> String {
    let k: Vec<String> = taps.iter().map(|t| t.to_string()).collect();
    format!("K={{{}}}", k.join(","))
}

/// Trains the `ib` preset once per tap set and reports each, then decodes
/// the `{2,4}` model jointly for the joint-versus-transducer comparison.
/// Runs land in `out/K_…` subdirectories.
pub fn ablate(
    base: &ExperimentConfig,
    corpus: &Corpus,
    pool: &[BiasPhrase],
    out: Option<&Path>,
    mut progress: impl FnMut(&str, &CurvePoint),
) -> Result<Vec<(String, Vec<ReportRow>)>> {
    let mut table = Vec::new();
    let mut reference: Option<(ExperimentConfig, Model)> = None;
    for taps in ABLATION_TAPS {
        let mut cfg = base.clone();
        cfg.apply_preset(Preset::Ib);
        cfg.model.taps = taps.to_vec();
        let label = taps_label(taps);
        let dir = out.map(|d| d.join(label.replace(['{', '}', '='], "").replace(',', "_")));
        let (model, rows) = run_experiment(&cfg, corpus, pool, dir.as_deref(), |p| progress(&label, p))?;
        table.push((format!("ib {label}"), rows));
        if taps == [2, 4] {
            reference = Some((cfg, model));
        }
    }
    if let Some((mut cfg, model)) = reference {
        cfg.apply_preset(Preset::IbJoint);
        let rows = decode_and_score(&model, corpus, pool, &cfg, None)?;
        table.push(("ib-joint K={2,4}".to_string(), rows));
    }
    if let Some(dir) = out {
        write_report(dir, &table)?;
    }
    Ok(table)
}
