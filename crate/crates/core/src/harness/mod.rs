//! Optimiser, experiment configuration, training loop and evaluation.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod optim;
pub mod train;

pub use config::{EvalConfig, ExperimentConfig, Preset, TrainConfig};
pub use eval::{
    decode_test_set, eval_utterances, evaluate, score, format_table, read_nbest, read_references, score_files, test_bias_list, write_nbest,
    write_references, DecodedUtterance, ReportRow,
};
pub use experiment::{
    ablate, decode_and_score, load_model, nbest_path, references_path, run_experiment, write_report, ABLATION_TAPS,
};
pub use optim::{adam_step, lr_schedule, AdamConfig, OptimState};
pub use train::{read_curves, train_run, CurvePoint, Trainer};
