//! Run configuration, artifact layout and the experiment pipelines:
//! data generation, codec and joint training, calibration, OOD shift,
//! ablations and rendering.

mod config;
mod eval;
mod pipeline;

pub use config::{DataConfig, EvalConfig, RolloutReadout, RunConfig, Seeds};
pub use eval::{
    confidence_at, evaluate, head_thresholds, rollout_confidence, summary_rows, write_csv, write_eval, CalibrationEval,
    Protocol, Rollout, SummaryRow,
};
pub use pipeline::{
    ablate_stage, eval_stage, evaluate_pair, gen_data, initial_pair, load_codec, ood_stage, parse_axes, render_stage,
    stage_dir, train_codec_stage, train_stage, write_provenance, Ablation, AblationArm, AblationKind, DataSummary,
    OodEval, OodRow, TrainedPair, CODEC_NAME, CONFIG_FILE, DENOISER_NAME, PROBE_NAME, SEEDS_FILE, TRAIN_LOG,
};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_ARTIFACT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING_ARTIFACT,
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}
