//! Configuration, on-disk formats and commands of the `stpf` driver.

pub mod commands;
pub mod config;
pub mod dataset;

pub use commands::{
    cmd_depth, cmd_eval, cmd_gen, cmd_reconstruct, cmd_train, load_model, read_report,
    read_train_log, EvalReport, ReconOptions, TrainOptions,
};
pub use config::{AugmentSettings, PipelineConfig};
pub use dataset::Manifest;

use stereopifu::Error;

/// Process exit code for an error: 2 configuration, 3 data, 4 numeric failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::NonFinite { .. } => 4,
        _ => 3,
    }
}
