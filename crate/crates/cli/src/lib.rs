//! Command-line driver: data generation, the training modes, evaluation,
//! ablation grids and stripping, each reproducible from its resolved
//! config.

pub mod ablation;
pub mod commands;
pub mod config;

pub use commands::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_strip, cmd_train, Metrics, StripOutcome, TrainMode};
pub use config::{resolve, RunConfig};

/// Process exit code for a failed command: 2 for configuration and input
/// errors, 3 for failures while computing.
pub fn exit_code(err: &labelaux::Error) -> i32 {
    if err.is_user_error() {
        2
    } else {
        3
    }
}
