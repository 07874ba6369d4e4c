//! Command implementations behind the `advlab` binary, exposed as a
//! library so integration tests can drive them directly.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csv;
pub mod error;
pub mod plot;

pub use checkpoint::{load_checkpoint, save_checkpoint, save_model_checkpoint, CheckpointMeta, Seeds};
pub use commands::{cmd_attack, cmd_plot, cmd_probe, cmd_train, ProbeOptions};
pub use config::{AttackConfig, DatasetConfig, ExperimentConfig, ProbeConfig};
pub use error::CliError;
pub use plot::{emit_plot_data, moving_average, Figure};

/// Worker cap from ADVLAB_THREADS. All compute currently runs on one
/// worker; the variable is validated and clamped so configs stay portable.
pub fn worker_threads() -> usize {
    match std::env::var("ADVLAB_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                eprintln!("warning: ignoring invalid ADVLAB_THREADS={v}");
                1
            }
        },
        Err(_) => 1,
    }
}
