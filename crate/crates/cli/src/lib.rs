//! `tpr`: train, evaluate, ablate, report FLOPs and dump gate maps.

pub mod commands;
pub mod config;

pub use config::{resolve, ConfigError, RunConfig};

/// 2 for configuration problems, 3 for everything else.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.chain().any(|c| c.downcast_ref::<ConfigError>().is_some()) {
        2
    } else {
        3
    }
}
