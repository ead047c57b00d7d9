//! Command-line front end: configuration, commands and their artifacts.

pub mod commands;
pub mod config;

use sleepwake_core::Error;

/// Exit status for a failed command: 2 when an iterative method ran out of
/// budget, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let budget = err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<Error>(),
            Some(Error::NotConverged { .. } | Error::CalibrationNotConverged { .. })
        )
    });
    if budget {
        2
    } else {
        1
    }
}
