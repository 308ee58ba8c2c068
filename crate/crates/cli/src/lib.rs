//! Command-line driver: configuration, stage orchestration and run reports.

pub mod config;
pub mod pipeline;

use conjoint_core::Error;

/// Exit codes: 2 validation, 3 sampler failure, 4 sign-safety, 5 I/O.
/// Code 1 is reserved for a completed pipeline whose quality gates failed.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Coding(_) | Error::Contract(_) | Error::Design(_) | Error::Data(_) | Error::Csv(_) | Error::Json(_) => 2,
        Error::Fit(_) => 3,
        Error::SignSafety { .. } => 4,
        Error::Io(_) => 5,
    }
}
