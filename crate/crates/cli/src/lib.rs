//! Experiment driver: corpus generation, codec and model training,
//! resynthesis and evaluation, all keyed by one run configuration.

pub mod commands;
pub mod config;
pub mod lock;

use std::fmt;

pub use config::RunConfig;

/// A failure caused by the caller's input rather than by this program.
#[derive(Debug)]
pub struct UserError(pub String);

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

/// Exit status for a failed command: bad input, missing or corrupt files and
/// I/O problems are the user's; shape or numeric breakdowns are ours.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use resynth_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UserError>() || cause.is::<std::io::Error>() {
            return EXIT_USER;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::DimensionMismatch { .. } | E::NonFinite(_) | E::OutOfRange { .. } => EXIT_INTERNAL,
                _ => EXIT_USER,
            };
        }
    }
    EXIT_INTERNAL
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_cause() {
        let user: anyhow::Error = UserError("bad".into()).into();
        assert_eq!(exit_code(&user.context("while loading")), EXIT_USER);
        let missing = resynth_core::Error::UnsupportedFormat("stereo".into());
        assert_eq!(exit_code(&missing.into()), EXIT_USER);
        let nan = resynth_core::Error::NonFinite("loss");
        assert_eq!(exit_code(&nan.into()), EXIT_INTERNAL);
        assert_eq!(exit_code(&anyhow::anyhow!("unexpected")), EXIT_INTERNAL);
    }
}
