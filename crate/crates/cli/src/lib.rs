//! Command implementations behind the `semc` binary.

pub mod args;
pub mod experiments;
pub mod inspect;
pub mod plot;
pub mod run;

use std::fmt;

use semc::SemcError;

/// Invalid invocation or configuration; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let usage = err.chain().any(|cause| {
        cause.is::<UsageError>()
            || matches!(
                cause.downcast_ref::<SemcError>(),
                Some(SemcError::Config(_))
            )
    });
    if usage {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}
