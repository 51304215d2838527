//! Error classification shared across the crate.
//!
//! Every fallible subsystem defines its own error enum; this module maps
//! them onto a small set of classes so the command-line layer can report
//! distinct exit codes per failure family.

/// Broad failure family, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad run configuration: unknown endpoint, unresolvable profile, invalid flags.
    Config,
    /// Source data could not be ingested (missing files, malformed records).
    Ingestion,
    /// Network-level failure talking to a model endpoint.
    Transport,
    /// Stored or constructed data violates an integrity contract.
    Integrity,
    /// Caller violated an operation precondition.
    Validation,
    /// Anything else (I/O on outputs, internal errors).
    Other,
}

impl ErrorClass {
    /// Process exit code for this class. Success is 0; generic failure is 1.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Ingestion => 3,
            ErrorClass::Transport => 4,
            ErrorClass::Integrity => 5,
            ErrorClass::Validation => 6,
            ErrorClass::Other => 1,
        }
    }
}

/// Implemented by every subsystem error so the CLI can classify it.
pub trait Classify {
    fn class(&self) -> ErrorClass;
}
