use std::fmt;

/// Process-level error classification. Usage errors cover bad flags and
/// invalid configuration caught before any work starts; runtime errors cover
/// everything after (I/O, training failures, incompatible checkpoints).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Runtime(msg) => write!(f, "error: {msg}"),
        }
    }
}

/// Library failures that surface after configuration has been validated are
/// runtime failures by default; call sites that treat validation-stage
/// errors as usage errors map them explicitly with [`usage`].
impl From<mld::Error> for CliError {
    fn from(e: mld::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub type CliResult<T> = Result<T, CliError>;
