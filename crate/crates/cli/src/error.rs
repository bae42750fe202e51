use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated at byte {offset} while reading {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("invalid record at byte {offset}: {reason}")]
    Invalid { offset: u64, reason: String },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error(transparent)]
    Core(#[from] acl_core::Error),
}

/// Everything the CLI can fail with. [`CliError::exit_code`] separates bad input
/// (1) from failures during a run (2).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Core(#[from] acl_core::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use acl_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Format { .. } => 1,
            CliError::Core(E::Config(_) | E::MemoryBudgetTooSmall { .. } | E::ClassOverlap(_) | E::NoTasks) => 1,
            CliError::Core(_) | CliError::Runtime(_) => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>) -> impl FnOnce(FormatError) -> CliError {
        let path = path.into();
        move |source| CliError::Format { path, source }
    }
}
