use std::fmt;
use std::path::Path;

pub const OK: u8 = 0;
pub const INTERNAL: u8 = 1;
pub const CONFIG: u8 = 2;
pub const IO: u8 = 3;
pub const DIVERGED: u8 = 4;
pub const MISMATCH: u8 = 5;
pub const GRADCHECK: u8 = 6;

/// A message plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(CONFIG, message)
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self::new(IO, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn code_for(err: &linknet::Error) -> u8 {
    use linknet::Error::*;
    match err {
        Config { .. } | Invalid(_) => CONFIG,
        Io(_) | Dataset { .. } | Json(_) => IO,
        Diverged(_) | NonFinite(_) => DIVERGED,
        Mismatch(_) | VersionMismatch { .. } | MissingTensor(_) | TensorShape { .. } => MISMATCH,
        Shape { .. } | BadShape { .. } | NonScalarLoss(_) => INTERNAL,
    }
}

impl From<linknet::Error> for Failure {
    fn from(err: linknet::Error) -> Self {
        Self::new(code_for(&err), err.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Adds the path to a library error without changing its exit code.
pub trait Context<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> Context<T> for linknet::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| Failure::new(code_for(&e), format!("{}: {e}", path.display())))
    }
}
