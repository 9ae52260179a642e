//! Run failures with stable exit codes and a JSON rendering.

use keldysh_core::error::Error as CoreError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Io,
    Schema,
    Resource,
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    /// Set for Fock-cutoff failures.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suggested_cutoff: Option<usize>,
}

impl CliError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into(), suggested_cutoff: None }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Io, message)
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Schema, message)
    }

    pub fn resource(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Resource, message)
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Numerical, message)
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Io => 1,
            ErrorKind::Schema => 2,
            ErrorKind::Resource => 3,
            ErrorKind::Numerical => 4,
        }
    }

    /// `{"error": {...}, "exit_code": n}` on one line.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            error: &'a CliError,
            exit_code: i32,
        }
        serde_json::to_string(&Report { error: self, exit_code: self.exit_code() })
            .expect("error report serializes")
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let message = e.to_string();
        match e {
            CoreError::Shape(_)
            | CoreError::Validation(_)
            | CoreError::Lookup { .. }
            | CoreError::Precondition(_)
            | CoreError::Domain(_) => Self::schema(message),
            CoreError::Resource(_) => Self::resource(message),
            CoreError::Cutoff { suggested, .. } => {
                Self { suggested_cutoff: Some(suggested), ..Self::numerical(message) }
            }
            CoreError::DegenerateKernel { .. } | CoreError::Numerical(_) => Self::numerical(message),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}
