use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("unknown {kind} {index}")]
    Lookup { kind: &'static str, index: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("resource cap exceeded: {0}")]
    Resource(String),
    #[error("Fock cutoff too small: {detail} (suggested cutoff {suggested})")]
    Cutoff { detail: String, suggested: usize },
    #[error("retarded kernel outside the range of the Keldysh covariance (relative residual {residual:.3e})")]
    DegenerateKernel { residual: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
