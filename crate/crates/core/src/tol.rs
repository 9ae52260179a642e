//! Tolerances used across the crate and by the acceptance suite.

/// Hermiticity of tagged operators relative to their max entry.
pub const HERMITIAN_REL: f64 = 1e-12;
/// Trace and Hermiticity of density operators.
pub const DENSITY_TRACE: f64 = 1e-10;
pub const DENSITY_HERMITIAN: f64 = 1e-10;
/// Smallest eigenvalue allowed for a density operator.
pub const DENSITY_MIN_EIG: f64 = -1e-8;
/// `exp(a) exp(-a) = I` and unitarity of `exp` of anti-Hermitian input.
pub const EXPM: f64 = 1e-10;
/// Exact symmetry requirement on contour covariances entering Takagi.
pub const SYMMETRY: f64 = 1e-12;
/// Default relative clip for Takagi and eigenvalue factorizations.
pub const EIGEN_CLIP: f64 = 1e-10;
/// Absolute floor on `|B Bᵀ - Σ|`.
pub const TAKAGI_ABS: f64 = 1e-8;
/// Relative residual of the retarded kernel outside `range(Re c)`.
pub const KERNEL_RANGE: f64 = 1e-6;
/// Default blow-up guard for trajectory operators.
pub const BLOW_UP: f64 = 1e6;
/// Fraction of flagged trajectories above which a run is unreliable.
pub const MAX_FLAGGED_FRACTION: f64 = 0.01;
/// Hermiticity of deterministic propagator output.
pub const PROPAGATOR_HERMITIAN: f64 = 1e-6;
/// Default thermal/displacement tail mass allowed beyond a Fock cutoff.
pub const FOCK_TAIL: f64 = 1e-8;
/// Hard cap on the joint Hilbert space dimension of the oracle.
pub const ORACLE_DIM_CAP: usize = 4096;
/// Largest even moment order handled by pairing enumeration.
pub const MAX_PAIRING_ORDER: usize = 12;
/// Agreement between the two truncated Wick series.
pub const WICK_IDENTITY: f64 = 1e-10;
/// Number of standard errors for statistical agreement of noise moments.
pub const NOISE_SIGMAS: f64 = 5.0;
/// Number of standard errors for ensemble agreement.
pub const ENSEMBLE_SIGMAS: f64 = 3.0;
/// Trace-distance bound between SVNE ensembles and the oracle.
pub const ORACLE_TRACE_DISTANCE: f64 = 0.02;
/// Deterministic propagator vs closed-form dephasing.
pub const FERIALDI_DEPHASING: f64 = 1e-4;
/// Relative error of the measured mean-field autocorrelation.
pub const SEMICLASSICAL_REL: f64 = 0.05;
/// Uncertainty relation slack for Gaussian mode states.
pub const UNCERTAINTY: f64 = 1e-10;
