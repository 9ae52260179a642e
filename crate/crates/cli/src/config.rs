//! Run configuration: JSON schema, validation, and conversion into core types.
//!
//! Matrices are nested row arrays. Each entry is either a plain number or an
//! explicit complex value `{"re": x, "im": y}`.

use std::path::PathBuf;

use keldysh_core::bath::{BathMode, BathSpec, BathState, Beta, ModeMoments};
use keldysh_core::contour::TimeGrid;
use keldysh_core::linalg::{CMat, DensityOperator};
use keldysh_core::measurement::MeasurementSpec;
use keldysh_core::noise::{SamplerConfig, SamplingMethod};
use keldysh_core::oracle::FockConfig;
use keldysh_core::scalar::{cx, Cx};
use keldysh_core::svne::{ket, Equation};
use keldysh_core::system::{PreparationSpec, SystemSpec};
use keldysh_core::tol;
use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Svne,
    Twostate,
    Deterministic,
    Oracle,
    NoiseValidate,
    WickVerify,
    MeasureDemo,
    Compare,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Svne => "svne",
            Experiment::Twostate => "twostate",
            Experiment::Deterministic => "deterministic",
            Experiment::Oracle => "oracle",
            Experiment::NoiseValidate => "noise_validate",
            Experiment::WickVerify => "wick_verify",
            Experiment::MeasureDemo => "measure_demo",
            Experiment::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Entry {
    Real(f64),
    Complex { re: f64, im: f64 },
}

impl Entry {
    pub fn value(self) -> Cx<f64> {
        match self {
            Entry::Real(x) => cx(x, 0.0),
            Entry::Complex { re, im } => cx(re, im),
        }
    }
}

pub type MatrixConfig = Vec<Vec<Entry>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub system: SystemConfig,
    pub bath: BathConfig,
    pub grid: GridConfig,
    pub initial: InitialConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default = "default_n_traj")]
    pub n_traj: u64,
    #[serde(default)]
    pub base_seed: u64,
    /// Reported in declaration order; defaults to the upper triangle of `ρ`.
    #[serde(default)]
    pub observables: Vec<ObservableConfig>,
    /// Reference dynamics the primary result is compared against.
    #[serde(default)]
    pub references: Vec<Reference>,
    pub oracle: Option<OracleSection>,
    pub noise: Option<NoiseSection>,
    pub wick: Option<WickSection>,
    pub measurement: Option<MeasurementSection>,
    #[serde(default)]
    pub limits: Limits,
    pub output: Option<PathBuf>,
}

fn default_n_traj() -> u64 {
    1000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub h_s: MatrixConfig,
    pub couplings: Vec<CouplingConfig>,
    /// Preparation Hamiltonian for the correlated canonical initial state.
    pub preparation: Option<PreparationConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub label: Option<String>,
    pub matrix: MatrixConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreparationConfig {
    pub h_s_prime: MatrixConfig,
    pub b: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathConfig {
    pub modes: Vec<ModeConfig>,
    /// `coupling[α][k]`, one row per coupling channel.
    pub coupling: Vec<Vec<f64>>,
    pub state: BathStateConfig,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub omega: f64,
    #[serde(default = "one")]
    pub mass: f64,
}

fn one() -> f64 {
    1.0
}

/// Inverse temperature: a positive number or `"infinite"` for the vacuum.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BetaConfig {
    Finite(f64),
    Named(String),
}

impl BetaConfig {
    fn build(&self) -> Result<Beta<f64>, CliError> {
        match self {
            BetaConfig::Finite(b) => Ok(Beta::Finite(*b)),
            BetaConfig::Named(s) if s == "infinite" => Ok(Beta::Infinite),
            BetaConfig::Named(s) => Err(CliError::schema(format!("beta must be a number or \"infinite\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BathStateConfig {
    Thermal { beta: BetaConfig },
    Displaced { beta: BetaConfig, mean_x: Vec<f64>, mean_p: Vec<f64> },
    Gaussian { modes: Vec<MomentsConfig> },
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    #[serde(default)]
    pub mean_x: f64,
    #[serde(default)]
    pub mean_p: f64,
    pub var_x: f64,
    pub var_p: f64,
    #[serde(default)]
    pub cov_xp: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_max: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialConfig {
    Ket(Vec<Entry>),
    Density(MatrixConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethodConfig {
    #[default]
    ContourTakagi,
    RotatedFactorization,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default)]
    pub method: SamplerMethodConfig,
    #[serde(default = "default_clip")]
    pub eigen_clip: f64,
}

fn default_clip() -> f64 {
    tol::EIGEN_CLIP
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { method: SamplerMethodConfig::default(), eigen_clip: default_clip() }
    }
}

/// Trajectory equation for the `svne` experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormConfig {
    /// Shifted equation when the bath carries a mean field, plain otherwise.
    #[default]
    Auto,
    Plain,
    Shifted,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    #[serde(default = "default_blow_up")]
    pub blow_up: f64,
    #[serde(default)]
    pub form: FormConfig,
    /// `twostate` only: propagate two state vectors instead of `R`.
    #[serde(default)]
    pub state_vectors: bool,
}

fn default_blow_up() -> f64 {
    tol::BLOW_UP
}

impl Default for IntegratorSection {
    fn default() -> Self {
        Self { blow_up: default_blow_up(), form: FormConfig::default(), state_vectors: false }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableConfig {
    pub name: String,
    /// `Tr[O ρ]` for a full operator.
    pub matrix: Option<MatrixConfig>,
    /// `ρ_ij`.
    pub element: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Oracle,
    Deterministic,
    Analytic,
}

impl Reference {
    pub fn name(self) -> &'static str {
        match self {
            Reference::Oracle => "oracle",
            Reference::Deterministic => "deterministic",
            Reference::Analytic => "analytic",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub cutoffs: Vec<usize>,
    #[serde(default = "default_tail")]
    pub tail_tol: f64,
    /// Start from the canonical state of `system.preparation`.
    #[serde(default)]
    pub correlated: bool,
    /// Report the trace distance to a run at doubled cutoffs.
    #[serde(default = "yes")]
    pub check_cutoff: bool,
}

fn default_tail() -> f64 {
    tol::FOCK_TAIL
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Trajectories written to `noise.bin`.
    #[serde(default)]
    pub dump: u64,
    #[serde(default = "default_sigmas")]
    pub sigmas: f64,
}

fn default_sigmas() -> f64 {
    tol::NOISE_SIGMAS
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { dump: 0, sigmas: default_sigmas() }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WickSection {
    /// Highest order of the substitution check.
    #[serde(default = "default_m")]
    pub m_max: usize,
    /// Nodes of the exhaustive-check grid, spanning `check_t_max`.
    #[serde(default = "default_check_nodes")]
    pub check_nodes: usize,
    pub check_t_max: Option<f64>,
    /// Order of the sampled `R′` series on the main grid; omitted skips it.
    pub rprime_m_max: Option<usize>,
}

fn default_m() -> usize {
    2
}

fn default_check_nodes() -> usize {
    3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSection {
    pub sigma_x: Vec<f64>,
    pub sigma_p: Vec<f64>,
    pub n_outcomes: u64,
    #[serde(default)]
    pub restoration_outcomes: u64,
    #[serde(default = "default_per_outcome")]
    pub n_traj_per_outcome: u64,
}

fn default_per_outcome() -> u64 {
    100
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    #[serde(default = "default_max_traj")]
    pub max_traj: u64,
    /// Largest contour covariance (`2 · channels · nodes`) to factorize.
    #[serde(default = "default_max_noise_dim")]
    pub max_noise_dim: usize,
    #[serde(default = "default_max_oracle_dim")]
    pub max_oracle_dim: usize,
}

fn default_max_traj() -> u64 {
    100_000_000
}

fn default_max_noise_dim() -> usize {
    4096
}

fn default_max_oracle_dim() -> usize {
    tol::ORACLE_DIM_CAP
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_traj: default_max_traj(),
            max_noise_dim: default_max_noise_dim(),
            max_oracle_dim: default_max_oracle_dim(),
        }
    }
}

/// Named observable ready for evaluation.
#[derive(Debug, Clone)]
pub struct Observable {
    pub name: String,
    pub op: CMat<f64>,
}

/// Core objects built from a validated configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub system: SystemSpec<f64>,
    pub bath: BathSpec<f64>,
    pub grid: TimeGrid<f64>,
    pub initial: DensityOperator<f64>,
    pub sampler: SamplerConfig<f64>,
    pub observables: Vec<Observable>,
    pub preparation: Option<PreparationSpec<f64>>,
    pub fock: Option<FockConfig>,
    pub measurement: Option<MeasurementSpec<f64>>,
}

fn matrix_dims(name: &str, m: &MatrixConfig) -> Result<(usize, usize), CliError> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(CliError::schema(format!("{name} is empty")));
    }
    if let Some(r) = m.iter().position(|row| row.len() != cols) {
        return Err(CliError::schema(format!("{name}: row {r} has {} entries, row 0 has {cols}", m[r].len())));
    }
    Ok((rows, cols))
}

fn square(name: &str, m: &MatrixConfig, dim: usize) -> Result<(), CliError> {
    let shape = matrix_dims(name, m)?;
    if shape != (dim, dim) {
        return Err(CliError::schema(format!("{name} has shape {shape:?}, expected ({dim}, {dim})")));
    }
    Ok(())
}

fn build_matrix(m: &MatrixConfig) -> CMat<f64> {
    DMatrix::from_fn(m.len(), m[0].len(), |i, j| m[i][j].value())
}

fn finite(name: &str, values: &[f64]) -> Result<(), CliError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::schema(format!("{name} contains a non-finite value")));
    }
    Ok(())
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.:".contains(c))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::schema(format!("config: {e}")))
    }

    pub fn dim(&self) -> usize {
        self.system.h_s.len()
    }

    /// Structural checks run before anything is allocated.
    pub fn validate(&self) -> Result<(), CliError> {
        let dim = self.dim();
        square("system.h_s", &self.system.h_s, dim)?;
        if self.system.couplings.is_empty() {
            return Err(CliError::schema("system.couplings is empty"));
        }
        for (i, c) in self.system.couplings.iter().enumerate() {
            square(&format!("system.couplings[{i}]"), &c.matrix, dim)?;
        }
        if let Some(p) = &self.system.preparation {
            square("system.preparation.h_s_prime", &p.h_s_prime, dim)?;
        }
        let channels = self.system.couplings.len();
        let modes = self.bath.modes.len();
        if modes == 0 {
            return Err(CliError::schema("bath.modes is empty"));
        }
        if self.bath.coupling.len() != channels {
            return Err(CliError::schema(format!(
                "bath.coupling has {} rows for {channels} coupling channels",
                self.bath.coupling.len()
            )));
        }
        for (a, row) in self.bath.coupling.iter().enumerate() {
            if row.len() != modes {
                return Err(CliError::schema(format!("bath.coupling[{a}] has {} entries for {modes} modes", row.len())));
            }
            finite("bath.coupling", row)?;
        }
        match &self.initial {
            InitialConfig::Ket(v) if v.len() != dim => {
                return Err(CliError::schema(format!("initial.ket has {} entries for dimension {dim}", v.len())));
            }
            InitialConfig::Density(m) => square("initial.density", m, dim)?,
            _ => {}
        }
        if self.grid.n_steps == 0 || !(self.grid.t_max > 0.0) || !self.grid.t_max.is_finite() {
            return Err(CliError::schema("grid needs t_max > 0 and n_steps > 0"));
        }
        for (i, o) in self.observables.iter().enumerate() {
            if !valid_name(&o.name) {
                return Err(CliError::schema(format!("observables[{i}].name {:?} must be non-empty [A-Za-z0-9_.:-]", o.name)));
            }
            if self.observables[..i].iter().any(|p| p.name == o.name) {
                return Err(CliError::schema(format!("duplicate observable name {:?}", o.name)));
            }
            match (&o.matrix, o.element) {
                (Some(m), None) => square(&format!("observables[{i}].matrix"), m, dim)?,
                (None, Some([r, c])) if r < dim && c < dim => {}
                (None, Some(e)) => {
                    return Err(CliError::schema(format!("observables[{i}].element {e:?} outside dimension {dim}")))
                }
                _ => return Err(CliError::schema(format!("observables[{i}] needs exactly one of matrix or element"))),
            }
        }
        if let Some(o) = &self.oracle {
            if o.cutoffs.len() != modes {
                return Err(CliError::schema(format!("oracle.cutoffs has {} entries for {modes} modes", o.cutoffs.len())));
            }
            if o.correlated && self.system.preparation.is_none() {
                return Err(CliError::schema("oracle.correlated needs system.preparation"));
            }
        }
        if let Some(m) = &self.measurement {
            if m.sigma_x.len() != modes || m.sigma_p.len() != modes {
                return Err(CliError::schema(format!("measurement resolutions need {modes} entries each")));
            }
        }
        let needs = |what: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(CliError::schema(format!("experiment {} needs a {what} section", self.experiment.name())))
            }
        };
        match self.experiment {
            Experiment::Oracle => needs("oracle", self.oracle.is_some())?,
            Experiment::MeasureDemo => needs("measurement", self.measurement.is_some())?,
            _ => {}
        }
        if self.references.contains(&Reference::Oracle) {
            needs("oracle", self.oracle.is_some())?;
        }
        if self.references.contains(&Reference::Oracle) && self.experiment == Experiment::Oracle {
            return Err(CliError::schema("the oracle experiment cannot reference itself"));
        }
        self.check_limits()
    }

    fn check_limits(&self) -> Result<(), CliError> {
        let l = &self.limits;
        let stochastic = matches!(
            self.experiment,
            Experiment::Svne | Experiment::Twostate | Experiment::Compare | Experiment::NoiseValidate | Experiment::MeasureDemo
        ) || (self.experiment == Experiment::WickVerify && self.wick.and_then(|w| w.rprime_m_max).is_some());
        if stochastic {
            let total = match (&self.measurement, self.experiment) {
                (Some(m), Experiment::MeasureDemo) => m.restoration_outcomes.saturating_mul(m.n_traj_per_outcome),
                _ => self.n_traj,
            };
            if self.n_traj > l.max_traj || total > l.max_traj {
                return Err(CliError::resource(format!("{} trajectories exceed limits.max_traj = {}", self.n_traj.max(total), l.max_traj)));
            }
            let noise_dim = 2 * self.system.couplings.len() * (self.grid.n_steps + 1);
            if noise_dim > l.max_noise_dim {
                return Err(CliError::resource(format!(
                    "contour covariance of dimension {noise_dim} exceeds limits.max_noise_dim = {}; use fewer steps",
                    l.max_noise_dim
                )));
            }
        }
        if let Some(o) = &self.oracle {
            let factor = if o.check_cutoff { 1usize << o.cutoffs.len() } else { 1 };
            let dim = o
                .cutoffs
                .iter()
                .try_fold(self.dim().saturating_mul(factor), |acc, &c| acc.checked_mul(c))
                .unwrap_or(usize::MAX);
            if dim > l.max_oracle_dim.min(tol::ORACLE_DIM_CAP) {
                return Err(CliError::resource(format!(
                    "oracle joint dimension {dim} exceeds the cap of {}; lower the cutoffs",
                    l.max_oracle_dim.min(tol::ORACLE_DIM_CAP)
                )));
            }
        }
        Ok(())
    }

    /// Builds the core model; [`RunConfig::validate`] must have passed.
    pub fn build(&self, seed: u64) -> Result<Model, CliError> {
        let dim = self.dim();
        let couplings = self.system.couplings.iter().map(|c| build_matrix(&c.matrix)).collect();
        let labels = self
            .system
            .couplings
            .iter()
            .enumerate()
            .map(|(i, c)| c.label.clone().unwrap_or_else(|| format!("A{i}")))
            .collect();
        let system = SystemSpec::new(build_matrix(&self.system.h_s), couplings, labels)?;
        let modes = self
            .bath
            .modes
            .iter()
            .map(|m| BathMode::new(m.omega, m.mass))
            .collect::<Result<Vec<_>, _>>()?;
        let channels = self.bath.coupling.len();
        let coupling = DMatrix::from_fn(channels, modes.len(), |a, k| self.bath.coupling[a][k]);
        let state = match &self.bath.state {
            BathStateConfig::Thermal { beta } => BathState::Thermal { beta: beta.build()? },
            BathStateConfig::Displaced { beta, mean_x, mean_p } => {
                finite("bath.state.mean_x", mean_x)?;
                finite("bath.state.mean_p", mean_p)?;
                BathState::Displaced { beta: beta.build()?, mean_x: mean_x.clone(), mean_p: mean_p.clone() }
            }
            BathStateConfig::Gaussian { modes } => BathState::Gaussian(
                modes
                    .iter()
                    .map(|m| ModeMoments {
                        mean_x: m.mean_x,
                        mean_p: m.mean_p,
                        var_x: m.var_x,
                        var_p: m.var_p,
                        cov_xp: m.cov_xp,
                    })
                    .collect(),
            ),
        };
        let bath = BathSpec::new(modes, coupling, state)?;
        let grid = TimeGrid::new(self.grid.t_max, self.grid.n_steps)?;
        let initial = match &self.initial {
            InitialConfig::Ket(v) => {
                let psi = ket(&v.iter().map(|e| e.value()).collect::<Vec<_>>());
                let norm = psi.norm();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(CliError::schema("initial.ket must have a finite, nonzero norm"));
                }
                DensityOperator::pure(&(psi / cx(norm, 0.0)))?
            }
            InitialConfig::Density(m) => DensityOperator::new(build_matrix(m))?,
        };
        let method = match self.sampler.method {
            SamplerMethodConfig::ContourTakagi => SamplingMethod::ContourTakagi,
            SamplerMethodConfig::RotatedFactorization => SamplingMethod::RotatedFactorization,
        };
        let sampler = SamplerConfig { method, eigen_clip: self.sampler.eigen_clip, base_seed: seed };
        let observables = if self.observables.is_empty() {
            let mut out = Vec::new();
            for i in 0..dim {
                for j in i..dim {
                    out.push(Observable { name: format!("rho_{i}_{j}"), op: element_op(dim, i, j) });
                }
            }
            out
        } else {
            self.observables
                .iter()
                .map(|o| Observable {
                    name: o.name.clone(),
                    op: match (&o.matrix, o.element) {
                        (Some(m), _) => build_matrix(m),
                        (None, Some([i, j])) => element_op(dim, i, j),
                        (None, None) => unreachable!("validated"),
                    },
                })
                .collect()
        };
        let preparation = match &self.system.preparation {
            Some(p) => Some(PreparationSpec::new(build_matrix(&p.h_s_prime), p.b)?),
            None => None,
        };
        let fock = match &self.oracle {
            Some(o) => {
                let mut f = FockConfig::new(o.cutoffs.clone())?;
                if !(o.tail_tol > 0.0) {
                    return Err(CliError::schema("oracle.tail_tol must be positive"));
                }
                f.tail_tol = o.tail_tol;
                Some(f)
            }
            None => None,
        };
        let measurement = match &self.measurement {
            Some(m) => Some(MeasurementSpec::new(m.sigma_x.clone(), m.sigma_p.clone())?),
            None => None,
        };
        Ok(Model { system, bath, grid, initial, sampler, observables, preparation, fock, measurement })
    }

    /// Trajectory equation of the `svne` experiment and of `compare`.
    pub fn svne_equation(&self, bath: &BathSpec<f64>) -> Equation {
        match self.integrator.form {
            FormConfig::Plain => Equation::Svne,
            FormConfig::Shifted => Equation::SvneShifted,
            FormConfig::Auto if has_mean_field(bath) => Equation::SvneShifted,
            FormConfig::Auto => Equation::Svne,
        }
    }
}

/// Whether any channel has a nonzero environment average.
pub fn has_mean_field(bath: &BathSpec<f64>) -> bool {
    bath.mode_moments().iter().any(|m| m.mean_x != 0.0 || m.mean_p != 0.0)
}

/// `O` with `Tr[O ρ] = ρ_ij`, i.e. `|j⟩⟨i|`.
pub fn element_op(dim: usize, i: usize, j: usize) -> CMat<f64> {
    let mut m = CMat::zeros(dim, dim);
    m[(j, i)] = cx(1.0, 0.0);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "experiment": "svne",
        "system": {"h_s": [[0.5, 0], [0, -0.5]], "couplings": [{"matrix": [[0, 1], [1, 0]]}]},
        "bath": {"modes": [{"omega": 1.0}], "coupling": [[0.1]], "state": {"kind": "thermal", "beta": 2.0}},
        "grid": {"t_max": 1.0, "n_steps": 10},
        "initial": {"ket": [1, {"re": 0, "im": 1}]}
    }"#;

    #[test]
    fn minimal_config_builds() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        cfg.validate().unwrap();
        let model = cfg.build(3).unwrap();
        assert_eq!(model.system.dim(), 2);
        assert_eq!(model.sampler.base_seed, 3);
        let rho = model.initial.matrix();
        assert!((rho[(0, 1)] - cx(0.0, -0.5)).norm() < 1e-15);
        let names: Vec<_> = model.observables.iter().map(|o| o.name.as_str()).collect();
        assert_eq!(names, ["rho_0_0", "rho_0_1", "rho_1_1"]);
        assert!((model.initial.matrix().transpose().component_mul(&model.observables[1].op).sum() - rho[(0, 1)]).norm() < 1e-15);
    }

    #[test]
    fn schema_errors_are_reported() {
        let bad = MINIMAL.replace("\"n_steps\": 10", "\"n_steps\": 10, \"extra\": 1");
        assert_eq!(RunConfig::from_json(&bad).unwrap_err().exit_code(), 2);
        let bad = MINIMAL.replace("[[0.1]]", "[[0.1, 0.2]]");
        assert_eq!(RunConfig::from_json(&bad).unwrap().validate().unwrap_err().exit_code(), 2);
        let bad = MINIMAL.replace("\"beta\": 2.0", "\"beta\": \"hot\"");
        assert_eq!(RunConfig::from_json(&bad).unwrap().build(0).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn limits_map_to_resource_errors() {
        let big = MINIMAL.replace("\"n_steps\": 10", "\"n_steps\": 5000");
        assert_eq!(RunConfig::from_json(&big).unwrap().validate().unwrap_err().exit_code(), 3);
        let many = MINIMAL.replace("\"grid\"", "\"n_traj\": 1000, \"limits\": {\"max_traj\": 10}, \"grid\"");
        assert_eq!(RunConfig::from_json(&many).unwrap().validate().unwrap_err().exit_code(), 3);
    }
}
