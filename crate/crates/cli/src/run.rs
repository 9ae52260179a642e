//! Experiment dispatch: turns a validated configuration into a time series
//! and a summary.

use keldysh_core::linalg::{hermitian_part, trace_norm_distance, CMat};
use keldysh_core::measurement::{semiclassical_experiment, SemiclassicalConfig};
use keldysh_core::noise::{rotated_targets, sampled_covariance, write_binary_dump, NoiseSampler, SamplingMethod};
use keldysh_core::oracle::{correlated_initial_state, evolve_exact, uncorrelated_initial_state, FockConfig};
use keldysh_core::propagator::{analytic_dephasing, evolve_ferialdi};
use keldysh_core::scalar::Cx;
use keldysh_core::svne::{run_ensemble, EnsembleConfig, EnsembleResult, Equation};
use keldysh_core::wick::{double_factorial_odd, enumerate_pairings, rprime_ensemble, verify_substitution_on_grid};
use keldysh_core::contour::TimeGrid;
use keldysh_core::error::Error as CoreError;
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Experiment, Model, Observable, Reference, RunConfig, NoiseSection, WickSection};
use crate::error::CliError;

/// One CSV column.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryCounts {
    pub requested: u64,
    pub accepted: u64,
    pub excluded: u64,
    pub unreliable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplerSummary {
    pub requested: &'static str,
    pub used: &'static str,
    pub fallback_residual: Option<f64>,
    pub rank: usize,
    pub clipped_mass: f64,
    pub reconstruction_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub method: String,
    pub reference: String,
    pub max_trace_distance: f64,
    pub trace_distance: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub experiment: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub n_nodes: usize,
    pub t_max: f64,
    pub trajectories: Option<TrajectoryCounts>,
    pub sampler: Option<SamplerSummary>,
    pub comparisons: Vec<Comparison>,
    pub details: Value,
}

/// Everything a run emits. `failure` is set when artifacts were produced
/// but the run must still exit nonzero.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub times: Vec<f64>,
    pub columns: Vec<Column>,
    pub summary: Summary,
    pub failure: Option<CliError>,
    /// Extra files `(name, bytes)` written next to the series.
    pub attachments: Vec<(String, Vec<u8>)>,
}

/// Per-node estimate of `Tr[O ρ]` and its standard errors.
#[derive(Debug, Clone)]
struct Estimate {
    mean: Vec<Cx<f64>>,
    se_re: Vec<f64>,
    se_im: Vec<f64>,
}

/// Reduced dynamics produced by one method.
#[derive(Debug, Clone)]
struct Dynamics {
    method: String,
    rho: Vec<CMat<f64>>,
    estimates: Vec<Estimate>,
}

fn expectation(op: &CMat<f64>, rho: &CMat<f64>) -> Cx<f64> {
    op.transpose().component_mul(rho).sum()
}

fn exact(method: &str, observables: &[Observable], rho: Vec<CMat<f64>>) -> Dynamics {
    let n = rho.len();
    let estimates = observables
        .iter()
        .map(|o| Estimate {
            mean: rho.iter().map(|r| expectation(&o.op, r)).collect(),
            se_re: vec![0.0; n],
            se_im: vec![0.0; n],
        })
        .collect();
    Dynamics { method: method.into(), rho, estimates }
}

/// Errors from entrywise errors `se(node)` by the triangle inequality,
/// `Σ_ij |O_ji| se_ij`; exact for single-element observables.
fn bounded(method: &str, observables: &[Observable], rho: Vec<CMat<f64>>, se: impl Fn(usize) -> DMatrix<f64>) -> Dynamics {
    let tables: Vec<DMatrix<f64>> = (0..rho.len()).map(&se).collect();
    let estimates = observables
        .iter()
        .map(|o| {
            let weights = o.op.transpose().map(|z| z.norm());
            let bound: Vec<f64> = tables.iter().map(|t| weights.component_mul(t).sum()).collect();
            Estimate { mean: rho.iter().map(|r| expectation(&o.op, r)).collect(), se_re: bound.clone(), se_im: bound }
        })
        .collect();
    Dynamics { method: method.into(), rho, estimates }
}

fn from_ensemble(method: &str, result: &EnsembleResult<f64>) -> Dynamics {
    let estimates = result
        .observables
        .iter()
        .map(|o| Estimate { mean: o.mean.clone(), se_re: o.se_re.clone(), se_im: o.se_im.clone() })
        .collect();
    Dynamics { method: method.into(), rho: result.mean_rho.clone(), estimates }
}

fn push_estimates(columns: &mut Vec<Column>, prefix: &str, observables: &[Observable], d: &Dynamics) {
    for (o, e) in observables.iter().zip(&d.estimates) {
        let name = |suffix: &str| format!("{prefix}{}_{suffix}", o.name);
        columns.push(Column { name: name("re"), values: e.mean.iter().map(|z| z.re).collect() });
        columns.push(Column { name: name("im"), values: e.mean.iter().map(|z| z.im).collect() });
        columns.push(Column { name: name("se_re"), values: e.se_re.clone() });
        columns.push(Column { name: name("se_im"), values: e.se_im.clone() });
    }
}

fn compare(a: &Dynamics, b: &Dynamics) -> Result<Comparison, CliError> {
    let trace_distance = a
        .rho
        .iter()
        .zip(&b.rho)
        .map(|(x, y)| trace_norm_distance(&hermitian_part(x), &hermitian_part(y)))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(Comparison {
        method: a.method.clone(),
        reference: b.method.clone(),
        max_trace_distance: trace_distance.iter().copied().fold(0.0, f64::max),
        trace_distance,
    })
}

fn method_name(m: SamplingMethod) -> &'static str {
    match m {
        SamplingMethod::ContourTakagi => "contour_takagi",
        SamplingMethod::RotatedFactorization => "rotated_factorization",
    }
}

fn sampler_summary(d: &keldysh_core::noise::SamplerDiagnostics) -> SamplerSummary {
    SamplerSummary {
        requested: method_name(d.requested),
        used: method_name(d.used),
        fallback_residual: d.fallback_residual,
        rank: d.rank,
        clipped_mass: d.clipped_mass,
        reconstruction_error: d.reconstruction_error,
    }
}

/// Mutable state shared by the experiment runners.
struct Context<'a> {
    cfg: &'a RunConfig,
    model: &'a Model,
    trajectories: Option<TrajectoryCounts>,
    sampler: Option<SamplerSummary>,
    details: serde_json::Map<String, Value>,
    failure: Option<CliError>,
    attachments: Vec<(String, Vec<u8>)>,
}

impl Context<'_> {
    fn ensemble(&mut self, method: &str, equation: Equation) -> Result<Dynamics, CliError> {
        let m = self.model;
        let result = run_ensemble(&EnsembleConfig {
            system: m.system.clone(),
            bath: m.bath.clone(),
            grid: m.grid,
            equation,
            sampler: m.sampler,
            n_traj: self.cfg.n_traj,
            initial: m.initial.clone(),
            blow_up: self.cfg.integrator.blow_up,
            observables: m.observables.iter().map(|o| o.op.clone()).collect(),
        })?;
        self.trajectories = Some(TrajectoryCounts {
            requested: self.cfg.n_traj,
            accepted: result.n_traj,
            excluded: result.excluded.len() as u64,
            unreliable: result.unreliable,
        });
        self.sampler = Some(sampler_summary(&result.sampler));
        if result.unreliable {
            self.failure = Some(CliError::numerical(format!(
                "{} of {} trajectories tripped the blow-up guard",
                result.excluded.len(),
                self.cfg.n_traj
            )));
        }
        self.details.insert("equation".into(), json!(format!("{equation:?}")));
        Ok(from_ensemble(method, &result))
    }

    fn deterministic(&self) -> Result<Dynamics, CliError> {
        let m = self.model;
        let rho = evolve_ferialdi(&m.system, &m.bath, &m.initial, &m.grid)?;
        Ok(exact("deterministic", &m.observables, rho))
    }

    fn analytic(&self) -> Result<Dynamics, CliError> {
        let m = self.model;
        let rho = analytic_dephasing(&m.system, &m.bath, &m.initial, &m.grid.nodes())?;
        Ok(exact("analytic", &m.observables, rho))
    }

    fn oracle(&mut self) -> Result<Dynamics, CliError> {
        let m = self.model;
        let section = self.cfg.oracle.as_ref().ok_or_else(|| CliError::schema("missing oracle section"))?;
        let fock = m.fock.as_ref().ok_or_else(|| CliError::schema("missing oracle section"))?;
        let times = m.grid.nodes();
        let run = |f: &FockConfig| -> Result<Vec<CMat<f64>>, CliError> {
            let joint = match &m.preparation {
                Some(prep) if section.correlated => correlated_initial_state(&m.system, &m.bath, prep, f)?,
                _ => uncorrelated_initial_state(&m.initial, &m.bath, f)?,
            };
            Ok(evolve_exact(&m.system, &m.bath, f, &joint, &times)?)
        };
        let rho = run(fock)?;
        let sensitivity = if section.check_cutoff {
            let doubled = run(&fock.doubled())?;
            let worst = rho
                .iter()
                .zip(&doubled)
                .map(|(a, b)| trace_norm_distance(a, b))
                .collect::<Result<Vec<f64>, _>>()?
                .into_iter()
                .fold(0.0, f64::max);
            Some(worst)
        } else {
            None
        };
        self.details.insert(
            "oracle".into(),
            json!({
                "cutoffs": fock.cutoffs,
                "tail_tol": fock.tail_tol,
                "correlated": section.correlated,
                "cutoff_sensitivity": sensitivity,
            }),
        );
        Ok(exact("oracle", &m.observables, rho))
    }

    fn reference(&mut self, r: Reference) -> Result<Dynamics, CliError> {
        match r {
            Reference::Oracle => self.oracle(),
            Reference::Deterministic => self.deterministic(),
            Reference::Analytic => self.analytic(),
        }
    }
}

/// Runs the configured experiment. `seed` overrides `base_seed`.
pub fn execute(cfg: &RunConfig, config_hash: String, seed: u64) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    if cfg.oracle.as_ref().is_some_and(|o| o.correlated) && cfg.experiment != Experiment::Oracle {
        return Err(CliError::schema("a correlated initial state is only available to the oracle experiment"));
    }
    let model = cfg.build(seed)?;
    let mut ctx = Context { cfg, model: &model, trajectories: None, sampler: None, details: Default::default(), failure: None, attachments: Vec::new() };
    let times = model.grid.nodes();
    let mut columns = Vec::new();
    let mut comparisons = Vec::new();
    let obs = &model.observables;

    let primary = match cfg.experiment {
        Experiment::Svne => Some(ctx.ensemble("svne", cfg.svne_equation(&model.bath))?),
        Experiment::Twostate => {
            let eq = if cfg.integrator.state_vectors { Equation::TwoStateVectors } else { Equation::TwoState };
            Some(ctx.ensemble("twostate", eq)?)
        }
        Experiment::Deterministic => Some(ctx.deterministic()?),
        Experiment::Oracle => Some(ctx.oracle()?),
        Experiment::Compare => {
            let mut methods = vec![ctx.ensemble("svne", cfg.svne_equation(&model.bath))?, ctx.deterministic()?];
            if cfg.oracle.is_some() {
                methods.push(ctx.oracle()?);
            }
            match ctx.analytic() {
                Ok(d) => methods.push(d),
                Err(e) if e.kind == crate::error::ErrorKind::Schema => {}
                Err(e) => return Err(e),
            }
            for (i, a) in methods.iter().enumerate() {
                push_estimates(&mut columns, &format!("{}.", a.method), obs, a);
                for b in &methods[i + 1..] {
                    comparisons.push(compare(a, b)?);
                }
            }
            None
        }
        Experiment::NoiseValidate => {
            noise_validate(&mut ctx, &mut columns, cfg.noise.unwrap_or_default())?;
            None
        }
        Experiment::WickVerify => wick_verify(&mut ctx, cfg.wick.unwrap_or(WickSection {
            m_max: 2,
            check_nodes: 3,
            check_t_max: None,
            rprime_m_max: None,
        }))?,
        Experiment::MeasureDemo => Some(measure_demo(&mut ctx)?),
    };

    if let Some(p) = &primary {
        push_estimates(&mut columns, "", obs, p);
        for &r in &cfg.references {
            if r.name() == p.method {
                continue;
            }
            let reference = ctx.reference(r)?;
            comparisons.push(compare(p, &reference)?);
        }
    }

    let summary = Summary {
        experiment: cfg.experiment.name(),
        config_hash,
        seed,
        n_nodes: times.len(),
        t_max: model.grid.t_max(),
        trajectories: ctx.trajectories,
        sampler: ctx.sampler,
        comparisons,
        details: Value::Object(ctx.details),
    };
    Ok(RunOutput { times, columns, summary, failure: ctx.failure, attachments: ctx.attachments })
}

fn noise_validate(ctx: &mut Context<'_>, columns: &mut Vec<Column>, section: NoiseSection) -> Result<(), CliError> {
    let m = ctx.model;
    let sampler = NoiseSampler::new(&m.bath, &m.grid, &m.sampler)?;
    ctx.sampler = Some(sampler_summary(sampler.diagnostics()));
    let n_traj = ctx.cfg.n_traj;
    if n_traj < 2 {
        return Err(CliError::schema("noise validation needs at least two trajectories"));
    }
    let emp = sampled_covariance(&sampler, n_traj)?;
    let target = rotated_targets(&m.bath, &m.grid);
    let z = emp.max_z_score(&target, 1e-12);
    let mean_z = emp
        .mean
        .iter()
        .zip(&emp.mean_se)
        .flat_map(|(v, se)| [(v.re, se[0]), (v.im, se[1])])
        .filter(|(v, _)| v.abs() > 1e-12)
        .map(|(v, se)| if se > 0.0 { v.abs() / se } else { f64::INFINITY })
        .fold(0.0, f64::max);
    ctx.trajectories = Some(TrajectoryCounts { requested: n_traj, accepted: emp.count, excluded: 0, unreliable: false });
    let passed = z <= section.sigmas && mean_z <= section.sigmas;
    ctx.details.insert(
        "noise".into(),
        json!({
            "dimension": target.nrows(),
            "max_z_second_moment": z,
            "max_z_mean": mean_z,
            "sigmas": section.sigmas,
            "passed": passed,
        }),
    );
    if !passed {
        ctx.failure = Some(CliError::numerical(format!(
            "noise moments deviate from their targets by {:.2} standard errors",
            z.max(mean_z)
        )));
    }
    let nodes = m.grid.n_nodes();
    let block = m.bath.n_channels() * nodes;
    for (ch, label) in m.system.labels().iter().enumerate() {
        for (kind, offset) in [("nu_nu", 0), ("eta_eta", block)] {
            let idx = |j: usize| offset + ch * nodes + j;
            let name = |suffix: &str| format!("{label}.{kind}_{suffix}");
            columns.push(Column { name: name("re"), values: (0..nodes).map(|j| emp.second[(idx(j), idx(j))].re).collect() });
            columns.push(Column { name: name("im"), values: (0..nodes).map(|j| emp.second[(idx(j), idx(j))].im).collect() });
            columns.push(Column { name: name("se_re"), values: (0..nodes).map(|j| emp.se_re[(idx(j), idx(j))]).collect() });
            columns.push(Column { name: name("se_im"), values: (0..nodes).map(|j| emp.se_im[(idx(j), idx(j))]).collect() });
            columns.push(Column { name: name("target"), values: (0..nodes).map(|j| target[(idx(j), idx(j))].re).collect() });
        }
    }
    if section.dump > 0 {
        let trajectories: Vec<_> = (0..section.dump.min(n_traj)).map(|i| sampler.sample(i)).collect();
        ctx.details.insert("dump_trajectories".into(), json!(trajectories.len()));
        let mut bytes = Vec::new();
        write_binary_dump(&mut bytes, &trajectories)?;
        ctx.attachments.push(("noise.bin".into(), bytes));
    }
    Ok(())
}

fn wick_verify(ctx: &mut Context<'_>, section: WickSection) -> Result<Option<Dynamics>, CliError> {
    let m = ctx.model;
    if !(2..=4).contains(&section.check_nodes) {
        return Err(CliError::schema("wick.check_nodes must lie in 2..=4"));
    }
    let check_grid = TimeGrid::new(section.check_t_max.unwrap_or(m.grid.t_max()), section.check_nodes - 1)?;
    let report = verify_substitution_on_grid(&check_grid, &m.system, &m.bath, m.initial.matrix(), section.m_max)?;
    let pairings = (1..=section.m_max.max(1) * 2)
        .filter(|n| n % 2 == 0)
        .map(|n| {
            Ok(json!({
                "labels": n,
                "enumerated": enumerate_pairings(n)?.len(),
                "double_factorial": double_factorial_odd(n),
            }))
        })
        .collect::<Result<Vec<Value>, CoreError>>()?;
    let passed = report.passed();
    ctx.details.insert("substitution".into(), serde_json::to_value(&report).expect("report serializes"));
    ctx.details.insert("pairings".into(), Value::Array(pairings));
    if let Err(e) = report.check() {
        ctx.failure = Some(e.into());
    }
    ctx.details.insert("passed".into(), json!(passed));
    let Some(order) = section.rprime_m_max else {
        return Ok(None);
    };
    let ens = rprime_ensemble(&m.system, &m.bath, &m.grid, m.initial.matrix(), order, ctx.cfg.n_traj, m.sampler.base_seed)?;
    ctx.trajectories = Some(TrajectoryCounts { requested: ctx.cfg.n_traj, accepted: ens.n_traj, excluded: 0, unreliable: false });
    ctx.details.insert(
        "rprime".into(),
        json!({
            "m_max": order,
            "window_end": ens.window_end,
            "window_end_time": ens.times[ens.window_end],
            "truncation": ens.truncation,
        }),
    );
    let (re, im) = (&ens.se_re, &ens.se_im);
    Ok(Some(bounded("rprime", &m.observables, ens.mean.clone(), |j| re[j].zip_map(&im[j], |a, b| a.hypot(b)))))
}

fn measure_demo(ctx: &mut Context<'_>) -> Result<Dynamics, CliError> {
    let m = ctx.model;
    let section = ctx.cfg.measurement.as_ref().ok_or_else(|| CliError::schema("missing measurement section"))?;
    let spec = m.measurement.clone().ok_or_else(|| CliError::schema("missing measurement section"))?;
    let result = semiclassical_experiment(&SemiclassicalConfig {
        system: m.system.clone(),
        bath: m.bath.clone(),
        spec,
        grid: m.grid,
        initial: m.initial.clone(),
        n_outcomes: section.n_outcomes,
        restoration_outcomes: section.restoration_outcomes,
        n_traj_per_outcome: section.n_traj_per_outcome,
        base_seed: m.sampler.base_seed,
    })?;
    ctx.details.insert("measurement".into(), serde_json::to_value(&result.report).expect("report serializes"));
    if let Some(r) = &result.report.restoration {
        ctx.trajectories = Some(TrajectoryCounts {
            requested: r.n_outcomes * r.n_traj_per_outcome,
            accepted: r.n_outcomes * r.n_traj_per_outcome - r.excluded,
            excluded: r.excluded,
            unreliable: false,
        });
        let se = r.standard_errors.clone();
        let dim = m.system.dim();
        return Ok(bounded("measure_demo", &m.observables, result.restored, |j| DMatrix::from_element(dim, dim, se[j])));
    }
    // Without restoration runs the series shows the unconditional reference.
    Ok(exact("measure_demo", &m.observables, result.reference))
}
