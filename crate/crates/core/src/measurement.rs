//! One-shot heterodyne measurement of the environment at `t = 0`:
//! Gaussian conditioning of the mode moments, the conditional mean field
//! and correlation, and the semiclassical noise-interpretation experiment.
//!
//! Each mode is measured in momentum first, then in position, with
//! Gaussian Kraus operators `M_{Y,y} = (2πσ²)^{-1/4} exp(−(Y−y)²/(4σ²))`.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::bath::{BathSpec, BathState, ModeMoments};
use crate::contour::TimeGrid;
use crate::error::{Error, Result};
use crate::linalg::{commutator, hermitian_function, max_abs, trace, trace_norm_distance, CMat, DensityOperator};
use crate::noise::{trajectory_rng, NoiseSampler, SamplerConfig, SamplingMethod};
use crate::propagator::analytic_dephasing;
use crate::scalar::{re, Cx, Real};
use crate::svne::{reduce_trajectories, run_ensemble, Equation, EnsembleAccumulator, EnsembleConfig, MeanFieldTable, TrajectoryContext};
use crate::system::SystemSpec;
use crate::tol;

/// Product Gaussian environment state tracked by per-mode moments.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEnvState<T: Real> {
    modes: Vec<ModeMoments<T>>,
}

impl<T: Real> GaussianEnvState<T> {
    pub fn new(modes: Vec<ModeMoments<T>>) -> Result<Self> {
        for m in &modes {
            m.validate()?;
        }
        Ok(Self { modes })
    }

    /// The Gaussian state a bath is prepared in.
    pub fn from_bath(bath: &BathSpec<T>) -> Self {
        Self { modes: bath.mode_moments().to_vec() }
    }

    pub fn modes(&self) -> &[ModeMoments<T>] {
        &self.modes
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// `bath` with its state replaced by this one.
    pub fn apply_to(&self, bath: &BathSpec<T>) -> Result<BathSpec<T>> {
        if bath.n_modes() != self.n_modes() {
            return Err(Error::Shape(format!("{} mode moments for {} modes", self.n_modes(), bath.n_modes())));
        }
        bath.with_state(BathState::Gaussian(self.modes.clone()))
    }

    /// Same covariances with all means zeroed.
    pub fn centred(&self) -> Self {
        Self { modes: self.modes.iter().map(|m| ModeMoments { mean_x: T::zero(), mean_p: T::zero(), ..*m }).collect() }
    }
}

/// Measurement resolutions per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSpec<T: Real> {
    pub sigma_x: Vec<T>,
    pub sigma_p: Vec<T>,
}

impl<T: Real> MeasurementSpec<T> {
    pub fn new(sigma_x: Vec<T>, sigma_p: Vec<T>) -> Result<Self> {
        if sigma_x.len() != sigma_p.len() {
            return Err(Error::Shape(format!("{} position and {} momentum resolutions", sigma_x.len(), sigma_p.len())));
        }
        if sigma_x.iter().chain(&sigma_p).any(|s| !(*s > T::zero()) || !s.is_finite()) {
            return Err(Error::Validation("measurement resolutions must be positive and finite".into()));
        }
        Ok(Self { sigma_x, sigma_p })
    }

    pub fn n_modes(&self) -> usize {
        self.sigma_x.len()
    }
}

/// Outcomes `(x′, p′)` per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeRecord<T: Real> {
    pub x_out: Vec<T>,
    pub p_out: Vec<T>,
}

/// Quadrature measured by one Kraus operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrature {
    Position,
    Momentum,
}

/// Outcome distribution `Normal(mean, variance)` for measuring `q` with
/// resolution `sigma`.
pub fn outcome_distribution<T: Real>(m: &ModeMoments<T>, q: Quadrature, sigma: T) -> (T, T) {
    match q {
        Quadrature::Position => (m.mean_x, m.var_x + sigma * sigma),
        Quadrature::Momentum => (m.mean_p, m.var_p + sigma * sigma),
    }
}

/// Exact Gaussian conditioning on outcome `y`: the measured quadrature and
/// its correlated partner are updated by the Kalman gain, and the conjugate
/// variance then grows by `1/(4σ²)`.
pub fn condition_mode<T: Real>(m: &ModeMoments<T>, q: Quadrature, sigma: T, y: T) -> Result<ModeMoments<T>> {
    let s2 = sigma * sigma;
    let quarter = T::lit(0.25);
    let post = match q {
        Quadrature::Position => {
            let denom = m.var_x + s2;
            let innov = y - m.mean_x;
            ModeMoments {
                mean_x: (s2 * m.mean_x + m.var_x * y) / denom,
                mean_p: m.mean_p + m.cov_xp / denom * innov,
                var_x: m.var_x * s2 / denom,
                var_p: m.var_p - m.cov_xp * m.cov_xp / denom + quarter / s2,
                cov_xp: m.cov_xp * s2 / denom,
            }
        }
        Quadrature::Momentum => {
            let denom = m.var_p + s2;
            let innov = y - m.mean_p;
            ModeMoments {
                mean_x: m.mean_x + m.cov_xp / denom * innov,
                mean_p: (s2 * m.mean_p + m.var_p * y) / denom,
                var_x: m.var_x - m.cov_xp * m.cov_xp / denom + quarter / s2,
                var_p: m.var_p * s2 / denom,
                cov_xp: m.cov_xp * s2 / denom,
            }
        }
    };
    post.validate().map_err(|e| Error::Numerical(format!("posterior left the physical set: {e}")))?;
    Ok(post)
}

/// Posterior for a given outcome record, momentum before position per mode.
pub fn condition_on<T: Real>(
    state: &GaussianEnvState<T>,
    spec: &MeasurementSpec<T>,
    outcome: &OutcomeRecord<T>,
) -> Result<GaussianEnvState<T>> {
    check_sizes(state, spec)?;
    if outcome.x_out.len() != state.n_modes() || outcome.p_out.len() != state.n_modes() {
        return Err(Error::Shape("outcome record does not match the mode count".into()));
    }
    let modes = state
        .modes
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let after_p = condition_mode(m, Quadrature::Momentum, spec.sigma_p[k], outcome.p_out[k])?;
            condition_mode(&after_p, Quadrature::Position, spec.sigma_x[k], outcome.x_out[k])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianEnvState { modes })
}

fn check_sizes<T: Real>(state: &GaussianEnvState<T>, spec: &MeasurementSpec<T>) -> Result<()> {
    if spec.n_modes() != state.n_modes() {
        return Err(Error::Shape(format!("{} resolutions for {} modes", spec.n_modes(), state.n_modes())));
    }
    Ok(())
}

fn normal_draw<T: Real>(rng: &mut ChaCha8Rng, mean: T, variance: T) -> Result<T> {
    let d = Normal::new(mean.as_f64(), variance.as_f64().sqrt())
        .map_err(|e| Error::Numerical(format!("outcome distribution: {e}")))?;
    Ok(T::lit(d.sample(rng)))
}

/// Samples an outcome record sequentially (momentum, then position, per
/// mode) and returns it with the posterior state.
pub fn gaussian_measure_update<T: Real>(
    state: &GaussianEnvState<T>,
    spec: &MeasurementSpec<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(OutcomeRecord<T>, GaussianEnvState<T>)> {
    check_sizes(state, spec)?;
    let mut x_out = Vec::with_capacity(state.n_modes());
    let mut p_out = Vec::with_capacity(state.n_modes());
    let mut modes = Vec::with_capacity(state.n_modes());
    for (k, m) in state.modes.iter().enumerate() {
        let (mu, var) = outcome_distribution(m, Quadrature::Momentum, spec.sigma_p[k]);
        let p = normal_draw(rng, mu, var)?;
        let after_p = condition_mode(m, Quadrature::Momentum, spec.sigma_p[k], p)?;
        let (mu, var) = outcome_distribution(&after_p, Quadrature::Position, spec.sigma_x[k]);
        let x = normal_draw(rng, mu, var)?;
        modes.push(condition_mode(&after_p, Quadrature::Position, spec.sigma_x[k], x)?);
        x_out.push(x);
        p_out.push(p);
    }
    Ok((OutcomeRecord { x_out, p_out }, GaussianEnvState { modes }))
}

/// `E^{(y)}_α(t) = Σ_k g_αk [x̄_k cos ω_k t + p̄_k/(m_k ω_k) sin ω_k t]`.
pub fn conditional_mean_field<T: Real>(post: &GaussianEnvState<T>, bath: &BathSpec<T>, alpha: usize, t: T) -> Result<T> {
    post.apply_to(bath)?.mean_field(alpha, t)
}

/// Centred correlation of the post-measured environment.
pub fn conditional_corr<T: Real>(
    post: &GaussianEnvState<T>,
    bath: &BathSpec<T>,
    alpha: usize,
    beta: usize,
    tau1: T,
    tau2: T,
) -> Result<Cx<T>> {
    post.apply_to(bath)?.phys_corr(alpha, beta, tau1, tau2)
}

/// Applies `M_{Y,y}` to a truncated-Fock density matrix. Returns the
/// normalized post-measurement state and the outcome density `P(y)`.
pub fn apply_gaussian_kraus<T: Real>(rho: &CMat<T>, quadrature: &CMat<T>, sigma: T, y: T) -> Result<(CMat<T>, T)> {
    let norm = (T::lit(2.0 * std::f64::consts::PI) * sigma * sigma).powf(T::lit(-0.25));
    let kraus = hermitian_function(quadrature, |q| {
        let d = q - y;
        re(norm * (-(d * d) / (T::lit(4.0) * sigma * sigma)).exp())
    })?;
    let unnorm = &kraus * rho * kraus.adjoint();
    let p = trace(&unnorm).re;
    if !(p > T::zero()) {
        return Err(Error::Numerical(format!("outcome {y} has vanishing probability")));
    }
    Ok((unnorm / re(p), p))
}

/// Resolution-to-spread ratios for one mode.
#[derive(Debug, Clone, Serialize)]
pub struct ModeRatios {
    pub sigma_x_over_delta_x: f64,
    pub sigma_p_over_delta_p: f64,
    pub sigma_product: f64,
}

/// Largest resolution-to-spread ratio and smallest `σ_X σ_P` accepted as
/// the semiclassical regime.
pub const SEMICLASSICAL_MAX_RATIO: f64 = 0.2;
pub const SEMICLASSICAL_MIN_PRODUCT: f64 = 5.0;

pub fn regime_ratios<T: Real>(state: &GaussianEnvState<T>, spec: &MeasurementSpec<T>) -> Result<Vec<ModeRatios>> {
    check_sizes(state, spec)?;
    Ok(state
        .modes
        .iter()
        .enumerate()
        .map(|(k, m)| ModeRatios {
            sigma_x_over_delta_x: (spec.sigma_x[k] / m.var_x.sqrt()).as_f64(),
            sigma_p_over_delta_p: (spec.sigma_p[k] / m.var_p.sqrt()).as_f64(),
            sigma_product: (spec.sigma_x[k] * spec.sigma_p[k]).as_f64(),
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct SemiclassicalConfig<T: Real> {
    pub system: SystemSpec<T>,
    pub bath: BathSpec<T>,
    pub spec: MeasurementSpec<T>,
    pub grid: TimeGrid<T>,
    pub initial: DensityOperator<T>,
    /// Outcomes for the mean-field autocorrelation.
    pub n_outcomes: u64,
    /// Outcomes for the conditioned-evolution restoration check; 0 skips it.
    pub restoration_outcomes: u64,
    pub n_traj_per_outcome: u64,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AutocorrEntry {
    pub alpha: usize,
    pub beta: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub empirical: f64,
    pub standard_error: f64,
    pub target: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RestorationReport {
    pub reference: String,
    pub n_outcomes: u64,
    pub n_traj_per_outcome: u64,
    pub excluded: u64,
    pub trace_distances: Vec<f64>,
    /// Largest entrywise standard error of the outcome average, per node.
    pub standard_errors: Vec<f64>,
    pub max_trace_distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SemiclassicalReport {
    pub ratios: Vec<ModeRatios>,
    pub in_semiclassical_regime: bool,
    pub regime: String,
    pub n_outcomes: u64,
    pub autocorrelation: Vec<AutocorrEntry>,
    /// `max |E_y[E E] − Re c| / max |Re c|` over the table.
    pub max_relative_deviation: f64,
    /// `max |Re c^{(y)}| / max |Re c|`: the residual real-noise strength.
    pub residual_noise_ratio: f64,
    /// `max |Im c^{(y)} − Im c|`.
    pub imag_change: f64,
    pub restoration: Option<RestorationReport>,
}

#[derive(Debug, Clone)]
pub struct SemiclassicalResult<T: Real> {
    pub report: SemiclassicalReport,
    pub times: Vec<T>,
    /// Outcome average of the conditioned ensemble means.
    pub restored: Vec<CMat<T>>,
    pub reference: Vec<CMat<T>>,
}

fn outcome_seed(base_seed: u64) -> u64 {
    base_seed ^ 0x6d65_6173_7572_6521
}

/// Samples outcomes, compares the outcome-averaged mean-field
/// autocorrelation with `Re c`, and checks that averaging conditioned
/// shifted-SVNE evolutions over outcomes restores the unconditional state.
pub fn semiclassical_experiment<T: Real>(config: &SemiclassicalConfig<T>) -> Result<SemiclassicalResult<T>> {
    let bath = &config.bath;
    if !bath.is_stable() {
        return Err(Error::Precondition("the unmeasured bath must satisfy the stability condition".into()));
    }
    if config.n_outcomes < 2 {
        return Err(Error::Validation("at least two outcomes are needed for an autocorrelation estimate".into()));
    }
    let prior = GaussianEnvState::from_bath(bath);
    let ratios = regime_ratios(&prior, &config.spec)?;
    let in_regime = ratios.iter().all(|r| {
        r.sigma_x_over_delta_x <= SEMICLASSICAL_MAX_RATIO
            && r.sigma_p_over_delta_p <= SEMICLASSICAL_MAX_RATIO
            && r.sigma_product >= SEMICLASSICAL_MIN_PRODUCT
    });
    if !in_regime {
        log::warn!("measurement resolutions are outside the semiclassical regime");
    }
    let nodes = config.grid.nodes();
    let n = nodes.len();
    let c = bath.n_channels();
    let posts: Vec<GaussianEnvState<T>> = (0..config.n_outcomes)
        .into_par_iter()
        .map(|o| {
            let mut rng = trajectory_rng(outcome_seed(config.base_seed), o);
            gaussian_measure_update(&prior, &config.spec, &mut rng).map(|(_, post)| post)
        })
        .collect::<Result<_>>()?;

    // Outcome-averaged E^{(y)}_α(τ₁) E^{(y)}_β(τ₂) on the grid, accumulated in f64.
    let size = c * n;
    let fields: Vec<Vec<f64>> = posts
        .par_iter()
        .map(|post| {
            let b = post.apply_to(bath)?;
            Ok((0..size).map(|i| b.mean(i / n, nodes[i % n]).as_f64()).collect())
        })
        .collect::<Result<_>>()?;
    let count = fields.len() as f64;
    let mut sum = DMatrix::<f64>::zeros(size, size);
    let mut sum2 = DMatrix::<f64>::zeros(size, size);
    for f in &fields {
        for i in 0..size {
            for j in 0..size {
                let p = f[i] * f[j];
                sum[(i, j)] += p;
                sum2[(i, j)] += p * p;
            }
        }
    }
    let mut autocorrelation = Vec::with_capacity(size * size);
    let (mut max_dev, mut max_target) = (0.0f64, 0.0f64);
    for i in 0..size {
        for j in 0..size {
            let mean = sum[(i, j)] / count;
            let var = (sum2[(i, j)] / count - mean * mean).max(0.0);
            let target = bath.corr(i / n, j / n, nodes[i % n], nodes[j % n]).re.as_f64();
            max_dev = max_dev.max((mean - target).abs());
            max_target = max_target.max(target.abs());
            autocorrelation.push(AutocorrEntry {
                alpha: i / n,
                beta: j / n,
                tau1: nodes[i % n].as_f64(),
                tau2: nodes[j % n].as_f64(),
                empirical: mean,
                standard_error: (var / (count - 1.0)).sqrt(),
                target,
            });
        }
    }
    let max_relative_deviation = if max_target > 0.0 { max_dev / max_target } else { max_dev };

    // The posterior covariance does not depend on the outcome.
    let template = posts[0].centred().apply_to(bath)?;
    let (mut max_re_post, mut imag_change) = (0.0f64, 0.0f64);
    for i in 0..size {
        for j in 0..size {
            let (a, b, t1, t2) = (i / n, j / n, nodes[i % n], nodes[j % n]);
            let post = template.corr(a, b, t1, t2);
            let prior_c = bath.corr(a, b, t1, t2);
            max_re_post = max_re_post.max(post.re.as_f64().abs());
            imag_change = imag_change.max((post.im - prior_c.im).abs().as_f64());
        }
    }
    let residual_noise_ratio = if max_target > 0.0 { max_re_post / max_target } else { 0.0 };

    let (restoration, restored, reference) = if config.restoration_outcomes > 0 {
        let (report, restored, reference) = restoration_check(config, &posts, &template)?;
        (Some(report), restored, reference)
    } else {
        (None, Vec::new(), Vec::new())
    };

    Ok(SemiclassicalResult {
        report: SemiclassicalReport {
            ratios,
            in_semiclassical_regime: in_regime,
            regime: if in_regime { "semiclassical" } else { "outside semiclassical regime" }.to_string(),
            n_outcomes: config.n_outcomes,
            autocorrelation,
            max_relative_deviation,
            residual_noise_ratio,
            imag_change,
            restoration,
        },
        times: nodes,
        restored,
        reference,
    })
}

type Restoration<T> = (RestorationReport, Vec<CMat<T>>, Vec<CMat<T>>);

fn restoration_check<T: Real>(
    config: &SemiclassicalConfig<T>,
    posts: &[GaussianEnvState<T>],
    template: &BathSpec<T>,
) -> Result<Restoration<T>> {
    let n_out = config.restoration_outcomes;
    if n_out > posts.len() as u64 {
        return Err(Error::Validation(format!(
            "{n_out} restoration outcomes requested but only {} sampled",
            posts.len()
        )));
    }
    if config.n_traj_per_outcome == 0 {
        return Err(Error::Validation("n_traj_per_outcome must be positive".into()));
    }
    let grid = &config.grid;
    let n = grid.n_nodes();
    let dim = config.system.dim();
    let ctx = TrajectoryContext::new(&config.system, grid, Equation::SvneShifted)?;
    let sampler = NoiseSampler::new(template, grid, &SamplerConfig::new(SamplingMethod::ContourTakagi, config.base_seed))?;
    let r0 = config.initial.matrix().clone();
    let per = config.n_traj_per_outcome;
    let mut outcome_means = EnsembleAccumulator::new(n, dim);
    let mut excluded = 0u64;
    for (o, post) in posts.iter().take(n_out as usize).enumerate() {
        let mean_field = MeanFieldTable::from_bath(&post.apply_to(&config.bath)?, grid);
        let acc = reduce_trajectories(per, n, dim, |i| {
            ctx.propagate(&r0, &sampler.sample(o as u64 * per + i), Some(&mean_field))
        })?;
        excluded += acc.flagged().len() as u64;
        if acc.count() > 0 {
            outcome_means.push(&acc.finish()?.0);
        }
    }
    let (restored, se_re, se_im) = outcome_means.finish()?;
    let standard_errors = se_re
        .iter()
        .zip(&se_im)
        .map(|(a, b)| a.zip_map(b, |x, y| (x * x + y * y).sqrt()).iter().fold(0.0f64, |m, v| m.max(v.as_f64())))
        .collect();

    let commuting = config
        .system
        .couplings()
        .iter()
        .flat_map(|a| config.system.couplings().iter().chain([config.system.h_s()]).map(move |b| (a, b)))
        .map(|(a, b)| commutator(a, b).map(|m| max_abs(&m)))
        .collect::<Result<Vec<T>>>()?
        .into_iter()
        .all(|v| v.as_f64() < 1e-12);
    let (label, reference) = if commuting {
        ("analytic_dephasing".to_string(), analytic_dephasing(&config.system, &config.bath, &config.initial, &grid.nodes())?)
    } else {
        let result = run_ensemble(&EnsembleConfig {
            system: config.system.clone(),
            bath: config.bath.clone(),
            grid: *grid,
            equation: Equation::Svne,
            sampler: SamplerConfig::new(SamplingMethod::ContourTakagi, config.base_seed.wrapping_add(1)),
            n_traj: n_out * per,
            initial: config.initial.clone(),
            blow_up: T::lit(tol::BLOW_UP),
            observables: Vec::new(),
        })?;
        ("svne_ensemble".to_string(), result.mean_rho)
    };
    let trace_distances = restored
        .iter()
        .zip(&reference)
        .map(|(a, b)| trace_norm_distance(&crate::linalg::hermitian_part(a), b).map(|d| d.as_f64()))
        .collect::<Result<Vec<f64>>>()?;
    let max_trace_distance = trace_distances.iter().copied().fold(0.0, f64::max);
    Ok((
        RestorationReport {
            reference: label,
            n_outcomes: n_out,
            n_traj_per_outcome: per,
            excluded,
            trace_distances,
            standard_errors,
            max_trace_distance,
        },
        restored,
        reference,
    ))
}

/// Empirical mean and variance of `n` sampled outcomes of one quadrature
/// of mode `k`, for checking the outcome marginal.
pub fn sample_outcome_moments<T: Real>(
    state: &GaussianEnvState<T>,
    spec: &MeasurementSpec<T>,
    k: usize,
    quadrature: Quadrature,
    n: u64,
    base_seed: u64,
) -> Result<(f64, f64)> {
    if k >= state.n_modes() {
        return Err(Error::Lookup { kind: "mode", index: k });
    }
    let draws: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(base_seed, i);
            gaussian_measure_update(state, spec, &mut rng).map(|(y, _)| match quadrature {
                Quadrature::Position => y.x_out[k].as_f64(),
                Quadrature::Momentum => y.p_out[k].as_f64(),
            })
        })
        .collect::<Result<_>>()?;
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{BathMode, Beta};
    use crate::linalg::{max_abs_diff, sigma_z};
    use crate::scalar::cx;
    use crate::oracle::{env_initial_state, momentum, position, FockConfig};
    use crate::svne::ket;
    use proptest::prelude::*;

    fn thermal_state(w: f64, m: f64, beta: f64) -> GaussianEnvState<f64> {
        GaussianEnvState::new(vec![ModeMoments::thermal(&BathMode::new(w, m).unwrap(), Beta::Finite(beta))]).unwrap()
    }

    fn one_mode_spec(sx: f64, sp: f64) -> MeasurementSpec<f64> {
        MeasurementSpec::new(vec![sx], vec![sp]).unwrap()
    }

    #[test]
    fn imprecise_measurement_leaves_prior() {
        let prior = thermal_state(1.0, 1.0, 0.5);
        let spec = one_mode_spec(1e6, 1e6);
        let y = OutcomeRecord { x_out: vec![3.0], p_out: vec![-2.0] };
        let post = condition_on(&prior, &spec, &y).unwrap();
        let (a, b) = (&prior.modes()[0], &post.modes()[0]);
        for (p, q) in [(a.mean_x, b.mean_x), (a.mean_p, b.mean_p), (a.var_x, b.var_x), (a.var_p, b.var_p)] {
            assert!((p - q).abs() < 1e-9);
        }
        let (_, var) = outcome_distribution(a, Quadrature::Position, 1e6);
        assert!(var > 1e11);
    }

    #[test]
    fn sharp_position_variance() {
        let m = ModeMoments::<f64> { mean_x: 0.0, mean_p: 0.0, var_x: 4.0, var_p: 4.0, cov_xp: 0.0 };
        let sigma = 0.2;
        let post = condition_mode(&m, Quadrature::Position, sigma, 1.0).unwrap();
        // σ/Δ = 0.1: Δ²σ²/(Δ²+σ²) = σ²/(1 + 10⁻²).
        assert!((post.var_x - sigma * sigma / 1.01).abs() < 1e-15);
        assert!((post.var_p - (4.0 + 0.25 / 0.04)).abs() < 1e-12);
        assert!((post.mean_x - 4.0 / 4.04).abs() < 1e-15);
    }

    #[test]
    fn conditioning_matches_fock_oracle() {
        // n̄ ≈ 9.5, so Δ_X Δ_P ≈ 10; the thermal tail needs about 200 levels.
        let (w, mass) = (1.0, 1.0);
        let beta = 2.0 * (1.0f64 / 20.0).atanh() / w;
        let cutoff = 200;
        let bath = BathSpec::thermal(vec![BathMode::new(w, mass).unwrap()], DMatrix::from_element(1, 1, 1.0), Beta::Finite(beta))
            .unwrap();
        let omega = env_initial_state(&bath, &FockConfig::uniform(cutoff, 1).unwrap()).unwrap();
        let (x, p) = (position::<f64>(cutoff, w, mass), momentum::<f64>(cutoff, w, mass));
        let prior = GaussianEnvState::from_bath(&bath);
        let delta = prior.modes()[0].var_x.sqrt();
        assert!((delta * prior.modes()[0].var_p.sqrt() - 10.0).abs() < 1e-9);
        let spec = one_mode_spec(0.5 * delta, 0.6 * delta);
        let y = OutcomeRecord { x_out: vec![1.3], p_out: vec![-2.1] };
        let (after_p, _) = apply_gaussian_kraus(&omega, &p, spec.sigma_p[0], y.p_out[0]).unwrap();
        let (post_rho, _) = apply_gaussian_kraus(&after_p, &x, spec.sigma_x[0], y.x_out[0]).unwrap();
        let moments = |r: &CMat<f64>| {
            let ex = trace(&(&x * r)).re;
            let ep = trace(&(&p * r)).re;
            ModeMoments {
                mean_x: ex,
                mean_p: ep,
                var_x: trace(&(&x * &x * r)).re - ex * ex,
                var_p: trace(&(&p * &p * r)).re - ep * ep,
                cov_xp: 0.5 * trace(&((&x * &p + &p * &x) * r)).re - ex * ep,
            }
        };
        let fock = moments(&post_rho);
        let gauss = condition_on(&prior, &spec, &y).unwrap().modes()[0];
        for (a, b) in [
            (fock.mean_x, gauss.mean_x),
            (fock.mean_p, gauss.mean_p),
            (fock.var_x, gauss.var_x),
            (fock.var_p, gauss.var_p),
            (fock.cov_xp, gauss.cov_xp),
        ] {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        // Conditional mean field from the truncated post-measured state.
        let h = CMat::from_fn(cutoff, cutoff, |i, j| if i == j { re(w * i as f64) } else { re(0.0) });
        let t = 0.7;
        let xt = CMat::from_fn(cutoff, cutoff, |i, j| x[(i, j)] * cx(0.0, (h[(i, i)].re - h[(j, j)].re) * t).exp());
        let oracle = trace(&(xt * &post_rho)).re;
        let post = condition_on(&prior, &spec, &y).unwrap();
        assert!((conditional_mean_field(&post, &bath, 0, t).unwrap() - oracle).abs() < 1e-4);
    }

    #[test]
    fn mixture_over_outcomes_is_gaussian_dephasing() {
        // Σ_y P(y) Ω_y equals Ω with coherences in the X eigenbasis damped by
        // exp(−(a−b)²/(8σ²)); first moments are preserved.
        let (w, mass, cutoff) = (1.0, 1.0, 40);
        let bath = BathSpec::thermal(vec![BathMode::new(w, mass).unwrap()], DMatrix::from_element(1, 1, 1.0), Beta::Finite(1.0))
            .unwrap()
            .with_state(BathState::Displaced { beta: Beta::Finite(1.0), mean_x: vec![0.4], mean_p: vec![0.2] })
            .unwrap();
        let omega = env_initial_state(&bath, &FockConfig::uniform(cutoff, 1).unwrap()).unwrap();
        let x = position::<f64>(cutoff, w, mass);
        let sigma = 0.8;
        let (lo, hi, points) = (-14.0, 14.0, 2801);
        let h = (hi - lo) / (points - 1) as f64;
        let mut mixture = CMat::zeros(cutoff, cutoff);
        for i in 0..points {
            let y = lo + h * i as f64;
            let wgt = if i == 0 || i == points - 1 { 0.5 * h } else { h };
            let (post, prob) = apply_gaussian_kraus(&omega, &x, sigma, y).unwrap();
            mixture += post * re(prob * wgt);
        }
        let (vals, vecs) = crate::linalg::eigh(&x).unwrap();
        let in_basis = vecs.adjoint() * &omega * &vecs;
        let damped = CMat::from_fn(cutoff, cutoff, |a, b| {
            in_basis[(a, b)] * re((-(vals[a] - vals[b]).powi(2) / (8.0 * sigma * sigma)).exp())
        });
        let expected = &vecs * damped * vecs.adjoint();
        assert!(trace_norm_distance(&mixture, &expected).unwrap() < 1e-6);
        assert!((trace(&(&x * &mixture)).re - trace(&(&x * &omega)).re).abs() < 1e-6);
        assert!(trace_norm_distance(&mixture, &omega).unwrap() > 1e-3);
    }

    #[test]
    fn conditional_mean_field_limits() {
        let bath = BathSpec::thermal(
            vec![BathMode::new(0.8, 1.0).unwrap(), BathMode::new(1.7, 0.5).unwrap()],
            DMatrix::from_row_slice(1, 2, &[0.3, -0.6]),
            Beta::Finite(1.0),
        )
        .unwrap();
        let prior = GaussianEnvState::from_bath(&bath);
        assert_eq!(conditional_mean_field(&prior, &bath, 0, 1.3).unwrap(), 0.0);
        let spec = MeasurementSpec::<f64>::new(vec![0.3, 0.4], vec![0.5, 0.6]).unwrap();
        let y = OutcomeRecord { x_out: vec![1.0, -0.5], p_out: vec![0.2, 0.9] };
        let post = condition_on(&prior, &spec, &y).unwrap();
        let at_zero = conditional_mean_field(&post, &bath, 0, 0.0).unwrap();
        let expected = 0.3 * post.modes()[0].mean_x - 0.6 * post.modes()[1].mean_x;
        assert!((at_zero - expected).abs() < 1e-14);
    }

    #[test]
    fn conditional_corr_limits() {
        let bath = BathSpec::thermal(vec![BathMode::new(1.2, 1.0).unwrap()], DMatrix::from_element(1, 1, 0.5), Beta::Finite(0.01))
            .unwrap();
        let prior = GaussianEnvState::from_bath(&bath);
        let origin = OutcomeRecord { x_out: vec![0.0], p_out: vec![0.0] };
        let loose = condition_on(&prior, &one_mode_spec(1e7, 1e7), &origin).unwrap();
        // Δ² ≈ 70 per quadrature; σ = 1 leaves posterior variances near 1.25.
        let sharp = condition_on(&prior, &one_mode_spec(1.0, 1.0), &origin).unwrap();
        let scale = bath.phys_corr(0, 0, 0.0, 0.0).unwrap().re;
        for (t1, t2) in [(0.0, 0.0), (0.5, 1.4), (2.0, 0.3)] {
            let c = bath.phys_corr(0, 0, t1, t2).unwrap();
            let cl = conditional_corr(&loose, &bath, 0, 0, t1, t2).unwrap();
            assert!((c - cl).norm() < 1e-6 * scale);
            let cs = conditional_corr(&sharp, &bath, 0, 0, t1, t2).unwrap();
            assert_eq!(cs.im, c.im);
            assert!(cs.re.abs() < 0.05 * scale);
        }
    }

    #[test]
    fn outcome_variance_is_prior_plus_resolution() {
        let prior = thermal_state(1.0, 1.0, 0.4);
        let spec = one_mode_spec(0.7, 0.9);
        let n = 200_000u64;
        let (mean, var) = sample_outcome_moments(&prior, &spec, 0, Quadrature::Momentum, n, 4).unwrap();
        let target = prior.modes()[0].var_p + 0.81;
        // SE of a Gaussian sample variance is var·sqrt(2/(n−1)).
        assert!((var - target).abs() < tol::NOISE_SIGMAS * target * (2.0 / (n as f64 - 1.0)).sqrt());
        assert!(mean.abs() < tol::NOISE_SIGMAS * (target / n as f64).sqrt());
    }

    #[test]
    fn order_independence_in_semiclassical_regime() {
        let m = ModeMoments::<f64> { mean_x: 0.0, mean_p: 0.0, var_x: 2500.0, var_p: 2500.0, cov_xp: 0.0 };
        let (sx, sp, x, p) = (5.0, 5.0, 31.0, -12.0);
        let px = condition_mode(&condition_mode(&m, Quadrature::Momentum, sp, p).unwrap(), Quadrature::Position, sx, x).unwrap();
        let xp = condition_mode(&condition_mode(&m, Quadrature::Position, sx, x).unwrap(), Quadrature::Momentum, sp, p).unwrap();
        for (a, b) in [(px.mean_x, xp.mean_x), (px.mean_p, xp.mean_p), (px.var_x, xp.var_x), (px.var_p, xp.var_p)] {
            assert!((a - b).abs() < 0.01 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn updates_preserve_uncertainty(
            vx in 0.3f64..50.0, vp in 0.3f64..50.0, c in -0.9f64..0.9,
            sx in 0.01f64..20.0, sp in 0.01f64..20.0, y in -5.0f64..5.0,
        ) {
            let cov = c * (vx * vp - 0.25).max(0.0).sqrt();
            let m = ModeMoments { mean_x: 0.1, mean_p: -0.2, var_x: vx, var_p: vp, cov_xp: cov };
            prop_assume!(m.uncertainty_margin() >= 0.0);
            let after = condition_mode(&m, Quadrature::Momentum, sp, y).unwrap();
            prop_assert!(after.uncertainty_margin() >= -tol::UNCERTAINTY);
            let after = condition_mode(&after, Quadrature::Position, sx, -y).unwrap();
            prop_assert!(after.uncertainty_margin() >= -tol::UNCERTAINTY);
        }
    }

    #[test]
    fn semiclassical_autocorrelation_small_run() {
        // Δ² = 2500 with σ = 5 per quadrature: σ/Δ = 0.1 and σ_X σ_P = 25.
        let w = 1.0;
        let beta = 2.0 * (1.0f64 / 5000.0).atanh() / w;
        let bath = BathSpec::thermal(vec![BathMode::new(w, 1.0).unwrap()], DMatrix::from_element(1, 1, 0.01), Beta::Finite(beta))
            .unwrap();
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(0.5), vec![sigma_z()]).unwrap();
        let psi = ket(&[cx(0.6, 0.0), cx(0.8, 0.0)]);
        let config = SemiclassicalConfig {
            system: sys,
            bath,
            spec: one_mode_spec(5.0, 5.0),
            grid: TimeGrid::new(2.0, 20).unwrap(),
            initial: DensityOperator::pure(&psi).unwrap(),
            n_outcomes: 4000,
            restoration_outcomes: 40,
            n_traj_per_outcome: 50,
            base_seed: 9,
        };
        let result = semiclassical_experiment(&config).unwrap();
        let r = &result.report;
        assert!(r.in_semiclassical_regime);
        assert!(r.max_relative_deviation < 0.1, "{}", r.max_relative_deviation);
        assert_eq!(r.imag_change, 0.0);
        assert!(r.residual_noise_ratio < 0.05);
        let restoration = r.restoration.as_ref().unwrap();
        assert_eq!(restoration.reference, "analytic_dephasing");
        // Each outcome carries a unit-modulus phase, so the outcome average
        // has SE ≈ |ρ₀₁|/√outcomes; compare against it.
        for (d, se) in restoration.trace_distances.iter().zip(&restoration.standard_errors) {
            assert!(*d <= tol::ENSEMBLE_SIGMAS * std::f64::consts::SQRT_2 * se + 1e-3, "{restoration:?}");
        }
        assert!(max_abs_diff(&result.restored[0], config.initial.matrix()) < 1e-12);
    }
}
