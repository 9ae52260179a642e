//! Trajectory integration of the two-state equation, the stochastic von
//! Neumann equation (SVNE) and its shifted variant, plus ensemble averaging.
//!
//! All three matrix equations share the form
//! `dR/dt = Σ_α (l_α(t) A_α(t) R + r_α(t) R A_α(t))`:
//!
//! | equation  | `l_α`          | `r_α`          |
//! |-----------|----------------|----------------|
//! | two-state | `−i ξ⁻`        | `i ξ⁺`         |
//! | SVNE      | `−i (ν + η)`   | `i (ν − η)`    |
//! | shifted   | `−i (ν + E + η)` | `i (ν + E − η)` |
//!
//! Integration is classic RK4 with noise linearly interpolated between grid
//! nodes and `A_α` read from an [`InteractionCache`] on half steps.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bath::BathSpec;
use crate::contour::TimeGrid;
use crate::error::{Error, Result};
use crate::linalg::{eigh, hermiticity_defect, trace, CMat, CVec, DensityOperator};
use crate::noise::{NoiseSampler, NoiseTrajectory, SamplerConfig, SamplerDiagnostics};
use crate::scalar::{cx, re, Cx, Real};
use crate::system::{InteractionCache, SystemSpec};
use crate::tol;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equation {
    TwoState,
    Svne,
    SvneShifted,
    /// Two state vectors `|ψ₋⟩, |ψ₊⟩` with `R = |ψ₋⟩⟨ψ₊|`.
    TwoStateVectors,
}

/// Trajectory operator `R` at a grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticState<T: Real> {
    pub r: CMat<T>,
    pub node: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStateVec<T: Real> {
    pub psi_minus: CVec<T>,
    pub psi_plus: CVec<T>,
}

impl<T: Real> TwoStateVec<T> {
    /// `|ψ₋⟩⟨ψ₊|`.
    pub fn outer(&self) -> CMat<T> {
        &self.psi_minus * self.psi_plus.adjoint()
    }
}

/// Noise coefficients of one step, per channel, at the step start and end.
#[derive(Debug, Clone, Copy)]
pub struct StepNoise<'a, T: Real> {
    pub start: &'a [Cx<T>],
    pub end: &'a [Cx<T>],
}

/// `A_α` at the step start, midpoint and end.
#[derive(Debug, Clone, Copy)]
pub struct StepOps<'a, T: Real> {
    pub start: &'a [CMat<T>],
    pub mid: &'a [CMat<T>],
    pub end: &'a [CMat<T>],
}

impl<'a, T: Real> StepOps<'a, T> {
    pub fn from_cache(cache: &'a InteractionCache<T>, step: usize) -> Self {
        Self { start: cache.ops(2 * step), mid: cache.ops(2 * step + 1), end: cache.ops(2 * step + 2) }
    }
}

fn check_channels<T: Real>(ops: &StepOps<'_, T>, noises: &[&StepNoise<'_, T>]) -> Result<()> {
    let c = ops.start.len();
    if ops.mid.len() != c || ops.end.len() != c {
        return Err(Error::Shape("operator tables disagree on the channel count".into()));
    }
    for n in noises {
        if n.start.len() != c || n.end.len() != c {
            return Err(Error::Shape(format!(
                "noise has {}/{} channels, operators {c}",
                n.start.len(),
                n.end.len()
            )));
        }
    }
    Ok(())
}

// Left/right coefficients at the three RK4 stage times.
struct Coefficients<T: Real> {
    left: [Vec<Cx<T>>; 3],
    right: [Vec<Cx<T>>; 3],
}

fn at_stages<T: Real>(n: &StepNoise<'_, T>, f: impl Fn(Cx<T>) -> Cx<T>) -> [Vec<Cx<T>>; 3] {
    let half = T::lit(0.5);
    [
        n.start.iter().map(|&x| f(x)).collect(),
        n.start.iter().zip(n.end).map(|(&a, &b)| f((a + b) * half)).collect(),
        n.end.iter().map(|&x| f(x)).collect(),
    ]
}

fn generator<T: Real>(r: &CMat<T>, ops: &[CMat<T>], left: &[Cx<T>], right: &[Cx<T>]) -> CMat<T> {
    let mut out = CMat::zeros(r.nrows(), r.ncols());
    for ((a, &l), &rr) in ops.iter().zip(left).zip(right) {
        if l != re(T::zero()) {
            out += a * r * l;
        }
        if rr != re(T::zero()) {
            out += r * a * rr;
        }
    }
    out
}

fn rk4_matrix<T: Real>(r: &CMat<T>, ops: &StepOps<'_, T>, c: &Coefficients<T>, dt: T) -> CMat<T> {
    let half = T::lit(0.5);
    let k1 = generator(r, ops.start, &c.left[0], &c.right[0]);
    let k2 = generator(&(r + &k1 * re(dt * half)), ops.mid, &c.left[1], &c.right[1]);
    let k3 = generator(&(r + &k2 * re(dt * half)), ops.mid, &c.left[1], &c.right[1]);
    let k4 = generator(&(r + &k3 * re(dt)), ops.end, &c.left[2], &c.right[2]);
    r + (k1 + (k2 + k3) * re(T::lit(2.0)) + k4) * re(dt / T::lit(6.0))
}

fn minus_i_times<T: Real>(z: Cx<T>) -> Cx<T> {
    cx(z.im, -z.re)
}

fn i_times<T: Real>(z: Cx<T>) -> Cx<T> {
    cx(-z.im, z.re)
}

/// One RK4 step of `dR/dt = −iΣ ξ⁻ A R + iΣ ξ⁺ R A`.
pub fn step_twostate<T: Real>(
    r: &CMat<T>,
    xi_minus: &StepNoise<'_, T>,
    xi_plus: &StepNoise<'_, T>,
    ops: &StepOps<'_, T>,
    dt: T,
) -> Result<CMat<T>> {
    check_channels(ops, &[xi_minus, xi_plus])?;
    let c = Coefficients { left: at_stages(xi_minus, minus_i_times), right: at_stages(xi_plus, i_times) };
    Ok(rk4_matrix(r, ops, &c, dt))
}

/// One RK4 step of `dR/dt = −iΣ (ν[A, R] + η{A, R})`.
pub fn step_svne<T: Real>(
    r: &CMat<T>,
    nu: &StepNoise<'_, T>,
    eta: &StepNoise<'_, T>,
    ops: &StepOps<'_, T>,
    dt: T,
) -> Result<CMat<T>> {
    let zero = vec![re(T::zero()); nu.start.len()];
    let e = StepNoise { start: &zero, end: &zero };
    step_svne_shifted(r, nu, eta, &e, ops, dt)
}

/// As [`step_svne`] with `ν → ν + E` in the commutator term only.
pub fn step_svne_shifted<T: Real>(
    r: &CMat<T>,
    nu: &StepNoise<'_, T>,
    eta: &StepNoise<'_, T>,
    mean_field: &StepNoise<'_, T>,
    ops: &StepOps<'_, T>,
    dt: T,
) -> Result<CMat<T>> {
    check_channels(ops, &[nu, eta, mean_field])?;
    let half = T::lit(0.5);
    let stage = |s: usize, sign: T| -> Vec<Cx<T>> {
        (0..nu.start.len())
            .map(|ch| {
                let pick = |n: &StepNoise<'_, T>| match s {
                    0 => n.start[ch],
                    1 => (n.start[ch] + n.end[ch]) * half,
                    _ => n.end[ch],
                };
                pick(nu) + pick(mean_field) + pick(eta) * sign
            })
            .collect()
    };
    let one = T::one();
    let left = [0, 1, 2].map(|s| stage(s, one).into_iter().map(minus_i_times).collect());
    let right = [0, 1, 2].map(|s| stage(s, -one).into_iter().map(i_times).collect());
    Ok(rk4_matrix(r, ops, &Coefficients { left, right }, dt))
}

fn rk4_vector<T: Real>(psi: &CVec<T>, ops: &StepOps<'_, T>, coef: &[Vec<Cx<T>>; 3], dt: T) -> CVec<T> {
    let apply = |v: &CVec<T>, a: &[CMat<T>], c: &[Cx<T>]| {
        let mut out = CVec::zeros(v.len());
        for (m, &z) in a.iter().zip(c) {
            if z != re(T::zero()) {
                out += m * v * z;
            }
        }
        out
    };
    let half = T::lit(0.5);
    let k1 = apply(psi, ops.start, &coef[0]);
    let k2 = apply(&(psi + &k1 * re(dt * half)), ops.mid, &coef[1]);
    let k3 = apply(&(psi + &k2 * re(dt * half)), ops.mid, &coef[1]);
    let k4 = apply(&(psi + &k3 * re(dt)), ops.end, &coef[2]);
    psi + (k1 + (k2 + k3) * re(T::lit(2.0)) + k4) * re(dt / T::lit(6.0))
}

/// One RK4 step of `d|ψ₋⟩/dt = −iΣ ξ⁻ A |ψ₋⟩` and
/// `d|ψ₊⟩/dt = −iΣ conj(ξ⁺) A |ψ₊⟩`, so that `|ψ₋⟩⟨ψ₊|` follows the
/// two-state equation for complex noise.
pub fn step_two_state_vectors<T: Real>(
    state: &TwoStateVec<T>,
    xi_minus: &StepNoise<'_, T>,
    xi_plus: &StepNoise<'_, T>,
    ops: &StepOps<'_, T>,
    dt: T,
) -> Result<TwoStateVec<T>> {
    check_channels(ops, &[xi_minus, xi_plus])?;
    let minus = at_stages(xi_minus, minus_i_times);
    let plus = at_stages(xi_plus, |z| minus_i_times(z.conj()));
    Ok(TwoStateVec {
        psi_minus: rk4_vector(&state.psi_minus, ops, &minus, dt),
        psi_plus: rk4_vector(&state.psi_plus, ops, &plus, dt),
    })
}

/// Propagates two state vectors over the whole grid; returns the states at
/// every node.
pub fn evolve_two_state_vectors<T: Real>(
    initial: &TwoStateVec<T>,
    noise: &NoiseTrajectory<T>,
    cache: &InteractionCache<T>,
) -> Result<Vec<TwoStateVec<T>>> {
    let grid = noise.grid;
    check_cache(cache, &grid)?;
    let c = noise.n_channels();
    let mut out = Vec::with_capacity(grid.n_nodes());
    out.push(initial.clone());
    let mut xm = vec![vec![re(T::zero()); c]; grid.n_nodes()];
    let mut xp = xm.clone();
    for ch in 0..c {
        let (m, p) = noise.xi(ch);
        for j in 0..grid.n_nodes() {
            xm[j][ch] = m[j];
            xp[j][ch] = p[j];
        }
    }
    for j in 0..grid.n_steps() {
        let ops = StepOps::from_cache(cache, j);
        let next = step_two_state_vectors(
            out.last().expect("non-empty"),
            &StepNoise { start: &xm[j], end: &xm[j + 1] },
            &StepNoise { start: &xp[j], end: &xp[j + 1] },
            &ops,
            grid.dt(),
        )?;
        out.push(next);
    }
    Ok(out)
}

fn check_cache<T: Real>(cache: &InteractionCache<T>, grid: &TimeGrid<T>) -> Result<()> {
    if cache.len() != 2 * grid.n_steps() + 1 {
        return Err(Error::Precondition(format!(
            "interaction cache has {} entries; the grid needs {} half steps",
            cache.len(),
            2 * grid.n_steps() + 1
        )));
    }
    Ok(())
}

/// `E_α(t)` on the half steps of a grid, `[half_step][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldTable<T: Real> {
    values: Vec<Vec<Cx<T>>>,
}

impl<T: Real> MeanFieldTable<T> {
    pub fn from_bath(bath: &BathSpec<T>, grid: &TimeGrid<T>) -> Self {
        Self::from_fn(grid, bath.n_channels(), |ch, t| bath.mean(ch, t))
    }

    pub fn from_fn(grid: &TimeGrid<T>, n_channels: usize, f: impl Fn(usize, T) -> T) -> Self {
        let half = grid.dt() * T::lit(0.5);
        let values = (0..=2 * grid.n_steps())
            .map(|h| {
                let t = half * T::from_usize_lossy(h);
                (0..n_channels).map(|ch| re(f(ch, t))).collect()
            })
            .collect();
        Self { values }
    }

    pub fn at(&self, half_step: usize) -> &[Cx<T>] {
        &self.values[half_step]
    }
}

/// Shared, read-only inputs for propagating trajectories of one model.
#[derive(Debug, Clone)]
pub struct TrajectoryContext<T: Real> {
    pub grid: TimeGrid<T>,
    pub cache: InteractionCache<T>,
    pub equation: Equation,
    pub blow_up: T,
}

impl<T: Real> TrajectoryContext<T> {
    pub fn new(system: &SystemSpec<T>, grid: &TimeGrid<T>, equation: Equation) -> Result<Self> {
        Ok(Self {
            grid: *grid,
            cache: InteractionCache::half_steps(system, grid)?,
            equation,
            blow_up: T::lit(tol::BLOW_UP),
        })
    }

    fn guard(&self, r: &CMat<T>) -> bool {
        r.iter().all(|z| z.re.is_finite() && z.im.is_finite() && z.re.abs() <= self.blow_up && z.im.abs() <= self.blow_up)
    }

    /// `R` at every grid node, or `None` if the blow-up guard tripped.
    ///
    /// `mean_field` is required for [`Equation::SvneShifted`] and ignored
    /// otherwise; its half-step entries replace the linear interpolation.
    pub fn propagate(
        &self,
        r0: &CMat<T>,
        noise: &NoiseTrajectory<T>,
        mean_field: Option<&MeanFieldTable<T>>,
    ) -> Result<Option<Vec<CMat<T>>>> {
        if noise.grid != self.grid {
            return Err(Error::Validation("noise trajectory sampled on a different grid".into()));
        }
        if noise.n_channels() != self.cache.ops(0).len() {
            return Err(Error::Shape(format!(
                "noise has {} channels, system {}",
                noise.n_channels(),
                self.cache.ops(0).len()
            )));
        }
        let n = self.grid.n_nodes();
        let c = noise.n_channels();
        let column = |src: &Vec<Vec<Cx<T>>>, j: usize| -> Vec<Cx<T>> { (0..c).map(|ch| src[ch][j]).collect() };
        let mut out = Vec::with_capacity(n);
        out.push(r0.clone());
        match self.equation {
            Equation::TwoStateVectors => {
                let psi = pure_vector(r0)?;
                let init = TwoStateVec { psi_minus: psi.clone(), psi_plus: psi };
                for s in evolve_two_state_vectors(&init, noise, &self.cache)?.iter().skip(1) {
                    let r = s.outer();
                    if !self.guard(&r) {
                        return Ok(None);
                    }
                    out.push(r);
                }
            }
            eq => {
                let shifted = eq == Equation::SvneShifted;
                if shifted && mean_field.is_none() {
                    return Err(Error::Precondition("shifted SVNE needs a mean-field table".into()));
                }
                let zero = vec![re(T::zero()); c];
                for j in 0..self.grid.n_steps() {
                    let ops = StepOps::from_cache(&self.cache, j);
                    let r = out.last().expect("non-empty");
                    let next = if eq == Equation::TwoState {
                        let (m0, m1): (Vec<_>, Vec<_>) = (0..c)
                            .map(|ch| (noise.nu[ch][j] + noise.eta[ch][j], noise.nu[ch][j + 1] + noise.eta[ch][j + 1]))
                            .unzip();
                        let (p0, p1): (Vec<_>, Vec<_>) = (0..c)
                            .map(|ch| (noise.nu[ch][j] - noise.eta[ch][j], noise.nu[ch][j + 1] - noise.eta[ch][j + 1]))
                            .unzip();
                        step_twostate(
                            r,
                            &StepNoise { start: &m0, end: &m1 },
                            &StepNoise { start: &p0, end: &p1 },
                            &ops,
                            self.grid.dt(),
                        )?
                    } else {
                        let (nu0, nu1) = (column(&noise.nu, j), column(&noise.nu, j + 1));
                        let (eta0, eta1) = (column(&noise.eta, j), column(&noise.eta, j + 1));
                        let nu_s = StepNoise { start: &nu0, end: &nu1 };
                        let eta_s = StepNoise { start: &eta0, end: &eta1 };
                        match mean_field.filter(|_| shifted) {
                            Some(table) => {
                                step_shifted_exact_mean(r, &nu_s, &eta_s, table, j, &ops, self.grid.dt())?
                            }
                            None => step_svne_shifted(
                                r,
                                &nu_s,
                                &eta_s,
                                &StepNoise { start: &zero, end: &zero },
                                &ops,
                                self.grid.dt(),
                            )?,
                        }
                    };
                    if !self.guard(&next) {
                        return Ok(None);
                    }
                    out.push(next);
                }
            }
        }
        Ok(Some(out))
    }
}

// Shifted step with the mean field evaluated exactly at the midpoint.
fn step_shifted_exact_mean<T: Real>(
    r: &CMat<T>,
    nu: &StepNoise<'_, T>,
    eta: &StepNoise<'_, T>,
    table: &MeanFieldTable<T>,
    step: usize,
    ops: &StepOps<'_, T>,
    dt: T,
) -> Result<CMat<T>> {
    check_channels(ops, &[nu, eta])?;
    let (e0, em, e1) = (table.at(2 * step), table.at(2 * step + 1), table.at(2 * step + 2));
    if e0.len() != nu.start.len() {
        return Err(Error::Shape("mean-field table channel count differs from the noise".into()));
    }
    let half = T::lit(0.5);
    let stage = |s: usize, sign: T| -> Vec<Cx<T>> {
        (0..nu.start.len())
            .map(|ch| {
                let (n, e, h) = match s {
                    0 => (nu.start[ch], e0[ch], eta.start[ch]),
                    1 => ((nu.start[ch] + nu.end[ch]) * half, em[ch], (eta.start[ch] + eta.end[ch]) * half),
                    _ => (nu.end[ch], e1[ch], eta.end[ch]),
                };
                n + e + h * sign
            })
            .collect()
    };
    let one = T::one();
    let left = [0, 1, 2].map(|s| stage(s, one).into_iter().map(minus_i_times).collect());
    let right = [0, 1, 2].map(|s| stage(s, -one).into_iter().map(i_times).collect());
    Ok(rk4_matrix(r, ops, &Coefficients { left, right }, dt))
}

/// Normalized dominant eigenvector of a rank-one density matrix.
pub fn pure_vector<T: Real>(rho: &CMat<T>) -> Result<CVec<T>> {
    let (vals, vecs) = eigh(rho)?;
    let top = *vals.last().ok_or_else(|| Error::Shape("empty density matrix".into()))?;
    let rest: T = vals[..vals.len() - 1].iter().fold(T::zero(), |a, &v| a + v.abs());
    if rest > T::lit(tol::DENSITY_TRACE).max(top * T::lit(1e-8)) {
        return Err(Error::Precondition("two-state-vector unraveling needs a pure initial state".into()));
    }
    let v = vecs.column(vals.len() - 1).into_owned();
    Ok(v * re(top.sqrt()))
}

/// Running sums of trajectory operators, reduced in fixed index order.
#[derive(Debug, Clone)]
pub struct EnsembleAccumulator<T: Real> {
    sum: Vec<CMat<T>>,
    sum_sq_re: Vec<DMatrix<T>>,
    sum_sq_im: Vec<DMatrix<T>>,
    count: u64,
    flagged: Vec<u64>,
}

impl<T: Real> EnsembleAccumulator<T> {
    pub fn new(n_nodes: usize, dim: usize) -> Self {
        Self::with_shape(n_nodes, (dim, dim))
    }

    /// Accumulator for `rows × cols` entries per node.
    pub fn with_shape(n_nodes: usize, (rows, cols): (usize, usize)) -> Self {
        Self {
            sum: vec![CMat::zeros(rows, cols); n_nodes],
            sum_sq_re: vec![DMatrix::zeros(rows, cols); n_nodes],
            sum_sq_im: vec![DMatrix::zeros(rows, cols); n_nodes],
            count: 0,
            flagged: Vec::new(),
        }
    }

    pub fn push(&mut self, series: &[CMat<T>]) {
        for (node, r) in series.iter().enumerate() {
            self.sum[node] += r;
            self.sum_sq_re[node] += r.map(|z| z.re * z.re);
            self.sum_sq_im[node] += r.map(|z| z.im * z.im);
        }
        self.count += 1;
    }

    pub fn flag(&mut self, index: u64) {
        self.flagged.push(index);
    }

    pub fn merge(&mut self, other: Self) {
        for node in 0..self.sum.len() {
            self.sum[node] += &other.sum[node];
            self.sum_sq_re[node] += &other.sum_sq_re[node];
            self.sum_sq_im[node] += &other.sum_sq_im[node];
        }
        self.count += other.count;
        self.flagged.extend(other.flagged);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn flagged(&self) -> &[u64] {
        &self.flagged
    }

    /// Means and standard errors (sample std over `√n`, real and imaginary
    /// parts separately).
    pub fn finish(&self) -> Result<(Vec<CMat<T>>, Vec<DMatrix<T>>, Vec<DMatrix<T>>)> {
        if self.count == 0 {
            return Err(Error::Numerical("every trajectory was excluded".into()));
        }
        let n = T::from_usize_lossy(self.count as usize);
        let denom = if self.count > 1 { n - T::one() } else { T::one() };
        let se = |s: T, s2: T| ((s2 - s * s / n) / denom).max(T::zero()).sqrt() / n.sqrt();
        let mean = self.sum.iter().map(|s| s.map(|z| z / n)).collect();
        let se_re = self
            .sum
            .iter()
            .zip(&self.sum_sq_re)
            .map(|(s, q)| s.zip_map(q, |z, q| se(z.re, q)))
            .collect();
        let se_im = self
            .sum
            .iter()
            .zip(&self.sum_sq_im)
            .map(|(s, q)| s.zip_map(q, |z, q| se(z.im, q)))
            .collect();
        Ok((mean, se_re, se_im))
    }
}

/// Trajectories per reduction block.
pub const ENSEMBLE_BLOCK: u64 = 256;

/// Runs `f` for trajectory indices `0..n_traj` in parallel blocks of
/// [`ENSEMBLE_BLOCK`] and merges the blocks in index order. `f` returns
/// `None` for excluded trajectories.
pub fn reduce_trajectories<T, F>(n_traj: u64, n_nodes: usize, dim: usize, f: F) -> Result<EnsembleAccumulator<T>>
where
    T: Real,
    F: Fn(u64) -> Result<Option<Vec<CMat<T>>>> + Sync,
{
    reduce_trajectories_shaped(n_traj, n_nodes, (dim, dim), f)
}

/// [`reduce_trajectories`] for rectangular per-node entries.
pub fn reduce_trajectories_shaped<T, F>(
    n_traj: u64,
    n_nodes: usize,
    shape: (usize, usize),
    f: F,
) -> Result<EnsembleAccumulator<T>>
where
    T: Real,
    F: Fn(u64) -> Result<Option<Vec<CMat<T>>>> + Sync,
{
    let blocks: Vec<u64> = (0..n_traj.div_ceil(ENSEMBLE_BLOCK)).collect();
    let partial: Vec<Result<EnsembleAccumulator<T>>> = blocks
        .par_iter()
        .map(|&b| {
            let mut acc = EnsembleAccumulator::with_shape(n_nodes, shape);
            for i in b * ENSEMBLE_BLOCK..((b + 1) * ENSEMBLE_BLOCK).min(n_traj) {
                match f(i)? {
                    Some(series) => acc.push(&series),
                    None => acc.flag(i),
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = EnsembleAccumulator::with_shape(n_nodes, shape);
    for p in partial {
        total.merge(p?);
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig<T: Real> {
    pub system: SystemSpec<T>,
    pub bath: BathSpec<T>,
    pub grid: TimeGrid<T>,
    pub equation: Equation,
    pub sampler: SamplerConfig<T>,
    pub n_traj: u64,
    pub initial: DensityOperator<T>,
    pub blow_up: T,
    /// Operators `O` whose `Tr[O R]` is averaged alongside `R`.
    pub observables: Vec<CMat<T>>,
}

/// Ensemble mean and standard errors of `Tr[O R]` per node.
#[derive(Debug, Clone)]
pub struct ObservableSeries<T: Real> {
    pub mean: Vec<Cx<T>>,
    pub se_re: Vec<T>,
    pub se_im: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct EnsembleResult<T: Real> {
    pub times: Vec<T>,
    pub mean_rho: Vec<CMat<T>>,
    pub se_re: Vec<DMatrix<T>>,
    pub se_im: Vec<DMatrix<T>>,
    pub n_traj: u64,
    pub excluded: Vec<u64>,
    /// More than 1% of trajectories tripped the blow-up guard.
    pub unreliable: bool,
    pub base_seed: u64,
    pub sampler: SamplerDiagnostics,
    pub trace: Vec<Cx<T>>,
    pub hermiticity_defect: Vec<T>,
    /// One entry per configured observable.
    pub observables: Vec<ObservableSeries<T>>,
}

impl<T: Real> EnsembleResult<T> {
    /// `sqrt(se_re² + se_im²)` entrywise at a node.
    pub fn combined_se(&self, node: usize) -> DMatrix<T> {
        self.se_re[node].zip_map(&self.se_im[node], |a, b| (a * a + b * b).sqrt())
    }
}

pub fn run_ensemble<T: Real>(config: &EnsembleConfig<T>) -> Result<EnsembleResult<T>> {
    let dim = config.system.dim();
    if config.initial.dim() != dim {
        return Err(Error::Shape(format!("initial state of dimension {} for a {dim}-level system", config.initial.dim())));
    }
    if config.system.n_channels() != config.bath.n_channels() {
        return Err(Error::Shape(format!(
            "system has {} coupling channels, bath {}",
            config.system.n_channels(),
            config.bath.n_channels()
        )));
    }
    if config.n_traj == 0 {
        return Err(Error::Validation("n_traj must be positive".into()));
    }
    if config.equation != Equation::SvneShifted && !config.bath.is_stable() {
        log::warn!("bath violates the stability condition; only the shifted SVNE accounts for its mean field");
    }
    if let Some(o) = config.observables.iter().find(|o| o.shape() != (dim, dim)) {
        return Err(Error::Shape(format!("observable of shape {:?} for a {dim}-level system", o.shape())));
    }
    let mut ctx = TrajectoryContext::new(&config.system, &config.grid, config.equation)?;
    ctx.blow_up = config.blow_up;
    let sampler = NoiseSampler::new(&config.bath, &config.grid, &config.sampler)?;
    let mean_field = MeanFieldTable::from_bath(&config.bath, &config.grid);
    let r0 = config.initial.matrix().clone();
    // Observables ride along as extra columns of the first row.
    let k = config.observables.len();
    let transposed: Vec<CMat<T>> = config.observables.iter().map(|o| o.transpose()).collect();
    let acc = reduce_trajectories_shaped(config.n_traj, config.grid.n_nodes(), (dim, dim + k), |i| {
        let series = ctx.propagate(&r0, &sampler.sample(i), Some(&mean_field))?;
        Ok(series.map(|rs| {
            rs.into_iter()
                .map(|r| {
                    let mut m = CMat::zeros(dim, dim + k);
                    m.columns_mut(0, dim).copy_from(&r);
                    for (o, ot) in transposed.iter().enumerate() {
                        m[(0, dim + o)] = ot.component_mul(&r).sum();
                    }
                    m
                })
                .collect()
        }))
    })?;
    let (wide, wide_re, wide_im) = acc.finish()?;
    let observables = (0..k)
        .map(|o| ObservableSeries {
            mean: wide.iter().map(|m| m[(0, dim + o)]).collect(),
            se_re: wide_re.iter().map(|m| m[(0, dim + o)]).collect(),
            se_im: wide_im.iter().map(|m| m[(0, dim + o)]).collect(),
        })
        .collect();
    let mean_rho: Vec<CMat<T>> = wide.iter().map(|m| m.columns(0, dim).into_owned()).collect();
    let se_re = wide_re.iter().map(|m| m.columns(0, dim).into_owned()).collect();
    let se_im = wide_im.iter().map(|m| m.columns(0, dim).into_owned()).collect();
    let excluded = acc.flagged().to_vec();
    let unreliable = (excluded.len() as f64) > tol::MAX_FLAGGED_FRACTION * config.n_traj as f64;
    if !excluded.is_empty() {
        log::warn!("{} of {} trajectories excluded by the blow-up guard", excluded.len(), config.n_traj);
    }
    let trace = mean_rho.iter().map(trace).collect();
    let hermiticity_defect = mean_rho.iter().map(hermiticity_defect).collect();
    Ok(EnsembleResult {
        times: config.grid.nodes(),
        mean_rho,
        se_re,
        se_im,
        n_traj: acc.count(),
        excluded,
        unreliable,
        base_seed: config.sampler.base_seed,
        sampler: sampler.diagnostics().clone(),
        trace,
        hermiticity_defect,
        observables,
    })
}

/// State-vector helper: `|ψ⟩` from amplitudes.
pub fn ket<T: Real>(amplitudes: &[Cx<T>]) -> CVec<T> {
    DVector::from_column_slice(amplitudes)
}
