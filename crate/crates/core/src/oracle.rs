//! Brute-force ground truth: the system plus truncated bosonic modes,
//! evolved exactly.
//!
//! Tensor order is system first, then modes in bath order; each mode is a
//! Fock space `{|0⟩, …, |cutoff−1⟩}` with `H_E = Σ ω a†a`.

use crate::bath::{BathSpec, BathState, Beta, ModeMoments};
use crate::error::{Error, Result};
use crate::linalg::{
    eigh, expm, hermitian_part, identity, kron, kron_all, trace, trace_norm_distance, CMat,
    DensityOperator,
};
use crate::scalar::{cexp, cx, re, Cx, Real};
use crate::system::{FreeEvolution, PreparationSpec, SystemSpec};
use crate::tol;

/// Fock cutoffs per mode and the admissible truncated tail mass.
#[derive(Debug, Clone, PartialEq)]
pub struct FockConfig {
    pub cutoffs: Vec<usize>,
    pub tail_tol: f64,
}

impl FockConfig {
    pub fn new(cutoffs: Vec<usize>) -> Result<Self> {
        if let Some(&c) = cutoffs.iter().find(|&&c| c < 2) {
            return Err(Error::Validation(format!("Fock cutoff {c} must be at least 2")));
        }
        Ok(Self { cutoffs, tail_tol: tol::FOCK_TAIL })
    }

    pub fn uniform(cutoff: usize, n_modes: usize) -> Result<Self> {
        Self::new(vec![cutoff; n_modes])
    }

    pub fn env_dim(&self) -> usize {
        self.cutoffs.iter().product()
    }

    /// Same configuration with every cutoff doubled.
    pub fn doubled(&self) -> Self {
        Self { cutoffs: self.cutoffs.iter().map(|c| 2 * c).collect(), tail_tol: self.tail_tol }
    }
}

fn check_modes<T: Real>(bath: &BathSpec<T>, fock: &FockConfig) -> Result<()> {
    if fock.cutoffs.len() != bath.n_modes() {
        return Err(Error::Shape(format!("{} cutoffs for {} modes", fock.cutoffs.len(), bath.n_modes())));
    }
    Ok(())
}

fn check_cap(dim: usize) -> Result<()> {
    if dim > tol::ORACLE_DIM_CAP {
        return Err(Error::Resource(format!(
            "joint dimension {dim} exceeds the cap of {}; lower the Fock cutoffs or the number of modes",
            tol::ORACLE_DIM_CAP
        )));
    }
    Ok(())
}

/// Annihilation operator on a `cutoff`-level Fock space.
pub fn annihilation<T: Real>(cutoff: usize) -> CMat<T> {
    let mut a = CMat::zeros(cutoff, cutoff);
    for n in 1..cutoff {
        a[(n - 1, n)] = re(T::from_usize_lossy(n).sqrt());
    }
    a
}

/// `X = (a + a†)/√(2mω)`.
pub fn position<T: Real>(cutoff: usize, omega: T, mass: T) -> CMat<T> {
    let a = annihilation::<T>(cutoff);
    (&a + a.adjoint()) * re(T::one() / (T::lit(2.0) * mass * omega).sqrt())
}

/// `P = i √(mω/2) (a† − a)`.
pub fn momentum<T: Real>(cutoff: usize, omega: T, mass: T) -> CMat<T> {
    let a = annihilation::<T>(cutoff);
    (a.adjoint() - &a) * cx(T::zero(), (mass * omega * T::lit(0.5)).sqrt())
}

fn embed<T: Real>(op: &CMat<T>, slot: usize, dims: &[usize]) -> CMat<T> {
    let factors: Vec<CMat<T>> = dims
        .iter()
        .enumerate()
        .map(|(k, &d)| if k == slot { op.clone() } else { identity(d) })
        .collect();
    kron_all(&factors)
}

/// Bath Hamiltonian `Σ ω_k a†_k a_k` on the truncated environment.
pub fn env_hamiltonian<T: Real>(bath: &BathSpec<T>, fock: &FockConfig) -> Result<CMat<T>> {
    check_modes(bath, fock)?;
    check_cap(fock.env_dim())?;
    let mut h = CMat::zeros(fock.env_dim(), fock.env_dim());
    for (k, mode) in bath.modes().iter().enumerate() {
        let n = CMat::from_fn(fock.cutoffs[k], fock.cutoffs[k], |i, j| {
            if i == j {
                re(T::from_usize_lossy(i) * mode.omega)
            } else {
                re(T::zero())
            }
        });
        h += embed(&n, k, &fock.cutoffs);
    }
    Ok(h)
}

/// `B_α = Σ_k g[α][k] X_k` on the truncated environment.
pub fn env_coupling<T: Real>(bath: &BathSpec<T>, fock: &FockConfig, channel: usize) -> Result<CMat<T>> {
    check_modes(bath, fock)?;
    if channel >= bath.n_channels() {
        return Err(Error::Lookup { kind: "channel", index: channel });
    }
    let mut b = CMat::zeros(fock.env_dim(), fock.env_dim());
    for (k, mode) in bath.modes().iter().enumerate() {
        let g = bath.coupling()[(channel, k)];
        if g != T::zero() {
            b += embed(&position(fock.cutoffs[k], mode.omega, mode.mass), k, &fock.cutoffs) * re(g);
        }
    }
    Ok(b)
}

/// `H = H_S⊗I + I⊗H_E + Σ_α A_α⊗B_α`.
pub fn build_joint_hamiltonian<T: Real>(system: &SystemSpec<T>, bath: &BathSpec<T>, fock: &FockConfig) -> Result<CMat<T>> {
    check_modes(bath, fock)?;
    if system.n_channels() != bath.n_channels() {
        return Err(Error::Shape(format!(
            "system has {} channels, bath {}",
            system.n_channels(),
            bath.n_channels()
        )));
    }
    let env = fock.env_dim();
    check_cap(system.dim() * env)?;
    let mut h = kron(system.h_s(), &identity(env)) + kron(&identity(system.dim()), &env_hamiltonian(bath, fock)?);
    for (a, op) in system.couplings().iter().enumerate() {
        h += kron(op, &env_coupling(bath, fock, a)?);
    }
    Ok(h)
}

/// Tail mass `P(n ≥ cutoff)` of a thermal mode and the smallest cutoff
/// whose tail is below `tail_tol`.
fn thermal_tail<T: Real>(omega: T, beta: Beta<T>, cutoff: usize, tail_tol: f64) -> (f64, usize) {
    match beta {
        Beta::Infinite => (0.0, 2),
        Beta::Finite(b) => {
            let q = (-(b * omega).as_f64()).exp();
            let tail = q.powi(cutoff as i32);
            let suggested = if q <= 0.0 { 2 } else { ((tail_tol.ln() / q.ln()).ceil() as usize + 1).max(2) };
            (tail, suggested)
        }
    }
}

fn thermal_mode<T: Real>(omega: T, beta: Beta<T>, cutoff: usize) -> CMat<T> {
    let mut rho = CMat::zeros(cutoff, cutoff);
    match beta {
        Beta::Infinite => rho[(0, 0)] = re(T::one()),
        Beta::Finite(b) => {
            let q = (-(b * omega)).exp();
            let mut p = T::one();
            let mut z = T::zero();
            for n in 0..cutoff {
                rho[(n, n)] = re(p);
                z += p;
                p *= q;
            }
            rho /= re(z);
        }
    }
    rho
}

// Single-mode Gaussian state built in an enlarged space and truncated.
fn gaussian_mode<T: Real>(omega: T, mass: T, m: &ModeMoments<T>, cutoff: usize, tail_tol: f64) -> Result<CMat<T>> {
    let mw = mass * omega;
    // Dimensionless quadratures x = X√(mω), p = P/√(mω).
    let vxx = m.var_x * mw;
    let vpp = m.var_p / mw;
    let vxp = m.cov_xp;
    let nu = (vxx * vpp - vxp * vxp).max(T::lit(0.25)).sqrt();
    let nbar = nu - T::lit(0.5);
    let cosh2r = ((vxx + vpp) / (T::lit(2.0) * nu)).max(T::one());
    let r = (cosh2r + (cosh2r * cosh2r - T::one()).sqrt()).ln() * T::lit(0.5);
    let phi = (-(T::lit(2.0) * vxp)).atan2(vpp - vxx);
    let alpha = cx(m.mean_x * (mw * T::lit(0.5)).sqrt(), m.mean_p / (T::lit(2.0) * mw).sqrt());
    let big = cutoff + 40 + (4.0 * (alpha.norm_sqr().as_f64() + r.as_f64().sinh().powi(2) + nbar.as_f64())) as usize;
    let a = annihilation::<T>(big);
    let ad = a.adjoint();
    let zeta = cx(r * phi.cos(), r * phi.sin());
    let squeeze = expm(&((&a * &a * zeta.conj() - &ad * &ad * zeta) * re(T::lit(0.5))))?;
    let displace = expm(&(&ad * alpha - &a * alpha.conj()))?;
    let beta = if nbar > T::lit(1e-14) {
        Beta::Finite((T::one() + T::one() / nbar).ln() / omega)
    } else {
        Beta::Infinite
    };
    let thermal = thermal_mode(omega, beta, big);
    let u = displace * squeeze;
    let full = &u * thermal * u.adjoint();
    let tail: T = (cutoff..big).fold(T::zero(), |s, n| s + full[(n, n)].re);
    if tail.as_f64() >= tail_tol {
        let mut acc = T::zero();
        let mut suggested = big;
        for n in (0..big).rev() {
            acc += full[(n, n)].re;
            if acc.as_f64() >= tail_tol {
                suggested = n + 2;
                break;
            }
        }
        return Err(Error::Cutoff {
            detail: format!("Gaussian mode leaves {:.3e} of its weight above level {cutoff}", tail.as_f64()),
            suggested,
        });
    }
    let trunc = full.view((0, 0), (cutoff, cutoff)).into_owned();
    let tr = trace(&trunc);
    Ok(hermitian_part(&(trunc / tr)))
}

/// Truncated environment state: thermal, displaced thermal or a general
/// product Gaussian state, renormalized after truncation.
pub fn env_initial_state<T: Real>(bath: &BathSpec<T>, fock: &FockConfig) -> Result<CMat<T>> {
    check_modes(bath, fock)?;
    check_cap(fock.env_dim())?;
    let mut factors = Vec::with_capacity(bath.n_modes());
    for (k, mode) in bath.modes().iter().enumerate() {
        let cutoff = fock.cutoffs[k];
        let rho = match bath.state() {
            BathState::Thermal { beta } => {
                let (tail, suggested) = thermal_tail(mode.omega, *beta, cutoff, fock.tail_tol);
                if tail >= fock.tail_tol {
                    return Err(Error::Cutoff {
                        detail: format!("mode {k}: thermal tail mass {tail:.3e} above level {cutoff}"),
                        suggested,
                    });
                }
                thermal_mode(mode.omega, *beta, cutoff)
            }
            BathState::Displaced { .. } | BathState::Gaussian(_) => {
                gaussian_mode(mode.omega, mode.mass, &bath.mode_moments()[k], cutoff, fock.tail_tol)
                    .map_err(|e| match e {
                        Error::Cutoff { detail, suggested } => {
                            Error::Cutoff { detail: format!("mode {k}: {detail}"), suggested }
                        }
                        other => other,
                    })?
            }
        };
        factors.push(rho);
    }
    Ok(kron_all(&factors))
}

/// `ρ_S ⊗ Ω`.
pub fn uncorrelated_initial_state<T: Real>(
    rho_s: &DensityOperator<T>,
    bath: &BathSpec<T>,
    fock: &FockConfig,
) -> Result<DensityOperator<T>> {
    check_cap(rho_s.dim() * fock.env_dim())?;
    DensityOperator::new(kron(rho_s.matrix(), &env_initial_state(bath, fock)?))
}

/// `exp(−2b(H'_S⊗I + I⊗H_E + V))/Z` on the truncated joint space.
pub fn correlated_initial_state<T: Real>(
    system: &SystemSpec<T>,
    bath: &BathSpec<T>,
    prep: &PreparationSpec<T>,
    fock: &FockConfig,
) -> Result<DensityOperator<T>> {
    check_modes(bath, fock)?;
    if prep.h_s_prime().shape() != system.h_s().shape() {
        return Err(Error::Shape("H'_S and H_S differ in shape".into()));
    }
    let two_b = prep.b() * T::lit(2.0);
    for (k, mode) in bath.modes().iter().enumerate() {
        let (tail, suggested) = thermal_tail(mode.omega, Beta::Finite(two_b), fock.cutoffs[k], fock.tail_tol);
        if tail >= fock.tail_tol {
            return Err(Error::Cutoff {
                detail: format!("mode {k}: canonical tail mass {tail:.3e} above level {}", fock.cutoffs[k]),
                suggested,
            });
        }
    }
    let shifted = SystemSpec::new(prep.h_s_prime().clone(), system.couplings().to_vec(), system.labels().to_vec())?;
    let h = build_joint_hamiltonian(&shifted, bath, fock)?;
    canonical_state(&h, two_b)
}

/// `exp(−β H)/Z` via the spectrum, shifted by the ground energy.
pub fn canonical_state<T: Real>(h: &CMat<T>, beta: T) -> Result<DensityOperator<T>> {
    let (vals, vecs) = eigh(h)?;
    let e0 = vals[0];
    let weights: Vec<T> = vals.iter().map(|&e| (-(beta * (e - e0))).exp()).collect();
    let z = weights.iter().fold(T::zero(), |a, &w| a + w);
    if !(z > T::zero()) || !z.is_finite() {
        return Err(Error::Numerical(format!("partition function {z}")));
    }
    let mut scaled = vecs.clone();
    for (j, &w) in weights.iter().enumerate() {
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= re(w / z);
        }
    }
    DensityOperator::new(hermitian_part(&(scaled * vecs.adjoint())))
}

/// Spectral form of the joint Hamiltonian, reused across time nodes.
#[derive(Debug, Clone)]
pub struct ExactEvolution<T: Real> {
    energies: Vec<T>,
    basis: CMat<T>,
    dims: Vec<usize>,
    free: FreeEvolution<T>,
}

impl<T: Real> ExactEvolution<T> {
    pub fn new(system: &SystemSpec<T>, bath: &BathSpec<T>, fock: &FockConfig) -> Result<Self> {
        let h = build_joint_hamiltonian(system, bath, fock)?;
        let (energies, basis) = eigh(&h)?;
        Ok(Self { energies, basis, dims: vec![system.dim(), fock.env_dim()], free: FreeEvolution::new(system.h_s())? })
    }

    /// Interaction-picture reduced states `e^{iH_S t} Tr_E[ρ(t)] e^{−iH_S t}`.
    pub fn reduced_series(&self, joint0: &DensityOperator<T>, times: &[T]) -> Result<Vec<CMat<T>>> {
        let n = self.energies.len();
        if joint0.dim() != n {
            return Err(Error::Shape(format!("joint state of dimension {} for a {n}-dimensional model", joint0.dim())));
        }
        let rotated = self.basis.adjoint() * joint0.matrix() * &self.basis;
        // ρ_S(t)_ab = Σ_mn e^{−iE_m t} Q^{ab}_mn e^{iE_n t} with
        // Q^{ab} = ρ̃ ∘ (V_aᵀ conj(V_b)), V_a the rows of system level a.
        let (d, env) = (self.dims[0], self.dims[1]);
        let phases: Vec<Vec<Cx<T>>> = times
            .iter()
            .map(|&t| self.energies.iter().map(|&e| cexp(cx(T::zero(), -e * t))).collect())
            .collect();
        let mut reduced = vec![CMat::zeros(d, d); times.len()];
        for a in 0..d {
            let va = self.basis.rows(a * env, env);
            for b in a..d {
                let vb = self.basis.rows(b * env, env);
                let q = (va.transpose() * vb.map(|z| z.conj())).component_mul(&rotated);
                for (r, ph) in reduced.iter_mut().zip(&phases) {
                    let conj: Vec<Cx<T>> = ph.iter().map(|z| z.conj()).collect();
                    let inner = &q * nalgebra::DVector::from_column_slice(&conj);
                    let value = ph.iter().zip(inner.iter()).fold(re(T::zero()), |acc, (p, x)| acc + *p * *x);
                    r[(a, b)] = value;
                    r[(b, a)] = value.conj();
                }
            }
        }
        Ok(reduced
            .iter()
            .zip(times)
            .map(|(r, &t)| hermitian_part(&self.free.heisenberg(r, t)))
            .collect())
    }
}

/// Exact reduced dynamics from `joint0` at `times` (interaction picture).
pub fn evolve_exact<T: Real>(
    system: &SystemSpec<T>,
    bath: &BathSpec<T>,
    fock: &FockConfig,
    joint0: &DensityOperator<T>,
    times: &[T],
) -> Result<Vec<CMat<T>>> {
    ExactEvolution::new(system, bath, fock)?.reduced_series(joint0, times)
}

/// Largest trace distance between reduced series at `fock` and at doubled
/// cutoffs, both started from `ρ_S ⊗ Ω`.
pub fn cutoff_sensitivity<T: Real>(
    system: &SystemSpec<T>,
    bath: &BathSpec<T>,
    rho_s: &DensityOperator<T>,
    fock: &FockConfig,
    times: &[T],
) -> Result<T> {
    let run = |f: &FockConfig| evolve_exact(system, bath, f, &uncorrelated_initial_state(rho_s, bath, f)?, times);
    let (a, b) = (run(fock)?, run(&fock.doubled())?);
    a.iter().zip(&b).try_fold(T::zero(), |m, (x, y)| Ok(m.max(trace_norm_distance(x, y)?)))
}

/// `Tr[B_α(τ₁) B_β(τ₂) Ω] − E_α(τ₁)E_β(τ₂)` on the truncated environment,
/// with `B(τ) = e^{iH_E τ} B e^{−iH_E τ}`.
pub fn two_point_correlation<T: Real>(
    bath: &BathSpec<T>,
    fock: &FockConfig,
    alpha: usize,
    beta: usize,
    tau1: T,
    tau2: T,
) -> Result<Cx<T>> {
    let omega = env_initial_state(bath, fock)?;
    let h = env_hamiltonian(bath, fock)?;
    let heis = |b: &CMat<T>, t: T| {
        CMat::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] * cexp(cx(T::zero(), (h[(i, i)].re - h[(j, j)].re) * t)))
    };
    let b1 = heis(&env_coupling(bath, fock, alpha)?, tau1);
    let b2 = heis(&env_coupling(bath, fock, beta)?, tau2);
    let corr = trace(&(&b1 * &b2 * &omega));
    let e1 = trace(&(&b1 * &omega));
    let e2 = trace(&(&b2 * &omega));
    Ok(corr - e1 * e2)
}

/// `Tr[B_α(τ) Ω]` on the truncated environment.
pub fn mean_field_oracle<T: Real>(bath: &BathSpec<T>, fock: &FockConfig, alpha: usize, tau: T) -> Result<T> {
    let omega = env_initial_state(bath, fock)?;
    let h = env_hamiltonian(bath, fock)?;
    let b = env_coupling(bath, fock, alpha)?;
    let bt = CMat::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] * cexp(cx(T::zero(), (h[(i, i)].re - h[(j, j)].re) * tau)));
    Ok(trace(&(bt * omega)).re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::BathMode;
    use crate::linalg::{max_abs_diff, sigma_x, sigma_z, trace_distance};
    use crate::svne::ket;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn one_mode(g: f64, w: f64, m: f64, state: BathState<f64>) -> BathSpec<f64> {
        BathSpec::new(vec![BathMode::new(w, m).unwrap()], DMatrix::from_element(1, 1, g), state).unwrap()
    }

    fn qubit_state() -> DensityOperator<f64> {
        DensityOperator::pure(&ket(&[cx(0.6, 0.0), cx(0.0, 0.8)])).unwrap()
    }

    #[test]
    fn zero_coupling_hamiltonian_spectrum() {
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(0.5), vec![sigma_x()]).unwrap();
        let bath = one_mode(0.0, 1.3, 1.0, BathState::Thermal { beta: Beta::Infinite });
        let h = build_joint_hamiltonian(&sys, &bath, &FockConfig::uniform(4, 1).unwrap()).unwrap();
        let (vals, _) = eigh(&h).unwrap();
        let mut expected: Vec<f64> = [-0.5, 0.5].iter().flat_map(|s| (0..4).map(move |n| s + 1.3 * n as f64)).collect();
        expected.sort_by(f64::total_cmp);
        for (a, b) in vals.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cutoff_two_hand_construction() {
        // Basis |s, n⟩ ordered (0,0), (0,1), (1,0), (1,1); X = (a + a†)/√(2mω) has entry 1/√(2mω).
        let (g, w, m, e) = (0.3, 2.0, 0.5, 0.7);
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(e), vec![sigma_x()]).unwrap();
        let bath = one_mode(g, w, m, BathState::Thermal { beta: Beta::Infinite });
        let h = build_joint_hamiltonian(&sys, &bath, &FockConfig::uniform(2, 1).unwrap()).unwrap();
        let x = g / (2.0 * m * w).sqrt();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[e, 0.0, 0.0, x, 0.0, e + w, x, 0.0, 0.0, x, -e, 0.0, x, 0.0, 0.0, -e + w],
        )
        .map(|v| cx(v, 0.0));
        assert!(max_abs_diff(&h, &expected) < 1e-15);
    }

    #[test]
    fn vacuum_and_thermal_states() {
        let vac = one_mode(1.0, 1.0, 1.0, BathState::Thermal { beta: Beta::Infinite });
        let omega = env_initial_state(&vac, &FockConfig::uniform(5, 1).unwrap()).unwrap();
        assert_eq!(omega[(0, 0)], cx(1.0, 0.0));
        assert!((trace(&omega) - cx(1.0, 0.0)).norm() < 1e-15);

        let (w, m, beta) = (1.1, 0.7, 1.4);
        let hot = one_mode(1.0, w, m, BathState::Thermal { beta: Beta::Finite(beta) });
        let fock = FockConfig::uniform(40, 1).unwrap();
        let omega = env_initial_state(&hot, &fock).unwrap();
        let x = position::<f64>(40, w, m);
        let x2 = trace(&(&x * &x * &omega)).re;
        let expected = 1.0 / (2.0 * m * w) / (beta * w / 2.0).tanh();
        assert!((x2 - expected).abs() < 1e-6);
    }

    #[test]
    fn cutoff_error_suggests_larger_cutoff() {
        let hot = one_mode(1.0, 0.5, 1.0, BathState::Thermal { beta: Beta::Finite(0.5) });
        match env_initial_state(&hot, &FockConfig::uniform(10, 1).unwrap()) {
            Err(Error::Cutoff { suggested, .. }) => {
                assert!(suggested > 10);
                env_initial_state(&hot, &FockConfig::uniform(suggested, 1).unwrap()).unwrap();
            }
            other => panic!("expected a cutoff error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_cap() {
        let modes = vec![BathMode::new(1.0, 1.0).unwrap(); 4];
        let bath = BathSpec::thermal(modes, DMatrix::zeros(1, 4), Beta::Infinite).unwrap();
        let sys = SystemSpec::unlabelled(sigma_z::<f64>(), vec![sigma_x()]).unwrap();
        assert!(matches!(
            build_joint_hamiltonian(&sys, &bath, &FockConfig::uniform(10, 4).unwrap()),
            Err(Error::Resource(_))
        ));
        assert!(FockConfig::uniform(1, 1).is_err());
    }

    #[test]
    fn displaced_state_moments() {
        let (w, m) = (1.4, 0.8);
        let bath = one_mode(
            1.0,
            w,
            m,
            BathState::Displaced { beta: Beta::Finite(2.0), mean_x: vec![0.6], mean_p: vec![-0.4] },
        );
        let fock = FockConfig::uniform(30, 1).unwrap();
        let omega = env_initial_state(&bath, &fock).unwrap();
        let x = position::<f64>(30, w, m);
        let p = momentum::<f64>(30, w, m);
        assert!((trace(&(&x * &omega)).re - 0.6).abs() < 1e-6);
        assert!((trace(&(&p * &omega)).re + 0.4).abs() < 1e-6);
        // ωτ = π/2 turns the momentum mean into the position mean.
        let tau = std::f64::consts::FRAC_PI_2 / w;
        let oracle = mean_field_oracle(&bath, &fock, 0, tau).unwrap();
        assert!((oracle - (-0.4) / (m * w)).abs() < 1e-6);
    }

    #[test]
    fn squeezed_state_moments() {
        let (w, m) = (0.9, 1.2);
        let mom = ModeMoments { mean_x: 0.2, mean_p: 0.1, var_x: 0.9, var_p: 0.6, cov_xp: 0.25 };
        let bath = one_mode(1.0, w, m, BathState::Gaussian(vec![mom]));
        let cutoff = 60;
        let omega = env_initial_state(&bath, &FockConfig::uniform(cutoff, 1).unwrap()).unwrap();
        let x = position::<f64>(cutoff, w, m);
        let p = momentum::<f64>(cutoff, w, m);
        let ex = trace(&(&x * &omega)).re;
        let ep = trace(&(&p * &omega)).re;
        let vx = trace(&(&x * &x * &omega)).re - ex * ex;
        let vp = trace(&(&p * &p * &omega)).re - ep * ep;
        let cov = 0.5 * trace(&((&x * &p + &p * &x) * &omega)).re - ex * ep;
        for (got, want) in [(ex, 0.2), (ep, 0.1), (vx, 0.9), (vp, 0.6), (cov, 0.25)] {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn phys_corr_matches_oracle() {
        let mom = ModeMoments { mean_x: 0.3, mean_p: -0.2, var_x: 0.8, var_p: 0.7, cov_xp: -0.15 };
        let states = [
            BathState::Thermal { beta: Beta::Finite(1.2) },
            BathState::Displaced { beta: Beta::Finite(1.5), mean_x: vec![0.5], mean_p: vec![0.3] },
            BathState::Gaussian(vec![mom]),
        ];
        for state in states {
            let bath = one_mode(0.7, 1.3, 0.9, state);
            let fock = FockConfig::uniform(60, 1).unwrap();
            for (t1, t2) in [(0.0, 0.0), (0.4, 1.9), (2.5, 0.3)] {
                let analytic = bath.phys_corr(0, 0, t1, t2).unwrap();
                let oracle = two_point_correlation(&bath, &fock, 0, 0, t1, t2).unwrap();
                assert!((analytic - oracle).norm() < 1e-6, "{analytic} vs {oracle}");
            }
        }
    }

    #[test]
    fn exact_evolution_basics() {
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(0.5), vec![sigma_x()]).unwrap();
        let free = one_mode(0.0, 1.0, 1.0, BathState::Thermal { beta: Beta::Finite(2.0) });
        let fock = FockConfig::uniform(12, 1).unwrap();
        let joint = uncorrelated_initial_state(&qubit_state(), &free, &fock).unwrap();
        let out = evolve_exact(&sys, &free, &fock, &joint, &[0.0, 1.0, 3.0]).unwrap();
        for r in &out {
            assert!(max_abs_diff(r, qubit_state().matrix()) < 1e-12);
        }
        let coupled = one_mode(0.4, 1.0, 1.0, BathState::Thermal { beta: Beta::Finite(2.0) });
        let joint = uncorrelated_initial_state(&qubit_state(), &coupled, &fock).unwrap();
        let out = evolve_exact(&sys, &coupled, &fock, &joint, &[0.0, 2.0]).unwrap();
        assert!(max_abs_diff(&out[0], qubit_state().matrix()) < 1e-12);
        assert!(DensityOperator::new(out[1].clone()).is_ok());
    }

    #[test]
    fn reduced_series_matches_direct_partial_trace() {
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(0.5), vec![sigma_x()]).unwrap();
        let bath = one_mode(0.5, 0.9, 1.0, BathState::Thermal { beta: Beta::Finite(3.0) });
        let fock = FockConfig::uniform(10, 1).unwrap();
        let joint = uncorrelated_initial_state(&qubit_state(), &bath, &fock).unwrap();
        let h = build_joint_hamiltonian(&sys, &bath, &fock).unwrap();
        let times = [0.0, 0.7, 2.9];
        let fast = evolve_exact(&sys, &bath, &fock, &joint, &times).unwrap();
        let free = FreeEvolution::new(sys.h_s()).unwrap();
        for (r, &t) in fast.iter().zip(&times) {
            let u = expm(&(&h * cx(0.0, -t))).unwrap();
            let evolved = &u * joint.matrix() * u.adjoint();
            let direct = free.heisenberg(&crate::linalg::partial_trace(&evolved, &[2, 10], 0).unwrap(), t);
            assert!(max_abs_diff(r, &direct) < 1e-10);
        }
    }

    #[test]
    fn dephasing_oracle_matches_closed_form() {
        let (g, w, beta) = (0.4, 1.2, 2.0);
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(0.3), vec![sigma_z()]).unwrap();
        let bath = one_mode(g, w, 1.0, BathState::Thermal { beta: Beta::Finite(beta) });
        let fock = FockConfig::uniform(40, 1).unwrap();
        let joint = uncorrelated_initial_state(&qubit_state(), &bath, &fock).unwrap();
        let times = [0.5, 1.5, 3.0];
        let oracle = evolve_exact(&sys, &bath, &fock, &joint, &times).unwrap();
        let closed = crate::propagator::analytic_dephasing(&sys, &bath, &qubit_state(), &times).unwrap();
        for (a, b) in oracle.iter().zip(&closed) {
            assert!((a[(0, 1)].norm() - b[(0, 1)].norm()).abs() < 1e-6);
        }
    }

    #[test]
    fn correlated_state_factorizes_without_coupling() {
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(0.5), vec![sigma_x()]).unwrap();
        let h_prime = sigma_z::<f64>() * re(0.4) + sigma_x::<f64>() * re(0.1);
        let prep = PreparationSpec::new(h_prime.clone(), 0.6).unwrap();
        let bath = one_mode(0.0, 1.5, 1.0, BathState::Thermal { beta: Beta::Finite(1.2) });
        let fock = FockConfig::uniform(12, 1).unwrap();
        let joint = correlated_initial_state(&sys, &bath, &prep, &fock).unwrap();
        let rho_s = canonical_state(&h_prime, 1.2).unwrap();
        let product = uncorrelated_initial_state(&rho_s, &bath, &fock).unwrap();
        assert!(trace_distance(&joint, &product).unwrap() < 1e-10);
    }

    #[test]
    fn correlated_state_low_temperature_is_ground_state() {
        let sys = SystemSpec::unlabelled(sigma_z::<f64>(), vec![sigma_x()]).unwrap();
        let prep = PreparationSpec::new(sigma_z::<f64>() * re(0.8), 40.0).unwrap();
        let bath = one_mode(0.3, 1.0, 1.0, BathState::Thermal { beta: Beta::Finite(80.0) });
        let fock = FockConfig::uniform(8, 1).unwrap();
        let joint = correlated_initial_state(&sys, &bath, &prep, &fock).unwrap();
        let h = build_joint_hamiltonian(
            &SystemSpec::unlabelled(sigma_z::<f64>() * re(0.8), vec![sigma_x()]).unwrap(),
            &bath,
            &fock,
        )
        .unwrap();
        let (_, vecs) = eigh(&h).unwrap();
        let ground = vecs.column(0).into_owned();
        let projector = &ground * ground.adjoint();
        assert!(max_abs_diff(joint.matrix(), &projector) < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn joint_hamiltonian_is_hermitian(g in -1.0f64..1.0, w in 0.2f64..2.0, e in -1.0f64..1.0) {
            let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(e), vec![sigma_x()]).unwrap();
            let bath = one_mode(g, w, 1.0, BathState::Thermal { beta: Beta::Infinite });
            let h = build_joint_hamiltonian(&sys, &bath, &FockConfig::uniform(5, 1).unwrap()).unwrap();
            prop_assert_eq!(&h, &h.adjoint());
        }

        #[test]
        fn canonical_states_are_valid(b in 0.6f64..3.0, g in -0.5f64..0.5) {
            let sys = SystemSpec::unlabelled(sigma_z::<f64>(), vec![sigma_x()]).unwrap();
            let prep = PreparationSpec::new(sigma_x::<f64>() * re(0.3), b).unwrap();
            let bath = one_mode(g, 2.0, 1.0, BathState::Thermal { beta: Beta::Finite(1.0) });
            let fock = FockConfig::uniform(16, 1).unwrap();
            prop_assert!(correlated_initial_state(&sys, &bath, &prep, &fock).is_ok());
        }
    }
}
