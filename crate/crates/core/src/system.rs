//! System Hamiltonian, coupling operators and their interaction-picture
//! images.

use crate::contour::TimeGrid;
use crate::error::{Error, Result};
use crate::linalg::{eigh, hermiticity_defect, max_abs, CMat};
use crate::scalar::{cx, Real};
use crate::tol;

fn check_hermitian<T: Real>(name: &str, m: &CMat<T>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{name} has shape {:?}", m.shape())));
    }
    let defect = hermiticity_defect(m);
    if defect > T::lit(tol::HERMITIAN_REL) * max_abs(m) {
        return Err(Error::Validation(format!("{name} is not Hermitian (defect {defect})")));
    }
    Ok(())
}

/// System Hamiltonian `H_S` and the coupling operators `A_α` entering
/// `V = Σ_α A_α ⊗ B_α`.
#[derive(Debug, Clone)]
pub struct SystemSpec<T: Real> {
    h_s: CMat<T>,
    couplings: Vec<CMat<T>>,
    labels: Vec<String>,
}

impl<T: Real> SystemSpec<T> {
    pub fn new(h_s: CMat<T>, couplings: Vec<CMat<T>>, labels: Vec<String>) -> Result<Self> {
        check_hermitian("H_S", &h_s)?;
        if labels.len() != couplings.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} coupling operators",
                labels.len(),
                couplings.len()
            )));
        }
        for (a, label) in couplings.iter().zip(&labels) {
            if a.shape() != h_s.shape() {
                return Err(Error::Shape(format!(
                    "coupling {label} has shape {:?}, H_S {:?}",
                    a.shape(),
                    h_s.shape()
                )));
            }
            check_hermitian(label, a)?;
        }
        Ok(Self { h_s, couplings, labels })
    }

    /// Channels labelled `A0, A1, ...`.
    pub fn unlabelled(h_s: CMat<T>, couplings: Vec<CMat<T>>) -> Result<Self> {
        let labels = (0..couplings.len()).map(|i| format!("A{i}")).collect();
        Self::new(h_s, couplings, labels)
    }

    pub fn dim(&self) -> usize {
        self.h_s.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.couplings.len()
    }

    pub fn h_s(&self) -> &CMat<T> {
        &self.h_s
    }

    pub fn couplings(&self) -> &[CMat<T>] {
        &self.couplings
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn coupling(&self, channel: usize) -> Result<&CMat<T>> {
        self.couplings
            .get(channel)
            .ok_or(Error::Lookup { kind: "channel", index: channel })
    }
}

/// Preparation Hamiltonian `H'_S` and imaginary-time extent `b` of the
/// canonical initial state `exp(-2b(H'_0 + V))/Z`.
#[derive(Debug, Clone)]
pub struct PreparationSpec<T: Real> {
    h_s_prime: CMat<T>,
    b: T,
}

impl<T: Real> PreparationSpec<T> {
    pub fn new(h_s_prime: CMat<T>, b: T) -> Result<Self> {
        check_hermitian("H'_S", &h_s_prime)?;
        if !(b > T::zero()) || !b.is_finite() {
            return Err(Error::Validation(format!("preparation parameter b = {b} must be positive")));
        }
        Ok(Self { h_s_prime, b })
    }

    pub fn h_s_prime(&self) -> &CMat<T> {
        &self.h_s_prime
    }

    pub fn b(&self) -> T {
        self.b
    }
}

/// Spectral form of `H_S`, used to build `exp(±i H_S τ)` exactly.
#[derive(Debug, Clone)]
pub struct FreeEvolution<T: Real> {
    energies: Vec<T>,
    basis: CMat<T>,
}

impl<T: Real> FreeEvolution<T> {
    pub fn new(h: &CMat<T>) -> Result<Self> {
        let (energies, basis) = eigh(h)?;
        Ok(Self { energies, basis })
    }

    /// `exp(-i H τ)`.
    pub fn propagator(&self, tau: T) -> CMat<T> {
        let n = self.energies.len();
        let mut scaled = self.basis.clone();
        for (j, &e) in self.energies.iter().enumerate() {
            let phase = e * tau;
            let w = cx(phase.cos(), -phase.sin());
            for i in 0..n {
                scaled[(i, j)] *= w;
            }
        }
        scaled * self.basis.adjoint()
    }

    /// `exp(i H τ) a exp(-i H τ)`.
    pub fn heisenberg(&self, a: &CMat<T>, tau: T) -> CMat<T> {
        let u = self.propagator(tau);
        u.adjoint() * a * u
    }
}

/// `A_α(τ) = exp(i H_S τ) A_α exp(-i H_S τ)`.
pub fn interaction_picture_op<T: Real>(spec: &SystemSpec<T>, channel: usize, tau: T) -> Result<CMat<T>> {
    let a = spec.coupling(channel)?;
    if !tau.is_finite() {
        return Err(Error::Validation(format!("time {tau} is not finite")));
    }
    Ok(FreeEvolution::new(spec.h_s())?.heisenberg(a, tau))
}

/// Interaction-picture coupling operators tabulated on a fixed set of
/// times. Built once before an ensemble; read-only afterwards.
#[derive(Debug, Clone)]
pub struct InteractionCache<T: Real> {
    times: Vec<T>,
    // ops[time][channel]
    ops: Vec<Vec<CMat<T>>>,
}

impl<T: Real> InteractionCache<T> {
    pub fn new(spec: &SystemSpec<T>, times: &[T]) -> Result<Self> {
        let free = FreeEvolution::new(spec.h_s())?;
        let ops = times
            .iter()
            .map(|&t| {
                let u = free.propagator(t);
                let ud = u.adjoint();
                spec.couplings().iter().map(|a| &ud * a * &u).collect()
            })
            .collect();
        Ok(Self { times: times.to_vec(), ops })
    }

    /// Nodes and midpoints of `grid`: entry `h` holds time `h·dt/2`.
    pub fn half_steps(spec: &SystemSpec<T>, grid: &TimeGrid<T>) -> Result<Self> {
        let half = grid.dt() * T::lit(0.5);
        let times: Vec<T> = (0..=2 * grid.n_steps())
            .map(|h| half * T::from_usize_lossy(h))
            .collect();
        Self::new(spec, &times)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn time(&self, index: usize) -> T {
        self.times[index]
    }

    pub fn ops(&self, index: usize) -> &[CMat<T>] {
        &self.ops[index]
    }

    pub fn op(&self, index: usize, channel: usize) -> &CMat<T> {
        &self.ops[index][channel]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{is_hermitian, max_abs_diff, sigma_x, sigma_y, sigma_z, zeros};
    use crate::scalar::re;
    use proptest::prelude::*;

    fn qubit(w0: f64, a: CMat<f64>) -> SystemSpec<f64> {
        SystemSpec::unlabelled(sigma_z::<f64>() * re(w0 / 2.0), vec![a]).unwrap()
    }

    #[test]
    fn commuting_coupling_is_static() {
        let spec = qubit(1.3, sigma_z());
        for tau in [0.0, 0.7, -2.1, 10.0] {
            let a = interaction_picture_op(&spec, 0, tau).unwrap();
            assert!(max_abs_diff(&a, &sigma_z()) < 1e-14);
        }
        let free = SystemSpec::unlabelled(zeros(2, 2), vec![sigma_x()]).unwrap();
        assert!(max_abs_diff(&interaction_picture_op(&free, 0, 3.3).unwrap(), &sigma_x()) < 1e-15);
    }

    #[test]
    fn sigma_x_rotates() {
        let w0 = 1.7;
        let spec = qubit(w0, sigma_x());
        for tau in [0.0, 0.3, 1.9, -4.2] {
            let a = interaction_picture_op(&spec, 0, tau).unwrap();
            // Entrywise: e^{iw0 τ σz/2} σx e^{-iw0 τ σz/2}.
            let expected = sigma_x::<f64>() * re((w0 * tau).cos()) - sigma_y::<f64>() * re((w0 * tau).sin());
            assert!(max_abs_diff(&a, &expected) < 1e-13, "tau {tau}");
            assert!(is_hermitian(&a, 1e-12));
        }
    }

    #[test]
    fn lookup_and_validation_errors() {
        let spec = qubit(1.0, sigma_x());
        assert!(matches!(
            interaction_picture_op(&spec, 3, 0.0),
            Err(Error::Lookup { kind: "channel", index: 3 })
        ));
        let mut bad = sigma_x::<f64>();
        bad[(0, 1)] = re(2.0);
        assert!(SystemSpec::unlabelled(sigma_z(), vec![bad]).is_err());
        assert!(SystemSpec::<f64>::unlabelled(sigma_z(), vec![zeros(3, 3)]).is_err());
        assert!(PreparationSpec::new(sigma_z::<f64>(), 0.0).is_err());
    }

    #[test]
    fn cache_matches_direct_evaluation() {
        let spec = SystemSpec::unlabelled(
            sigma_z::<f64>() * re(0.5) + sigma_x::<f64>() * re(0.2),
            vec![sigma_x(), sigma_y()],
        )
        .unwrap();
        let grid = TimeGrid::new(2.0, 8).unwrap();
        let cache = InteractionCache::half_steps(&spec, &grid).unwrap();
        assert_eq!(cache.len(), 17);
        for h in [0, 3, 16] {
            for ch in 0..2 {
                let direct = interaction_picture_op(&spec, ch, cache.time(h)).unwrap();
                assert!(max_abs_diff(cache.op(h, ch), &direct) < 1e-13);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn group_property(t1 in -3.0f64..3.0, t2 in -3.0f64..3.0, hx in -1.0f64..1.0) {
            let h = sigma_z::<f64>() * re(0.8) + sigma_x::<f64>() * re(hx);
            let spec = SystemSpec::unlabelled(h.clone(), vec![sigma_x::<f64>() + sigma_y::<f64>() * re(0.3)]).unwrap();
            let free = FreeEvolution::new(&h).unwrap();
            let lhs = interaction_picture_op(&spec, 0, t1 + t2).unwrap();
            let rhs = free.heisenberg(&interaction_picture_op(&spec, 0, t2).unwrap(), t1);
            prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
        }
    }
}
