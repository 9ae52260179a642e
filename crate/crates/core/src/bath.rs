//! Discrete-mode Gaussian bosonic environment.
//!
//! Channel `α` couples through `B_α = Σ_k g[α][k] X_k` with
//! `X_k = (a_k + a_k†)/sqrt(2 m_k ω_k)`. Every supported environment state is
//! a product of single-mode Gaussian states, so all correlation functions
//! are closed-form sums over modes.

use nalgebra::DMatrix;

use crate::contour::{Branch, ContourPoint, TimeGrid};
use crate::error::{Error, Result};
use crate::scalar::{cx, re, Cx, Real};
use crate::tol;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathMode<T: Real> {
    pub omega: T,
    pub mass: T,
}

impl<T: Real> BathMode<T> {
    pub fn new(omega: T, mass: T) -> Result<Self> {
        if !(omega > T::zero() && omega.is_finite()) || !(mass > T::zero() && mass.is_finite()) {
            return Err(Error::Validation(format!(
                "mode needs omega > 0 and mass > 0, got omega = {omega}, mass = {mass}"
            )));
        }
        Ok(Self { omega, mass })
    }

    /// `m ω`.
    pub fn m_omega(&self) -> T {
        self.mass * self.omega
    }
}

/// Inverse temperature; `Infinite` is the vacuum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta<T: Real> {
    Finite(T),
    Infinite,
}

impl<T: Real> Beta<T> {
    /// `coth(β ω / 2)`, equal to 1 in the vacuum.
    pub fn coth_half(&self, omega: T) -> T {
        match *self {
            Beta::Infinite => T::one(),
            Beta::Finite(b) => T::one() / (b * omega * T::lit(0.5)).tanh(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Beta::Finite(b) if !(b > T::zero()) || !b.is_finite() => Err(Error::Validation(format!(
                "inverse temperature {b} must be positive"
            ))),
            _ => Ok(()),
        }
    }
}

/// First and second moments of a single-mode Gaussian state; variances and
/// covariance are centred, with `cov_xp = ⟨{X,P}⟩/2 − ⟨X⟩⟨P⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeMoments<T: Real> {
    pub mean_x: T,
    pub mean_p: T,
    pub var_x: T,
    pub var_p: T,
    pub cov_xp: T,
}

impl<T: Real> ModeMoments<T> {
    pub fn thermal(mode: &BathMode<T>, beta: Beta<T>) -> Self {
        let coth = beta.coth_half(mode.omega);
        let half = T::lit(0.5);
        Self {
            mean_x: T::zero(),
            mean_p: T::zero(),
            var_x: coth * half / mode.m_omega(),
            var_p: coth * half * mode.m_omega(),
            cov_xp: T::zero(),
        }
    }

    /// `var_x var_p − cov² − 1/4`, non-negative for physical states.
    pub fn uncertainty_margin(&self) -> T {
        self.var_x * self.var_p - self.cov_xp * self.cov_xp - T::lit(0.25)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.mean_x, self.mean_p, self.var_x, self.var_p, self.cov_xp]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.var_x > T::zero()) || !(self.var_p > T::zero()) {
            return Err(Error::Validation(format!("invalid mode moments {self:?}")));
        }
        if self.uncertainty_margin() < -T::lit(tol::UNCERTAINTY) {
            return Err(Error::Validation(format!(
                "mode moments violate the uncertainty relation by {}",
                -self.uncertainty_margin()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BathState<T: Real> {
    /// `exp(-β H_E)/Z`; satisfies the stability condition.
    Thermal { beta: Beta<T> },
    /// Thermal state displaced to the given quadrature means.
    Displaced { beta: Beta<T>, mean_x: Vec<T>, mean_p: Vec<T> },
    /// Arbitrary product of single-mode Gaussian states.
    Gaussian(Vec<ModeMoments<T>>),
}

#[derive(Debug, Clone)]
pub struct BathSpec<T: Real> {
    modes: Vec<BathMode<T>>,
    /// `coupling[(α, k)] = g[α][k]`.
    coupling: DMatrix<T>,
    state: BathState<T>,
    moments: Vec<ModeMoments<T>>,
    stationary: bool,
}

impl<T: Real> BathSpec<T> {
    pub fn new(modes: Vec<BathMode<T>>, coupling: DMatrix<T>, state: BathState<T>) -> Result<Self> {
        if coupling.ncols() != modes.len() {
            return Err(Error::Shape(format!(
                "coupling matrix {:?} for {} modes",
                coupling.shape(),
                modes.len()
            )));
        }
        if coupling.iter().any(|g| !g.is_finite()) {
            return Err(Error::Validation("non-finite coupling constant".into()));
        }
        for m in &modes {
            BathMode::new(m.omega, m.mass)?;
        }
        let (moments, stationary) = match &state {
            BathState::Thermal { beta } => {
                beta.validate()?;
                (modes.iter().map(|m| ModeMoments::thermal(m, *beta)).collect(), true)
            }
            BathState::Displaced { beta, mean_x, mean_p } => {
                beta.validate()?;
                if mean_x.len() != modes.len() || mean_p.len() != modes.len() {
                    return Err(Error::Shape(format!(
                        "displacement has {}/{} entries for {} modes",
                        mean_x.len(),
                        mean_p.len(),
                        modes.len()
                    )));
                }
                let moments = modes
                    .iter()
                    .zip(mean_x.iter().zip(mean_p))
                    .map(|(m, (&x, &p))| ModeMoments { mean_x: x, mean_p: p, ..ModeMoments::thermal(m, *beta) })
                    .collect();
                (moments, true)
            }
            BathState::Gaussian(moments) => {
                if moments.len() != modes.len() {
                    return Err(Error::Shape(format!(
                        "{} mode states for {} modes",
                        moments.len(),
                        modes.len()
                    )));
                }
                for m in moments {
                    m.validate()?;
                }
                (moments.clone(), false)
            }
        };
        Ok(Self { modes, coupling, state, moments, stationary })
    }

    pub fn thermal(modes: Vec<BathMode<T>>, coupling: DMatrix<T>, beta: Beta<T>) -> Result<Self> {
        Self::new(modes, coupling, BathState::Thermal { beta })
    }

    /// Same modes and couplings with a different state.
    pub fn with_state(&self, state: BathState<T>) -> Result<Self> {
        Self::new(self.modes.clone(), self.coupling.clone(), state)
    }

    pub fn modes(&self) -> &[BathMode<T>] {
        &self.modes
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn n_channels(&self) -> usize {
        self.coupling.nrows()
    }

    pub fn coupling(&self) -> &DMatrix<T> {
        &self.coupling
    }

    pub fn state(&self) -> &BathState<T> {
        &self.state
    }

    pub fn mode_moments(&self) -> &[ModeMoments<T>] {
        &self.moments
    }

    /// True when the stability condition `Tr[B_α Ω] = 0` holds for all
    /// channels identically in time.
    pub fn is_stable(&self) -> bool {
        self.moments
            .iter()
            .enumerate()
            .all(|(k, m)| {
                (m.mean_x == T::zero() && m.mean_p == T::zero())
                    || (0..self.n_channels()).all(|a| self.coupling[(a, k)] == T::zero())
            })
    }

    fn check_channel(&self, channel: usize) -> Result<()> {
        if channel >= self.n_channels() {
            return Err(Error::Lookup { kind: "channel", index: channel });
        }
        Ok(())
    }

    /// Centred single-mode correlation `Tr[X_k(τ₁) X_k(τ₂) Ω] − ⟨X_k(τ₁)⟩⟨X_k(τ₂)⟩`.
    pub fn mode_corr(&self, k: usize, tau1: T, tau2: T) -> Cx<T> {
        let mode = &self.modes[k];
        let m = &self.moments[k];
        let mw = mode.m_omega();
        let w = mode.omega;
        let imag = -(w * (tau1 - tau2)).sin() / (T::lit(2.0) * mw);
        let real = if self.stationary {
            m.var_x * (w * (tau1 - tau2)).cos()
        } else {
            let (s1, c1) = (w * tau1).sin_cos();
            let (s2, c2) = (w * tau2).sin_cos();
            m.var_x * c1 * c2 + m.var_p / (mw * mw) * s1 * s2 + m.cov_xp / mw * (c1 * s2 + s1 * c2)
        };
        cx(real, imag)
    }

    /// Physical-time correlation `c_αβ(τ₁, τ₂) = Tr[B_α(τ₁) B_β(τ₂) Ω]`,
    /// centred for states that violate the stability condition.
    pub fn phys_corr(&self, alpha: usize, beta: usize, tau1: T, tau2: T) -> Result<Cx<T>> {
        self.check_channel(alpha)?;
        self.check_channel(beta)?;
        Ok(self.corr(alpha, beta, tau1, tau2))
    }

    pub(crate) fn corr(&self, alpha: usize, beta: usize, tau1: T, tau2: T) -> Cx<T> {
        let mut acc = re(T::zero());
        for k in 0..self.modes.len() {
            let gg = self.coupling[(alpha, k)] * self.coupling[(beta, k)];
            if gg != T::zero() {
                acc += self.mode_corr(k, tau1, tau2) * gg;
            }
        }
        acc
    }

    /// `E_α(τ) = Tr[B_α(τ) Ω]`.
    pub fn mean_field(&self, alpha: usize, tau: T) -> Result<T> {
        self.check_channel(alpha)?;
        Ok(self.mean(alpha, tau))
    }

    pub(crate) fn mean(&self, alpha: usize, tau: T) -> T {
        let mut acc = T::zero();
        for (k, (mode, m)) in self.modes.iter().zip(&self.moments).enumerate() {
            let g = self.coupling[(alpha, k)];
            if g != T::zero() && (m.mean_x != T::zero() || m.mean_p != T::zero()) {
                let (s, c) = (mode.omega * tau).sin_cos();
                acc += g * (m.mean_x * c + m.mean_p / mode.m_omega() * s);
            }
        }
        acc
    }

    /// `Im c_αβ(τ₁, τ₂)`, independent of the bath state.
    #[cfg(test)]
    pub(crate) fn corr_imag(&self, alpha: usize, beta: usize, tau1: T, tau2: T) -> T {
        let mut acc = T::zero();
        for (k, mode) in self.modes.iter().enumerate() {
            let gg = self.coupling[(alpha, k)] * self.coupling[(beta, k)];
            if gg != T::zero() {
                acc -= gg * (mode.omega * (tau1 - tau2)).sin() / (T::lit(2.0) * mode.m_omega());
            }
        }
        acc
    }

    /// Contour Green's function `C_αβ(z₁, z₂)` on grid nodes.
    ///
    /// Equal nodes on equal branches use `θ(0) = 1/2`, which makes the
    /// function exactly symmetric under `(α, z₁) ↔ (β, z₂)`.
    pub fn contour_gf(
        &self,
        grid: &TimeGrid<T>,
        alpha: usize,
        beta: usize,
        z1: ContourPoint,
        z2: ContourPoint,
    ) -> Result<Cx<T>> {
        self.check_channel(alpha)?;
        self.check_channel(beta)?;
        for z in [z1, z2] {
            if z.index >= grid.n_nodes() {
                return Err(Error::Validation(format!(
                    "contour point {z:?} outside a grid of {} nodes",
                    grid.n_nodes()
                )));
            }
        }
        Ok(self.contour_value(grid, alpha, beta, z1, z2))
    }

    pub(crate) fn contour_value(
        &self,
        grid: &TimeGrid<T>,
        alpha: usize,
        beta: usize,
        z1: ContourPoint,
        z2: ContourPoint,
    ) -> Cx<T> {
        let (t1, t2) = (grid.node(z1.index), grid.node(z2.index));
        let forward = || self.corr(alpha, beta, t1, t2);
        let backward = || self.corr(beta, alpha, t2, t1);
        let half = T::lit(0.5);
        match (z1.branch, z2.branch) {
            (Branch::Minus, Branch::Minus) => match z1.index.cmp(&z2.index) {
                std::cmp::Ordering::Greater => forward(),
                std::cmp::Ordering::Less => backward(),
                std::cmp::Ordering::Equal => (forward() + backward()) * half,
            },
            (Branch::Plus, Branch::Plus) => match z1.index.cmp(&z2.index) {
                std::cmp::Ordering::Greater => backward(),
                std::cmp::Ordering::Less => forward(),
                std::cmp::Ordering::Equal => (forward() + backward()) * half,
            },
            (Branch::Plus, Branch::Minus) => forward(),
            (Branch::Minus, Branch::Plus) => backward(),
        }
    }

    /// Keldysh and retarded kernels: `(Re c_αβ(τ₁,τ₂), θ(τ₁−τ₂) Im c_αβ(τ₁,τ₂))`
    /// with `θ(0) = 1/2`.
    pub fn keldysh_kernels(&self, alpha: usize, beta: usize, tau1: T, tau2: T) -> Result<(T, T)> {
        self.check_channel(alpha)?;
        self.check_channel(beta)?;
        let c = self.corr(alpha, beta, tau1, tau2);
        let step = if tau1 > tau2 {
            T::one()
        } else if tau1 < tau2 {
            T::zero()
        } else {
            T::lit(0.5)
        };
        Ok((c.re, step * c.im))
    }

    /// Keldysh (`Re c`) and retarded kernel tables on the grid, indexed by
    /// `channel * n_nodes + node`.
    pub fn kernel_tables(&self, grid: &TimeGrid<T>) -> (DMatrix<T>, DMatrix<T>) {
        let n = grid.n_nodes();
        let size = self.n_channels() * n;
        let mut keldysh = DMatrix::zeros(size, size);
        let mut retarded = DMatrix::zeros(size, size);
        for a in 0..self.n_channels() {
            for b in 0..self.n_channels() {
                for i in 0..n {
                    for j in 0..n {
                        let c = self.corr(a, b, grid.node(i), grid.node(j));
                        keldysh[(a * n + i, b * n + j)] = c.re;
                        let step = match i.cmp(&j) {
                            std::cmp::Ordering::Greater => T::one(),
                            std::cmp::Ordering::Less => T::zero(),
                            std::cmp::Ordering::Equal => T::lit(0.5),
                        };
                        retarded[(a * n + i, b * n + j)] = step * c.im;
                    }
                }
            }
        }
        (keldysh, retarded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_mode(g: f64, omega: f64, mass: f64, beta: Beta<f64>) -> BathSpec<f64> {
        BathSpec::thermal(
            vec![BathMode::new(omega, mass).unwrap()],
            DMatrix::from_element(1, 1, g),
            beta,
        )
        .unwrap()
    }

    fn two_channel() -> BathSpec<f64> {
        BathSpec::thermal(
            vec![BathMode::new(0.7, 1.0).unwrap(), BathMode::new(1.4, 0.5).unwrap()],
            DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.4]),
            Beta::Finite(1.3),
        )
        .unwrap()
    }

    #[test]
    fn vacuum_equal_time_variance() {
        let bath = one_mode(0.5, 1.2, 0.8, Beta::Infinite);
        let c = bath.phys_corr(0, 0, 0.4, 0.4).unwrap();
        assert!((c.re - 0.25 / (2.0 * 0.8 * 1.2)).abs() < 1e-15);
        assert_eq!(c.im, 0.0);
    }

    #[test]
    fn imaginary_part_is_state_independent() {
        let hot = one_mode(0.5, 1.2, 1.0, Beta::Finite(0.5));
        let cold = one_mode(0.5, 1.2, 1.0, Beta::Finite(5.0));
        for (t1, t2) in [(0.3, 1.1), (2.0, -0.4), (5.0, 5.0)] {
            assert_eq!(hot.phys_corr(0, 0, t1, t2).unwrap().im, cold.phys_corr(0, 0, t1, t2).unwrap().im);
        }
    }

    #[test]
    fn zero_coupling_vanishes() {
        let bath = one_mode(0.0, 1.0, 1.0, Beta::Finite(1.0));
        assert_eq!(bath.phys_corr(0, 0, 0.1, 0.9).unwrap(), cx(0.0, 0.0));
    }

    #[test]
    fn mean_field_examples() {
        let modes = vec![BathMode::<f64>::new(2.0, 1.5).unwrap()];
        let g = DMatrix::from_element(1, 1, 0.4);
        let thermal = BathSpec::thermal(modes.clone(), g.clone(), Beta::Finite(1.0)).unwrap();
        assert_eq!(thermal.mean_field(0, 0.7).unwrap(), 0.0);
        assert!(thermal.is_stable());
        let displaced = BathSpec::new(
            modes,
            g,
            BathState::Displaced { beta: Beta::Finite(1.0), mean_x: vec![0.8], mean_p: vec![-0.6] },
        )
        .unwrap();
        assert!(!displaced.is_stable());
        assert!((displaced.mean_field(0, 0.0).unwrap() - 0.4 * 0.8).abs() < 1e-15);
        let quarter = std::f64::consts::FRAC_PI_2 / 2.0;
        let expected = 0.4 * (-0.6) / (1.5 * 2.0);
        assert!((displaced.mean_field(0, quarter).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn components_follow_branch_rules() {
        let bath = two_channel();
        let grid = TimeGrid::new(2.0, 4).unwrap();
        let p = |branch, index| ContourPoint { branch, index };
        let (t1, t2) = (grid.node(3), grid.node(1));
        let c12 = bath.phys_corr(0, 1, t1, t2).unwrap();
        let c21 = bath.phys_corr(1, 0, t2, t1).unwrap();
        let gf = |b1, i1, b2, i2| bath.contour_gf(&grid, 0, 1, p(b1, i1), p(b2, i2)).unwrap();
        assert_eq!(gf(Branch::Plus, 3, Branch::Minus, 1), c12);
        assert_eq!(gf(Branch::Minus, 3, Branch::Minus, 1), c12);
        assert_eq!(gf(Branch::Plus, 3, Branch::Plus, 1), c21);
        assert_eq!(gf(Branch::Minus, 1, Branch::Plus, 3), bath.phys_corr(1, 0, t1, t2).unwrap());
        let same = gf(Branch::Minus, 2, Branch::Minus, 2);
        let c = bath.phys_corr(0, 1, grid.node(2), grid.node(2)).unwrap();
        assert!((same - cx(c.re, 0.0)).norm_sqr() < 1e-30);
        assert!(bath.contour_gf(&grid, 0, 0, p(Branch::Minus, 5), p(Branch::Minus, 0)).is_err());
        assert!(bath.contour_gf(&grid, 0, 2, p(Branch::Minus, 0), p(Branch::Minus, 0)).is_err());
    }

    #[test]
    fn kernels_single_mode() {
        let (g, w, m, beta) = (0.6, 1.1, 0.9, 2.0);
        let bath = one_mode(g, w, m, Beta::Finite(beta));
        let coth = 1.0 / (beta * w / 2.0).tanh();
        for (t1, t2) in [(0.2, 1.5), (1.5, 0.2), (0.7, 0.7)] {
            let (nn, ret) = bath.keldysh_kernels(0, 0, t1, t2).unwrap();
            let expected = g * g * coth / (2.0 * m * w) * (w * (t1 - t2)).cos();
            assert!((nn - expected).abs() < 1e-14);
            if t1 < t2 {
                assert_eq!(ret, 0.0);
            }
        }
    }

    #[test]
    fn keldysh_gram_is_psd() {
        let bath = two_channel();
        let grid = TimeGrid::new(6.0, 23).unwrap();
        let (keldysh, _) = bath.kernel_tables(&grid);
        let (vals, _) = crate::linalg::eigh_real(&keldysh).unwrap();
        assert!(vals[0] >= -1e-10, "min eigenvalue {}", vals[0]);
    }

    #[test]
    fn gaussian_state_reduces_to_thermal() {
        let bath = two_channel();
        let moments = bath.mode_moments().to_vec();
        let general = bath.with_state(BathState::Gaussian(moments)).unwrap();
        for (t1, t2) in [(0.3, 1.7), (2.2, 0.1)] {
            let a = bath.phys_corr(0, 1, t1, t2).unwrap();
            let b = general.phys_corr(0, 1, t1, t2).unwrap();
            assert!((a - b).norm_sqr().sqrt() < 1e-14);
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(BathMode::new(0.0, 1.0).is_err());
        assert!(BathMode::new(1.0, -1.0).is_err());
        let modes = vec![BathMode::new(1.0, 1.0).unwrap()];
        assert!(BathSpec::thermal(modes.clone(), DMatrix::zeros(1, 2), Beta::Infinite).is_err());
        assert!(BathSpec::thermal(modes.clone(), DMatrix::zeros(1, 1), Beta::Finite(-1.0)).is_err());
        let squeezed_too_far = ModeMoments { mean_x: 0.0, mean_p: 0.0, var_x: 0.1, var_p: 0.1, cov_xp: 0.0 };
        assert!(BathSpec::new(modes, DMatrix::zeros(1, 1), BathState::Gaussian(vec![squeezed_too_far])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn hermiticity_in_channels(t1 in -5.0f64..5.0, t2 in -5.0f64..5.0, a in 0usize..2, b in 0usize..2) {
            let bath = two_channel();
            let lhs = bath.phys_corr(b, a, t2, t1).unwrap();
            let rhs = bath.phys_corr(a, b, t1, t2).unwrap().conj();
            prop_assert!((lhs - rhs).norm_sqr().sqrt() < 1e-12);
        }

        #[test]
        fn contour_symmetry(i in 0usize..6, j in 0usize..6, a in 0usize..2, b in 0usize..2, bi in 0u8..2, bj in 0u8..2) {
            let bath = two_channel();
            let grid = TimeGrid::new(3.0, 5).unwrap();
            let br = |x: u8| if x == 0 { Branch::Minus } else { Branch::Plus };
            let z1 = ContourPoint { branch: br(bi), index: i };
            let z2 = ContourPoint { branch: br(bj), index: j };
            prop_assert_eq!(
                bath.contour_gf(&grid, a, b, z1, z2).unwrap(),
                bath.contour_gf(&grid, b, a, z2, z1).unwrap()
            );
        }
    }
}
