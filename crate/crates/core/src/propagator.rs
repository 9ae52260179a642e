//! Noise-free evaluation of the exact Gaussian dynamics.
//!
//! [`evolve_ferialdi`] applies the physical-time form of the time-ordered
//! exponential,
//! `T exp{Σ ∬ c_αβ(τ₁,τ₂)[A_β^L(τ₂)A_α^R(τ₁) − θ(τ₁−τ₂)A_α^L(τ₁)A_β^L(τ₂)
//!  − θ(τ₂−τ₁)A_β^R(τ₂)A_α^R(τ₁)]}`,
//! by first-order splitting: step `j` exponentiates the slice of the double
//! integral whose later time falls in step `j`, sampled at step midpoints.
//! The splitting is exact when all superoperators commute (dephasing). For
//! non-commuting couplings, pairs of interleaved time arguments are applied
//! out of order and a coupling-dependent error remains as `dt → 0`.
//!
//! [`analytic_dephasing`] is the closed form for couplings that commute with
//! each other and with `H_S`.

use gauss_quad::GaussLegendre;

use crate::bath::BathSpec;
use crate::contour::TimeGrid;
use crate::error::{Error, Result};
use crate::linalg::{commutator, eigh, hermiticity_defect, max_abs, CMat, DensityOperator};
use crate::scalar::{cexp, cx, re, Cx, Real};
use crate::system::{InteractionCache, SystemSpec};
use crate::tol;

/// Per-step kernel slice: `U_α`, `W_α`, the equal-time weights and the
/// mean-field term, all in interaction-picture operators at the midpoint.
struct StepKernel<T: Real> {
    ops: Vec<CMat<T>>,
    u: Vec<CMat<T>>,
    w: Vec<CMat<T>>,
    // diag[α][β] = c_αβ(s_j, s_j) dt²
    diag: Vec<Vec<Cx<T>>>,
    // mean[α] = E_α(s_j) dt
    mean: Vec<T>,
}

impl<T: Real> StepKernel<T> {
    fn apply(&self, x: &CMat<T>) -> CMat<T> {
        let mut out = CMat::zeros(x.nrows(), x.ncols());
        let half = T::lit(0.5);
        for (a, op_a) in self.ops.iter().enumerate() {
            out += &self.u[a] * x * op_a + op_a * x * &self.w[a] - op_a * (&self.u[a] * x) - (x * &self.w[a]) * op_a;
            for (b, op_b) in self.ops.iter().enumerate() {
                let c = self.diag[a][b];
                if c == re(T::zero()) {
                    continue;
                }
                let ab = op_a * op_b;
                out += (op_b * x * op_a - (&ab * x + x * &ab) * re(half)) * c;
            }
            if self.mean[a] != T::zero() {
                out += (op_a * x - x * op_a) * cx(T::zero(), -self.mean[a]);
            }
        }
        out
    }

    /// `exp(L) x` by Taylor series of the action.
    fn exp_apply(&self, x: &CMat<T>) -> Result<CMat<T>> {
        let mut term = x.clone();
        let mut sum = x.clone();
        let scale = max_abs(x).max(T::lit(1e-300));
        for k in 1..200 {
            term = self.apply(&term) * re(T::one() / T::from_usize_lossy(k));
            sum += &term;
            if max_abs(&term) <= T::epsilon() * scale {
                return Ok(sum);
            }
        }
        Err(Error::Numerical("Taylor series of the step propagator did not converge".into()))
    }
}

/// Reduced density matrices (interaction picture) at every grid node.
///
/// Displaced baths contribute the linear mean-field term; the correlation
/// used is the centred one. Output Hermiticity defects above `1e-6` are
/// reported as a discretization failure.
pub fn evolve_ferialdi<T: Real>(
    system: &SystemSpec<T>,
    bath: &BathSpec<T>,
    rho0: &DensityOperator<T>,
    grid: &TimeGrid<T>,
) -> Result<Vec<CMat<T>>> {
    let c = system.n_channels();
    if c != bath.n_channels() {
        return Err(Error::Shape(format!("system has {c} channels, bath {}", bath.n_channels())));
    }
    if rho0.dim() != system.dim() {
        return Err(Error::Shape(format!("initial state of dimension {} for a {}-level system", rho0.dim(), system.dim())));
    }
    let dt = grid.dt();
    let half = T::lit(0.5);
    let n = grid.n_steps();
    let mids: Vec<T> = (0..n).map(|j| (T::from_usize_lossy(j) + half) * dt).collect();
    let cache = InteractionCache::new(system, &mids)?;
    let dt2 = dt * dt;
    let mut rho = rho0.matrix().clone();
    let mut out = Vec::with_capacity(n + 1);
    out.push(rho.clone());
    for j in 0..n {
        let sj = mids[j];
        let d = system.dim();
        let mut u = vec![CMat::zeros(d, d); c];
        let mut w = vec![CMat::zeros(d, d); c];
        for k in 0..j {
            let sk = mids[k];
            for a in 0..c {
                for b in 0..c {
                    let cab = bath.corr(a, b, sj, sk) * dt2;
                    let cba = bath.corr(b, a, sk, sj) * dt2;
                    u[a] += cache.op(k, b) * cab;
                    w[a] += cache.op(k, b) * cba;
                }
            }
        }
        let diag = (0..c).map(|a| (0..c).map(|b| bath.corr(a, b, sj, sj) * dt2).collect()).collect();
        let mean = (0..c).map(|a| bath.mean(a, sj) * dt).collect();
        let kernel = StepKernel { ops: cache.ops(j).to_vec(), u, w, diag, mean };
        rho = kernel.exp_apply(&rho)?;
        let defect = hermiticity_defect(&rho);
        if defect > T::lit(tol::PROPAGATOR_HERMITIAN) {
            return Err(Error::Numerical(format!(
                "propagator output non-Hermitian by {defect} at step {j}; refine the grid"
            )));
        }
        out.push(rho.clone());
    }
    Ok(out)
}

const PANELS: usize = 10;
const ORDER: usize = 10;

fn base_rule() -> Vec<(f64, f64)> {
    GaussLegendre::new(ORDER).expect("valid Gauss-Legendre degree").into_node_weight_pairs()
}

/// Composite Gauss-Legendre rule on `[0, t]`, [`PANELS`] panels of the
/// `base` rule on `[-1, 1]`.
fn composite_rule<T: Real>(t: T, base: &[(f64, f64)]) -> Vec<(T, T)> {
    let h = t / T::from_usize_lossy(PANELS);
    let half = T::lit(0.5);
    let mut rule = Vec::with_capacity(PANELS * base.len());
    for p in 0..PANELS {
        let a = h * T::from_usize_lossy(p);
        for &(x, wt) in base {
            rule.push((a + h * half * (T::lit(x) + T::one()), h * half * T::lit(wt)));
        }
    }
    rule
}

/// `Φ_αβ = ∬_{τ₁>τ₂} c_αβ` and `F_αβ = ∬ c_αβ` over `[0, t]²`.
fn double_integrals<T: Real>(bath: &BathSpec<T>, t: T) -> (Vec<Vec<Cx<T>>>, Vec<Vec<Cx<T>>>) {
    let c = bath.n_channels();
    let mut phi = vec![vec![re(T::zero()); c]; c];
    let mut full = vec![vec![re(T::zero()); c]; c];
    if t == T::zero() {
        return (phi, full);
    }
    let base = base_rule();
    let outer = composite_rule(t, &base);
    let inner: Vec<Vec<(T, T)>> = outer.iter().map(|&(t1, _)| composite_rule(t1, &base)).collect();
    for a in 0..c {
        for b in 0..c {
            let mut tri = re(T::zero());
            let mut sq = re(T::zero());
            for (&(t1, w1), tri_rule) in outer.iter().zip(&inner) {
                for &(t2, w2) in tri_rule {
                    tri += bath.corr(a, b, t1, t2) * (w1 * w2);
                }
                for &(t2, w2) in &outer {
                    sq += bath.corr(a, b, t1, t2) * (w1 * w2);
                }
            }
            phi[a][b] = tri;
            full[a][b] = sq;
        }
    }
    (phi, full)
}

/// Closed-form reduced state for couplings that commute with each other and
/// with `H_S`, at each of `times` (interaction picture).
///
/// In the common eigenbasis with eigenvalues `a_αi`, element `(i, j)` is
/// multiplied by `exp(−½ Σ_αβ [(Φ_αβ+Φ_βα) a_αi a_βi + conj(Φ_αβ+Φ_βα) a_αj a_βj
/// − F_βα a_αi a_βj − F_αβ a_αj a_βi])`; the mean field adds
/// `−i Σ_α ∫E_α (a_αi − a_αj)`.
pub fn analytic_dephasing<T: Real>(
    system: &SystemSpec<T>,
    bath: &BathSpec<T>,
    rho0: &DensityOperator<T>,
    times: &[T],
) -> Result<Vec<CMat<T>>> {
    let c = system.n_channels();
    if c != bath.n_channels() {
        return Err(Error::Shape(format!("system has {c} channels, bath {}", bath.n_channels())));
    }
    let scale = max_abs(system.h_s()).max(T::one());
    let check = |x: &CMat<T>, y: &CMat<T>| -> Result<()> {
        if max_abs(&commutator(x, y)?) > T::lit(1e-10) * scale {
            return Err(Error::Precondition("couplings and H_S must commute pairwise".into()));
        }
        Ok(())
    };
    for a in 0..c {
        check(system.h_s(), &system.couplings()[a])?;
        for b in 0..a {
            check(&system.couplings()[a], &system.couplings()[b])?;
        }
    }
    // A generic combination shares the common eigenbasis.
    let mut probe = system.h_s() * re(T::lit(0.371_904_2));
    for (a, op) in system.couplings().iter().enumerate() {
        probe += op * re(T::lit(1.0 + 0.577_215_66 * (a as f64 + 1.0).sqrt()));
    }
    let (_, basis) = eigh(&probe)?;
    let d = system.dim();
    let mut eig = vec![vec![T::zero(); d]; c];
    for (a, op) in system.couplings().iter().enumerate() {
        let diag = basis.adjoint() * op * &basis;
        for i in 0..d {
            for j in 0..d {
                if i != j && (diag[(i, j)].re.abs() + diag[(i, j)].im.abs()) > T::lit(1e-8) * max_abs(op).max(T::one()) {
                    return Err(Error::Numerical("failed to diagonalize the couplings simultaneously".into()));
                }
            }
            eig[a][i] = diag[(i, i)].re;
        }
    }
    let rho_diag = basis.adjoint() * rho0.matrix() * &basis;
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if !(t >= T::zero()) || !t.is_finite() {
            return Err(Error::Validation(format!("time {t} must be finite and non-negative")));
        }
        let (phi, full) = double_integrals(bath, t);
        let mean_int: Vec<T> = (0..c)
            .map(|a| {
                if bath.is_stable() || t == T::zero() {
                    T::zero()
                } else {
                    composite_rule(t, &base_rule()).iter().fold(T::zero(), |s, &(x, w)| s + bath.mean(a, x) * w)
                }
            })
            .collect();
        let mut rho = rho_diag.clone();
        for i in 0..d {
            for j in 0..d {
                let mut expo = re(T::zero());
                for a in 0..c {
                    for b in 0..c {
                        let sym = phi[a][b] + phi[b][a];
                        expo += sym * (eig[a][i] * eig[b][i]) + sym.conj() * (eig[a][j] * eig[b][j])
                            - full[b][a] * (eig[a][i] * eig[b][j])
                            - full[a][b] * (eig[a][j] * eig[b][i]);
                    }
                }
                let mut total = expo * (-half);
                for a in 0..c {
                    total += cx(T::zero(), -mean_int[a] * (eig[a][i] - eig[a][j]));
                }
                rho[(i, j)] *= cexp(total);
            }
        }
        out.push(&basis * rho * basis.adjoint());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{BathMode, BathState, Beta};
    use crate::linalg::{max_abs_diff, sigma_x, sigma_z, trace};
    use crate::svne::ket;
    use nalgebra::DMatrix;

    fn plus_state() -> DensityOperator<f64> {
        let psi = ket(&[cx(0.6, 0.0), cx(0.0, 0.8)]);
        DensityOperator::new(&psi * psi.adjoint()).unwrap()
    }

    fn one_mode(g: f64, w: f64, beta: Beta<f64>) -> BathSpec<f64> {
        BathSpec::thermal(vec![BathMode::new(w, 1.0).unwrap()], DMatrix::from_element(1, 1, g), beta).unwrap()
    }

    // Closed-form coherence decay for A = σz, one mode:
    // ρ01(t)/ρ01(0) = exp(−2 g² coth(βω/2)/(2mω) · 2(1 − cos ωt)/ω²).
    fn single_mode_coherence(g: f64, w: f64, beta: f64, t: f64) -> f64 {
        let coth = 1.0 / (beta * w / 2.0).tanh();
        (-2.0 * g * g * coth / (2.0 * w) * 2.0 * (1.0 - (w * t).cos()) / (w * w)).exp()
    }

    #[test]
    fn dephasing_matches_single_mode_closed_form() {
        let (g, w, beta) = (0.4, 1.3, 1.5);
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(0.7), vec![sigma_z()]).unwrap();
        let bath = one_mode(g, w, Beta::Finite(beta));
        let times = [0.0, 0.5, 2.0, 4.7];
        let out = analytic_dephasing(&sys, &bath, &plus_state(), &times).unwrap();
        for (rho, &t) in out.iter().zip(&times) {
            let expected = plus_state().matrix()[(0, 1)] * single_mode_coherence(g, w, beta, t);
            assert!((rho[(0, 1)] - expected).norm() < 1e-12, "t = {t}");
            assert!((rho[(0, 0)] - plus_state().matrix()[(0, 0)]).norm() < 1e-14);
        }
    }

    #[test]
    fn dephasing_triangle_integral_closed_form() {
        // Φ for one vacuum mode: (1/2mω)[(1 − cos ωt)/ω² − i(t/ω − sin ωt/ω²)].
        let (w, t) = (0.9, 3.1);
        let bath = one_mode(1.0, w, Beta::Infinite);
        let (phi, full) = double_integrals(&bath, t);
        let pre = 1.0 / (2.0 * w);
        let expected = cx((1.0 - (w * t).cos()) / (w * w), -(t / w - (w * t).sin() / (w * w))) * pre;
        assert!((phi[0][0] - expected).norm() < 1e-12);
        assert!((full[0][0] - cx(2.0 * (1.0 - (w * t).cos()) / (w * w) * pre, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn dephasing_zero_coupling_and_precondition() {
        let sys = SystemSpec::unlabelled(sigma_z::<f64>(), vec![sigma_z()]).unwrap();
        let out = analytic_dephasing(&sys, &one_mode(0.0, 1.0, Beta::Infinite), &plus_state(), &[3.0]).unwrap();
        assert!(max_abs_diff(&out[0], plus_state().matrix()) < 1e-15);
        let bad = SystemSpec::unlabelled(sigma_z::<f64>(), vec![sigma_x()]).unwrap();
        assert!(matches!(
            analytic_dephasing(&bad, &one_mode(0.1, 1.0, Beta::Infinite), &plus_state(), &[1.0]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn ferialdi_zero_coupling() {
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(0.5), vec![sigma_x()]).unwrap();
        let grid = TimeGrid::new(3.0, 30).unwrap();
        let out = evolve_ferialdi(&sys, &one_mode(0.0, 1.0, Beta::Finite(1.0)), &plus_state(), &grid).unwrap();
        assert!(out.iter().all(|r| max_abs_diff(r, plus_state().matrix()) < 1e-15));
    }

    #[test]
    fn ferialdi_matches_dephasing() {
        let (g, w, beta) = (0.5, 1.1, 2.0);
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(0.8), vec![sigma_z()]).unwrap();
        let bath = one_mode(g, w, Beta::Finite(beta));
        let grid = TimeGrid::new(5.0, 400).unwrap();
        let out = evolve_ferialdi(&sys, &bath, &plus_state(), &grid).unwrap();
        let reference = analytic_dephasing(&sys, &bath, &plus_state(), &grid.nodes()).unwrap();
        let err = out.iter().zip(&reference).map(|(a, b)| max_abs_diff(a, b)).fold(0.0, f64::max);
        assert!(err < 1e-4, "max error {err}");
        // Halving dt reduces the error at least linearly.
        let coarse = TimeGrid::new(5.0, 100).unwrap();
        let out_c = evolve_ferialdi(&sys, &bath, &plus_state(), &coarse).unwrap();
        let ref_c = analytic_dephasing(&sys, &bath, &plus_state(), &coarse.nodes()).unwrap();
        let err_c = out_c.iter().zip(&ref_c).map(|(a, b)| max_abs_diff(a, b)).fold(0.0, f64::max);
        assert!(err_c > 3.0 * err, "coarse {err_c} fine {err}");
    }

    #[test]
    fn ferialdi_displaced_mean_field_dephasing() {
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(0.3), vec![sigma_z()]).unwrap();
        let bath = BathSpec::new(
            vec![BathMode::new(1.2, 1.0).unwrap()],
            DMatrix::from_element(1, 1, 0.3),
            BathState::Displaced { beta: Beta::Finite(1.0), mean_x: vec![0.7], mean_p: vec![-0.2] },
        )
        .unwrap();
        let grid = TimeGrid::new(3.0, 300).unwrap();
        let out = evolve_ferialdi(&sys, &bath, &plus_state(), &grid).unwrap();
        let reference = analytic_dephasing(&sys, &bath, &plus_state(), &grid.nodes()).unwrap();
        let err = out.iter().zip(&reference).map(|(a, b)| max_abs_diff(a, b)).fold(0.0, f64::max);
        assert!(err < 1e-4, "max error {err}");
    }

    #[test]
    fn ferialdi_trace_and_hermiticity_non_commuting() {
        let sys = SystemSpec::unlabelled(sigma_z::<f64>() * re(0.5), vec![sigma_x()]).unwrap();
        let bath = one_mode(0.3, 1.0, Beta::Finite(1.0));
        let grid = TimeGrid::new(4.0, 200).unwrap();
        for r in evolve_ferialdi(&sys, &bath, &plus_state(), &grid).unwrap() {
            assert!((trace(&r) - cx(1.0, 0.0)).norm() < 1e-12);
            assert!(hermiticity_defect(&r) < 1e-12);
        }
    }
}
