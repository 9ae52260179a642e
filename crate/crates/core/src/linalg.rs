//! Dense complex matrix algebra.
//!
//! Everything is built on `nalgebra::DMatrix<Complex<T>>`. Decompositions
//! delegate to nalgebra; the matrix exponential is a local scaling-and-squaring
//! Padé implementation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::{cx, is_finite, modulus, re, Cx, Real};
use crate::tol;

pub type CMat<T> = DMatrix<Cx<T>>;
pub type CVec<T> = DVector<Cx<T>>;

pub fn identity<T: Real>(d: usize) -> CMat<T> {
    CMat::identity(d, d)
}

pub fn zeros<T: Real>(rows: usize, cols: usize) -> CMat<T> {
    CMat::zeros(rows, cols)
}

pub fn sigma_x<T: Real>() -> CMat<T> {
    CMat::from_row_slice(2, 2, &[re(T::zero()), re(T::one()), re(T::one()), re(T::zero())])
}

pub fn sigma_y<T: Real>() -> CMat<T> {
    let z = re(T::zero());
    CMat::from_row_slice(2, 2, &[z, cx(T::zero(), -T::one()), cx(T::zero(), T::one()), z])
}

pub fn sigma_z<T: Real>() -> CMat<T> {
    let z = re(T::zero());
    CMat::from_row_slice(2, 2, &[re(T::one()), z, z, re(-T::one())])
}

/// Promotes a real matrix to a complex one.
pub fn complexify<T: Real>(m: &DMatrix<T>) -> CMat<T> {
    m.map(re)
}

/// Largest entry modulus.
pub fn max_abs<T: Real>(m: &CMat<T>) -> T {
    m.iter().fold(T::zero(), |acc, z| acc.max(modulus(*z)))
}

pub fn max_abs_diff<T: Real>(a: &CMat<T>, b: &CMat<T>) -> T {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (x, y)| acc.max(modulus(*x - *y)))
}

pub fn all_finite<T: Real>(m: &CMat<T>) -> bool {
    m.iter().all(|z| is_finite(*z))
}

pub fn trace<T: Real>(m: &CMat<T>) -> Cx<T> {
    m.diagonal().iter().fold(re(T::zero()), |acc, z| acc + *z)
}

/// `max |M - M†|`.
pub fn hermiticity_defect<T: Real>(m: &CMat<T>) -> T {
    if !m.is_square() {
        return T::max_value().unwrap_or_else(|| T::lit(f64::MAX));
    }
    let n = m.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in i..n {
            worst = worst.max(modulus(m[(i, j)] - m[(j, i)].conj()));
        }
    }
    worst
}

/// Hermitian within `rel * max|M|`.
pub fn is_hermitian<T: Real>(m: &CMat<T>, rel: T) -> bool {
    m.is_square() && hermiticity_defect(m) <= rel * max_abs(m)
}

pub fn hermitian_part<T: Real>(m: &CMat<T>) -> CMat<T> {
    (m + m.adjoint()) * re(T::lit(0.5))
}

pub fn kron<T: Real>(a: &CMat<T>, b: &CMat<T>) -> CMat<T> {
    a.kronecker(b)
}

/// Kronecker product of an ordered list of factors.
pub fn kron_all<T: Real>(factors: &[CMat<T>]) -> CMat<T> {
    factors
        .iter()
        .fold(identity::<T>(1), |acc, f| acc.kronecker(f))
}

fn check_same_square<T: Real>(a: &CMat<T>, b: &CMat<T>) -> Result<()> {
    if !a.is_square() || a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "expected equal square operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `[a, b] = ab - ba`.
pub fn commutator<T: Real>(a: &CMat<T>, b: &CMat<T>) -> Result<CMat<T>> {
    check_same_square(a, b)?;
    Ok(a * b - b * a)
}

/// `{a, b} = ab + ba`.
pub fn anticommutator<T: Real>(a: &CMat<T>, b: &CMat<T>) -> Result<CMat<T>> {
    check_same_square(a, b)?;
    Ok(a * b + b * a)
}

fn one_norm<T: Real>(m: &CMat<T>) -> T {
    (0..m.ncols())
        .map(|j| m.column(j).iter().fold(T::zero(), |acc, z| acc + modulus(*z)))
        .fold(T::zero(), |acc, s| acc.max(s))
}

// Padé coefficients and 1-norm thresholds (Higham 2005, double precision).
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068),
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant of order 3, 5, 7, 9 or 13, chosen from the 1-norm.
///
/// Orders below 13 are used when `‖a‖₁` is below the matching threshold;
/// otherwise `a` is scaled by `2^-s` so that `‖a‖₁ / 2^s ≤ 5.37` and the
/// order-13 approximant is squared `s` times.
pub fn expm<T: Real>(a: &CMat<T>) -> Result<CMat<T>> {
    if !a.is_square() {
        return Err(Error::Shape(format!("expm of {:?} matrix", a.shape())));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(a.clone());
    }
    let norm = one_norm(a).as_f64();
    if !norm.is_finite() {
        return Err(Error::Numerical("expm of non-finite matrix".into()));
    }
    let ident = identity::<T>(n);
    let c = |x: f64| re(T::lit(x));

    for &(order, theta) in &THETA {
        if norm <= theta {
            let coeffs: &[f64] = match order {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            let a2 = a * a;
            let mut powers = vec![ident.clone()];
            for k in 1..=order / 2 {
                let next = &powers[k - 1] * &a2;
                powers.push(next);
            }
            let mut u = zeros::<T>(n, n);
            let mut v = zeros::<T>(n, n);
            for (k, p) in powers.iter().enumerate() {
                u += p * c(coeffs[2 * k + 1]);
                v += p * c(coeffs[2 * k]);
            }
            let u = a * u;
            return pade_solve(u, v);
        }
    }

    let s = (norm / THETA13).log2().ceil().max(0.0) as i32;
    let scaled = a * c(0.5f64.powi(s));
    let b = &PADE13;
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * c(b[13]) + &a4 * c(b[11]) + &a2 * c(b[9]);
    let u = &scaled
        * (&a6 * inner_u + &a6 * c(b[7]) + &a4 * c(b[5]) + &a2 * c(b[3]) + &ident * c(b[1]));
    let inner_v = &a6 * c(b[12]) + &a4 * c(b[10]) + &a2 * c(b[8]);
    let v = &a6 * inner_v + &a6 * c(b[6]) + &a4 * c(b[4]) + &a2 * c(b[2]) + &ident * c(b[0]);
    let mut r = pade_solve(u, v)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

fn pade_solve<T: Real>(u: CMat<T>, v: CMat<T>) -> Result<CMat<T>> {
    let p = &v + &u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| Error::Numerical("singular Padé denominator".into()))
}

/// Reduces `joint` (a Kronecker product space with factor dimensions
/// `dims`, first factor most significant) to factor `keep`.
pub fn partial_trace<T: Real>(joint: &CMat<T>, dims: &[usize], keep: usize) -> Result<CMat<T>> {
    let total: usize = dims.iter().product();
    if !joint.is_square() || joint.nrows() != total || dims.is_empty() {
        return Err(Error::Shape(format!(
            "dims {dims:?} inconsistent with {:?} operator",
            joint.shape()
        )));
    }
    if keep >= dims.len() {
        return Err(Error::Shape(format!(
            "kept factor {keep} out of {} factors",
            dims.len()
        )));
    }
    let dk = dims[keep];
    let left: usize = dims[..keep].iter().product();
    let right: usize = dims[keep + 1..].iter().product();
    let mut out = zeros::<T>(dk, dk);
    for a in 0..dk {
        for b in 0..dk {
            let mut acc = re(T::zero());
            for l in 0..left {
                for r in 0..right {
                    acc += joint[((l * dk + a) * right + r, (l * dk + b) * right + r)];
                }
            }
            out[(a, b)] = acc;
        }
    }
    Ok(out)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
///
/// The input is symmetrised first so that roundoff in the strictly upper
/// triangle is not silently dropped.
pub fn eigh<T: Real>(m: &CMat<T>) -> Result<(Vec<T>, CMat<T>)> {
    if !m.is_square() {
        return Err(Error::Shape(format!("eigh of {:?} matrix", m.shape())));
    }
    if !all_finite(m) {
        return Err(Error::Numerical("eigh of non-finite matrix".into()));
    }
    let eig = SymmetricEigen::new(hermitian_part(m));
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMat::from_fn(m.nrows(), m.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Eigen-decomposition of a real symmetric matrix, eigenvalues ascending.
pub fn eigh_real<T: Real>(m: &DMatrix<T>) -> Result<(Vec<T>, DMatrix<T>)> {
    if !m.is_square() {
        return Err(Error::Shape(format!("eigh of {:?} matrix", m.shape())));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("eigh of non-finite matrix".into()));
    }
    let sym = (m + m.transpose()) * T::lit(0.5);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), m.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// `V diag(f(λ)) V†` for Hermitian `m`.
pub fn hermitian_function<T: Real>(m: &CMat<T>, f: impl Fn(T) -> Cx<T>) -> Result<CMat<T>> {
    let (vals, vecs) = eigh(m)?;
    let n = vals.len();
    let mut scaled = vecs.clone();
    for (j, &l) in vals.iter().enumerate() {
        let w = f(l);
        for i in 0..n {
            scaled[(i, j)] *= w;
        }
    }
    Ok(scaled * vecs.adjoint())
}

/// Validated density operator: unit trace, Hermitian, positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator<T: Real> {
    matrix: CMat<T>,
}

impl<T: Real> DensityOperator<T> {
    pub fn new(matrix: CMat<T>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::Shape(format!("density of shape {:?}", matrix.shape())));
        }
        if !all_finite(&matrix) {
            return Err(Error::Validation("density has non-finite entries".into()));
        }
        let tr = trace(&matrix);
        let trace_tol = T::lit(tol::DENSITY_TRACE);
        if (tr.re - T::one()).abs() > trace_tol || tr.im.abs() > trace_tol {
            return Err(Error::Validation(format!("density trace {tr}")));
        }
        let herm = hermiticity_defect(&matrix);
        if herm > T::lit(tol::DENSITY_HERMITIAN) {
            return Err(Error::Validation(format!("density non-Hermitian by {herm}")));
        }
        let (vals, _) = eigh(&matrix)?;
        if vals[0] < T::lit(tol::DENSITY_MIN_EIG) {
            return Err(Error::Validation(format!(
                "density has eigenvalue {}",
                vals[0]
            )));
        }
        Ok(Self { matrix })
    }

    /// `|ψ⟩⟨ψ|` for a normalised copy of `psi`.
    pub fn pure(psi: &CVec<T>) -> Result<Self> {
        let norm = psi.iter().fold(T::zero(), |acc, z| acc + z.norm_sqr()).sqrt();
        if norm == T::zero() {
            return Err(Error::Validation("zero state vector".into()));
        }
        let v = psi * re(T::one() / norm);
        Self::new(&v * v.adjoint())
    }

    pub fn maximally_mixed(d: usize) -> Result<Self> {
        Self::new(identity::<T>(d) * re(T::one() / T::from_usize_lossy(d)))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMat<T> {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMat<T> {
        self.matrix
    }
}

/// `½‖a − b‖₁` for density operators.
pub fn trace_distance<T: Real>(a: &DensityOperator<T>, b: &DensityOperator<T>) -> Result<T> {
    trace_norm_distance(a.matrix(), b.matrix())
}

/// `½‖a − b‖₁` for operators whose difference is Hermitian, such as
/// Hermitised ensemble estimates.
pub fn trace_norm_distance<T: Real>(a: &CMat<T>, b: &CMat<T>) -> Result<T> {
    check_same_square(a, b)?;
    let diff = a - b;
    let defect = hermiticity_defect(&diff);
    let scale = T::one().max(max_abs(&diff));
    if defect > T::lit(tol::DENSITY_HERMITIAN) * scale {
        return Err(Error::Validation(format!(
            "difference non-Hermitian by {defect}"
        )));
    }
    let (vals, _) = eigh(&diff)?;
    Ok(vals.iter().fold(T::zero(), |acc, l| acc + l.abs()) * T::lit(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type M = CMat<f64>;

    fn random_matrix(d: usize, seed: u64, scale: f64) -> M {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        M::from_fn(d, d, |_, _| {
            cx(rng.random_range(-scale..scale), rng.random_range(-scale..scale))
        })
    }

    fn random_unitary(d: usize, seed: u64) -> M {
        let h = hermitian_part(&random_matrix(d, seed, 1.0));
        expm(&(h * cx(0.0, 1.0))).unwrap()
    }

    #[test]
    fn pauli_brackets() {
        let comm = commutator(&sigma_x::<f64>(), &sigma_y()).unwrap();
        let expected = sigma_z::<f64>() * cx(0.0, 2.0);
        assert!(max_abs_diff(&comm, &expected) < 1e-15);
        let anti = anticommutator(&sigma_x::<f64>(), &sigma_x()).unwrap();
        assert!(max_abs_diff(&anti, &(identity::<f64>(2) * re(2.0))) < 1e-15);
        let a = random_matrix(4, 1, 1.0);
        assert!(max_abs(&commutator(&a, &a).unwrap()) < 1e-15);
    }

    #[test]
    fn bracket_shape_errors() {
        let a = identity::<f64>(2);
        let b = identity::<f64>(3);
        assert!(matches!(commutator(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(anticommutator(&zeros::<f64>(2, 3), &zeros(2, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn expm_known_values() {
        let z = expm(&zeros::<f64>(3, 3)).unwrap();
        assert!(max_abs_diff(&z, &identity(3)) < 1e-15);

        let arg = sigma_x::<f64>() * cx(0.0, std::f64::consts::FRAC_PI_2);
        let e = expm(&arg).unwrap();
        assert!(max_abs_diff(&e, &(sigma_x::<f64>() * cx(0.0, 1.0))) < 1e-14);

        let d = M::from_diagonal(&CVec::from_vec(vec![re(1.0), re(2.0)]));
        let e = expm(&d).unwrap();
        let expected = M::from_diagonal(&CVec::from_vec(vec![re(1f64.exp()), re(2f64.exp())]));
        assert!(max_abs_diff(&e, &expected) < 1e-13);
    }

    #[test]
    fn expm_large_norm_inverse_and_unitarity() {
        for seed in 0..6 {
            // ‖a‖ up to ~10 exercises the squaring branch.
            let a = random_matrix(5, seed, 2.0);
            let prod = expm(&a).unwrap() * expm(&(-a.clone())).unwrap();
            let scale = 1.0f64.max(max_abs(&expm(&a).unwrap()));
            assert!(max_abs_diff(&prod, &identity(5)) < 1e-10 * scale, "seed {seed}");

            let anti = hermitian_part(&a) * cx(0.0, 3.0);
            let u = expm(&anti).unwrap();
            assert!(max_abs_diff(&(&u * u.adjoint()), &identity(5)) < 1e-10);
        }
    }

    #[test]
    fn expm_single_precision() {
        let arg = sigma_x::<f32>() * Cx::new(0.0f32, std::f32::consts::FRAC_PI_2);
        let e = expm(&arg).unwrap();
        let expected = sigma_x::<f32>() * Cx::new(0.0f32, 1.0);
        assert!(max_abs_diff(&e, &expected) < 1e-5);
    }

    #[test]
    fn partial_trace_of_products() {
        let rho_s = DensityOperator::pure(&CVec::from_vec(vec![re(0.6), cx(0.0, 0.8)])).unwrap();
        let rho_e = DensityOperator::<f64>::maximally_mixed(3).unwrap();
        let joint = kron(rho_s.matrix(), rho_e.matrix());
        let s = partial_trace(&joint, &[2, 3], 0).unwrap();
        let e = partial_trace(&joint, &[2, 3], 1).unwrap();
        assert!(max_abs_diff(&s, rho_s.matrix()) < 1e-15);
        assert!(max_abs_diff(&e, rho_e.matrix()) < 1e-15);

        let h = 1.0 / 2f64.sqrt();
        let bell = CVec::from_vec(vec![re(h), re(0.0), re(0.0), re(h)]);
        let joint = DensityOperator::pure(&bell).unwrap();
        let marginal = partial_trace(joint.matrix(), &[2, 2], 0).unwrap();
        assert!(max_abs_diff(&marginal, &(identity::<f64>(2) * re(0.5))) < 1e-15);
    }

    #[test]
    fn partial_trace_middle_factor_and_errors() {
        let a = hermitian_part(&random_matrix(2, 3, 1.0));
        let b = hermitian_part(&random_matrix(3, 4, 1.0));
        let c = hermitian_part(&random_matrix(2, 5, 1.0));
        let joint = kron_all(&[a.clone(), b.clone(), c.clone()]);
        let mid = partial_trace(&joint, &[2, 3, 2], 1).unwrap();
        let expected = b * (trace(&a) * trace(&c));
        assert!(max_abs_diff(&mid, &expected) < 1e-13);
        assert!(partial_trace(&joint, &[2, 2, 2], 0).is_err());
        assert!(partial_trace(&joint, &[2, 3, 2], 3).is_err());
    }

    #[test]
    fn partial_trace_invariant_under_local_unitary() {
        let u_s = random_unitary(2, 11);
        let u = kron(&u_s, &identity(3));
        let raw = random_matrix(6, 12, 1.0);
        let rho = &raw * raw.adjoint();
        let rotated = &u * &rho * u.adjoint();
        let before = partial_trace(&rho, &[2, 3], 1).unwrap();
        let after = partial_trace(&rotated, &[2, 3], 1).unwrap();
        assert!(max_abs_diff(&before, &after) < 1e-12);
    }

    #[test]
    fn trace_distance_examples() {
        let zero = DensityOperator::pure(&CVec::from_vec(vec![re(1.0f64), re(0.0)])).unwrap();
        let one = DensityOperator::pure(&CVec::from_vec(vec![re(0.0f64), re(1.0)])).unwrap();
        let mixed = DensityOperator::<f64>::maximally_mixed(2).unwrap();
        assert!(trace_distance(&zero, &zero).unwrap().abs() < 1e-15);
        assert!((trace_distance(&zero, &one).unwrap() - 1.0).abs() < 1e-14);
        assert!((trace_distance(&zero, &mixed).unwrap() - 0.5).abs() < 1e-14);
        assert!((trace_distance(&mixed, &zero).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn trace_distance_rejects_non_hermitian_difference() {
        let a = identity::<f64>(2);
        let mut b = identity::<f64>(2);
        b[(0, 1)] = re(0.1);
        assert!(matches!(trace_norm_distance(&a, &b), Err(Error::Validation(_))));
    }

    #[test]
    fn density_validation() {
        let mut m = identity::<f64>(2) * re(0.5);
        assert!(DensityOperator::new(m.clone()).is_ok());
        m[(0, 0)] = re(0.7);
        assert!(DensityOperator::new(m.clone()).is_err());
        let bad = CMat::from_row_slice(2, 2, &[re(1.5), re(0.0), re(0.0), re(-0.5)]);
        assert!(DensityOperator::new(bad).is_err());
    }

    #[test]
    fn eigh_reconstructs() {
        let h = hermitian_part(&random_matrix(6, 7, 1.0));
        let (vals, vecs) = eigh(&h).unwrap();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let diag = CMat::from_diagonal(&CVec::from_iterator(6, vals.iter().map(|&v| re(v))));
        assert!(max_abs_diff(&(&vecs * diag * vecs.adjoint()), &h) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn expm_commutes_with_adjoint(seed in 0u64..10_000, scale in 0.01f64..3.0) {
            let a = random_matrix(4, seed, scale);
            let lhs = expm(&a).unwrap().adjoint();
            let rhs = expm(&a.adjoint()).unwrap();
            let size = 1.0f64.max(max_abs(&lhs));
            prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-10 * size);
        }

        #[test]
        fn trace_distance_symmetric(seed in 0u64..10_000) {
            let x = random_matrix(3, seed, 1.0);
            let y = random_matrix(3, seed + 1, 1.0);
            let norm = |m: M| {
                let p = &m * m.adjoint();
                let t = trace(&p);
                DensityOperator::new(hermitian_part(&(p / t))).unwrap()
            };
            let (a, b) = (norm(x), norm(y));
            let ab = trace_distance(&a, &b).unwrap();
            let ba = trace_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        }
    }
}
