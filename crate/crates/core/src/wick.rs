//! Scalar Wick theorem, the partial Wick substitution for mixed `ν`/`η`
//! strings, and the truncated single-noise series `R′(t)`.
//!
//! Noise strings are written `ν₁…ν_k η_{k+1}…η_{2m}` with
//! `E[νν] = Re c`, `E[ν_i η_j] = i G_ij`, `G_ij = θ(τ_i − τ_j) Im c`, and
//! `E[ηη] = 0`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::bath::BathSpec;
use crate::contour::TimeGrid;
use crate::error::{Error, Result};
use crate::linalg::{max_abs, max_abs_diff, CMat};
use crate::noise::KeldyshFactor;
use crate::scalar::{cx, re, Cx, Real};
use crate::svne::reduce_trajectories;
use crate::system::{InteractionCache, SystemSpec};
use crate::tol;

/// Largest order `m` accepted by the series evaluators.
pub const MAX_SERIES_ORDER: usize = 3;

/// A perfect matching of `{0, …, 2m−1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pairing {
    pub pairs: Vec<(usize, usize)>,
}

/// All `(n−1)!!` perfect matchings of `n` labels, each pair `(i, j)` with
/// `i < j` and pairs sorted by first element.
pub fn enumerate_pairings(n: usize) -> Result<Vec<Pairing>> {
    if n % 2 == 1 {
        return Err(Error::Domain(format!("cannot pair an odd number ({n}) of labels")));
    }
    if n > tol::MAX_PAIRING_ORDER {
        return Err(Error::Precondition(format!("pairing enumeration capped at {} labels", tol::MAX_PAIRING_ORDER)));
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n / 2);
    let remaining: Vec<usize> = (0..n).collect();
    collect_pairings(&remaining, &mut current, &mut out);
    Ok(out)
}

fn collect_pairings(remaining: &[usize], current: &mut Vec<(usize, usize)>, out: &mut Vec<Pairing>) {
    let Some((&first, rest)) = remaining.split_first() else {
        out.push(Pairing { pairs: current.clone() });
        return;
    };
    for (pos, &partner) in rest.iter().enumerate() {
        current.push((first, partner));
        let next: Vec<usize> = rest.iter().enumerate().filter(|&(i, _)| i != pos).map(|(_, &x)| x).collect();
        collect_pairings(&next, current, out);
        current.pop();
    }
}

/// `(n−1)!!` for even `n`: the number of perfect matchings of `n` labels.
pub fn double_factorial_odd(n: usize) -> u64 {
    (1..n as u64).step_by(2).product()
}

// Σ over matchings of Π pair(i, j) for labels 0..n, by recursion on the first label.
fn hafnian<T: Real>(n: usize, pair: &impl Fn(usize, usize) -> Cx<T>) -> Cx<T> {
    if n % 2 == 1 {
        return re(T::zero());
    }
    let mut labels: Vec<usize> = (0..n).collect();
    hafnian_rec(&mut labels, pair)
}

fn hafnian_rec<T: Real>(labels: &mut Vec<usize>, pair: &impl Fn(usize, usize) -> Cx<T>) -> Cx<T> {
    if labels.is_empty() {
        return re(T::one());
    }
    let first = labels.remove(0);
    let mut total = re(T::zero());
    for pos in 0..labels.len() {
        let partner = labels.remove(pos);
        let w = pair(first, partner);
        if w != re(T::zero()) {
            total += w * hafnian_rec(labels, pair);
        }
        labels.insert(pos, partner);
    }
    labels.insert(0, first);
    total
}

/// `E[χ_{i₁} … χ_{i_n}]` for zero-mean jointly Gaussian `χ` with
/// `cov[(a, b)] = E[χ_a χ_b]`. Odd strings give zero.
pub fn wick_moment<T: Real>(cov: &CMat<T>, indices: &[usize]) -> Result<Cx<T>> {
    if !cov.is_square() {
        return Err(Error::Shape(format!("second-moment table of shape {:?}", cov.shape())));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= cov.nrows()) {
        return Err(Error::Lookup { kind: "noise variable", index: bad });
    }
    Ok(hafnian(indices.len(), &|a, b| cov[(indices[a], indices[b])]))
}

/// The string `ν₁…ν_k η_{k+1}…η_{2m}` on fixed points: `nn[(i, j)] = E[ν_i ν_j]`
/// and `g[(i, j)] = G_ij`, both indexed by string position.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSpec<T: Real> {
    k: usize,
    nn: DMatrix<T>,
    g: DMatrix<T>,
}

impl<T: Real> MomentSpec<T> {
    pub fn new(k: usize, nn: DMatrix<T>, g: DMatrix<T>) -> Result<Self> {
        let n = nn.nrows();
        if !nn.is_square() || g.shape() != nn.shape() {
            return Err(Error::Shape(format!("kernels of shape {:?} and {:?}", nn.shape(), g.shape())));
        }
        if n % 2 == 1 {
            return Err(Error::Domain(format!("string length {n} is odd")));
        }
        if k > n {
            return Err(Error::Validation(format!("k = {k} exceeds the string length {n}")));
        }
        Ok(Self { k, nn, g })
    }

    /// String on `(channel, time)` points of `bath`, with `θ(0) = 1/2`.
    pub fn from_points(bath: &BathSpec<T>, k: usize, points: &[(usize, T)]) -> Result<Self> {
        if let Some(&(ch, _)) = points.iter().find(|(ch, _)| *ch >= bath.n_channels()) {
            return Err(Error::Lookup { kind: "channel", index: ch });
        }
        let n = points.len();
        let c = |i: usize, j: usize| bath.corr(points[i].0, points[j].0, points[i].1, points[j].1);
        let nn = DMatrix::from_fn(n, n, |i, j| c(i, j).re);
        let g = DMatrix::from_fn(n, n, |i, j| step(points[i].1, points[j].1) * c(i, j).im);
        Self::new(k, nn, g)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.nn.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Full second-moment table `E[χ_a χ_b]` of the string.
    pub fn covariance(&self) -> CMat<T> {
        let n = self.len();
        CMat::from_fn(n, n, |a, b| self.pair(a, b))
    }

    fn pair(&self, a: usize, b: usize) -> Cx<T> {
        match (a < self.k, b < self.k) {
            (true, true) => re(self.nn[(a, b)]),
            (true, false) => cx(T::zero(), self.g[(a, b)]),
            (false, true) => cx(T::zero(), self.g[(b, a)]),
            (false, false) => re(T::zero()),
        }
    }

    /// Exact moment of the string.
    pub fn moment(&self) -> Cx<T> {
        hafnian(self.len(), &|a, b| self.pair(a, b))
    }
}

fn step<T: Real>(t1: T, t2: T) -> T {
    if t1 > t2 {
        T::one()
    } else if t1 < t2 {
        T::zero()
    } else {
        T::lit(0.5)
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        0.0
    } else {
        factorial(n) / (factorial(k) * factorial(n - k))
    }
}

fn i_pow<T: Real>(n: usize) -> Cx<T> {
    match n % 4 {
        0 => re(T::one()),
        1 => cx(T::zero(), T::one()),
        2 => re(-T::one()),
        _ => cx(T::zero(), -T::one()),
    }
}

fn minus_i_pow<T: Real>(n: usize) -> Cx<T> {
    i_pow::<T>(n).conj()
}

/// Substituted form `θ(k−m) i^{2m−k} k!/(2k−2m)! G_{1,k+1}…G_{2m−k,2m}
/// E[ν_{2m−k+1}…ν_k]`. It equals [`MomentSpec::moment`] only after
/// symmetrization over the `ν` labels.
pub fn partial_wick_rhs<T: Real>(spec: &MomentSpec<T>) -> Cx<T> {
    let (n, k) = (spec.len(), spec.k);
    let m = n / 2;
    if k < m {
        return re(T::zero());
    }
    let p = 2 * m - k;
    let prefactor = T::lit(factorial(k) / factorial(2 * k - 2 * m));
    let g = (0..p).fold(T::one(), |acc, j| acc * spec.g[(j, k + j)]);
    let residual = hafnian(k - p, &|a, b| re(spec.nn[(p + a, p + b)]));
    i_pow::<T>(p) * re(prefactor * g) * residual
}

/// Interaction-picture couplings, quadrature weights and kernel tables on
/// the nodes of a small grid. Tables are indexed `channel · n_nodes + node`.
#[derive(Debug, Clone)]
pub struct GridKernels<T: Real> {
    /// `ops[node][channel]`.
    pub ops: Vec<Vec<CMat<T>>>,
    pub weights: Vec<T>,
    /// `E[ν ν] = Re c`.
    pub keldysh: DMatrix<T>,
    /// `G = θ Im c`.
    pub retarded: DMatrix<T>,
}

impl<T: Real> GridKernels<T> {
    /// Trapezoid weights on the nodes of `grid`.
    pub fn new(grid: &TimeGrid<T>, system: &SystemSpec<T>, bath: &BathSpec<T>) -> Result<Self> {
        if system.n_channels() != bath.n_channels() {
            return Err(Error::Shape(format!(
                "system has {} channels, bath {}",
                system.n_channels(),
                bath.n_channels()
            )));
        }
        let nodes = grid.nodes();
        let cache = InteractionCache::new(system, &nodes)?;
        let ops = (0..nodes.len()).map(|j| cache.ops(j).to_vec()).collect();
        let n = nodes.len();
        let weights = (0..n)
            .map(|j| {
                if n == 1 {
                    T::zero()
                } else if j == 0 || j == n - 1 {
                    grid.dt() * T::lit(0.5)
                } else {
                    grid.dt()
                }
            })
            .collect();
        let (keldysh, retarded) = bath.kernel_tables(grid);
        Ok(Self { ops, weights, keldysh, retarded })
    }

    fn n_nodes(&self) -> usize {
        self.weights.len()
    }

    fn n_slots(&self) -> usize {
        self.ops.first().map_or(0, Vec::len) * self.n_nodes()
    }

    fn validate(&self) -> Result<()> {
        let s = self.n_slots();
        if self.ops.len() != self.n_nodes() || self.keldysh.shape() != (s, s) || self.retarded.shape() != (s, s) {
            return Err(Error::Shape("grid kernels are inconsistent with the node and channel counts".into()));
        }
        Ok(())
    }
}

/// Term-by-term comparison of the Wick-evaluated series and the
/// substituted series at one `(m, k)`.
#[derive(Debug, Clone, Serialize)]
pub struct SubstitutionTerm {
    pub m: usize,
    pub k: usize,
    pub wick_norm: f64,
    pub substituted_norm: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubstitutionReport {
    pub m_max: usize,
    pub n_nodes: usize,
    pub n_channels: usize,
    pub terms: Vec<SubstitutionTerm>,
    /// Residual of the summed order-`m` contributions.
    pub order_residuals: Vec<f64>,
    pub max_residual: f64,
    pub tolerance: f64,
}

impl SubstitutionReport {
    pub fn passed(&self) -> bool {
        self.max_residual <= self.tolerance
    }

    /// Fails with the worst `(m, k)` term if any residual exceeds the tolerance.
    pub fn check(&self) -> Result<()> {
        match self.terms.iter().filter(|t| t.residual > self.tolerance).max_by(|a, b| a.residual.total_cmp(&b.residual)) {
            None => Ok(()),
            Some(t) => Err(Error::Numerical(format!(
                "substitution identity violated at (m, k) = ({}, {}): residual {:.3e}",
                t.m, t.k, t.residual
            ))),
        }
    }
}

/// Compares `E[R(t)]` expanded with full Wick moments against `E[R′(t)]`
/// with the partial substitution, order by order, on at most four nodes.
pub fn verify_substitution_on_grid<T: Real>(
    grid: &TimeGrid<T>,
    system: &SystemSpec<T>,
    bath: &BathSpec<T>,
    rho0: &CMat<T>,
    m_max: usize,
) -> Result<SubstitutionReport> {
    if grid.n_nodes() > 4 {
        return Err(Error::Precondition(format!("grid has {} nodes; exhaustive checks allow at most 4", grid.n_nodes())));
    }
    verify_substitution(&GridKernels::new(grid, system, bath)?, rho0, m_max)
}

/// [`verify_substitution_on_grid`] on explicit kernels.
pub fn verify_substitution<T: Real>(kernels: &GridKernels<T>, rho0: &CMat<T>, m_max: usize) -> Result<SubstitutionReport> {
    kernels.validate()?;
    if m_max > MAX_SERIES_ORDER {
        return Err(Error::Precondition(format!("series order {m_max} above the cap {MAX_SERIES_ORDER}")));
    }
    let dim = rho0.nrows();
    if kernels.ops.iter().flatten().any(|a| a.shape() != (dim, dim)) {
        return Err(Error::Shape("coupling operators and R(0) differ in dimension".into()));
    }
    let mut terms = Vec::new();
    let mut order_residuals = Vec::new();
    for m in 0..=m_max {
        let sums = order_sums(kernels, rho0, m);
        let mut total_r = CMat::zeros(dim, dim);
        let mut total_p = CMat::zeros(dim, dim);
        for (k, (r, p)) in sums.iter().enumerate() {
            terms.push(SubstitutionTerm {
                m,
                k,
                wick_norm: max_abs(r).as_f64(),
                substituted_norm: max_abs(p).as_f64(),
                residual: max_abs_diff(r, p).as_f64(),
            });
            total_r += r;
            total_p += p;
        }
        order_residuals.push(max_abs_diff(&total_r, &total_p).as_f64());
    }
    let max_residual = terms.iter().map(|t| t.residual).fold(0.0, f64::max);
    let n_nodes = kernels.n_nodes();
    Ok(SubstitutionReport {
        m_max,
        n_nodes,
        n_channels: kernels.n_slots() / n_nodes.max(1),
        terms,
        order_residuals,
        max_residual,
        tolerance: tol::WICK_IDENTITY,
    })
}

// Per k, the order-2m contributions of both series summed over all slot
// assignments. Parallel over the first slot, merged in slot order.
fn order_sums<T: Real>(kernels: &GridKernels<T>, rho0: &CMat<T>, m: usize) -> Vec<(CMat<T>, CMat<T>)> {
    let n = 2 * m;
    let dim = rho0.nrows();
    let slots = kernels.n_slots();
    let empty = || vec![(CMat::zeros(dim, dim), CMat::zeros(dim, dim)); n + 1];
    if n == 0 {
        let mut out = empty();
        out[0] = (rho0.clone(), rho0.clone());
        return out;
    }
    let partial: Vec<Vec<(CMat<T>, CMat<T>)>> = (0..slots)
        .into_par_iter()
        .map(|first| {
            let mut acc = empty();
            let mut assign = vec![0usize; n];
            assign[0] = first;
            let rest = slots.pow((n - 1) as u32);
            for code in 0..rest {
                let mut c = code;
                for slot in assign.iter_mut().skip(1) {
                    *slot = c % slots;
                    c /= slots;
                }
                accumulate_assignment(kernels, rho0, m, &assign, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = empty();
    for part in partial {
        for (t, p) in total.iter_mut().zip(part) {
            t.0 += p.0;
            t.1 += p.1;
        }
    }
    total
}

fn accumulate_assignment<T: Real>(
    kernels: &GridKernels<T>,
    rho0: &CMat<T>,
    m: usize,
    assign: &[usize],
    acc: &mut [(CMat<T>, CMat<T>)],
) {
    let n = assign.len();
    let nodes = kernels.n_nodes();
    let weight = assign.iter().fold(T::one(), |w, &s| w * kernels.weights[s % nodes]);
    if weight == T::zero() {
        return;
    }
    let nn = |a: usize, b: usize| kernels.keldysh[(assign[a], assign[b])];
    let g = |a: usize, b: usize| kernels.retarded[(assign[a], assign[b])];
    for (k, slot) in acc.iter_mut().enumerate() {
        let full = hafnian(n, &|a, b| match (a < k, b < k) {
            (true, true) => re(nn(a, b)),
            (true, false) => cx(T::zero(), g(a, b)),
            (false, true) => cx(T::zero(), g(b, a)),
            (false, false) => re(T::zero()),
        });
        let c_full = minus_i_pow::<T>(n) * re(T::lit(binomial(n, k) / factorial(n))) * full;
        let c_sub = if k >= m {
            let p = 2 * m - k;
            let gs = (0..p).fold(T::one(), |acc, j| acc * g(j, k + j));
            let residual = hafnian(k - p, &|a, b| re(nn(p + a, p + b)));
            minus_i_pow::<T>(k) * re(T::lit(binomial(k, p) / factorial(k)) * gs) * residual
        } else {
            re(T::zero())
        };
        if c_full == re(T::zero()) && c_sub == re(T::zero()) {
            continue;
        }
        let op = ordered_product(kernels, rho0, assign, k);
        slot.0 += &op * (c_full * re(weight));
        slot.1 += &op * (c_sub * re(weight));
    }
}

// T{C…C 𝒜…𝒜} R(0): the first k slots carry commutators, the rest
// anticommutators; earlier nodes act first. Ties are broken by a key that
// depends only on the multiset of factors, so the product is symmetric.
fn ordered_product<T: Real>(kernels: &GridKernels<T>, rho0: &CMat<T>, assign: &[usize], k: usize) -> CMat<T> {
    let nodes = kernels.n_nodes();
    let mut factors: Vec<(usize, bool, usize)> =
        assign.iter().enumerate().map(|(i, &s)| (s % nodes, i >= k, s / nodes)).collect();
    factors.sort_unstable();
    let mut x = rho0.clone();
    for (node, anti, ch) in factors {
        let a = &kernels.ops[node][ch];
        x = if anti { a * &x + &x * a } else { a * &x - &x * a };
    }
    x
}

/// `Im c_αβ(τ, s) = Σ_r u_αr(τ) v_βr(s)` with two labels per mode.
fn separable_imag<T: Real>(bath: &BathSpec<T>, tau: T) -> (DMatrix<T>, DMatrix<T>) {
    let (c, r) = (bath.n_channels(), 2 * bath.n_modes());
    let mut u = DMatrix::zeros(c, r);
    let mut v = DMatrix::zeros(c, r);
    for (k, mode) in bath.modes().iter().enumerate() {
        let (s, co) = (mode.omega * tau).sin_cos();
        let scale = T::one() / (T::lit(2.0) * mode.m_omega());
        for a in 0..c {
            let g = bath.coupling()[(a, k)];
            u[(a, 2 * k)] = -g * s * scale;
            v[(a, 2 * k)] = g * co;
            u[(a, 2 * k + 1)] = g * co * scale;
            v[(a, 2 * k + 1)] = g * s;
        }
    }
    (u, v)
}

// Graded hierarchy state `Φ_n^{(o)}`: order o and open-pair counts n per label.
#[derive(Debug, Clone)]
struct HierarchyState {
    order: usize,
    free_src: Option<usize>,
    close_src: Vec<(usize, usize)>,
    open_src: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
struct Hierarchy {
    states: Vec<HierarchyState>,
    /// `roots[m]` indexes `Φ_0^{(2m)}`.
    roots: Vec<usize>,
}

impl Hierarchy {
    fn new(labels: usize, m_max: usize) -> Self {
        let top = 2 * m_max;
        let mut keys: Vec<(usize, Vec<usize>)> = Vec::new();
        for order in 0..=top {
            let cap = order.min(top - order);
            for counts in multisets(labels, cap) {
                keys.push((order, counts));
            }
        }
        let index: HashMap<(usize, Vec<usize>), usize> = keys.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
        let states = keys
            .iter()
            .map(|(order, counts)| {
                if *order == 0 {
                    return HierarchyState { order: 0, free_src: None, close_src: vec![], open_src: vec![] };
                }
                let below = order - 1;
                let free_src = index.get(&(below, counts.clone())).copied();
                let close_src = (0..labels)
                    .filter_map(|r| {
                        let mut up = counts.clone();
                        up[r] += 1;
                        index.get(&(below, up)).map(|&i| (r, i))
                    })
                    .collect();
                let open_src = (0..labels)
                    .filter(|&r| counts[r] > 0)
                    .filter_map(|r| {
                        let mut down = counts.clone();
                        down[r] -= 1;
                        index.get(&(below, down)).map(|&i| (r, counts[r], i))
                    })
                    .collect();
                HierarchyState { order: *order, free_src, close_src, open_src }
            })
            .collect();
        let roots = (0..=m_max).map(|m| index[&(2 * m, vec![0; labels])]).collect();
        Self { states, roots }
    }
}

// All count vectors over `labels` with total at most `cap`.
fn multisets(labels: usize, cap: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, labels: usize, left: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == labels {
            out.push(prefix.clone());
            return;
        }
        for c in 0..=left {
            prefix.push(c);
            extend(prefix, labels, left - c, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::with_capacity(labels), labels, cap, &mut out);
    out
}

/// Truncated `R′` on every grid node together with its order-by-order terms.
#[derive(Debug, Clone)]
pub struct RPrimeSeries<T: Real> {
    /// `Σ_{m ≤ m_max}` of the order-`2m` terms.
    pub values: Vec<CMat<T>>,
    /// `terms[node][m]`.
    pub terms: Vec<Vec<CMat<T>>>,
    /// Last node at which the top-order term is no larger than the one below.
    pub window_end: usize,
}

/// Precomputed couplings and kernels for evaluating `R′` along sampled
/// `ν` trajectories on one grid.
#[derive(Debug, Clone)]
pub struct RPrimeContext<T: Real> {
    grid: TimeGrid<T>,
    cache: InteractionCache<T>,
    u: Vec<DMatrix<T>>,
    v: Vec<DMatrix<T>>,
    hierarchy: Hierarchy,
    m_max: usize,
}

impl<T: Real> RPrimeContext<T> {
    pub fn new(system: &SystemSpec<T>, bath: &BathSpec<T>, grid: &TimeGrid<T>, m_max: usize) -> Result<Self> {
        if m_max > MAX_SERIES_ORDER {
            return Err(Error::Precondition(format!("series order {m_max} above the cap {MAX_SERIES_ORDER}")));
        }
        if system.n_channels() != bath.n_channels() {
            return Err(Error::Shape(format!(
                "system has {} channels, bath {}",
                system.n_channels(),
                bath.n_channels()
            )));
        }
        if !bath.is_stable() {
            return Err(Error::Precondition("R′ expansion needs a bath with vanishing mean field".into()));
        }
        let cache = InteractionCache::half_steps(system, grid)?;
        let (u, v) = (0..cache.len()).map(|h| separable_imag(bath, cache.time(h))).unzip();
        Ok(Self { grid: *grid, cache, u, v, hierarchy: Hierarchy::new(2 * bath.n_modes(), m_max), m_max })
    }

    pub fn m_max(&self) -> usize {
        self.m_max
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    fn rhs(&self, phi: &[CMat<T>], half: usize, nu: &[T]) -> Vec<CMat<T>> {
        let ops = self.cache.ops(half);
        let (u, v) = (&self.u[half], &self.v[half]);
        let dim = phi[0].nrows();
        let minus_i = cx(T::zero(), -T::one());
        self.hierarchy
            .states
            .iter()
            .map(|s| {
                let mut out = CMat::zeros(dim, dim);
                if s.order == 0 {
                    return out;
                }
                for (a, op) in ops.iter().enumerate() {
                    let mut x = CMat::zeros(dim, dim);
                    if let Some(i) = s.free_src {
                        x += &phi[i] * re(nu[a]);
                    }
                    for &(r, i) in &s.close_src {
                        x += &phi[i] * re(u[(a, r)]);
                    }
                    let mut y = CMat::zeros(dim, dim);
                    for &(r, count, i) in &s.open_src {
                        y += &phi[i] * re(T::from_usize_lossy(count) * v[(a, r)]);
                    }
                    out += (op * &x - &x * op) * minus_i + op * &y + &y * op;
                }
                out
            })
            .collect()
    }

    /// `R′` along one real trajectory `nu[channel][node]`, by RK4 on the
    /// graded auxiliary hierarchy with `ν` interpolated linearly.
    pub fn evaluate(&self, r0: &CMat<T>, nu: &[Vec<T>]) -> Result<RPrimeSeries<T>> {
        let n_nodes = self.grid.n_nodes();
        if nu.len() != self.cache.ops(0).len() || nu.iter().any(|c| c.len() != n_nodes) {
            return Err(Error::Shape("ν trajectory does not match the channels and grid".into()));
        }
        let dim = self.cache.ops(0).first().map_or(r0.nrows(), |a| a.nrows());
        if r0.shape() != (dim, dim) {
            return Err(Error::Shape(format!("R(0) of shape {:?} for a {dim}-level system", r0.shape())));
        }
        let count = self.hierarchy.states.len();
        let mut phi = vec![CMat::zeros(dim, dim); count];
        phi[0] = r0.clone();
        let mut terms = vec![self.root_terms(&phi)];
        let dt = self.grid.dt();
        let half_dt = dt * T::lit(0.5);
        let axpy = |base: &[CMat<T>], k: &[CMat<T>], h: T| -> Vec<CMat<T>> {
            base.iter().zip(k).map(|(b, d)| b + d * re(h)).collect()
        };
        for j in 0..self.grid.n_steps() {
            let nu0: Vec<T> = nu.iter().map(|c| c[j]).collect();
            let nu1: Vec<T> = nu.iter().map(|c| c[j + 1]).collect();
            let nu_mid: Vec<T> = nu0.iter().zip(&nu1).map(|(a, b)| (*a + *b) * T::lit(0.5)).collect();
            let k1 = self.rhs(&phi, 2 * j, &nu0);
            let k2 = self.rhs(&axpy(&phi, &k1, half_dt), 2 * j + 1, &nu_mid);
            let k3 = self.rhs(&axpy(&phi, &k2, half_dt), 2 * j + 1, &nu_mid);
            let k4 = self.rhs(&axpy(&phi, &k3, dt), 2 * j + 2, &nu1);
            let sixth = dt / T::lit(6.0);
            for i in 0..count {
                phi[i] += (&k1[i] + (&k2[i] + &k3[i]) * re(T::lit(2.0)) + &k4[i]) * re(sixth);
            }
            terms.push(self.root_terms(&phi));
        }
        let values = terms
            .iter()
            .map(|t| t.iter().fold(CMat::zeros(dim, dim), |acc, x| acc + x))
            .collect();
        let window_end = series_window(&terms, self.m_max);
        Ok(RPrimeSeries { values, terms, window_end })
    }

    fn root_terms(&self, phi: &[CMat<T>]) -> Vec<CMat<T>> {
        self.hierarchy.roots.iter().map(|&i| phi[i].clone()).collect()
    }
}

// Last node before the top-order term first outgrows the next-lower one.
fn series_window<T: Real>(terms: &[Vec<CMat<T>>], m_max: usize) -> usize {
    let last = terms.len().saturating_sub(1);
    if m_max == 0 {
        return last;
    }
    match terms.iter().position(|t| max_abs(&t[m_max]) > max_abs(&t[m_max - 1])) {
        Some(0) | None => last,
        Some(j) => {
            log::debug!("R′ series diverges after node {}; monitored window shrunk", j - 1);
            j - 1
        }
    }
}

/// Evaluates the truncated series for one `ν` trajectory.
pub fn truncated_rprime_trajectory<T: Real>(
    system: &SystemSpec<T>,
    bath: &BathSpec<T>,
    grid: &TimeGrid<T>,
    nu: &[Vec<T>],
    r0: &CMat<T>,
    m_max: usize,
) -> Result<RPrimeSeries<T>> {
    RPrimeContext::new(system, bath, grid, m_max)?.evaluate(r0, nu)
}

/// Ensemble statistics of `R′` over sampled `ν`.
#[derive(Debug, Clone)]
pub struct RPrimeEnsemble<T: Real> {
    pub times: Vec<T>,
    pub mean: Vec<CMat<T>>,
    pub se_re: Vec<DMatrix<T>>,
    pub se_im: Vec<DMatrix<T>>,
    /// `max |E[top-order term]|` per node, an empirical truncation estimate.
    pub truncation: Vec<T>,
    pub window_end: usize,
    pub n_traj: u64,
}

pub fn rprime_ensemble<T: Real>(
    system: &SystemSpec<T>,
    bath: &BathSpec<T>,
    grid: &TimeGrid<T>,
    r0: &CMat<T>,
    m_max: usize,
    n_traj: u64,
    base_seed: u64,
) -> Result<RPrimeEnsemble<T>> {
    let ctx = RPrimeContext::new(system, bath, grid, m_max)?;
    let factor = KeldyshFactor::new(bath, grid, T::lit(tol::EIGEN_CLIP))?;
    let n = grid.n_nodes();
    let below = m_max.saturating_sub(1);
    let acc = reduce_trajectories(n_traj, 3 * n, r0.nrows(), |i| {
        let s = ctx.evaluate(r0, &factor.sample(base_seed, i))?;
        let mut series = s.values;
        series.extend(s.terms.iter().map(|t| t[m_max].clone()));
        series.extend(s.terms.iter().map(|t| t[below].clone()));
        Ok(Some(series))
    })?;
    let (mut mean, mut se_re, mut se_im) = acc.finish()?;
    let lower = mean.split_off(2 * n);
    let top = mean.split_off(n);
    se_re.truncate(n);
    se_im.truncate(n);
    let truncation = top.iter().map(max_abs).collect();
    let window_end = if m_max == 0 {
        n - 1
    } else {
        top.iter().zip(&lower).position(|(t, l)| max_abs(t) > max_abs(l)).map_or(n - 1, |j| j.saturating_sub(1))
    };
    if window_end < n - 1 {
        log::warn!("mean R′ series diverges after t = {}; trust it only up to there", grid.node(window_end));
    }
    Ok(RPrimeEnsemble { times: grid.nodes(), mean, se_re, se_im, truncation, window_end, n_traj: acc.count() })
}
