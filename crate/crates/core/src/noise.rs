//! Sampling of the contour noise and its Keldysh-rotated components.
//!
//! Two constructions are provided. `ContourTakagi` factors the complex
//! symmetric contour covariance `Σ = B Bᵀ` and draws `ξ = B w` with real
//! standard normal `w`. `RotatedFactorization` draws real `ν = A x` from the
//! Keldysh kernel and `η = G(i x + y)` from the retarded kernel; it needs the
//! retarded kernel to lie in the range of the Keldysh kernel and otherwise
//! reports [`Error::DegenerateKernel`].

use std::io::{self, Write};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::bath::BathSpec;
use crate::contour::{build_contour_covariance, keldysh_rotate, TimeGrid};
use crate::error::{Error, Result};
use crate::linalg::{eigh_real, max_abs, CMat};
use crate::scalar::{cx, re, Cx, Real};
use crate::tol;

/// Per-trajectory random stream: identical `(base_seed, index)` always
/// yields the same sequence, independent of scheduling.
pub fn trajectory_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index);
    rng
}

fn standard_normals<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::lit(x)
        })
        .collect()
}

/// Takagi factor `B` of a complex symmetric `Σ` with `B Bᵀ ≈ Σ`.
#[derive(Debug, Clone)]
pub struct TakagiFactor<T: Real> {
    pub b: CMat<T>,
    /// Takagi values kept, descending.
    pub values: Vec<T>,
    /// Sum of the discarded Takagi values.
    pub clipped_mass: T,
}

/// Takagi factorization via the real symmetric embedding
/// `M = [[X, Y], [Y, -X]]` of `Σ = X + iY`.
///
/// Eigenvalues of `M` come in pairs `±s`; an eigenvector `[a; b]` with
/// `s > 0` gives `u = a + ib` with `Σ ū = s u`, and the `u` are orthonormal.
/// Values at or below `clip · max s` are dropped.
pub fn takagi_factor<T: Real>(sigma: &CMat<T>, clip: T) -> Result<TakagiFactor<T>> {
    if !sigma.is_square() {
        return Err(Error::Shape(format!("Takagi factorization of {:?} matrix", sigma.shape())));
    }
    if !(clip >= T::zero()) {
        return Err(Error::Validation(format!("clip {clip} must be non-negative")));
    }
    let n = sigma.nrows();
    let asym = sigma
        .iter()
        .zip(sigma.transpose().iter())
        .map(|(a, b)| (a - b).re.abs().max((a - b).im.abs()))
        .fold(T::zero(), |m, x| m.max(x));
    if asym > T::lit(tol::SYMMETRY) {
        return Err(Error::Validation(format!("matrix is not complex symmetric (defect {asym})")));
    }
    let mut m = DMatrix::<T>::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let z = (sigma[(i, j)] + sigma[(j, i)]) * T::lit(0.5);
            m[(i, j)] = z.re;
            m[(i, j + n)] = z.im;
            m[(i + n, j)] = z.im;
            m[(i + n, j + n)] = -z.re;
        }
    }
    let (vals, vecs) = eigh_real(&m)?;
    let top = vals.last().copied().unwrap_or(T::zero()).max(T::zero());
    let threshold = clip * top;
    let mut values = Vec::new();
    let mut clipped_mass = T::zero();
    let mut columns = Vec::new();
    // Positive half of the spectrum, descending.
    for idx in (n..2 * n).rev() {
        let s = vals[idx];
        if s > threshold && s > T::zero() {
            values.push(s);
            columns.push(idx);
        } else if s > T::zero() {
            clipped_mass += s;
        }
    }
    let b = CMat::from_fn(n, columns.len(), |r, c| {
        let idx = columns[c];
        cx(vecs[(r, idx)], vecs[(r + n, idx)]) * values[c].sqrt()
    });
    Ok(TakagiFactor { b, values, clipped_mass })
}

/// One noise realization on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrajectory<T: Real> {
    /// `nu[channel][node]`.
    pub nu: Vec<Vec<Cx<T>>>,
    /// `eta[channel][node]`.
    pub eta: Vec<Vec<Cx<T>>>,
    pub grid: TimeGrid<T>,
    pub trajectory_index: u64,
}

impl<T: Real> NoiseTrajectory<T> {
    pub fn n_channels(&self) -> usize {
        self.nu.len()
    }

    pub fn all_finite(&self) -> bool {
        self.nu
            .iter()
            .chain(&self.eta)
            .flatten()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `ξ⁻ = ν + η` and `ξ⁺ = ν − η` for one channel.
    pub fn xi(&self, channel: usize) -> (Vec<Cx<T>>, Vec<Cx<T>>) {
        self.nu[channel]
            .iter()
            .zip(&self.eta[channel])
            .map(|(&n, &e)| (n + e, n - e))
            .unzip()
    }

    /// Flattened `[ν(ch, node)..., η(ch, node)...]`.
    pub fn flatten(&self) -> Vec<Cx<T>> {
        self.nu.iter().flatten().chain(self.eta.iter().flatten()).copied().collect()
    }
}

/// Draws `ξ = B w` and rotates. `n_channels · n_nodes` rows per branch.
pub fn sample_contour_noise<T: Real>(
    factor: &CMat<T>,
    grid: &TimeGrid<T>,
    n_channels: usize,
    rng: &mut ChaCha8Rng,
    trajectory_index: u64,
) -> Result<NoiseTrajectory<T>> {
    let n = grid.n_nodes();
    if factor.nrows() != 2 * n_channels * n {
        return Err(Error::Shape(format!(
            "factor has {} rows, expected {}",
            factor.nrows(),
            2 * n_channels * n
        )));
    }
    let w = standard_normals::<T>(rng, factor.ncols());
    let mut xi = vec![re(T::zero()); factor.nrows()];
    for (c, &wc) in w.iter().enumerate() {
        for (r, x) in xi.iter_mut().enumerate() {
            *x += factor[(r, c)] * wc;
        }
    }
    let half = n_channels * n;
    let (nu, eta) = keldysh_rotate(&xi[..half], &xi[half..])?;
    Ok(NoiseTrajectory {
        nu: nu.chunks(n).map(<[_]>::to_vec).collect(),
        eta: eta.chunks(n).map(<[_]>::to_vec).collect(),
        grid: *grid,
        trajectory_index,
    })
}

/// Factors of the rotated construction: `ν = A x`, `η = G (i x + y)`.
#[derive(Debug, Clone)]
pub struct RotatedFactor<T: Real> {
    pub a: DMatrix<T>,
    pub g: DMatrix<T>,
    /// Sum of the magnitudes of discarded eigenvalues of the Keldysh kernel.
    pub clipped_mass: T,
    /// `‖P K − K‖ / ‖K‖` with `P` the projector onto the retained range.
    pub range_residual: T,
}

impl<T: Real> RotatedFactor<T> {
    pub fn new(bath: &BathSpec<T>, grid: &TimeGrid<T>, clip: T) -> Result<Self> {
        let (keldysh, retarded) = bath.kernel_tables(grid);
        Self::from_kernels(&keldysh, &retarded, clip)
    }

    pub fn from_kernels(keldysh: &DMatrix<T>, retarded: &DMatrix<T>, clip: T) -> Result<Self> {
        if keldysh.shape() != retarded.shape() || !keldysh.is_square() {
            return Err(Error::Shape(format!(
                "kernels of shape {:?} and {:?}",
                keldysh.shape(),
                retarded.shape()
            )));
        }
        let n = keldysh.nrows();
        let (vals, vecs) = eigh_real(keldysh)?;
        let top = vals.last().copied().unwrap_or(T::zero()).max(T::zero());
        let keep: Vec<usize> = (0..n).rev().filter(|&i| vals[i] > clip * top && vals[i] > T::zero()).collect();
        let clipped_mass = (0..n)
            .filter(|i| !keep.contains(i))
            .fold(T::zero(), |acc, i| acc + vals[i].abs());
        let v = DMatrix::from_fn(n, keep.len(), |r, c| vecs[(r, keep[c])]);
        let a = DMatrix::from_fn(n, keep.len(), |r, c| v[(r, c)] * vals[keep[c]].sqrt());
        let projected = &v * (v.transpose() * retarded);
        let k_norm = retarded.iter().fold(T::zero(), |m, x| m.max(x.abs()));
        let diff = (projected - retarded).iter().fold(T::zero(), |m, x| m.max(x.abs()));
        let range_residual = if k_norm > T::zero() { diff / k_norm } else { T::zero() };
        if range_residual > T::lit(tol::KERNEL_RANGE) {
            return Err(Error::DegenerateKernel { residual: range_residual.as_f64() });
        }
        let inv_sqrt = DMatrix::from_fn(keep.len(), keep.len(), |r, c| {
            if r == c {
                T::one() / vals[keep[r]].sqrt()
            } else {
                T::zero()
            }
        });
        let g = retarded.transpose() * v * inv_sqrt;
        Ok(Self { a, g, clipped_mass, range_residual })
    }

    pub fn sample(
        &self,
        grid: &TimeGrid<T>,
        n_channels: usize,
        rng: &mut ChaCha8Rng,
        trajectory_index: u64,
    ) -> NoiseTrajectory<T> {
        let r = self.a.ncols();
        let x = standard_normals::<T>(rng, r);
        let y = standard_normals::<T>(rng, r);
        let n = grid.n_nodes();
        let rows = self.a.nrows();
        let mut nu = vec![re(T::zero()); rows];
        let mut eta = vec![re(T::zero()); rows];
        for c in 0..r {
            let z = cx(y[c], x[c]);
            for i in 0..rows {
                nu[i] += re(self.a[(i, c)] * x[c]);
                eta[i] += z * self.g[(i, c)];
            }
        }
        debug_assert_eq!(rows, n_channels * n);
        NoiseTrajectory {
            nu: nu.chunks(n).map(<[_]>::to_vec).collect(),
            eta: eta.chunks(n).map(<[_]>::to_vec).collect(),
            grid: *grid,
            trajectory_index,
        }
    }
}

/// Real factor of the symmetrized kernel alone: samples `ν` with
/// `E[ν νᵀ] = Re c` and no companion `η`.
#[derive(Debug, Clone)]
pub struct KeldyshFactor<T: Real> {
    pub a: DMatrix<T>,
    pub clipped_mass: T,
    grid: TimeGrid<T>,
    n_channels: usize,
}

impl<T: Real> KeldyshFactor<T> {
    pub fn new(bath: &BathSpec<T>, grid: &TimeGrid<T>, clip: T) -> Result<Self> {
        let (keldysh, _) = bath.kernel_tables(grid);
        let n = keldysh.nrows();
        let (vals, vecs) = eigh_real(&keldysh)?;
        let top = vals.last().copied().unwrap_or(T::zero()).max(T::zero());
        let keep: Vec<usize> = (0..n).filter(|&i| vals[i] > clip * top && vals[i] > T::zero()).collect();
        let clipped_mass = (0..n).filter(|i| !keep.contains(i)).fold(T::zero(), |acc, i| acc + vals[i].abs());
        let a = DMatrix::from_fn(n, keep.len(), |r, c| vecs[(r, keep[c])] * vals[keep[c]].sqrt());
        Ok(Self { a, clipped_mass, grid: *grid, n_channels: bath.n_channels() })
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    /// `ν[channel][node]` for trajectory `index`.
    pub fn sample(&self, base_seed: u64, index: u64) -> Vec<Vec<T>> {
        let mut rng = trajectory_rng(base_seed, index);
        let x = standard_normals::<T>(&mut rng, self.a.ncols());
        let flat = &self.a * nalgebra::DVector::from_vec(x);
        let n = self.grid.n_nodes();
        (0..self.n_channels).map(|ch| flat.as_slice()[ch * n..(ch + 1) * n].to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMethod {
    ContourTakagi,
    RotatedFactorization,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig<T: Real> {
    pub method: SamplingMethod,
    /// Relative eigenvalue clip.
    pub eigen_clip: T,
    pub base_seed: u64,
}

impl<T: Real> SamplerConfig<T> {
    pub fn new(method: SamplingMethod, base_seed: u64) -> Self {
        Self { method, eigen_clip: T::lit(tol::EIGEN_CLIP), base_seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerDiagnostics {
    pub requested: SamplingMethod,
    pub used: SamplingMethod,
    /// Set when the rotated construction was rejected; holds the residual.
    pub fallback_residual: Option<f64>,
    pub rank: usize,
    pub clipped_mass: f64,
    /// `max |B Bᵀ − Σ|` for the Takagi factor.
    pub reconstruction_error: Option<f64>,
}

#[derive(Debug, Clone)]
enum Factor<T: Real> {
    Takagi(CMat<T>),
    Rotated(RotatedFactor<T>),
}

/// Precomputed factorization for one bath and grid; sampling is read-only
/// and can be shared between threads.
#[derive(Debug, Clone)]
pub struct NoiseSampler<T: Real> {
    factor: Factor<T>,
    grid: TimeGrid<T>,
    n_channels: usize,
    base_seed: u64,
    diagnostics: SamplerDiagnostics,
}

impl<T: Real> NoiseSampler<T> {
    pub fn new(bath: &BathSpec<T>, grid: &TimeGrid<T>, config: &SamplerConfig<T>) -> Result<Self> {
        if !(config.eigen_clip >= T::zero()) {
            return Err(Error::Validation(format!("eigen_clip {} must be non-negative", config.eigen_clip)));
        }
        let n_channels = bath.n_channels();
        let mut fallback_residual = None;
        if config.method == SamplingMethod::RotatedFactorization {
            match RotatedFactor::new(bath, grid, config.eigen_clip) {
                Ok(f) => {
                    let diagnostics = SamplerDiagnostics {
                        requested: config.method,
                        used: SamplingMethod::RotatedFactorization,
                        fallback_residual: None,
                        rank: f.a.ncols(),
                        clipped_mass: f.clipped_mass.as_f64(),
                        reconstruction_error: None,
                    };
                    return Ok(Self {
                        factor: Factor::Rotated(f),
                        grid: *grid,
                        n_channels,
                        base_seed: config.base_seed,
                        diagnostics,
                    });
                }
                Err(Error::DegenerateKernel { residual }) => {
                    log::warn!("rotated noise factorization rejected (residual {residual:.3e}); using contour Takagi");
                    fallback_residual = Some(residual);
                }
                Err(e) => return Err(e),
            }
        }
        let channels: Vec<usize> = (0..n_channels).collect();
        let sigma = build_contour_covariance(bath, grid, &channels)?.into_matrix();
        let tf = takagi_factor(&sigma, config.eigen_clip)?;
        let recon = max_abs(&(&tf.b * tf.b.transpose() - &sigma));
        let diagnostics = SamplerDiagnostics {
            requested: config.method,
            used: SamplingMethod::ContourTakagi,
            fallback_residual,
            rank: tf.b.ncols(),
            clipped_mass: tf.clipped_mass.as_f64(),
            reconstruction_error: Some(recon.as_f64()),
        };
        Ok(Self { factor: Factor::Takagi(tf.b), grid: *grid, n_channels, base_seed: config.base_seed, diagnostics })
    }

    pub fn diagnostics(&self) -> &SamplerDiagnostics {
        &self.diagnostics
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    /// Trajectory `index` of the stream.
    pub fn sample(&self, index: u64) -> NoiseTrajectory<T> {
        let mut rng = trajectory_rng(self.base_seed, index);
        match &self.factor {
            Factor::Takagi(b) => sample_contour_noise(b, &self.grid, self.n_channels, &mut rng, index)
                .expect("factor shape fixed at construction"),
            Factor::Rotated(f) => f.sample(&self.grid, self.n_channels, &mut rng, index),
        }
    }
}

/// Streaming accumulator of `E[z]` and `E[z zᵀ]` (no conjugation) for
/// flattened noise vectors. Sums are kept in `f64`; only the upper triangle
/// of the second moment is stored.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    dim: usize,
    count: u64,
    sum: Vec<[f64; 2]>,
    sum_sq: Vec<[f64; 2]>,
    // Upper triangle, row-major: products, squared real parts, squared imaginary parts.
    prod: Vec<[f64; 2]>,
    prod_sq: Vec<[f64; 2]>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        let tri = dim * (dim + 1) / 2;
        Self {
            dim,
            count: 0,
            sum: vec![[0.0; 2]; dim],
            sum_sq: vec![[0.0; 2]; dim],
            prod: vec![[0.0; 2]; tri],
            prod_sq: vec![[0.0; 2]; tri],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push<T: Real>(&mut self, z: &[Cx<T>]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::Shape(format!("sample of length {} for dimension {}", z.len(), self.dim)));
        }
        let v: Vec<[f64; 2]> = z.iter().map(|c| [c.re.as_f64(), c.im.as_f64()]).collect();
        for (i, a) in v.iter().enumerate() {
            self.sum[i][0] += a[0];
            self.sum[i][1] += a[1];
            self.sum_sq[i][0] += a[0] * a[0];
            self.sum_sq[i][1] += a[1] * a[1];
        }
        let mut t = 0;
        for (i, a) in v.iter().enumerate() {
            for b in &v[i..] {
                let pr = a[0] * b[0] - a[1] * b[1];
                let pi = a[0] * b[1] + a[1] * b[0];
                let p = &mut self.prod[t];
                p[0] += pr;
                p[1] += pi;
                let q = &mut self.prod_sq[t];
                q[0] += pr * pr;
                q[1] += pi * pi;
                t += 1;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Adds the sums of `other`; merging in a fixed order keeps results
    /// independent of how samples were distributed over threads.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Shape(format!("merging dimension {} into {}", other.dim, self.dim)));
        }
        let add = |a: &mut [[f64; 2]], b: &[[f64; 2]]| {
            for (x, y) in a.iter_mut().zip(b) {
                x[0] += y[0];
                x[1] += y[1];
            }
        };
        add(&mut self.sum, &other.sum);
        add(&mut self.sum_sq, &other.sum_sq);
        add(&mut self.prod, &other.prod);
        add(&mut self.prod_sq, &other.prod_sq);
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<EmpiricalCovariance> {
        if self.count < 2 {
            return Err(Error::Precondition(format!("{} samples; need at least 2", self.count)));
        }
        let n = self.count as f64;
        let se = |s: f64, s2: f64| {
            let var = ((s2 - s * s / n) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        };
        let d = self.dim;
        let mean = self.sum.iter().map(|s| cx(s[0] / n, s[1] / n)).collect();
        let mean_se = self
            .sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| [se(s[0], q[0]), se(s[1], q[1])])
            .collect();
        let mut second = DMatrix::zeros(d, d);
        let mut se_re = DMatrix::zeros(d, d);
        let mut se_im = DMatrix::zeros(d, d);
        let mut t = 0;
        for i in 0..d {
            for j in i..d {
                let p = self.prod[t];
                let q = self.prod_sq[t];
                let v = cx(p[0] / n, p[1] / n);
                let (er, ei) = (se(p[0], q[0]), se(p[1], q[1]));
                second[(i, j)] = v;
                second[(j, i)] = v;
                se_re[(i, j)] = er;
                se_re[(j, i)] = er;
                se_im[(i, j)] = ei;
                se_im[(j, i)] = ei;
                t += 1;
            }
        }
        Ok(EmpiricalCovariance { count: self.count, mean, mean_se, second, se_re, se_im })
    }
}

/// Sample moments of flattened noise vectors with per-entry standard errors
/// (sample standard deviation over `√n`, real and imaginary parts apart).
#[derive(Debug, Clone)]
pub struct EmpiricalCovariance {
    pub count: u64,
    pub mean: Vec<Cx<f64>>,
    pub mean_se: Vec<[f64; 2]>,
    /// `E[z_i z_j]`.
    pub second: DMatrix<Cx<f64>>,
    pub se_re: DMatrix<f64>,
    pub se_im: DMatrix<f64>,
}

impl EmpiricalCovariance {
    /// Largest `|Δ|/SE` against `target`, over real and imaginary parts.
    /// Entries with zero SE count as exact when they match to `floor`.
    pub fn max_z_score(&self, target: &DMatrix<Cx<f64>>, floor: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..target.nrows() {
            for j in 0..target.ncols() {
                let d = self.second[(i, j)] - target[(i, j)];
                for (delta, se) in [(d.re.abs(), self.se_re[(i, j)]), (d.im.abs(), self.se_im[(i, j)])] {
                    if delta <= floor {
                        continue;
                    }
                    worst = worst.max(if se > 0.0 { delta / se } else { f64::INFINITY });
                }
            }
        }
        worst
    }
}

/// Moments of a list of trajectories, flattened as [`NoiseTrajectory::flatten`].
pub fn empirical_covariance<T: Real>(trajectories: &[NoiseTrajectory<T>]) -> Result<EmpiricalCovariance> {
    let dim = trajectories.first().map(|t| t.flatten().len()).unwrap_or(0);
    let mut acc = CovarianceAccumulator::new(dim);
    for t in trajectories {
        acc.push(&t.flatten())?;
    }
    acc.finish()
}

/// Trajectories per reduction block in [`sampled_covariance`].
pub const COVARIANCE_BLOCK: u64 = 1024;

/// Moments of trajectories `0..count` of `sampler`, computed in parallel over
/// fixed blocks merged in index order.
pub fn sampled_covariance<T: Real>(sampler: &NoiseSampler<T>, count: u64) -> Result<EmpiricalCovariance> {
    let dim = 2 * sampler.n_channels() * sampler.grid().n_nodes();
    let blocks: Vec<u64> = (0..count.div_ceil(COVARIANCE_BLOCK)).collect();
    let partial: Vec<Result<CovarianceAccumulator>> = blocks
        .par_iter()
        .map(|&b| {
            let mut acc = CovarianceAccumulator::new(dim);
            for i in b * COVARIANCE_BLOCK..((b + 1) * COVARIANCE_BLOCK).min(count) {
                acc.push(&sampler.sample(i).flatten())?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = CovarianceAccumulator::new(dim);
    for p in partial {
        total.merge(&p?)?;
    }
    total.finish()
}

/// Target moments `E[z zᵀ]` for `z = [ν; η]`: `E[νν] = Re c`,
/// `E[ν(τ₁)η(τ₂)] = i θ(τ₁−τ₂) Im c(τ₁,τ₂)`, `E[ηη] = 0`.
pub fn rotated_targets<T: Real>(bath: &BathSpec<T>, grid: &TimeGrid<T>) -> DMatrix<Cx<f64>> {
    let (keldysh, retarded) = bath.kernel_tables(grid);
    let m = keldysh.nrows();
    DMatrix::from_fn(2 * m, 2 * m, |i, j| match (i < m, j < m) {
        (true, true) => cx(keldysh[(i, j)].as_f64(), 0.0),
        (true, false) => cx(0.0, retarded[(i, j - m)].as_f64()),
        (false, true) => cx(0.0, retarded[(j, i - m)].as_f64()),
        (false, false) => cx(0.0, 0.0),
    })
}

/// Writes trajectories in a little-endian debugging layout:
/// magic `KNTR`, `u32` version 1, `u64` count, `u32` channels, `u32` nodes,
/// then per trajectory a `u64` index followed by `ν` and `η` as
/// `(re, im)` `f64` pairs in `[channel][node]` order.
pub fn write_binary_dump<T: Real, W: Write>(mut out: W, trajectories: &[NoiseTrajectory<T>]) -> io::Result<()> {
    let (channels, nodes) = trajectories
        .first()
        .map(|t| (t.nu.len(), t.grid.n_nodes()))
        .unwrap_or((0, 0));
    out.write_all(b"KNTR")?;
    out.write_all(&1u32.to_le_bytes())?;
    out.write_all(&(trajectories.len() as u64).to_le_bytes())?;
    out.write_all(&(channels as u32).to_le_bytes())?;
    out.write_all(&(nodes as u32).to_le_bytes())?;
    for t in trajectories {
        out.write_all(&t.trajectory_index.to_le_bytes())?;
        for z in t.nu.iter().chain(&t.eta).flatten() {
            out.write_all(&z.re.as_f64().to_le_bytes())?;
            out.write_all(&z.im.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}
