//! Time grid, Keldysh-contour bookkeeping and the contour covariance.
//!
//! Covariance layout: index of `(branch, channel, node)` is
//! `b·(C·N) + ch·N + node` with `b = 0` for the minus branch, `C` channels
//! and `N = n_steps + 1` nodes. This layout is stable; factorizations and
//! empirical covariance checks index into it.

use crate::bath::BathSpec;
use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::scalar::{Cx, Real};

/// Uniform grid `τ_j = j·dt`, `j = 0..=n_steps`, on `[0, t_max]`.
///
/// `n_steps = 0` is accepted and yields the single node `τ_0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T: Real> {
    t_max: T,
    n_steps: usize,
    dt: T,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(t_max: T, n_steps: usize) -> Result<Self> {
        if !(t_max > T::zero()) || !t_max.is_finite() {
            return Err(Error::Validation(format!("t_max = {t_max} must be positive and finite")));
        }
        let dt = t_max / T::from_usize_lossy(n_steps.max(1));
        Ok(Self { t_max, n_steps, dt })
    }

    pub fn t_max(&self) -> T {
        self.t_max
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn node(&self, j: usize) -> T {
        if j == self.n_steps && self.n_steps > 0 {
            self.t_max
        } else {
            self.dt * T::from_usize_lossy(j)
        }
    }

    pub fn nodes(&self) -> Vec<T> {
        (0..self.n_nodes()).map(|j| self.node(j)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Forward branch `τ_-`, acting from the left.
    Minus,
    /// Backward branch `τ_+`, acting from the right.
    Plus,
}

impl Branch {
    pub fn offset(self) -> usize {
        match self {
            Branch::Minus => 0,
            Branch::Plus => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContourPoint {
    pub branch: Branch,
    pub index: usize,
}

/// Index of `(branch, channel, node)` in the flattened contour layout.
pub fn layout_index(branch: Branch, channel: usize, node: usize, n_channels: usize, n_nodes: usize) -> usize {
    branch.offset() * n_channels * n_nodes + channel * n_nodes + node
}

/// Complex-symmetric covariance `E[ξ(z₁) ξ(z₂)] = C(z₁, z₂)` of the contour
/// noise over a subset of bath channels.
#[derive(Debug, Clone)]
pub struct ContourCovariance<T: Real> {
    matrix: CMat<T>,
    channels: Vec<usize>,
    n_nodes: usize,
}

impl<T: Real> ContourCovariance<T> {
    pub fn matrix(&self) -> &CMat<T> {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMat<T> {
        self.matrix
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Position of `(branch, k-th listed channel, node)`.
    pub fn index(&self, branch: Branch, channel_slot: usize, node: usize) -> usize {
        layout_index(branch, channel_slot, node, self.channels.len(), self.n_nodes)
    }

    pub fn entry(&self, a: (Branch, usize, usize), b: (Branch, usize, usize)) -> Cx<T> {
        self.matrix[(self.index(a.0, a.1, a.2), self.index(b.0, b.1, b.2))]
    }
}

/// Assemble the contour covariance for the listed channels. The upper
/// triangle is evaluated and mirrored, so the result is exactly symmetric.
pub fn build_contour_covariance<T: Real>(
    bath: &BathSpec<T>,
    grid: &TimeGrid<T>,
    channels: &[usize],
) -> Result<ContourCovariance<T>> {
    for (i, &ch) in channels.iter().enumerate() {
        if ch >= bath.n_channels() {
            return Err(Error::Lookup { kind: "channel", index: ch });
        }
        if channels[..i].contains(&ch) {
            return Err(Error::Validation(format!("channel {ch} listed twice")));
        }
    }
    let n = grid.n_nodes();
    let c = channels.len();
    let size = 2 * c * n;
    let unpack = |idx: usize| {
        let branch = if idx < c * n { Branch::Minus } else { Branch::Plus };
        let rest = idx % (c * n);
        (branch, rest / n, rest % n)
    };
    let mut matrix = CMat::zeros(size, size);
    for i in 0..size {
        let (b1, s1, j1) = unpack(i);
        for k in i..size {
            let (b2, s2, j2) = unpack(k);
            let v = bath.contour_value(
                grid,
                channels[s1],
                channels[s2],
                ContourPoint { branch: b1, index: j1 },
                ContourPoint { branch: b2, index: j2 },
            );
            matrix[(i, k)] = v;
            matrix[(k, i)] = v;
        }
    }
    Ok(ContourCovariance { matrix, channels: channels.to_vec(), n_nodes: n })
}

/// `ν = (ξ⁻ + ξ⁺)/2`, `η = (ξ⁻ − ξ⁺)/2`.
pub fn keldysh_rotate<T: Real>(xi_minus: &[Cx<T>], xi_plus: &[Cx<T>]) -> Result<(Vec<Cx<T>>, Vec<Cx<T>>)> {
    if xi_minus.len() != xi_plus.len() {
        return Err(Error::Shape(format!(
            "branch arrays have lengths {} and {}",
            xi_minus.len(),
            xi_plus.len()
        )));
    }
    let half = T::lit(0.5);
    Ok(xi_minus
        .iter()
        .zip(xi_plus)
        .map(|(&m, &p)| ((m + p) * half, (m - p) * half))
        .unzip())
}

/// Inverse rotation: `ξ⁻ = ν + η`, `ξ⁺ = ν − η`.
pub fn keldysh_unrotate<T: Real>(nu: &[Cx<T>], eta: &[Cx<T>]) -> Result<(Vec<Cx<T>>, Vec<Cx<T>>)> {
    if nu.len() != eta.len() {
        return Err(Error::Shape(format!("rotated arrays have lengths {} and {}", nu.len(), eta.len())));
    }
    Ok(nu.iter().zip(eta).map(|(&n, &e)| (n + e, n - e)).unzip())
}
