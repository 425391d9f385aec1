//! Torus grids and the mode-set conventions every other module depends on.
//!
//! The domain is the d-dimensional torus with period 1 per axis, sampled on
//! N^d equispaced points (N a power of two). Fourier modes are integer
//! vectors k ∈ {−N/2+1, …, N/2}^d; the Laplacian eigenvalue convention is
//! μ_k = 4π²|k|², so the heat operator L = ∂ₜ − Δ + 1 has per-mode symbol
//! λ_k = 1 + μ_k.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum supported dimension. Table-1 claims apply to d = 3; d = 1, 2 are
/// kept for cheap analog tests.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("dimension {0} unsupported (expected 1..=3)")]
    BadDimension(usize),
    #[error("points-per-axis {0} must be a power of two in 4..=1024")]
    BadResolution(usize),
}

/// An N^d sampling grid on the period-1 torus.
///
/// Cheap to copy; fields carry one by value and equality of grids is the
/// compatibility check for every binary operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusGrid {
    d: usize,
    n: usize,
}

impl TorusGrid {
    pub fn new(d: usize, n: usize) -> Result<Self, GridError> {
        if d == 0 || d > MAX_DIM {
            return Err(GridError::BadDimension(d));
        }
        // The upper cap keeps N^d (and byte sizes derived from it) far from
        // usize overflow even for adversarial headers.
        if n < 4 || n > 1024 || !n.is_power_of_two() {
            return Err(GridError::BadResolution(n));
        }
        Ok(Self { d, n })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    /// Total number of samples / modes, N^d.
    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Largest dyadic block index used by the Littlewood–Paley partition,
    /// j_max = log₂(N) − 1.
    pub fn j_max(&self) -> i32 {
        (self.n.trailing_zeros() as i32) - 1
    }

    /// Integer wavenumber for a single-axis storage index, mapping
    /// 0..N to {0, …, N/2, −N/2+1, …, −1}.
    #[inline]
    pub fn axis_wavenumber(&self, i: usize) -> i64 {
        let n = self.n as i64;
        let i = i as i64;
        if i <= n / 2 {
            i
        } else {
            i - n
        }
    }

    /// Integer mode vector for a flat storage index (lexicographic, axis 0
    /// slowest). Unused trailing components are zero.
    #[inline]
    pub fn mode(&self, idx: usize) -> [i64; MAX_DIM] {
        let mut k = [0i64; MAX_DIM];
        let mut rest = idx;
        for axis in (0..self.d).rev() {
            k[axis] = self.axis_wavenumber(rest % self.n);
            rest /= self.n;
        }
        debug_assert_eq!(rest, 0);
        k
    }

    /// |k|² as an integer, for a flat index.
    #[inline]
    pub fn mode_norm2(&self, idx: usize) -> i64 {
        let k = self.mode(idx);
        k[0] * k[0] + k[1] * k[1] + k[2] * k[2]
    }

    /// Laplacian eigenvalue μ_k = 4π²|k|².
    #[inline]
    pub fn mu(&self, idx: usize) -> f64 {
        4.0 * std::f64::consts::PI * std::f64::consts::PI * self.mode_norm2(idx) as f64
    }

    /// Symbol of L = ∂ₜ − Δ + 1, λ_k = 1 + μ_k.
    #[inline]
    pub fn lambda(&self, idx: usize) -> f64 {
        1.0 + self.mu(idx)
    }

    /// All λ_k in storage order. Callers cache this; the solver reuses one
    /// table for every per-mode weight it needs.
    pub fn lambdas(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.lambda(i)).collect()
    }

    /// True when the mode at `idx` survives 2/3-rule dealiasing
    /// (|k_i| ≤ N/3 on every axis).
    #[inline]
    pub fn in_dealias_box(&self, idx: usize) -> bool {
        let cutoff = self.n as f64 / 3.0;
        let k = self.mode(idx);
        (0..self.d).all(|a| (k[a].unsigned_abs() as f64) <= cutoff)
    }

    /// Flat index of the mode −k for the mode at `idx` (Hermitian partner).
    pub fn negated_index(&self, idx: usize) -> usize {
        let n = self.n;
        let mut rest = idx;
        let mut coords = [0usize; MAX_DIM];
        for axis in (0..self.d).rev() {
            coords[axis] = rest % n;
            rest /= n;
        }
        let mut out = 0usize;
        for axis in 0..self.d {
            let neg = (n - coords[axis]) % n;
            out = out * n + neg;
        }
        out
    }
}
