//! Field value types: physical samples, Fourier coefficients, and
//! time-indexed sequences.
//!
//! Normalization: the forward transform divides by N^d, so `coef(0)` is the
//! spatial mean and the field is recovered as f(x) = Σ_k coef(k) e^{2πi k·x}.
//! Every renormalization constant in the crate depends on this convention.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use thiserror::Error;

use crate::grid::TorusGrid;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid mismatch: {0:?} vs {1:?}")]
    GridMismatch(TorusGrid, TorusGrid),
    #[error("non-finite sample encountered")]
    NonFinite,
    #[error("time grid mismatch (dt {0} vs {1}, or lengths differ)")]
    TimeGridMismatch(f64, f64),
}

/// Scalar field in physical representation: N^d real samples, lexicographic
/// order with axis 0 slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct RealField {
    grid: TorusGrid,
    data: Vec<f64>,
}

/// Scalar field in Fourier representation: one complex coefficient per mode,
/// same storage order as [`RealField`]. When it represents a real field the
/// coefficients are Hermitian: coef(−k) = conj(coef(k)).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: TorusGrid,
    data: Vec<Complex64>,
}

impl RealField {
    pub fn zeros(grid: TorusGrid) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        Self {
            grid,
            data: vec![c; grid.len()],
        }
    }

    pub fn from_samples(grid: TorusGrid, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), grid.len(), "sample count must match grid");
        Self { grid, data }
    }

    /// Build from a function of the sample coordinates x ∈ [0,1)^d.
    pub fn from_fn(grid: TorusGrid, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let n = grid.points_per_axis();
        let d = grid.dim();
        let mut data = Vec::with_capacity(grid.len());
        let mut coords = vec![0usize; d];
        for idx in 0..grid.len() {
            let mut rest = idx;
            for axis in (0..d).rev() {
                coords[axis] = rest % n;
                rest /= n;
            }
            let x: Vec<f64> = coords.iter().map(|&i| i as f64 / n as f64).collect();
            data.push(f(&x));
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.data
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// In-place pointwise map.
    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Pointwise binary combination; panics on grid mismatch (programmer
    /// error, not runtime input).
    pub fn zip_with(&self, other: &RealField, f: impl Fn(f64, f64) -> f64) -> RealField {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        RealField {
            grid: self.grid,
            data,
        }
    }

    pub fn scaled(&self, s: f64) -> RealField {
        RealField {
            grid: self.grid,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &RealField) -> RealField {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &RealField) -> RealField {
        self.zip_with(other, |a, b| a - b)
    }

    /// Plain pointwise product (no dealiasing; see `spectral::product` for
    /// the truncated variant).
    pub fn mul(&self, other: &RealField) -> RealField {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn axpy(&mut self, s: f64, other: &RealField) {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

impl SpectralField {
    pub fn zeros(grid: TorusGrid) -> Self {
        Self {
            grid,
            data: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_coefficients(grid: TorusGrid, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), grid.len(), "coefficient count must match grid");
        Self { grid, data }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.data
    }

    pub fn coefficients_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Max |coef(−k) − conj(coef(k))| — zero (to rounding) for fields that
    /// represent real data.
    pub fn hermitian_defect(&self) -> f64 {
        let g = self.grid;
        let mut worst: f64 = 0.0;
        for idx in 0..g.len() {
            let neg = g.negated_index(idx);
            let defect = (self.data[neg] - self.data[idx].conj()).norm();
            worst = worst.max(defect);
        }
        worst
    }

    pub fn zip_with(
        &self,
        other: &SpectralField,
        f: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> SpectralField {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        SpectralField {
            grid: self.grid,
            data,
        }
    }

    pub fn add(&self, other: &SpectralField) -> SpectralField {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &SpectralField) -> SpectralField {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scaled(&self, s: f64) -> SpectralField {
        SpectralField {
            grid: self.grid,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Multiply each coefficient by a per-mode real weight (semigroup,
    /// block bump, damping, …).
    pub fn weighted(&self, weights: &[f64]) -> SpectralField {
        assert_eq!(weights.len(), self.data.len());
        let data = self
            .data
            .iter()
            .zip(weights)
            .map(|(&v, &w)| v * w)
            .collect();
        SpectralField {
            grid: self.grid,
            data,
        }
    }

    pub fn weight_inplace(&mut self, weights: &[f64]) {
        assert_eq!(weights.len(), self.data.len());
        for (v, &w) in self.data.iter_mut().zip(weights) {
            *v *= w;
        }
    }
}

/// Plan cache: rustfft plans are Arc-shared and thread-safe; one per
/// (length, direction) for the life of the process.
fn plan(n: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (n, direction == FftDirection::Forward);
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    guard
        .entry(key)
        .or_insert_with(|| FftPlanner::new().plan_fft(n, direction))
        .clone()
}

/// In-place d-dimensional FFT pass over every axis of `data` (shape [n; d],
/// lexicographic, axis 0 slowest). Unnormalized, like rustfft itself.
fn fft_all_axes(grid: TorusGrid, data: &mut [Complex64], direction: FftDirection) {
    let n = grid.points_per_axis();
    let d = grid.dim();
    let len = grid.len();
    let fft = plan(n, direction);
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    for axis in 0..d {
        // stride between consecutive elements along `axis`
        let stride = n.pow((d - 1 - axis) as u32);
        let lines = len / n;
        for l in 0..lines {
            // Decompose the line id into (outer, inner) around the axis.
            let inner = l % stride;
            let outer = l / stride;
            let base = outer * stride * n + inner;
            for (j, slot) in line.iter_mut().enumerate() {
                *slot = data[base + j * stride];
            }
            fft.process(&mut line);
            for (j, &v) in line.iter().enumerate() {
                data[base + j * stride] = v;
            }
        }
    }
}

/// Forward transform: physical samples → coefficients, scaled by 1/N^d so
/// that coef(0) is the spatial mean.
pub fn forward_transform(f: &RealField) -> SpectralField {
    let grid = f.grid();
    let mut data: Vec<Complex64> = f
        .samples()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    fft_all_axes(grid, &mut data, FftDirection::Forward);
    let scale = 1.0 / grid.len() as f64;
    for v in &mut data {
        *v *= scale;
    }
    SpectralField { grid, data }
}

/// Inverse transform: coefficients → physical samples. The imaginary parts
/// are discarded; for Hermitian input they are at rounding level.
pub fn inverse_transform(field: &SpectralField) -> RealField {
    let grid = field.grid();
    let mut data = field.data.clone();
    fft_all_axes(grid, &mut data, FftDirection::Inverse);
    RealField {
        grid,
        data: data.into_iter().map(|v| v.re).collect(),
    }
}

/// Inverse transform keeping the complex samples (used by symmetry checks).
pub fn inverse_transform_complex(field: &SpectralField) -> Vec<Complex64> {
    let grid = field.grid();
    let mut data = field.data.clone();
    fft_all_axes(grid, &mut data, FftDirection::Inverse);
    data
}

/// A field trajectory on a uniform time grid t_m = m·dt, m = 0..=n_steps.
#[derive(Debug, Clone)]
pub struct TimeField {
    dt: f64,
    snapshots: Vec<RealField>,
}

impl TimeField {
    pub fn new(dt: f64, snapshots: Vec<RealField>) -> Self {
        assert!(dt > 0.0, "dt must be positive");
        assert!(!snapshots.is_empty(), "need at least the t=0 snapshot");
        let g = snapshots[0].grid();
        assert!(
            snapshots.iter().all(|s| s.grid() == g),
            "all snapshots share one grid"
        );
        Self { dt, snapshots }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn grid(&self) -> TorusGrid {
        self.snapshots[0].grid()
    }

    pub fn snapshot(&self, m: usize) -> &RealField {
        &self.snapshots[m]
    }

    pub fn snapshots(&self) -> &[RealField] {
        &self.snapshots
    }

    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.dt
    }

    /// Max-over-time of a per-snapshot functional (e.g. L∞ or a Besov norm).
    pub fn max_over_time(&self, f: impl Fn(&RealField) -> f64) -> f64 {
        self.snapshots.iter().map(f).fold(0.0, f64::max)
    }

    pub fn zip_with(
        &self,
        other: &TimeField,
        f: impl Fn(&RealField, &RealField) -> RealField,
    ) -> Result<TimeField, FieldError> {
        if self.snapshots.len() != other.snapshots.len() || self.dt != other.dt {
            return Err(FieldError::TimeGridMismatch(self.dt, other.dt));
        }
        let snapshots = self
            .snapshots
            .iter()
            .zip(&other.snapshots)
            .map(|(a, b)| f(a, b))
            .collect();
        Ok(TimeField {
            dt: self.dt,
            snapshots,
        })
    }
}
