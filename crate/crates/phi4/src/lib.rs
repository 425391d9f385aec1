//! Pseudo-spectral laboratory for the dynamical Φ⁴ equation on the periodic
//! torus, built around the multiplicative transform that removes the most
//! singular products from the renormalized equation.
//!
//! Layers, bottom up:
//! - [`grid`], [`field`]: torus grids, physical/spectral fields, FFT.
//! - [`spectral`]: semigroup, Duhamel quadrature, ETD stepping, products.
//! - [`lp`]: Littlewood–Paley blocks, Besov norms, paraproducts.
//! - [`trees`]: mollified noise, renormalization constants, stochastic trees.
//! - [`solver`]: the direct renormalized solve and the transformed solve,
//!   plus their cross-validation harness.
//! - [`lab`]: estimate verification studies (Schauder, maximum principle,
//!   δ-independence, global bounds).
//! - [`config`], [`io`]: run configuration, manifests, snapshots, reports.

pub mod config;
pub mod field;
pub mod grid;
pub mod io;
pub mod lab;
pub mod lp;
pub mod solver;
pub mod spectral;
pub mod trees;
