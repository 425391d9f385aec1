//! Mollified noise, the stationary field Z, renormalization constants, and
//! the stochastic trees of Table 1.
//!
//! Noise normalization: per complex Fourier mode the driving noise is an
//! independent white noise in time with E[ξ̂_k(t)ξ̂_k(s)*] = δ(t−s), under
//! the crate's forward-transform convention. The stationary solution of
//! L Ẑ_k = χ_δ(k) ξ̂_k then has variance σ_k² = χ_δ(k)²/(2λ_k).
//!
//! Z is sampled as χ_δ(k)·X_k where X is the undamped (χ-free) per-mode
//! Ornstein–Uhlenbeck path. The path of X depends only on (seed, grid, time
//! grid), so different mollification scales and families driven by one seed
//! share their innovations — the common-noise coupling used by the δ- and
//! mollifier-independence studies. Per-mode stepping is exact (no
//! Euler–Maruyama error); only tree integration and the nonlinear solves
//! carry dt error.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::field::{forward_transform, inverse_transform, RealField, SpectralField, TimeField};
use crate::grid::TorusGrid;
use crate::lp::resonant;
use crate::spectral::{advance_duhamel, product, DuhamelScheme, ProductRule, StepWeights};

/// Spectral damping family of the mollifier χ_δ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MollifierFamily {
    /// Indicator of |δk| ≤ 1.
    Sharp,
    /// e^{−|δk|²}.
    Gaussian,
}

/// Mollification at scale δ > 0: per-mode damping χ_δ(k) ∈ [0,1] with
/// χ_δ(0) = 1, χ_δ even, and χ_δ → 1 pointwise as δ → 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mollifier {
    pub family: MollifierFamily,
    pub delta: f64,
    /// Optional radial hard cutoff (in integer wavenumber) composed with the
    /// family damping. Used by coupling studies on a fixed grid: noise modes
    /// outside the dealias band enter products only through aliasing, so the
    /// mollification a grid can probe faithfully is χ_δ restricted to the
    /// band. `None` = no extra cutoff.
    #[serde(default)]
    pub band_k: Option<f64>,
}

impl Mollifier {
    pub fn new(family: MollifierFamily, delta: f64) -> Self {
        assert!(delta > 0.0, "mollifier scale must be positive");
        Self {
            family,
            delta,
            band_k: None,
        }
    }

    /// Mollifier composed with a radial band cutoff |k| ≤ k_max.
    pub fn band_limited(family: MollifierFamily, delta: f64, k_max: f64) -> Self {
        let mut m = Self::new(family, delta);
        m.band_k = Some(k_max);
        m
    }

    /// Damping at squared integer wavenumber |k|².
    #[inline]
    pub fn chi2_of_k2(&self, k2: f64) -> f64 {
        if let Some(k_max) = self.band_k {
            if k2 > k_max * k_max {
                return 0.0;
            }
        }
        let s = self.delta * self.delta * k2;
        match self.family {
            MollifierFamily::Sharp => {
                if s <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            MollifierFamily::Gaussian => (-2.0 * s).exp(), // χ² = e^{−2|δk|²}
        }
    }

    #[inline]
    pub fn chi_of_k2(&self, k2: f64) -> f64 {
        self.chi2_of_k2(k2).sqrt()
    }

    /// Per-mode damping table in storage order.
    pub fn damping(&self, grid: TorusGrid) -> Vec<f64> {
        (0..grid.len())
            .map(|i| self.chi_of_k2(grid.mode_norm2(i) as f64))
            .collect()
    }
}

/// The two renormalization constants at one (grid, mollifier, convention).
/// Deterministic: no randomness enters either computation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RenormConstants {
    /// Wick constant a = E[Z²] (stationary), diverges like δ^{−1} in d=3.
    pub a: f64,
    /// Second-order constant fixed by the stationary expectation of
    /// I2 ⊙ ⟦Z²⟧; diverges like log(1/δ) in d=3.
    pub b: f64,
    pub delta: f64,
    pub family: MollifierFamily,
}

/// a = Σ_k χ_δ(k)²/(2(1+μ_k)) over the resolved mode set.
pub fn compute_a(grid: TorusGrid, moll: &Mollifier) -> f64 {
    (0..grid.len())
        .map(|i| moll.chi2_of_k2(grid.mode_norm2(i) as f64) / (2.0 * grid.lambda(i)))
        .sum()
}

/// Resonant weight of the dyadic partition at each mode:
/// w(q) = Σ_{|i−j|≤1} θ_i(q) θ_j(q).
fn resonant_weights(grid: TorusGrid) -> Vec<f64> {
    let part = crate::lp::partition_for(grid);
    let j_max = part.j_max();
    let len = grid.len();
    // Recover the tabulated bumps through block() applied to a delta of ones.
    let mut ones = SpectralField::zeros(grid);
    for c in ones.coefficients_mut().iter_mut() {
        *c = num_complex::Complex64::new(1.0, 0.0);
    }
    let bumps: Vec<Vec<f64>> = (-1..=j_max)
        .map(|j| {
            part.block(j, &ones)
                .expect("in range")
                .coefficients()
                .iter()
                .map(|c| c.re)
                .collect()
        })
        .collect();
    let mut w = vec![0.0; len];
    for i in 0..bumps.len() {
        for j in i.saturating_sub(1)..=(i + 1).min(bumps.len() - 1) {
            for idx in 0..len {
                w[idx] += bumps[i][idx] * bumps[j][idx];
            }
        }
    }
    w
}

/// b by its defining stationary expectation b/3 = E[(I2 ⊙ ⟦Z²⟧)(x)]:
///
///   b = 6 Σ_q w(q) D(q) Σ_k σ_k² σ_{[q−k]}² / (λ_q + λ_k + λ_{[q−k]})
///
/// with w the resonant weight, D the dealias indicator carried by the Wick
/// product, and [q−k] wrapped on the mode grid. The reciprocal is expanded
/// as ∫₀^∞ e^{−(λ_q+λ_k+λ_{q−k})t} dt, turning the inner sum into a
/// circular self-convolution of h_t(k) = σ_k² e^{−λ_k t} evaluated by FFT
/// per quadrature node (log-t trapezoid rule). The literal double mode loop
/// is kept as a small-grid oracle in [`compute_b_bruteforce`].
pub fn compute_b(grid: TorusGrid, moll: &Mollifier, rule: ProductRule) -> f64 {
    let len = grid.len();
    let sigma2: Vec<f64> = (0..len)
        .map(|i| moll.chi2_of_k2(grid.mode_norm2(i) as f64) / (2.0 * grid.lambda(i)))
        .collect();
    let lambdas = grid.lambdas();
    let w_res = resonant_weights(grid);

    // Log-spaced quadrature nodes in u = ln t. Integrand decays like e^{−3t}
    // for large t and is bounded near 0, so the window below captures the
    // integral to ~1e−8 relative.
    let (u_lo, u_hi, nodes) = (-23.0, 2.6, 96usize);
    let du = (u_hi - u_lo) / (nodes - 1) as f64;

    let mut total = 0.0;
    let mut h = vec![num_complex::Complex64::new(0.0, 0.0); len];
    for node in 0..nodes {
        let u = u_lo + node as f64 * du;
        let t = u.exp();
        for idx in 0..len {
            h[idx] = num_complex::Complex64::new(sigma2[idx] * (-lambdas[idx] * t).exp(), 0.0);
        }
        // Circular self-convolution over the wrapped mode grid.
        let hf = SpectralField::from_coefficients(grid, h.clone());
        let mut spectrum = crate::field::inverse_transform_complex(&hf); // raw inverse DFT
        for v in &mut spectrum {
            *v = *v * *v;
        }
        let conv = forward_transform(&RealField::from_samples(
            grid,
            spectrum.iter().map(|v| v.re).collect(),
        ));
        // (imaginary part of the squared spectrum is zero for even real h)
        let mut s_q = 0.0;
        for idx in 0..len {
            let keep = match rule {
                ProductRule::Plain => true,
                ProductRule::Dealiased => grid.in_dealias_box(idx),
            };
            if keep {
                s_q += w_res[idx] * (-lambdas[idx] * t).exp() * conv.coefficients()[idx].re;
            }
        }
        // trapezoid in u with dt = e^u du
        let trap = if node == 0 || node == nodes - 1 { 0.5 } else { 1.0 };
        total += trap * s_q * t * du;
    }
    6.0 * total
}

/// Literal double loop over mode pairs — O(N^{2d}); test oracle only.
pub fn compute_b_bruteforce(grid: TorusGrid, moll: &Mollifier, rule: ProductRule) -> f64 {
    let len = grid.len();
    let n = grid.points_per_axis();
    let d = grid.dim();
    let sigma2: Vec<f64> = (0..len)
        .map(|i| moll.chi2_of_k2(grid.mode_norm2(i) as f64) / (2.0 * grid.lambda(i)))
        .collect();
    let lambdas = grid.lambdas();
    let w_res = resonant_weights(grid);
    let coords = |idx: usize| {
        let mut c = [0usize; 3];
        let mut rest = idx;
        for axis in (0..d).rev() {
            c[axis] = rest % n;
            rest /= n;
        }
        c
    };
    let mut total = 0.0;
    for q in 0..len {
        let keep = match rule {
            ProductRule::Plain => true,
            ProductRule::Dealiased => grid.in_dealias_box(q),
        };
        if !keep || w_res[q] == 0.0 {
            continue;
        }
        let qc = coords(q);
        let mut inner = 0.0;
        for k in 0..len {
            let kc = coords(k);
            let mut diff = 0usize;
            for axis in 0..d {
                let m = (qc[axis] + n - kc[axis]) % n;
                diff = diff * n + m;
            }
            inner += sigma2[k] * sigma2[diff] / (lambdas[q] + lambdas[k] + lambdas[diff]);
        }
        total += w_res[q] * inner;
    }
    6.0 * total
}

/// Derive a 32-byte RNG seed from (master seed, stream label, counter).
/// Counter-based so realizations and steps can be generated in any order
/// (or in parallel) with bit-identical results.
pub fn stream_rng(master: u64, label: &str, counter: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(counter.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Standard complex Gaussian spectral field with E|W_k|² = 1 and exact
/// Hermitian symmetry, realized as the transform of a real white-noise
/// field (equivalent in law to sampling half the modes).
pub(crate) fn white_noise_spectral(grid: TorusGrid, rng: &mut ChaCha8Rng) -> SpectralField {
    let samples: Vec<f64> = (0..grid.len())
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let mut spec = forward_transform(&RealField::from_samples(grid, samples));
    let scale = (grid.len() as f64).sqrt();
    for c in spec.coefficients_mut().iter_mut() {
        *c *= scale;
    }
    spec
}

/// Undamped per-mode OU path with stationary variance 1/(2λ_k), advanced on
/// a solver grid of step dt that may be subdivided into `substeps` fine
/// noise steps. Innovations are drawn per fine-step counter, so a run at dt
/// with 2 substeps and a run at dt/2 with 1 substep traverse the same noise
/// path — the nesting needed by dt-refinement comparisons.
pub struct OuPath {
    grid: TorusGrid,
    seed: u64,
    dt: f64,
    substeps: usize,
    lambdas: Vec<f64>,
    x: SpectralField,
    fine_counter: u64,
}

impl OuPath {
    pub fn new(grid: TorusGrid, seed: u64, dt: f64, substeps: usize) -> Self {
        assert!(dt > 0.0 && substeps >= 1);
        let lambdas = grid.lambdas();
        let mut rng = stream_rng(seed, "ou-init", 0);
        let mut x = white_noise_spectral(grid, &mut rng);
        for (c, &lam) in x.coefficients_mut().iter_mut().zip(&lambdas) {
            *c *= (1.0 / (2.0 * lam)).sqrt();
        }
        Self {
            grid,
            seed,
            dt,
            substeps,
            lambdas,
            x,
            fine_counter: 0,
        }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    /// Current state X(t).
    pub fn state(&self) -> &SpectralField {
        &self.x
    }

    /// Advance one solver step; returns the aggregated innovation η with
    /// X(t+dt) = e^{−λdt} X(t) + η.
    pub fn advance(&mut self) -> SpectralField {
        let dt_fine = self.dt / self.substeps as f64;
        let mut eta = SpectralField::zeros(self.grid);
        for sub in 0..self.substeps {
            let mut g = {
                let mut rng = stream_rng(self.seed, "ou-step", self.fine_counter);
                white_noise_spectral(self.grid, &mut rng)
            };
            self.fine_counter += 1;
            // remaining decay applied to this sub-innovation
            let tail = (self.substeps - 1 - sub) as f64 * dt_fine;
            for ((e, c), &lam) in eta
                .coefficients_mut()
                .iter_mut()
                .zip(g.coefficients_mut().iter_mut())
                .zip(&self.lambdas)
            {
                let sd = ((1.0 - (-2.0 * lam * dt_fine).exp()) / (2.0 * lam)).sqrt();
                *e += *c * sd * (-lam * tail).exp();
            }
        }
        for (x, (&lam, &e)) in self
            .x
            .coefficients_mut()
            .iter_mut()
            .zip(self.lambdas.iter().zip(eta.coefficients()))
        {
            *x = *x * (-lam * self.dt).exp() + e;
        }
        eta
    }
}

/// The streaming state of one realization: Z, Wick powers, integrated trees
/// I2, I3, and the auxiliary field Y, advanced one solver step at a time.
///
/// Tree integrals use the configured Duhamel scheme; the Y source is the
/// fixed-δ literal 3e^{3I2}(I3·⟦Z²⟧ − b(Z+I3)).
pub struct TreeStepper {
    grid: TorusGrid,
    pub moll: Mollifier,
    pub constants: RenormConstants,
    scheme: DuhamelScheme,
    rule: ProductRule,
    weights: StepWeights,
    ou: OuPath,
    chi: Vec<f64>,
    /// Spectral states.
    pub z_spec: SpectralField,
    pub i2_spec: SpectralField,
    pub i3_spec: SpectralField,
    pub y_spec: SpectralField,
    w2_spec: SpectralField,
    w3_spec: SpectralField,
    y_src_spec: SpectralField,
    /// Physical snapshots of the current state.
    pub z: RealField,
    pub w2: RealField,
    pub w3: RealField,
    /// Innovation of the last step, already damped by χ (η of Z).
    pub last_innovation: SpectralField,
    step_index: usize,
}

impl TreeStepper {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: TorusGrid,
        moll: Mollifier,
        seed: u64,
        dt: f64,
        substeps: usize,
        scheme: DuhamelScheme,
        rule: ProductRule,
    ) -> Self {
        let a = compute_a(grid, &moll);
        let b = compute_b(grid, &moll, rule);
        Self::with_constants(grid, moll, seed, dt, substeps, scheme, rule, RenormConstants {
            a,
            b,
            delta: moll.delta,
            family: moll.family,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_constants(
        grid: TorusGrid,
        moll: Mollifier,
        seed: u64,
        dt: f64,
        substeps: usize,
        scheme: DuhamelScheme,
        rule: ProductRule,
        constants: RenormConstants,
    ) -> Self {
        let weights = StepWeights::new(grid, dt);
        let ou = OuPath::new(grid, seed, dt, substeps);
        let chi = moll.damping(grid);
        let mut z_spec = ou.state().clone();
        z_spec.weight_inplace(&chi);
        let z = inverse_transform(&z_spec);
        let (w2, w3) = wick_powers(&z, constants.a, rule);
        let w2_spec = forward_transform(&w2);
        let w3_spec = forward_transform(&w3);
        let zero = SpectralField::zeros(grid);
        let mut stepper = Self {
            grid,
            moll,
            constants,
            scheme,
            rule,
            weights,
            ou,
            chi,
            z_spec,
            i2_spec: zero.clone(),
            i3_spec: zero.clone(),
            y_spec: zero.clone(),
            w2_spec,
            w3_spec,
            y_src_spec: zero.clone(),
            z,
            w2,
            w3,
            last_innovation: zero,
            step_index: 0,
        };
        stepper.y_src_spec = stepper.y_source();
        stepper
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn rule(&self) -> ProductRule {
        self.rule
    }

    pub fn dt(&self) -> f64 {
        self.weights.dt
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.weights.dt
    }

    pub fn i2(&self) -> RealField {
        inverse_transform(&self.i2_spec)
    }

    pub fn i3(&self) -> RealField {
        inverse_transform(&self.i3_spec)
    }

    pub fn y(&self) -> RealField {
        inverse_transform(&self.y_spec)
    }

    /// Fixed-δ literal Y source 3e^{3I2}(I3·⟦Z²⟧ − b(Z+I3)).
    fn y_source(&self) -> SpectralField {
        let i2 = self.i2();
        let i3 = self.i3();
        let mut p = i2;
        p.map_inplace(|v| (3.0 * v).exp());
        let b = self.constants.b;
        let inner = product(&i3, &self.w2, self.rule)
            .sub(&self.z.add(&i3).scaled(b));
        forward_transform(&product(&p, &inner, self.rule).scaled(3.0))
    }

    /// Advance all stochastic objects one solver step.
    pub fn step(&mut self) {
        let eta_x = self.ou.advance();
        let mut eta = eta_x;
        eta.weight_inplace(&self.chi);
        // Z update: exact OU, mode-wise.
        let mut z_new = self.z_spec.weighted(&self.weights.decay);
        for (c, &e) in z_new.coefficients_mut().iter_mut().zip(eta.coefficients()) {
            *c += e;
        }
        let z_real = inverse_transform(&z_new);
        let (w2, w3) = wick_powers(&z_real, self.constants.a, self.rule);
        let w2_spec = forward_transform(&w2);
        let w3_spec = forward_transform(&w3);

        self.i2_spec = advance_duhamel(&self.i2_spec, &self.w2_spec, &w2_spec, &self.weights, self.scheme);
        self.i3_spec = advance_duhamel(&self.i3_spec, &self.w3_spec, &w3_spec, &self.weights, self.scheme);

        // Y needs the source at the *new* endpoint, which depends on the new
        // Z, W2, I2, I3 — commit those first.
        self.z_spec = z_new;
        self.z = z_real;
        self.w2 = w2;
        self.w3 = w3;
        self.w2_spec = w2_spec;
        self.w3_spec = w3_spec;
        let y_src_new = self.y_source();
        self.y_spec = advance_duhamel(&self.y_spec, &self.y_src_spec, &y_src_new, &self.weights, self.scheme);
        self.y_src_spec = y_src_new;
        self.last_innovation = eta;
        self.step_index += 1;
    }
}

/// Pointwise Wick powers: W2 = Z² − a, W3 = Z³ − 3aZ (products under `rule`,
/// the cube nested as (Z²)·Z).
pub fn wick_powers(z: &RealField, a: f64, rule: ProductRule) -> (RealField, RealField) {
    let z2 = product(z, z, rule);
    let z3 = product(&z2, z, rule);
    let mut w2 = z2;
    w2.map_inplace(|v| v - a);
    let w3 = z3.zip_with(z, |c, lin| c - 3.0 * a * lin);
    (w2, w3)
}

/// Batch Wick powers over a trajectory.
pub fn build_wick(z: &TimeField, a: f64, rule: ProductRule) -> (TimeField, TimeField) {
    let mut w2 = Vec::with_capacity(z.n_steps() + 1);
    let mut w3 = Vec::with_capacity(z.n_steps() + 1);
    for snap in z.snapshots() {
        let (a2, a3) = wick_powers(snap, a, rule);
        w2.push(a2);
        w3.push(a3);
    }
    (TimeField::new(z.dt(), w2), TimeField::new(z.dt(), w3))
}

/// I2 = J W2 and I3 = J W3 with zero initial condition.
pub fn integrate_trees(
    w2: &TimeField,
    w3: &TimeField,
    scheme: DuhamelScheme,
) -> (TimeField, TimeField) {
    let grid = w2.grid();
    let w = StepWeights::new(grid, w2.dt());
    let run = |src: &TimeField| {
        let mut acc = SpectralField::zeros(grid);
        let mut out = vec![RealField::zeros(grid)];
        let mut prev = forward_transform(src.snapshot(0));
        for m in 0..src.n_steps() {
            let next = forward_transform(src.snapshot(m + 1));
            acc = advance_duhamel(&acc, &prev, &next, &w, scheme);
            prev = next;
            out.push(inverse_transform(&acc));
        }
        TimeField::new(src.dt(), out)
    };
    (run(w2), run(w3))
}

/// One realization of all stochastic objects at a fixed (δ, seed).
pub struct TreeEnsemble {
    pub grid: TorusGrid,
    pub moll: Mollifier,
    pub seed: u64,
    pub constants: RenormConstants,
    pub z: TimeField,
    pub w2: TimeField,
    pub w3: TimeField,
    pub i2: TimeField,
    pub i3: TimeField,
}

/// Generate a full ensemble by running the streaming stepper and collecting
/// every snapshot. Memory scales with n_steps·N^d; intended for desk-scale
/// grids — large studies drive [`TreeStepper`] directly.
pub fn generate_ensemble(
    grid: TorusGrid,
    moll: Mollifier,
    seed: u64,
    t_end: f64,
    dt: f64,
    scheme: DuhamelScheme,
    rule: ProductRule,
) -> TreeEnsemble {
    let a = compute_a(grid, &moll);
    let b = compute_b(grid, &moll, rule);
    generate_ensemble_with(
        grid,
        moll,
        seed,
        t_end,
        dt,
        scheme,
        rule,
        RenormConstants {
            a,
            b,
            delta: moll.delta,
            family: moll.family,
        },
    )
}

/// Ensemble generation with precomputed constants (amortizes the b
/// computation across realizations at one (grid, mollifier)).
#[allow(clippy::too_many_arguments)]
pub fn generate_ensemble_with(
    grid: TorusGrid,
    moll: Mollifier,
    seed: u64,
    t_end: f64,
    dt: f64,
    scheme: DuhamelScheme,
    rule: ProductRule,
    constants: RenormConstants,
) -> TreeEnsemble {
    let mut stepper = TreeStepper::with_constants(grid, moll, seed, dt, 1, scheme, rule, constants);
    let n_steps = (t_end / dt).round() as usize;
    let mut z = vec![stepper.z.clone()];
    let mut w2 = vec![stepper.w2.clone()];
    let mut w3 = vec![stepper.w3.clone()];
    let mut i2 = vec![stepper.i2()];
    let mut i3 = vec![stepper.i3()];
    for _ in 0..n_steps {
        stepper.step();
        z.push(stepper.z.clone());
        w2.push(stepper.w2.clone());
        w3.push(stepper.w3.clone());
        i2.push(stepper.i2());
        i3.push(stepper.i3());
    }
    TreeEnsemble {
        grid,
        moll,
        seed,
        constants: stepper.constants,
        z: TimeField::new(dt, z),
        w2: TimeField::new(dt, w2),
        w3: TimeField::new(dt, w3),
        i2: TimeField::new(dt, i2),
        i3: TimeField::new(dt, i3),
    }
}

/// The four renormalized resonant objects of Table 1 for one time index:
/// R1 = I3⊙Z, R2 = I2⊙⟦Z²⟧ − b/3, R3 = |∇I2|² − b/3, R4 = I3⊙⟦Z²⟧ − bZ.
pub struct ResonantTrees {
    pub r1: RealField,
    pub r2: RealField,
    pub r3: RealField,
    pub r4: RealField,
}

pub fn build_resonant_trees_snapshot(
    z: &RealField,
    w2: &RealField,
    i2_spec: &SpectralField,
    i3: &RealField,
    b: f64,
    rule: ProductRule,
) -> ResonantTrees {
    let i2 = inverse_transform(i2_spec);
    let r1 = resonant(i3, z, rule);
    let mut r2 = resonant(&i2, w2, rule);
    r2.map_inplace(|v| v - b / 3.0);
    let grads = crate::spectral::gradient(i2_spec);
    let mut r3 = RealField::zeros(z.grid());
    for gi in &grads {
        let g = inverse_transform(gi);
        r3.axpy(1.0, &product(&g, &g, rule));
    }
    r3.map_inplace(|v| v - b / 3.0);
    let r4 = resonant(i3, w2, rule).zip_with(z, |res, zz| res - b * zz);
    ResonantTrees { r1, r2, r3, r4 }
}

/// Residual of the Leibniz identity |∇I2|² = I2·W2 − ½L(I2²) − ½I2² along a
/// stored ensemble, with L(I2²) by discrete time differences (trapezoid in
/// space at step midpoints). The residual vanishes at integrator order under
/// dt-refinement; the identity follows from L I2 = W2 and the product rule.
pub fn leibniz_equivalence_check(ensemble: &TreeEnsemble, rule: ProductRule) -> f64 {
    let grid = ensemble.grid;
    let dt = ensemble.i2.dt();
    let mut worst: f64 = 0.0;
    for m in 0..ensemble.i2.n_steps() {
        let i2a = ensemble.i2.snapshot(m);
        let i2b = ensemble.i2.snapshot(m + 1);
        let sq_a = product(i2a, i2a, rule);
        let sq_b = product(i2b, i2b, rule);
        // d/dt(I2²) at the midpoint
        let ddt = sq_b.sub(&sq_a).scaled(1.0 / dt);
        // (−Δ + 1)(I2²) at the midpoint, spectrally
        let mid_sq = sq_a.add(&sq_b).scaled(0.5);
        let mut spec = forward_transform(&mid_sq);
        for (idx, c) in spec.coefficients_mut().iter_mut().enumerate() {
            *c *= grid.lambda(idx);
        }
        let l_sq = ddt.add(&inverse_transform(&spec));
        // |∇I2|² at the midpoint
        let mid_i2 = forward_transform(&i2a.add(i2b).scaled(0.5));
        let mut grad2 = RealField::zeros(grid);
        for g in crate::spectral::gradient(&mid_i2) {
            let gr = inverse_transform(&g);
            grad2.axpy(1.0, &product(&gr, &gr, rule));
        }
        let mid_i2_real = inverse_transform(&mid_i2);
        let mid_w2 = ensemble.w2.snapshot(m).add(ensemble.w2.snapshot(m + 1)).scaled(0.5);
        let mut rhs = product(&mid_i2_real, &mid_w2, rule);
        rhs.axpy(-0.5, &l_sq);
        rhs.axpy(-0.5, &product(&mid_i2_real, &mid_i2_real, rule));
        worst = worst.max(grad2.sub(&rhs).linf_norm());
    }
    worst
}

/// One row of the tree-regularity table.
#[derive(Debug, Clone, Serialize)]
pub struct RegularityRow {
    pub name: String,
    pub expected: f64,
    pub tolerance: f64,
    pub mean_slope: f64,
    /// Soft rows are reported but not asserted.
    pub soft: bool,
}

/// Fitted regularities of the stochastic objects, averaged over
/// realizations, against the claimed exponents. Streaming: block maxima are
/// accumulated at `stride`-spaced analysis times, memory O(N^d).
#[allow(clippy::too_many_arguments)]
pub fn regularity_report(
    grid: TorusGrid,
    moll: Mollifier,
    seeds: &[u64],
    t_end: f64,
    dt: f64,
    stride: usize,
    scheme: DuhamelScheme,
    rule: ProductRule,
    constants: RenormConstants,
) -> Vec<RegularityRow> {
    let part = crate::lp::partition_for(grid);
    let n_blocks = (part.j_max() + 2) as usize;
    // Fit windows. The default window [2, j_max−1] includes the block whose
    // bump support (⊂ 2^j·[3/4, 8/3]) crosses the dealias cutoff N/3; for
    // the pure Wick powers — the only trees with *growing* block norms built
    // directly through a dealiased product — that block under-reads the
    // spectrum and biases the fitted exponent shallow, so W2/W3 are fitted
    // on fully-in-band blocks only (support 8/3·2^j ≤ N/3 ⇔ j ≤ j_max−2).
    // For the decaying trees the cutoff region carries negligible mass and
    // the wider window's smaller variance wins.
    let top = part.j_max() - 1;
    let top_wick = part.j_max() - 2;
    // (name, expected slope, tolerance, top fit block, soft)
    let spec: [(&str, f64, f64, i32, bool); 9] = [
        ("Z", -0.5, 0.2, top, false),
        ("W2", -1.0, 0.2, top_wick, false),
        ("W3", -1.5, 0.3, top_wick, true),
        ("I2", 1.0, 0.2, top, false),
        ("I3", 0.5, 0.2, top, false),
        ("R1", 0.0, 0.25, top, false),
        ("R2", 0.0, 0.25, top, false),
        ("R3", 0.0, 0.3, top, true),
        ("R4", -0.5, 0.2, top, false),
    ];
    let mut slope_sums = vec![0.0f64; spec.len()];
    let n_steps = (t_end / dt).round() as usize;
    for &seed in seeds {
        let mut stepper =
            TreeStepper::with_constants(grid, moll, seed, dt, 1, scheme, rule, constants);
        let mut maxima = vec![vec![0.0f64; n_blocks]; spec.len()];
        let analyze = |s: &TreeStepper, maxima: &mut Vec<Vec<f64>>| {
            let res = build_resonant_trees_snapshot(
                &s.z, &s.w2, &s.i2_spec, &s.i3(), s.constants.b, rule,
            );
            let fields: [&RealField; 9] = [
                &s.z,
                &s.w2,
                &s.w3,
                &s.i2(),
                &s.i3(),
                &res.r1,
                &res.r2,
                &res.r3,
                &res.r4,
            ];
            for (acc, f) in maxima.iter_mut().zip(fields) {
                let m = part.block_sup_norms(&forward_transform(f));
                for (a, v) in acc.iter_mut().zip(m) {
                    *a = a.max(v);
                }
            }
        };
        for step in 1..=n_steps {
            stepper.step();
            if step % stride == 0 {
                analyze(&stepper, &mut maxima);
            }
        }
        for ((sum, m), &(_, _, _, hi, _)) in slope_sums.iter_mut().zip(&maxima).zip(&spec) {
            if let Ok(s) = crate::lp::slope_from_block_maxima(m, (2, hi)) {
                *sum += s;
            }
        }
    }
    spec.iter()
        .zip(slope_sums)
        .map(|(&(name, expected, tolerance, _, soft), sum)| RegularityRow {
            name: name.to_string(),
            expected,
            tolerance,
            mean_slope: sum / seeds.len() as f64,
            soft,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compute_a_single_mode() {
        // δ large enough that only k = 0 survives the sharp cutoff.
        let g = TorusGrid::new(3, 8).unwrap();
        let moll = Mollifier::new(MollifierFamily::Sharp, 10.0);
        assert!((compute_a(g, &moll) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn compute_a_three_modes_1d() {
        let g = TorusGrid::new(1, 16).unwrap();
        // sharp cutoff retaining k ∈ {−1, 0, 1}: δ|k| ≤ 1 for |k| ≤ 1 only.
        let moll = Mollifier::new(MollifierFamily::Sharp, 0.7);
        let expect = 0.5 + 2.0 * (1.0 / (2.0 * (1.0 + 4.0 * std::f64::consts::PI.powi(2))));
        assert!((compute_a(g, &moll) - expect).abs() < 1e-14);
    }

    #[test]
    fn compute_b_single_mode_closed_form() {
        // Only k = 0: σ² = 1/2, λ = 1, resonant weight 1 at the origin, so
        // b = 6·(1/2·1/2)/3 = 1/2.
        let g = TorusGrid::new(3, 8).unwrap();
        let moll = Mollifier::new(MollifierFamily::Sharp, 10.0);
        let b = compute_b(g, &moll, ProductRule::Dealiased);
        assert!((b - 0.5).abs() < 1e-6, "b = {b}");
    }

    #[test]
    fn compute_b_matches_bruteforce() {
        let g = TorusGrid::new(1, 16).unwrap();
        let moll = Mollifier::new(MollifierFamily::Sharp, 0.25);
        for rule in [ProductRule::Plain, ProductRule::Dealiased] {
            let fast = compute_b(g, &moll, rule);
            let brute = compute_b_bruteforce(g, &moll, rule);
            assert!(
                (fast - brute).abs() < 1e-6 * brute.abs().max(1.0),
                "{fast} vs {brute}"
            );
        }
    }

    #[test]
    fn single_retained_mode_makes_z_constant() {
        let g = TorusGrid::new(2, 8).unwrap();
        let moll = Mollifier::new(MollifierFamily::Sharp, 10.0);
        let mut s = TreeStepper::new(g, moll, 5, 1e-2, 1, DuhamelScheme::PiecewiseLinear, ProductRule::Dealiased);
        for _ in 0..5 {
            s.step();
        }
        let z = &s.z;
        let spread = z
            .samples()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        assert!((spread.1 - spread.0).abs() < 1e-12);
    }

    #[test]
    fn wick_powers_of_zero_field() {
        let g = TorusGrid::new(2, 8).unwrap();
        let z = RealField::zeros(g);
        let (w2, w3) = wick_powers(&z, 1.3, ProductRule::Dealiased);
        assert!((w2.samples()[0] + 1.3).abs() < 1e-15);
        assert_eq!(w3.linf_norm(), 0.0);
    }

    #[test]
    fn ou_path_nesting_is_exact() {
        // One step at dt with 2 substeps must equal two steps at dt/2.
        let g = TorusGrid::new(2, 8).unwrap();
        let mut coarse = OuPath::new(g, 99, 1e-2, 2);
        let mut fine = OuPath::new(g, 99, 5e-3, 1);
        coarse.advance();
        fine.advance();
        fine.advance();
        let err = coarse
            .state()
            .coefficients()
            .iter()
            .zip(fine.state().coefficients())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-13, "nesting defect {err}");
    }

    #[test]
    fn stationary_variance_of_mode_zero() {
        // Long trajectory of the k=0 mode: variance 1/(2·1) = 1/2.
        let g = TorusGrid::new(1, 4).unwrap();
        let moll = Mollifier::new(MollifierFamily::Sharp, 10.0);
        let dt = 0.05;
        let mut s = TreeStepper::new(g, moll, 11, dt, 1, DuhamelScheme::PiecewiseLinear, ProductRule::Plain);
        let mut sum2 = 0.0;
        let steps = 40_000;
        for _ in 0..steps {
            s.step();
            let v = s.z_spec.coefficients()[0].re;
            sum2 += v * v;
        }
        let var = sum2 / steps as f64;
        // effective sample count ~ T·2λ = steps·dt·2; tolerance 3 sigma-ish
        assert!((var - 0.5).abs() < 0.05, "var {var}");
    }

    #[test]
    fn batch_trees_match_stepper() {
        let g = TorusGrid::new(2, 8).unwrap();
        let moll = Mollifier::new(MollifierFamily::Sharp, 0.2);
        let dt = 1e-2;
        let ens = generate_ensemble(g, moll, 3, 0.1, dt, DuhamelScheme::PiecewiseLinear, ProductRule::Dealiased);
        let (w2, w3) = build_wick(&ens.z, ens.constants.a, ProductRule::Dealiased);
        let (i2, i3) = integrate_trees(&w2, &w3, DuhamelScheme::PiecewiseLinear);
        let m = ens.z.n_steps();
        assert!(i2.snapshot(m).sub(ens.i2.snapshot(m)).linf_norm() < 1e-12);
        assert!(i3.snapshot(m).sub(ens.i3.snapshot(m)).linf_norm() < 1e-12);
    }
}
