//! The solution pipeline: the auxiliary field Y, the coefficient fields
//! Z₀/Z₁/Z₂ of the expanded transformed equation, the mild solver for u,
//! reconstruction of φ, the direct fixed-δ solver (the cross-validation
//! oracle), and the frequency-split system.
//!
//! The transformed equation solved here is
//!   L u = −6∇I2·∇u − e^{−6I2}u³ + Z₂u² + Z₁u + Z₀,
//! with the coefficient expansion derived by binomial expansion of the
//! defining equation for u = e^{3I2}(φ−Z+I3) − Y and validated by the
//! discrete residual check and the transform–direct oracle.

use serde::Serialize;
use thiserror::Error;

use crate::field::{
    forward_transform, inverse_transform, RealField, SpectralField, TimeField,
};
use crate::grid::TorusGrid;
use crate::lp::{para_greater, para_less, partition_for, resonant};
use crate::spectral::{
    advance_duhamel, etd_step, gradient, product, DuhamelScheme, PicardOptions, ProductRule,
    StepError, StepWeights,
};
use crate::trees::{RenormConstants, TreeEnsemble, TreeStepper};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("time step failed even after halving dt: {0}")]
    Step(#[from] StepError),
}

/// Smooth initial data for the regular part: φ(0) = Z(0) + φ♯₀.
#[derive(Debug, Clone)]
pub struct InitialData {
    pub phi_sharp0: RealField,
}

/// Options shared by every time-stepping entry point.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub t_end: f64,
    pub dt: f64,
    /// Fine noise steps per solver step (dt-refinement comparisons keep the
    /// product dt/substeps fixed so all runs share one noise path).
    pub substeps: usize,
    pub scheme: DuhamelScheme,
    pub rule: ProductRule,
    pub picard: PicardOptions,
    /// L∞ threshold that raises the blow-up flag.
    pub blowup_threshold: f64,
    /// Keep every k-th snapshot (and norm row) in the returned trajectory.
    pub save_stride: usize,
    /// Hölder exponent for the recorded Besov norm trace (3/2 − ε).
    pub besov_alpha: f64,
}

impl SolverOptions {
    pub fn new(t_end: f64, dt: f64) -> Self {
        Self {
            t_end,
            dt,
            substeps: 1,
            scheme: DuhamelScheme::default(),
            rule: ProductRule::default(),
            picard: PicardOptions::default(),
            blowup_threshold: 1e6,
            save_stride: 1,
            besov_alpha: 1.5 - 0.05,
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round().max(1.0) as usize
    }

    /// Same run at half the step with the noise path preserved.
    pub fn halved(&self) -> Self {
        let mut o = self.clone();
        o.dt /= 2.0;
        o.substeps = (o.substeps / 2).max(1);
        o.save_stride *= 2;
        o
    }
}

/// One row of the norm trace (the norms.csv schema).
#[derive(Debug, Clone, Serialize)]
pub struct NormRow {
    pub t: f64,
    pub linf_u: f64,
    pub besov_u: f64,
    pub linf_phi: f64,
}

/// Output of a transformed solve (possibly decimated in time).
pub struct SolveResult {
    pub u: TimeField,
    pub v: TimeField,
    pub y: TimeField,
    pub phi: TimeField,
    /// Present when the run carried the direct solver in lockstep.
    pub phi_direct: Option<TimeField>,
    pub norms: Vec<NormRow>,
    pub blow_up: bool,
    /// First threshold-crossing time (the T* estimate).
    pub t_star: Option<f64>,
    pub constants: RenormConstants,
}

/// The coefficient fields of the expanded equation at one time.
#[derive(Debug, Clone)]
pub struct CoefficientSnapshot {
    pub z0: RealField,
    pub z1: RealField,
    pub z2: RealField,
    /// ∇I2 components (physical space); the drift is −6∇I2·∇u.
    pub grad_i2: Vec<RealField>,
    /// e^{−6I2}, the cubic multiplier.
    pub q2: RealField,
}

/// Coefficient trajectory (the batch form used by desk-scale solves; large
/// runs assemble snapshots on the fly instead).
pub struct CoefficientFields {
    pub z0: TimeField,
    pub z1: TimeField,
    pub z2: TimeField,
    pub grad_i2: Vec<TimeField>,
    pub q2: TimeField,
}

/// Expansion of Z₀, Z₁, Z₂ from one set of tree snapshots.
///
/// With P = e^{3I2}, Q = e^{−3I2}, the validated algebra is
///   Z₂ = 3Q(I3−Z) − 3Q²Y
///   Z₁ = −3I2 + 9(|∇I2|²−b/3) + 6ZI3 − 3I3² + 6QY(I3−Z) − 3Q²Y²
///   Z₀ = (−3I2+9(|∇I2|²−b/3))Y − 6(∇I2·∇Y − bPI3) − 3QZY² + 6ZI3Y
///        − 3PZI3² − Q²Y³ + 3QI3Y² − 3I3²Y + PI3³.
pub fn coefficient_snapshot(
    z: &RealField,
    i2_spec: &SpectralField,
    i3: &RealField,
    y_spec: &SpectralField,
    b: f64,
    rule: ProductRule,
) -> CoefficientSnapshot {
    let mut i2 = inverse_transform(i2_spec);
    let y = inverse_transform(y_spec);
    let mut p = i2.clone();
    p.map_inplace(|v| (3.0 * v).exp());
    let mut q = i2.clone();
    q.map_inplace(|v| (-3.0 * v).exp());
    let mut q2 = i2.clone();
    q2.map_inplace(|v| (-6.0 * v).exp());

    let grad_i2: Vec<RealField> = gradient(i2_spec)
        .iter()
        .map(inverse_transform)
        .collect();
    let grad_y: Vec<RealField> = gradient(y_spec).iter().map(inverse_transform).collect();

    // r3 = |∇I2|² − b/3
    let mut r3 = RealField::zeros(z.grid());
    for g in &grad_i2 {
        r3.axpy(1.0, &product(g, g, rule));
    }
    r3.map_inplace(|v| v - b / 3.0);

    // ∇I2·∇Y − b·P·I3
    let mut gradprod = RealField::zeros(z.grid());
    for (gi, gy) in grad_i2.iter().zip(&grad_y) {
        gradprod.axpy(1.0, &product(gi, gy, rule));
    }
    gradprod.axpy(-b, &product(&p, i3, rule));

    let i3mz = i3.sub(z);
    let y2 = product(&y, &y, rule);
    let y3 = product(&y2, &y, rule);
    let i3sq = product(i3, i3, rule);
    let zy2 = product(z, &y2, rule);
    let zi3 = product(z, i3, rule);
    let qy = product(&q, &y, rule);

    // Z₂
    let z2 = product(&q, &i3mz, rule)
        .scaled(3.0)
        .sub(&product(&q2, &y, rule).scaled(3.0));

    // Z₁
    let mut z1 = i2.scaled(-3.0);
    z1.axpy(9.0, &r3);
    z1.axpy(6.0, &zi3);
    z1.axpy(-3.0, &i3sq);
    z1.axpy(6.0, &product(&qy, &i3mz, rule));
    z1.axpy(-3.0, &product(&q2, &y2, rule));

    // Z₀
    i2.map_inplace(|v| -3.0 * v);
    let mut lead = i2; // −3I2
    lead.axpy(9.0, &r3); // −3I2 + 9r3
    let mut z0 = product(&lead, &y, rule);
    z0.axpy(-6.0, &gradprod);
    z0.axpy(-3.0, &product(&q, &zy2, rule));
    z0.axpy(6.0, &product(&zi3, &y, rule));
    z0.axpy(-3.0, &product(&p, &product(z, &i3sq, rule), rule));
    z0.axpy(-1.0, &product(&q2, &y3, rule));
    z0.axpy(3.0, &product(&q, &product(i3, &y2, rule), rule));
    z0.axpy(-3.0, &product(&i3sq, &y, rule));
    z0.axpy(1.0, &product(&p, &product(i3, &i3sq, rule), rule));

    CoefficientSnapshot {
        z0,
        z1,
        z2,
        grad_i2,
        q2,
    }
}

/// Right-hand side N(t, u) of the expanded equation, evaluated at one time.
pub fn transform_rhs(
    coeffs: &CoefficientSnapshot,
    u_spec: &SpectralField,
    rule: ProductRule,
) -> SpectralField {
    let u = inverse_transform(u_spec);
    let u2 = product(&u, &u, rule);
    let u3 = product(&u2, &u, rule);
    let mut acc = coeffs.z0.clone();
    acc.axpy(1.0, &product(&coeffs.z1, &u, rule));
    acc.axpy(1.0, &product(&coeffs.z2, &u2, rule));
    acc.axpy(-1.0, &product(&coeffs.q2, &u3, rule));
    for (gi, du) in coeffs.grad_i2.iter().zip(gradient(u_spec)) {
        acc.axpy(-6.0, &product(gi, &inverse_transform(&du), rule));
    }
    forward_transform(&acc)
}

/// Direct-equation right-hand side N(φ) = −φ³ + (3a−3b)φ.
fn direct_rhs(phi_spec: &SpectralField, constants: &RenormConstants, rule: ProductRule) -> SpectralField {
    let phi = inverse_transform(phi_spec);
    let phi2 = product(&phi, &phi, rule);
    let mut acc = product(&phi2, &phi, rule).scaled(-1.0);
    acc.axpy(3.0 * (constants.a - constants.b), &phi);
    forward_transform(&acc)
}

/// Everything visible to a per-step observer of [`run_transform`].
pub struct StepObservation<'a> {
    pub step: usize,
    pub t_new: f64,
    pub u_old: &'a SpectralField,
    pub u_new: &'a SpectralField,
    /// N(tₙ, uₙ) and N(tₙ₊₁, uₙ₊₁).
    pub n_old: &'a SpectralField,
    pub n_new: &'a SpectralField,
    pub phi_reconstructed: &'a RealField,
    pub phi_direct: Option<&'a RealField>,
}

/// Reconstruct φ = Z − I3 + e^{−3I2}(u + Y) from streaming state. The
/// multiplier is applied pointwise so the transform roundtrip is exact.
fn reconstruct_phi(stepper: &TreeStepper, u_spec: &SpectralField) -> RealField {
    let v = inverse_transform(&u_spec.add(&stepper.y_spec));
    let i3 = stepper.i3();
    let mut q = stepper.i2();
    q.map_inplace(|v| (-3.0 * v).exp());
    stepper.z.sub(&i3).add(&q.mul(&v))
}

struct RunningResult {
    u: Vec<RealField>,
    v: Vec<RealField>,
    y: Vec<RealField>,
    phi: Vec<RealField>,
    phi_direct: Vec<RealField>,
    norms: Vec<NormRow>,
    blow_up: bool,
    t_star: Option<f64>,
}

impl RunningResult {
    fn record(
        &mut self,
        opts: &SolverOptions,
        step: usize,
        stepper: &TreeStepper,
        u_spec: &SpectralField,
        phi: &RealField,
        phi_direct: Option<&RealField>,
    ) {
        let t = step as f64 * opts.dt;
        let u = inverse_transform(u_spec);
        if !self.blow_up {
            let worst = u.linf_norm().max(phi.linf_norm());
            if !worst.is_finite() || worst > opts.blowup_threshold {
                self.blow_up = true;
                self.t_star = Some(t);
            }
        }
        if step % opts.save_stride != 0 {
            return;
        }
        self.norms.push(NormRow {
            t,
            linf_u: u.linf_norm(),
            besov_u: crate::lp::besov_norm(&u, opts.besov_alpha),
            linf_phi: phi.linf_norm(),
        });
        let y = stepper.y();
        self.v.push(u.add(&y));
        self.u.push(u);
        self.y.push(y);
        self.phi.push(phi.clone());
        if let Some(pd) = phi_direct {
            self.phi_direct.push(pd.clone());
        }
    }

    fn finish(self, opts: &SolverOptions, constants: RenormConstants) -> SolveResult {
        let dt_saved = opts.dt * opts.save_stride as f64;
        SolveResult {
            u: TimeField::new(dt_saved, self.u),
            v: TimeField::new(dt_saved, self.v),
            y: TimeField::new(dt_saved, self.y),
            phi: TimeField::new(dt_saved, self.phi),
            phi_direct: if self.phi_direct.is_empty() {
                None
            } else {
                Some(TimeField::new(dt_saved, self.phi_direct))
            },
            norms: self.norms,
            blow_up: self.blow_up,
            t_star: self.t_star,
            constants,
        }
    }
}

/// Run the transformed solve (optionally with the direct solver in lockstep
/// on the same noise path), streaming: memory is O(N^d), independent of the
/// number of steps. The observer sees every step before decimation.
#[allow(clippy::too_many_arguments)]
pub fn run_transform(
    grid: TorusGrid,
    moll: crate::trees::Mollifier,
    constants: RenormConstants,
    seed: u64,
    initial: &InitialData,
    opts: &SolverOptions,
    with_direct: bool,
    mut observer: impl FnMut(&StepObservation),
) -> Result<SolveResult, SolveError> {
    let mut stepper = TreeStepper::with_constants(
        grid, moll, seed, opts.dt, opts.substeps, opts.scheme, opts.rule, constants,
    );
    let weights = StepWeights::new(grid, opts.dt);
    let n_steps = opts.n_steps();

    let mut u_spec = forward_transform(&initial.phi_sharp0);
    let mut coeffs = coefficient_snapshot(
        &stepper.z,
        &stepper.i2_spec,
        &stepper.i3(),
        &stepper.y_spec,
        stepper.constants.b,
        opts.rule,
    );
    let mut n_old = transform_rhs(&coeffs, &u_spec, opts.rule);

    let mut phi_spec = if with_direct {
        Some(forward_transform(
            &stepper.z.add(&initial.phi_sharp0),
        ))
    } else {
        None
    };
    let mut phi_n_old = phi_spec
        .as_ref()
        .map(|p| direct_rhs(p, &stepper.constants, opts.rule));

    let mut out = RunningResult {
        u: vec![],
        v: vec![],
        y: vec![],
        phi: vec![],
        phi_direct: vec![],
        norms: vec![],
        blow_up: false,
        t_star: None,
    };
    {
        let phi0 = reconstruct_phi(&stepper, &u_spec);
        let pd = phi_spec.as_ref().map(inverse_transform);
        out.record(opts, 0, &stepper, &u_spec, &phi0, pd.as_ref());
    }

    for step in 0..n_steps {
        stepper.step();
        coeffs = coefficient_snapshot(
            &stepper.z,
            &stepper.i2_spec,
            &stepper.i3(),
            &stepper.y_spec,
            stepper.constants.b,
            opts.rule,
        );
        let u_old = u_spec.clone();
        let n_prev = n_old.clone();
        let (u_new, n_new) = etd_step(
            &u_spec,
            &n_old,
            None,
            &weights,
            opts.scheme,
            opts.picard,
            |u| transform_rhs(&coeffs, u, opts.rule),
        )?;

        let mut phi_direct_real = None;
        if let (Some(p), Some(pn)) = (phi_spec.as_mut(), phi_n_old.as_mut()) {
            let (p_new, pn_new) = etd_step(
                p,
                pn,
                Some(&stepper.last_innovation),
                &weights,
                opts.scheme,
                opts.picard,
                |phi| direct_rhs(phi, &stepper.constants, opts.rule),
            )?;
            *p = p_new;
            *pn = pn_new;
            phi_direct_real = Some(inverse_transform(p));
        }

        let phi_rec = reconstruct_phi(&stepper, &u_new);
        observer(&StepObservation {
            step: step + 1,
            t_new: (step + 1) as f64 * opts.dt,
            u_old: &u_old,
            u_new: &u_new,
            n_old: &n_prev,
            n_new: &n_new,
            phi_reconstructed: &phi_rec,
            phi_direct: phi_direct_real.as_ref(),
        });
        u_spec = u_new;
        n_old = n_new;
        out.record(opts, step + 1, &stepper, &u_spec, &phi_rec, phi_direct_real.as_ref());
        if out.blow_up {
            break;
        }
    }
    Ok(out.finish(opts, stepper.constants))
}

/// Retry-once wrapper: on Picard non-contraction the whole solve is rerun at
/// dt/2 on the same noise path (substeps doubled).
pub fn run_transform_with_retry(
    grid: TorusGrid,
    moll: crate::trees::Mollifier,
    constants: RenormConstants,
    seed: u64,
    initial: &InitialData,
    opts: &SolverOptions,
    with_direct: bool,
) -> Result<SolveResult, SolveError> {
    match run_transform(grid, moll, constants, seed, initial, opts, with_direct, |_| {}) {
        Err(SolveError::Step(StepError::PicardNonContraction { .. })) => {
            let mut halved = opts.clone();
            halved.dt /= 2.0;
            halved.substeps *= 2;
            halved.save_stride *= 2;
            run_transform(grid, moll, constants, seed, initial, &halved, with_direct, |_| {})
        }
        other => other,
    }
}

/// Direct fixed-δ solve of the renormalized equation, standalone: returns
/// the φ trajectory (decimated by `save_stride`) and the blow-up flag/time.
pub fn solve_direct_phi(
    grid: TorusGrid,
    moll: crate::trees::Mollifier,
    constants: RenormConstants,
    seed: u64,
    initial: &InitialData,
    opts: &SolverOptions,
) -> Result<(TimeField, bool, Option<f64>), SolveError> {
    let mut ou = crate::trees::OuPath::new(grid, seed, opts.dt, opts.substeps);
    let chi = moll.damping(grid);
    let weights = StepWeights::new(grid, opts.dt);
    let mut z0 = ou.state().clone();
    z0.weight_inplace(&chi);
    let mut phi_spec = forward_transform(
        &inverse_transform(&z0).add(&initial.phi_sharp0),
    );
    let mut n_old = direct_rhs(&phi_spec, &constants, opts.rule);
    let mut snaps = vec![inverse_transform(&phi_spec)];
    let mut blow_up = false;
    let mut t_star = None;
    for step in 0..opts.n_steps() {
        let mut eta = ou.advance();
        eta.weight_inplace(&chi);
        let (p_new, pn_new) = etd_step(
            &phi_spec,
            &n_old,
            Some(&eta),
            &weights,
            opts.scheme,
            opts.picard,
            |phi| direct_rhs(phi, &constants, opts.rule),
        )?;
        phi_spec = p_new;
        n_old = pn_new;
        let phi = inverse_transform(&phi_spec);
        let t = (step + 1) as f64 * opts.dt;
        if !blow_up && (!phi.is_finite() || phi.linf_norm() > opts.blowup_threshold) {
            blow_up = true;
            t_star = Some(t);
        }
        if (step + 1) % opts.save_stride == 0 {
            snaps.push(phi);
        }
        if blow_up {
            break;
        }
    }
    Ok((
        TimeField::new(opts.dt * opts.save_stride as f64, snaps),
        blow_up,
        t_star,
    ))
}

/// The naive fixed-δ Y source 3e^{3I2}(I3·⟦Z²⟧ − b(Z+I3)) for one snapshot.
pub fn y_source_naive(
    z: &RealField,
    i2: &RealField,
    i3: &RealField,
    w2: &RealField,
    b: f64,
    rule: ProductRule,
) -> RealField {
    let mut p = i2.clone();
    p.map_inplace(|v| (3.0 * v).exp());
    let inner = product(i3, w2, rule).sub(&z.add(i3).scaled(b));
    product(&p, &inner, rule).scaled(3.0)
}

/// Tree-assembled Y source: resonant part substituted by the renormalized
/// object R4 = I3⊙⟦Z²⟧ − bZ, paraproduct parts literal, remaining
/// counterterm −3b e^{3I2} I3 literal. Equals the naive source exactly at
/// fixed δ (Bony identity plus cancellation of ±bZ).
pub fn y_source_assembled(
    z: &RealField,
    i2: &RealField,
    i3: &RealField,
    w2: &RealField,
    b: f64,
    rule: ProductRule,
) -> RealField {
    let mut p = i2.clone();
    p.map_inplace(|v| (3.0 * v).exp());
    let r4 = resonant(i3, w2, rule).zip_with(z, |r, zz| r - b * zz);
    let mut inner = para_less(i3, w2, rule);
    inner.axpy(1.0, &para_greater(i3, w2, rule));
    inner.axpy(1.0, &r4);
    inner.axpy(-b, i3);
    product(&p, &inner, rule).scaled(3.0)
}

/// Y = J(source) over a stored ensemble (batch form).
pub fn build_y(ensemble: &TreeEnsemble, rule: ProductRule, scheme: DuhamelScheme) -> TimeField {
    let grid = ensemble.grid;
    let b = ensemble.constants.b;
    let dt = ensemble.z.dt();
    let w = StepWeights::new(grid, dt);
    let src = |m: usize| {
        forward_transform(&y_source_naive(
            ensemble.z.snapshot(m),
            ensemble.i2.snapshot(m),
            ensemble.i3.snapshot(m),
            ensemble.w2.snapshot(m),
            b,
            rule,
        ))
    };
    let mut acc = SpectralField::zeros(grid);
    let mut out = vec![RealField::zeros(grid)];
    let mut prev = src(0);
    for m in 0..ensemble.z.n_steps() {
        let next = src(m + 1);
        acc = advance_duhamel(&acc, &prev, &next, &w, scheme);
        prev = next;
        out.push(inverse_transform(&acc));
    }
    TimeField::new(dt, out)
}

/// The mixed gradient object ∇I2·∇Y − b e^{3I2} I3 (batch), with the R3
/// tree substituted where the renormalized assembly places |∇I2|² − b/3.
pub fn build_grad_product(ensemble: &TreeEnsemble, y: &TimeField, rule: ProductRule) -> TimeField {
    let grid = ensemble.grid;
    let b = ensemble.constants.b;
    let mut out = Vec::with_capacity(y.n_steps() + 1);
    for m in 0..=y.n_steps() {
        let gi = gradient(&forward_transform(ensemble.i2.snapshot(m)));
        let gy = gradient(&forward_transform(y.snapshot(m)));
        let mut acc = RealField::zeros(grid);
        for (a, b_) in gi.iter().zip(&gy) {
            acc.axpy(
                1.0,
                &product(&inverse_transform(a), &inverse_transform(b_), rule),
            );
        }
        let mut p = ensemble.i2.snapshot(m).clone();
        p.map_inplace(|v| (3.0 * v).exp());
        acc.axpy(-b, &product(&p, ensemble.i3.snapshot(m), rule));
        out.push(acc);
    }
    TimeField::new(y.dt(), out)
}

/// Batch coefficient assembly over a stored ensemble.
pub fn assemble_coefficients(
    ensemble: &TreeEnsemble,
    y: &TimeField,
    rule: ProductRule,
) -> CoefficientFields {
    let b = ensemble.constants.b;
    let d = ensemble.grid.dim();
    let mut z0 = vec![];
    let mut z1 = vec![];
    let mut z2 = vec![];
    let mut grads: Vec<Vec<RealField>> = (0..d).map(|_| vec![]).collect();
    let mut q2 = vec![];
    for m in 0..=y.n_steps() {
        let snap = coefficient_snapshot(
            ensemble.z.snapshot(m),
            &forward_transform(ensemble.i2.snapshot(m)),
            ensemble.i3.snapshot(m),
            &forward_transform(y.snapshot(m)),
            b,
            rule,
        );
        z0.push(snap.z0);
        z1.push(snap.z1);
        z2.push(snap.z2);
        for (axis, g) in snap.grad_i2.into_iter().enumerate() {
            grads[axis].push(g);
        }
        q2.push(snap.q2);
    }
    let dt = y.dt();
    CoefficientFields {
        z0: TimeField::new(dt, z0),
        z1: TimeField::new(dt, z1),
        z2: TimeField::new(dt, z2),
        grad_i2: grads.into_iter().map(|g| TimeField::new(dt, g)).collect(),
        q2: TimeField::new(dt, q2),
    }
}

fn coefficient_at(coeffs: &CoefficientFields, m: usize) -> CoefficientSnapshot {
    CoefficientSnapshot {
        z0: coeffs.z0.snapshot(m).clone(),
        z1: coeffs.z1.snapshot(m).clone(),
        z2: coeffs.z2.snapshot(m).clone(),
        grad_i2: coeffs.grad_i2.iter().map(|g| g.snapshot(m).clone()).collect(),
        q2: coeffs.q2.snapshot(m).clone(),
    }
}

/// Batch mild solve of the expanded equation against stored coefficients.
/// Returns the u trajectory on the coefficient time grid.
pub fn solve_u(
    coeffs: &CoefficientFields,
    initial: &InitialData,
    picard: PicardOptions,
    scheme: DuhamelScheme,
    rule: ProductRule,
) -> Result<TimeField, SolveError> {
    let grid = initial.phi_sharp0.grid();
    let dt = coeffs.z0.dt();
    let weights = StepWeights::new(grid, dt);
    let mut u_spec = forward_transform(&initial.phi_sharp0);
    let mut snap = coefficient_at(coeffs, 0);
    let mut n_old = transform_rhs(&snap, &u_spec, rule);
    let mut out = vec![initial.phi_sharp0.clone()];
    for m in 0..coeffs.z0.n_steps() {
        snap = coefficient_at(coeffs, m + 1);
        let (u_new, n_new) = etd_step(&u_spec, &n_old, None, &weights, scheme, picard, |u| {
            transform_rhs(&snap, u, rule)
        })?;
        u_spec = u_new;
        n_old = n_new;
        out.push(inverse_transform(&u_spec));
    }
    Ok(TimeField::new(dt, out))
}

/// Smallest n ≥ 1 with 2^{−n(3/2−2ε)}(‖u₁+u₂‖₀ ∨ 1) ≤ 1.
pub fn choose_n(u1: &TimeField, u2: &TimeField, eps: f64) -> usize {
    let norm = u1
        .zip_with(u2, |a, b| a.add(b))
        .expect("shared time grid")
        .max_over_time(|f| f.linf_norm())
        .max(1.0);
    let gamma = 1.5 - 2.0 * eps;
    let mut n = 1usize;
    while f64::powf(2.0, -(n as f64) * gamma) * norm > 1.0 {
        n += 1;
    }
    n
}

/// The singular forcing U₁ = u²≺Δ_{>2n}Z₂ + u≺Δ_{>n}Z₁ + Z₀.
pub fn split_u1_forcing(
    snap: &CoefficientSnapshot,
    u: &RealField,
    n: usize,
    rule: ProductRule,
) -> RealField {
    let part = partition_for(u.grid());
    let tail = |j: usize, f: &RealField| {
        inverse_transform(&part.block_gt(j as i32, &forward_transform(f)))
    };
    let u2 = product(u, u, rule);
    let mut acc = para_less(&u2, &tail(2 * n, &snap.z2), rule);
    acc.axpy(1.0, &para_less(u, &tail(n, &snap.z1), rule));
    acc.axpy(1.0, &snap.z0);
    acc
}

/// The regular forcing U₂ of the split system (everything except the cubic
/// self-interaction of u₂ and the full drift on u₂).
pub fn split_u2_forcing(
    snap: &CoefficientSnapshot,
    u1_spec: &SpectralField,
    u2_field: &RealField,
    n: usize,
    rule: ProductRule,
) -> RealField {
    let grid = u2_field.grid();
    let part = partition_for(grid);
    let low = |j: usize, f: &RealField| {
        inverse_transform(&part.block_leq(j as i32, &forward_transform(f)))
    };
    let u1 = inverse_transform(u1_spec);
    let u = u1.add(u2_field);
    let u2sq = product(&u, &u, rule);

    // −6 ∇u₁ ≽ ∇I2
    let mut acc = RealField::zeros(grid);
    for (du1, gi) in gradient(u1_spec).iter().zip(&snap.grad_i2) {
        let du1 = inverse_transform(du1);
        acc.axpy(-6.0, &para_greater(&du1, gi, rule));
        acc.axpy(-6.0, &resonant(&du1, gi, rule));
    }
    // −e^{−6I2}(u³ − u₂³)
    let u3 = product(&u2sq, &u, rule);
    let u2cube = product(&product(u2_field, u2_field, rule), u2_field, rule);
    acc.axpy(-1.0, &product(&snap.q2, &u3.sub(&u2cube), rule));
    // + u²≺Δ_{≤2n}Z₂ + u≺Δ_{≤n}Z₁ + u²≽Z₂ + u≽Z₁
    acc.axpy(1.0, &para_less(&u2sq, &low(2 * n, &snap.z2), rule));
    acc.axpy(1.0, &para_less(&u, &low(n, &snap.z1), rule));
    acc.axpy(1.0, &para_greater(&u2sq, &snap.z2, rule));
    acc.axpy(1.0, &resonant(&u2sq, &snap.z2, rule));
    acc.axpy(1.0, &para_greater(&u, &snap.z1, rule));
    acc.axpy(1.0, &resonant(&u, &snap.z1, rule));
    acc
}

/// Coupled mild solve of the frequency-split system:
///   (L + 6∇I2≻∇) u₁ = U₁,   (L + 6∇I2·∇) u₂ = −e^{−6I2}u₂³ + U₂,
/// with u₁(0) = φ♯₀, u₂(0) = 0. Both drifts are treated inside the joint
/// Picard iteration of each step.
pub fn solve_split(
    coeffs: &CoefficientFields,
    initial: &InitialData,
    n: usize,
    picard: PicardOptions,
    scheme: DuhamelScheme,
    rule: ProductRule,
) -> Result<(TimeField, TimeField), SolveError> {
    assert!(n >= 1);
    let grid = initial.phi_sharp0.grid();
    let dt = coeffs.z0.dt();
    let weights = StepWeights::new(grid, dt);

    let rhs1 = |snap: &CoefficientSnapshot, u1s: &SpectralField, u2f: &RealField| {
        let mut acc = split_u1_forcing(snap, &inverse_transform(u1s).add(u2f), n, rule);
        for (du1, gi) in gradient(u1s).iter().zip(&snap.grad_i2) {
            acc.axpy(-6.0, &para_greater(gi, &inverse_transform(du1), rule));
        }
        forward_transform(&acc)
    };
    let rhs2 = |snap: &CoefficientSnapshot, u1s: &SpectralField, u2s: &SpectralField| {
        let u2f = inverse_transform(u2s);
        let mut acc = split_u2_forcing(snap, u1s, &u2f, n, rule);
        let cube = product(&product(&u2f, &u2f, rule), &u2f, rule);
        acc.axpy(-1.0, &product(&snap.q2, &cube, rule));
        for (du2, gi) in gradient(u2s).iter().zip(&snap.grad_i2) {
            acc.axpy(-6.0, &product(gi, &inverse_transform(du2), rule));
        }
        forward_transform(&acc)
    };

    let mut u1 = forward_transform(&initial.phi_sharp0);
    let mut u2 = SpectralField::zeros(grid);
    let mut snap = coefficient_at(coeffs, 0);
    let mut n1_old = rhs1(&snap, &u1, &inverse_transform(&u2));
    let mut n2_old = rhs2(&snap, &u1, &u2);
    let mut out1 = vec![initial.phi_sharp0.clone()];
    let mut out2 = vec![RealField::zeros(grid)];

    for m in 0..coeffs.z0.n_steps() {
        snap = coefficient_at(coeffs, m + 1);
        // joint Picard on the pair
        let base = |u_spec: &SpectralField, n_old: &SpectralField| {
            let mut b = u_spec.weighted(&weights.decay);
            if scheme == DuhamelScheme::PiecewiseLinear {
                for ((bb, &s0), (&w0, &w1)) in b
                    .coefficients_mut()
                    .iter_mut()
                    .zip(n_old.coefficients())
                    .zip(weights.i0.iter().zip(&weights.i1))
                {
                    *bb += s0 * (w0 - w1);
                }
            }
            b
        };
        let endpoint: &[f64] = match scheme {
            DuhamelScheme::PiecewiseConstant => &weights.i0,
            DuhamelScheme::PiecewiseLinear => &weights.i1,
        };
        let base1 = base(&u1, &n1_old);
        let base2 = base(&u2, &n2_old);
        let mut it1 = u1.clone();
        let mut it2 = u2.clone();
        let mut converged = false;
        for _ in 0..picard.max_iter {
            let n1 = rhs1(&snap, &it1, &inverse_transform(&it2));
            let n2 = rhs2(&snap, &it1, &it2);
            let mut next1 = base1.clone();
            let mut next2 = base2.clone();
            for ((o, &s), &we) in next1
                .coefficients_mut()
                .iter_mut()
                .zip(n1.coefficients())
                .zip(endpoint)
            {
                *o += s * we;
            }
            for ((o, &s), &we) in next2
                .coefficients_mut()
                .iter_mut()
                .zip(n2.coefficients())
                .zip(endpoint)
            {
                *o += s * we;
            }
            if !next1.is_finite() || !next2.is_finite() {
                return Err(SolveError::Step(StepError::NonFinite));
            }
            let d1 = inverse_transform(&next1.sub(&it1)).linf_norm();
            let d2 = inverse_transform(&next2.sub(&it2)).linf_norm();
            it1 = next1;
            it2 = next2;
            if d1.max(d2) < picard.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(SolveError::Step(StepError::PicardNonContraction {
                tol: picard.tol,
                max_iter: picard.max_iter,
            }));
        }
        u1 = it1;
        u2 = it2;
        n1_old = rhs1(&snap, &u1, &inverse_transform(&u2));
        n2_old = rhs2(&snap, &u1, &u2);
        out1.push(inverse_transform(&u1));
        out2.push(inverse_transform(&u2));
    }
    Ok((TimeField::new(dt, out1), TimeField::new(dt, out2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trees::{generate_ensemble, Mollifier, MollifierFamily};

    fn quiet_constants() -> RenormConstants {
        RenormConstants {
            a: 0.0,
            b: 0.0,
            delta: 1.0,
            family: MollifierFamily::Sharp,
        }
    }

    /// Closed form for φ′ = −φ − φ³, φ(0) = c.
    fn logistic_decay(c: f64, t: f64) -> f64 {
        c * (-t).exp() / (1.0 + c * c * (1.0 - (-2.0 * t).exp())).sqrt()
    }

    #[test]
    fn direct_solver_matches_scalar_closed_form() {
        // Noise off is emulated by a mollifier keeping only k = 0 plus zero
        // constants and a seed-independent check of the *deviation* from the
        // constant solution... simplest: δ huge keeps k=0 noise, so instead
        // we verify against the constant-mode ODE with the noise
        // contribution removed by setting χ ≡ 0 via an impossible cutoff.
        let g = TorusGrid::new(2, 8).unwrap();
        let c = 0.8;
        // sharp cutoff with δ so large that even k=0 is kept — we need noise
        // OFF entirely, so use a gaussian with enormous δ: χ(0)=1 always.
        // Instead drive the transform solver with zero coefficients below;
        // here run the scalar check through solve_u.
        let dt = 1e-3;
        let steps = 250;
        let zero = RealField::zeros(g);
        let zf = TimeField::new(dt, vec![zero.clone(); steps + 1]);
        let coeffs = CoefficientFields {
            z0: zf.clone(),
            z1: zf.clone(),
            z2: zf.clone(),
            grad_i2: (0..2).map(|_| zf.clone()).collect(),
            q2: TimeField::new(dt, vec![RealField::constant(g, 1.0); steps + 1]),
        };
        let initial = InitialData {
            phi_sharp0: RealField::constant(g, c),
        };
        let u = solve_u(
            &coeffs,
            &initial,
            PicardOptions::default(),
            DuhamelScheme::PiecewiseLinear,
            ProductRule::Plain,
        )
        .unwrap();
        let t = dt * steps as f64;
        let got = u.snapshot(steps).samples()[0];
        let expect = logistic_decay(c, t);
        assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
    }

    #[test]
    fn zero_data_zero_forcing_stays_zero() {
        let g = TorusGrid::new(2, 8).unwrap();
        let dt = 1e-2;
        let steps = 10;
        let zero = RealField::zeros(g);
        let zf = TimeField::new(dt, vec![zero.clone(); steps + 1]);
        // Z₁, Z₂ arbitrary (here random-ish constants), Z₀ ≡ 0.
        let coeffs = CoefficientFields {
            z0: zf.clone(),
            z1: TimeField::new(dt, vec![RealField::constant(g, 0.3); steps + 1]),
            z2: TimeField::new(dt, vec![RealField::constant(g, -0.7); steps + 1]),
            grad_i2: (0..2).map(|_| zf.clone()).collect(),
            q2: TimeField::new(dt, vec![RealField::constant(g, 1.0); steps + 1]),
        };
        let initial = InitialData {
            phi_sharp0: RealField::zeros(g),
        };
        let u = solve_u(
            &coeffs,
            &initial,
            PicardOptions::default(),
            DuhamelScheme::PiecewiseLinear,
            ProductRule::Plain,
        )
        .unwrap();
        assert_eq!(u.max_over_time(|f| f.linf_norm()), 0.0);
    }

    #[test]
    fn y_sources_agree_at_fixed_delta() {
        let g = TorusGrid::new(2, 16).unwrap();
        let moll = Mollifier::new(MollifierFamily::Sharp, 0.3);
        let ens = generate_ensemble(
            g,
            moll,
            7,
            0.05,
            5e-3,
            DuhamelScheme::PiecewiseLinear,
            ProductRule::Dealiased,
        );
        let m = ens.z.n_steps();
        let naive = y_source_naive(
            ens.z.snapshot(m),
            ens.i2.snapshot(m),
            ens.i3.snapshot(m),
            ens.w2.snapshot(m),
            ens.constants.b,
            ProductRule::Dealiased,
        );
        let assembled = y_source_assembled(
            ens.z.snapshot(m),
            ens.i2.snapshot(m),
            ens.i3.snapshot(m),
            ens.w2.snapshot(m),
            ens.constants.b,
            ProductRule::Dealiased,
        );
        let err = naive.sub(&assembled).linf_norm();
        assert!(err < 1e-10, "Y source mismatch {err}");
    }

    #[test]
    fn transform_roundtrip_exact() {
        let g = TorusGrid::new(3, 8).unwrap();
        let moll = Mollifier::new(MollifierFamily::Sharp, 0.3);
        let mut stepper = TreeStepper::new(
            g,
            moll,
            21,
            1e-2,
            1,
            DuhamelScheme::PiecewiseLinear,
            ProductRule::Dealiased,
        );
        for _ in 0..5 {
            stepper.step();
        }
        let mut p = stepper.i2();
        p.map_inplace(|v| (3.0 * v).exp());
        let mut q = stepper.i2();
        q.map_inplace(|v| (-3.0 * v).exp());
        let f = RealField::from_fn(g, |x| (2.0 * std::f64::consts::PI * x[0]).cos() + 0.3);
        let back = q.mul(&p.mul(&f));
        assert!(back.sub(&f).linf_norm() < 1e-12);
    }

    #[test]
    fn choose_n_examples() {
        let g = TorusGrid::new(1, 8).unwrap();
        let dt = 0.1;
        let small = TimeField::new(dt, vec![RealField::constant(g, 0.4); 2]);
        let zero = TimeField::new(dt, vec![RealField::zeros(g); 2]);
        assert_eq!(choose_n(&small, &zero, 0.05), 1);
        let gamma = 1.5 - 2.0 * 0.05;
        let big = TimeField::new(dt, vec![RealField::constant(g, f64::powf(2.0, 3.0 * gamma)); 2]);
        assert_eq!(choose_n(&big, &zero, 0.05), 3);
    }

    #[test]
    fn transform_run_with_zero_noise_constants() {
        // Mollifier keeping only k=0 → Z is the scalar OU path; with the
        // computed (a, b) the run must stay finite and reconstruct φ with
        // v = u + Y exactly snapshot-wise.
        let g = TorusGrid::new(2, 8).unwrap();
        let moll = Mollifier::new(MollifierFamily::Sharp, 10.0);
        let a = crate::trees::compute_a(g, &moll);
        let b = crate::trees::compute_b(g, &moll, ProductRule::Plain);
        let constants = RenormConstants {
            a,
            b,
            delta: moll.delta,
            family: moll.family,
        };
        let mut opts = SolverOptions::new(0.1, 1e-3);
        opts.rule = ProductRule::Plain;
        let initial = InitialData {
            phi_sharp0: RealField::constant(g, 0.5),
        };
        let res = run_transform(g, moll, constants, 4, &initial, &opts, true, |_| {}).unwrap();
        assert!(!res.blow_up);
        // v = u + Y snapshot-wise by construction; check a middle snapshot.
        let m = res.u.n_steps() / 2;
        let v = res.u.snapshot(m).add(res.y.snapshot(m));
        assert!(v.sub(res.v.snapshot(m)).linf_norm() < 1e-14);
        // direct and reconstructed φ close at this trivial resolution
        let pd = res.phi_direct.as_ref().unwrap();
        let diff = res
            .phi
            .zip_with(pd, |a, b| a.sub(b))
            .unwrap()
            .max_over_time(|f| f.linf_norm());
        assert!(diff < 1e-3, "oracle diff {diff}");
        let _ = quiet_constants();
    }
}
