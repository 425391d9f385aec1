//! End-to-end acceptance suite. Each test prints one summary line
//! (`criterion NN: pass — ...`) and asserts the corresponding property, so
//! the harness output doubles as the acceptance report.

use phi4::field::{forward_transform, inverse_transform, RealField, TimeField};
use phi4::grid::TorusGrid;
use phi4::io::{decode_snapshot, encode_snapshot, SnapshotPayload};
use phi4::lab::{
    check_interpolation, check_max_principle, check_paraproduct_linf, check_paraproduct_neg,
    check_product, check_schauder, check_schauder_pointwise, check_semigroup, check_u_bounds,
    delta_convergence_study, global_bound_study, linear_fit, monte_carlo_z_variance,
    random_holder_field, wick_necessity_study,
};
use phi4::lp::{para_greater, para_less, partition_for, resonant};
use phi4::solver::{
    assemble_coefficients, build_y, choose_n, run_transform, solve_split, solve_u, InitialData,
    SolverOptions,
};
use phi4::spectral::{DuhamelScheme, PicardOptions, ProductRule};
use phi4::trees::{
    compute_a, compute_b, generate_ensemble_with, regularity_report, Mollifier, MollifierFamily,
    RenormConstants,
};

fn sharp(delta: f64) -> Mollifier {
    Mollifier::new(MollifierFamily::Sharp, delta)
}

fn constants_for(grid: TorusGrid, moll: Mollifier, rule: ProductRule) -> RenormConstants {
    RenormConstants {
        a: compute_a(grid, &moll),
        b: compute_b(grid, &moll, rule),
        delta: moll.delta,
        family: moll.family,
    }
}

fn cos_profile(grid: TorusGrid, magnitude: f64) -> RealField {
    let two_pi = 2.0 * std::f64::consts::PI;
    RealField::from_fn(grid, |x| {
        let mut v = (two_pi * x[0]).cos();
        if grid.dim() > 1 {
            v *= (two_pi * x[1]).cos();
        }
        magnitude * (0.5 + 0.5 * v)
    })
}

/// Criterion 1: the transformed solve, pushed back through φ = Z − I3 +
/// e^{−3I2}(u+Y), matches the direct renormalized solve on the same noise
/// path, and the gap shrinks at first order in dt.
#[test]
fn criterion_01_transform_direct_oracle() {
    let grid = TorusGrid::new(3, 32).unwrap();
    let moll = sharp(0.125);
    // Plain products: per-product dealiasing is non-associative, and the two
    // routes group the cubic differently, which would leave an O(1e-3) floor
    // unrelated to dt.
    let rule = ProductRule::Plain;
    let constants = constants_for(grid, moll, rule);
    let initial = InitialData {
        phi_sharp0: cos_profile(grid, 1.0),
    };
    let seed = 11;

    let run = |opts: &SolverOptions| {
        let mut max_diff = 0.0f64;
        let mut max_sup = 0.0f64;
        let res = run_transform(grid, moll, constants, seed, &initial, opts, true, |obs| {
            let direct = obs.phi_direct.expect("lockstep direct solve");
            max_diff = max_diff.max(obs.phi_reconstructed.sub(direct).linf_norm());
            max_sup = max_sup.max(direct.linf_norm());
        })
        .expect("solve completes");
        assert!(!res.blow_up, "no blow-up expected");
        (max_diff, max_sup)
    };

    let mut opts = SolverOptions::new(0.25, 5e-4);
    opts.substeps = 2; // fine noise grid shared with the halved run
    opts.rule = rule;
    opts.save_stride = 100;
    let (diff, sup) = run(&opts);
    let (diff_half, _) = run(&opts.halved());

    let rel = diff / (1.0 + sup);
    let ratio = diff / diff_half;
    println!(
        "criterion 01: rel diff {rel:.3e} (<= 5e-2), halving ratio {ratio:.3} (>= 1.8)"
    );
    assert!(rel <= 5e-2, "relative difference {rel}");
    assert!(ratio >= 1.8, "halving ratio {ratio}");
}

/// Criterion 2: the discrete residual of the expanded equation along the
/// solved u decreases at order >= 1 under dt-refinement.
#[test]
fn criterion_02_expansion_residual_order() {
    let grid = TorusGrid::new(3, 16).unwrap();
    let moll = sharp(0.25);
    let rule = ProductRule::default();
    let constants = constants_for(grid, moll, rule);
    let initial = InitialData {
        phi_sharp0: cos_profile(grid, 1.0),
    };
    let lambdas = grid.lambdas();
    let mut xs = vec![];
    let mut ys = vec![];
    for (dt, substeps) in [(4e-3, 4usize), (2e-3, 2), (1e-3, 1)] {
        let mut opts = SolverOptions::new(0.08, dt);
        opts.substeps = substeps;
        opts.save_stride = 1000;
        let mut max_res = 0.0f64;
        run_transform(grid, moll, constants, 7, &initial, &opts, false, |obs| {
            // Trapezoidal residual of du/dt + λu = N(u) per mode.
            let mut res = obs.u_new.clone();
            for (idx, c) in res.coefficients_mut().iter_mut().enumerate() {
                let u0 = obs.u_old.coefficients()[idx];
                let u1 = obs.u_new.coefficients()[idx];
                let n0 = obs.n_old.coefficients()[idx];
                let n1 = obs.n_new.coefficients()[idx];
                *c = (u1 - u0) / dt + lambdas[idx] * (u0 + u1) / 2.0 - (n0 + n1) / 2.0;
            }
            max_res = max_res.max(inverse_transform(&res).linf_norm());
        })
        .expect("solve completes");
        xs.push(dt.ln());
        ys.push(max_res.ln());
    }
    let (order, _, r2) = linear_fit(&xs, &ys);
    println!("criterion 02: residual order {order:.3} (>= 1, fit r2 {r2:.4})");
    assert!(order >= 1.0, "residual order {order}");
}

/// Criterion 3: exact algebraic identities on 100 random fields each —
/// Bony decomposition, partition of unity, block bound with constant 1,
/// transform and snapshot roundtrips.
#[test]
fn criterion_03_exact_identities() {
    let grid = TorusGrid::new(3, 16).unwrap();
    let part = partition_for(grid);
    let tol = 1e-10;
    assert!(part.partition_defect() <= tol, "partition of unity");
    for i in 0..100u64 {
        let f = random_holder_field(grid, 0.4, i, "acc3-f");
        let g = random_holder_field(grid, -0.4, i, "acc3-g");
        // Bony: f·g = f≺g + f≻g + f⊙g exactly (no truncation anywhere).
        let bony = para_less(&f, &g, ProductRule::Plain)
            .add(&para_greater(&f, &g, ProductRule::Plain))
            .add(&resonant(&f, &g, ProductRule::Plain));
        let defect = bony.sub(&f.mul(&g)).linf_norm();
        assert!(defect <= tol * (1.0 + f.linf_norm() * g.linf_norm()), "bony {defect}");
        // Block bound ‖Δ_j f‖_∞ ≤ ‖f‖_∞ with constant 1.
        let sup = f.linf_norm();
        for m in part.block_sup_norms(&forward_transform(&f)) {
            assert!(m <= sup * (1.0 + tol), "block bound {m} vs {sup}");
        }
        // Transform roundtrip φ ↔ u with random tree fields, pointwise.
        let z = random_holder_field(grid, 0.3, i, "acc3-z");
        let i2 = random_holder_field(grid, 1.0, i, "acc3-i2").scaled(0.3);
        let i3 = random_holder_field(grid, 0.5, i, "acc3-i3");
        let y = random_holder_field(grid, 1.0, i, "acc3-y");
        let phi = &f;
        let u = phi
            .sub(&z)
            .add(&i3)
            .zip_with(&i2, |v, w| v * (3.0 * w).exp())
            .sub(&y);
        let back = u
            .add(&y)
            .zip_with(&i2, |v, w| v * (-3.0 * w).exp())
            .add(&z)
            .sub(&i3);
        let round = back.sub(phi).linf_norm();
        assert!(round <= tol * (1.0 + phi.linf_norm()), "transform roundtrip {round}");
        // Snapshot roundtrip, bit-exact.
        let bytes = encode_snapshot(0.5, &SnapshotPayload::Real(f.clone()));
        match decode_snapshot(&bytes).expect("decodes").payload {
            SnapshotPayload::Real(rf) => assert_eq!(rf.samples(), f.samples()),
            _ => panic!("payload kind"),
        }
    }
    println!("criterion 03: all identities exact to {tol:.0e} on 100 fields");
}

/// Criterion 4: the renormalization constants — a against Monte Carlo and
/// its δ^{-1} divergence rate, b against log-linearity in the ladder index.
#[test]
fn criterion_04_renormalization_constants() {
    // a against the Monte Carlo stationary variance of Z.
    let grid = TorusGrid::new(3, 32).unwrap();
    let moll = sharp(0.25);
    let a = compute_a(grid, &moll);
    let mc = monte_carlo_z_variance(grid, moll, 64, 200.0, 0.25, 40_000);
    let rel = (mc - a).abs() / a;
    assert!(rel <= 0.02, "Monte Carlo mismatch {rel}");

    // Divergence rate of a over δ = 2^{-m}, m = 2..5, on a grid that does
    // not truncate any of the cutoffs. The raw log-log fit of a itself is
    // biased toward zero by the convergent infrared part (an additive
    // constant ≈ 0.38 here), so the exponent is estimated from consecutive
    // differences, which cancel that constant exactly.
    let big = TorusGrid::new(3, 128).unwrap();
    let avals: Vec<f64> = (2..=5)
        .map(|m| compute_a(big, &sharp((2.0f64).powi(-m))))
        .collect();
    let (mut xs, mut ys) = (vec![], vec![]);
    for (i, w) in avals.windows(2).enumerate() {
        let m = 2 + i as i32;
        // midpoint of the rung in log δ
        xs.push(-(m as f64 + 0.5) * (2.0f64).ln());
        ys.push((w[1] - w[0]).ln());
    }
    let (slope_diff, _, _) = linear_fit(&xs, &ys);
    let raw: Vec<f64> = (2..=5).map(|m| -(m as f64) * (2.0f64).ln()).collect();
    let lna: Vec<f64> = avals.iter().map(|v| v.ln()).collect();
    let (slope_raw, _, _) = linear_fit(&raw, &lna);
    assert!(
        (-slope_diff - 1.0).abs() <= 0.1,
        "divergence exponent {slope_diff}"
    );

    // b grows linearly in the ladder index m (log 1/δ).
    let ms: Vec<f64> = (1..=4).map(f64::from).collect();
    let bvals: Vec<f64> = (1..=4)
        .map(|m| compute_b(grid, &sharp((2.0f64).powi(-m)), ProductRule::default()))
        .collect();
    let (_, _, r2) = linear_fit(&ms, &bvals);
    println!(
        "criterion 04: MC rel err {rel:.4}, a-divergence slope {slope_diff:.3} \
         (raw log-log {slope_raw:.3}), b linearity r2 {r2:.4}"
    );
    assert!(r2 >= 0.9, "b linearity r2 {r2}");
}

/// Criterion 5: renormalization necessity — the renormalized cube tree is
/// Cauchy along the δ ladder while the unrenormalized one diverges.
#[test]
fn criterion_05_renormalization_necessity() {
    // The ladder stays inside the dealias band (1/δ <= N/3): beyond it, the
    // truncated products no longer represent the mollified objects.
    let grid = TorusGrid::new(3, 32).unwrap();
    let seeds: Vec<u64> = (0..8).map(|i| 600 + i).collect();
    let rep = wick_necessity_study(
        grid,
        MollifierFamily::Sharp,
        &[0.5, 0.25, 0.125],
        &seeds,
        0.1,
        2e-3,
        10,
    );
    println!(
        "criterion 05: renormalized pair diffs {:?} (decreasing), unrenormalized norms {:?} (increasing)",
        rep.w3_pair_diffs, rep.z3_norms
    );
    assert!(
        rep.w3_pair_diffs.windows(2).all(|w| w[1] <= w[0]),
        "pair diffs not decreasing: {:?}",
        rep.w3_pair_diffs
    );
    assert!(
        rep.z3_norms.windows(2).all(|w| w[1] >= w[0]),
        "unrenormalized norms not increasing: {:?}",
        rep.z3_norms
    );
}

/// Criterion 6: fitted regularity exponents of the stochastic objects
/// against the claimed table, d=3, N=64, 8 realizations.
#[test]
fn criterion_06_regularity_table() {
    let grid = TorusGrid::new(3, 64).unwrap();
    let moll = sharp(1.0 / 32.0);
    let rule = ProductRule::default();
    let constants = constants_for(grid, moll, rule);
    let seeds: Vec<u64> = (0..8).map(|i| 900 + i).collect();
    let rows = regularity_report(
        grid,
        moll,
        &seeds,
        0.25,
        2e-3,
        25,
        DuhamelScheme::default(),
        rule,
        constants,
    );
    let mut all_ok = true;
    let mut summary = String::new();
    for row in &rows {
        let ok = (row.mean_slope - row.expected).abs() <= row.tolerance || row.soft;
        all_ok &= ok;
        summary.push_str(&format!(
            " {}={:+.2}{}",
            row.name,
            row.mean_slope,
            if row.soft { "(soft)" } else { "" }
        ));
    }
    println!("criterion 06: slopes{summary}");
    assert!(all_ok, "a fitted regularity left its tolerance band: {rows:?}");
}

/// Criterion 7: maximum principle with constant exactly 1, 50 randomized
/// instances, zero violations.
#[test]
fn criterion_07_max_principle() {
    let grid = TorusGrid::new(3, 8).unwrap();
    let rep = check_max_principle(grid, 50);
    println!(
        "criterion 07: {} violations in {} instances, worst ratio {:.4}",
        rep.violations, rep.n_samples, rep.worst_ratio
    );
    assert_eq!(rep.violations, 0, "{rep:?}");
}

/// Criterion 8: every calibrated inequality suite passes its two-sample
/// protocol at 100/100 samples with 25% headroom.
#[test]
fn criterion_08_calibrated_suites() {
    let grid = TorusGrid::new(3, 16).unwrap();
    let n = 100;
    let mut reports = vec![
        check_product(grid, n),
        check_paraproduct_linf(grid, n),
        check_paraproduct_neg(grid, n),
        check_interpolation(grid, n),
        check_semigroup(grid, n),
        check_schauder(grid, n),
        check_schauder_pointwise(grid, n),
    ];
    let small = TorusGrid::new(3, 8).unwrap();
    let moll = sharp(0.5);
    let constants = constants_for(small, moll, ProductRule::default());
    reports.extend(check_u_bounds(small, moll, constants, n, 0.05).expect("solves complete"));
    let mut all_pass = true;
    let mut summary = String::new();
    for r in &reports {
        all_pass &= r.pass;
        summary.push_str(&format!(
            " {}={}",
            r.name,
            if r.pass { "ok" } else { "FAIL" }
        ));
    }
    println!("criterion 08:{summary}");
    assert!(all_pass, "{reports:#?}");
}

/// Criterion 9: the split system reproduces the one-piece solution.
#[test]
fn criterion_09_split_consistency() {
    let grid = TorusGrid::new(3, 16).unwrap();
    let moll = sharp(0.25);
    let rule = ProductRule::default();
    let scheme = DuhamelScheme::default();
    let constants = constants_for(grid, moll, rule);
    let ens = generate_ensemble_with(grid, moll, 2, 0.25, 2e-3, scheme, rule, constants);
    let y = build_y(&ens, rule, scheme);
    let coeffs = assemble_coefficients(&ens, &y, rule);
    let initial = InitialData {
        phi_sharp0: cos_profile(grid, 1.0),
    };
    let picard = PicardOptions::default();
    let u = solve_u(&coeffs, &initial, picard, scheme, rule).expect("one-piece solve");
    let zero = TimeField::new(
        u.dt(),
        (0..=u.n_steps()).map(|_| RealField::zeros(grid)).collect(),
    );
    let n = choose_n(&u, &zero, 0.05);
    let (u1, u2) = solve_split(&coeffs, &initial, n, picard, scheme, rule).expect("split solve");
    let diff = u1
        .zip_with(&u2, |a, b| a.add(b))
        .unwrap()
        .zip_with(&u, |s, w| s.sub(w))
        .unwrap()
        .max_over_time(|f| f.linf_norm());
    let sup = u.max_over_time(|f| f.linf_norm());
    println!(
        "criterion 09: n={n}, ‖u1+u2−u‖ = {diff:.3e} vs budget {:.3e}",
        1e-3 * (1.0 + sup)
    );
    assert!(diff <= 1e-3 * (1.0 + sup), "split gap {diff} (sup {sup})");
}

/// Criterion 10: long-horizon solves at increasing initial magnitude — no
/// blow-ups; the late-window norms are reported (coming-down is soft).
#[test]
fn criterion_10_global_bound() {
    let grid = TorusGrid::new(3, 32).unwrap();
    let moll = sharp(0.125);
    let constants = constants_for(grid, moll, ProductRule::default());
    let mut opts = SolverOptions::new(4.0, 2e-3);
    opts.save_stride = 50;
    // Large initial data makes the inner fixed point contract slowly
    // (factor ∝ dt·‖u‖²) during the coming-down transient; give it room.
    opts.picard.max_iter = 40;
    let rows = global_bound_study(grid, moll, constants, 1, &[1.0, 5.0, 10.0], &opts)
        .expect("runs complete");
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut any_blow_up = false;
    for row in &rows {
        any_blow_up |= row.blow_up;
        lo = lo.min(row.sup_late_besov);
        hi = hi.max(row.sup_late_besov);
    }
    let spread = hi / lo;
    println!(
        "criterion 10: blow-ups none={}, late-window besov spread {spread:.2}x (soft target <= 2x)",
        !any_blow_up
    );
    assert!(!any_blow_up, "{rows:?}");
    // Spread across magnitudes is exploratory: reported, not asserted.
}

/// Criterion 11: mollifier independence — cross-family solution differences
/// decrease along the δ ladder under common-innovation coupling.
#[test]
fn criterion_11_mollifier_independence() {
    let grid = TorusGrid::new(3, 32).unwrap();
    let deltas: Vec<f64> = (1..=4).map(|m| (2.0f64).powi(-m)).collect();
    let mut opts = SolverOptions::new(0.1, 2e-3);
    opts.save_stride = 5;
    let initial = InitialData {
        phi_sharp0: cos_profile(grid, 1.0),
    };
    let rep = delta_convergence_study(
        grid,
        &[MollifierFamily::Sharp, MollifierFamily::Gaussian],
        &deltas,
        1,
        &opts,
        &initial,
    )
    .expect("runs complete");
    let cross = rep.cross_family_diffs.clone().expect("two families");
    println!(
        "criterion 11: cross-family diffs {cross:?} (decreasing), per-family pair diffs {:?}",
        rep.pair_diffs
    );
    assert!(
        cross.windows(2).all(|w| w[1] <= w[0]),
        "cross-family diffs not decreasing: {cross:?}"
    );
    assert!(rep.monotone, "{rep:?}");
}
