//! Command-line front end: generate stochastic trees, run solves, verify
//! estimates, and run parameter studies.
//!
//! Exit codes: 0 success, 1 a checked property failed, 2 usage/config error,
//! 3 numerical failure (blow-up or non-convergent step).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use phi4::config::RunConfig;
use phi4::field::RealField;
use phi4::grid::TorusGrid;
use phi4::io::{write_norms_csv, write_snapshot, Manifest, SnapshotPayload};
use phi4::lab;
use phi4::solver::{run_transform_with_retry, solve_direct_phi, InitialData, SolveError};
use phi4::trees::{
    self, build_resonant_trees_snapshot, compute_a, compute_b, MollifierFamily, RenormConstants,
};

#[derive(Parser)]
#[command(
    name = "phi4",
    about = "Pseudo-spectral laboratory for the dynamical Phi^4 equation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a single config key, e.g. --override resolution=32 (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override the master seed (shorthand for --override seed=...).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts; created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one realization of the stochastic trees and write snapshots.
    GenTrees {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the time solver and write norm tables and final-state snapshots.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        /// Which solver(s) to run.
        #[arg(long, value_enum, default_value_t = SolveMode::Transform)]
        mode: SolveMode,
    },
    /// Run a verification suite and report pass/fail per inequality.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        suite: Suite,
        /// Randomized instances per calibration/fresh set. The two-sample
        /// protocol needs enough instances for the calibration maximum to
        /// stabilize; below a few dozen, spurious failures are likely.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Run a parameter study and write a JSON report.
    Study {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        study: Study,
    },
    /// Print the effective configuration and renormalization constants.
    Info {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolveMode {
    /// Transformed system only.
    Transform,
    /// Direct renormalized equation only.
    Direct,
    /// Both, in lockstep on the same noise, with the reconstruction gap.
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    /// Littlewood–Paley product, paraproduct, interpolation, semigroup bounds.
    Lp,
    /// Parabolic Schauder estimates for the drifted heat operator.
    Schauder,
    /// Sup-norm bound with constant one for the damped drifted equation.
    Maxprinciple,
    /// Forcing bounds for the split system.
    Ubounds,
    /// Regularity exponents and exact identities of the stochastic trees.
    Trees,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    /// Convergence of u along a mollification ladder δ = 2^{-m}.
    Delta,
    /// Cross-mollifier comparison (sharp vs gaussian) along the ladder.
    Mollifier,
    /// Long-horizon solves at scaled initial data (coming down from infinity).
    Global,
}

/// Application-level failure, carrying the process exit code.
enum Failure {
    /// A checked property did not hold.
    Check(String),
    /// Bad usage, config, or file handling.
    Usage(String),
    /// Numerical failure: blow-up or a non-convergent step.
    Numerical(String),
}

impl Failure {
    fn code(&self) -> ExitCode {
        match self {
            Failure::Check(_) => ExitCode::from(1),
            Failure::Usage(_) => ExitCode::from(2),
            Failure::Numerical(_) => ExitCode::from(3),
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<phi4::config::ConfigError> for Failure {
    fn from(e: phi4::config::ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<phi4::io::IoError> for Failure {
    fn from(e: phi4::io::IoError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<SolveError> for Failure {
    fn from(e: SolveError) -> Self {
        Failure::Numerical(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cfg.dt_stability_warning() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn out_dir(common: &CommonArgs) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn constants_for(cfg: &RunConfig) -> RenormConstants {
    let grid = cfg.grid();
    let moll = cfg.mollifier();
    RenormConstants {
        a: compute_a(grid, &moll),
        b: compute_b(grid, &moll, cfg.product_rule),
        delta: cfg.delta,
        family: cfg.family,
    }
}

/// Smooth reference initial profile, scaled by the configured magnitude.
fn initial_data(cfg: &RunConfig) -> InitialData {
    let grid = cfg.grid();
    let profile = RealField::from_fn(grid, |x| {
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut v = (two_pi * x[0]).cos();
        if grid.dim() > 1 {
            v *= (two_pi * x[1]).cos();
        }
        0.5 + 0.5 * v
    });
    InitialData {
        phi_sharp0: profile.scaled(cfg.initial_magnitude),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::Usage(format!("serialization failure: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenTrees { common } => gen_trees(&common),
        Command::Solve { common, mode } => solve(&common, mode),
        Command::Verify {
            common,
            suite,
            samples,
        } => verify(&common, suite, samples),
        Command::Study { common, study } => run_study(&common, study),
        Command::Info { common } => info(&common),
    }
}

fn gen_trees(common: &CommonArgs) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let grid = cfg.grid();
    let constants = constants_for(&cfg);
    println!(
        "generating trees: d={} N={} delta={} family={:?} seed={} (a={:.6}, b={:.6})",
        cfg.dimension, cfg.resolution, cfg.delta, cfg.family, cfg.seed, constants.a, constants.b
    );
    let ens = trees::generate_ensemble_with(
        grid,
        cfg.mollifier(),
        cfg.seed,
        cfg.t_end,
        cfg.dt,
        cfg.scheme,
        cfg.product_rule,
        constants,
    );
    let t = cfg.t_end;
    let last = ens.z.n_steps();
    let resonant = build_resonant_trees_snapshot(
        ens.z.snapshot(last),
        ens.w2.snapshot(last),
        &phi4::field::forward_transform(ens.i2.snapshot(last)),
        ens.i3.snapshot(last),
        constants.b,
        cfg.product_rule,
    );
    let named: [(&str, &RealField); 9] = [
        ("z", ens.z.snapshot(last)),
        ("w2", ens.w2.snapshot(last)),
        ("w3", ens.w3.snapshot(last)),
        ("i2", ens.i2.snapshot(last)),
        ("i3", ens.i3.snapshot(last)),
        ("r1", &resonant.r1),
        ("r2", &resonant.r2),
        ("r3", &resonant.r3),
        ("r4", &resonant.r4),
    ];
    let mut manifest = Manifest::new(cfg.clone(), constants);
    for (name, field) in named {
        let path = dir.join(format!("{name}.phi4"));
        write_snapshot(&path, t, &SnapshotPayload::Real(field.clone()))?;
        manifest.record_file(&dir, &path)?;
    }
    manifest.write(&dir.join("manifest.json"))?;
    println!("wrote 9 snapshots + manifest.json to {}", dir.display());
    Ok(())
}

fn solve(common: &CommonArgs, mode: SolveMode) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let grid = cfg.grid();
    let moll = cfg.mollifier();
    let constants = constants_for(&cfg);
    let initial = initial_data(&cfg);
    let opts = cfg.solver_options();
    let mut manifest = Manifest::new(cfg.clone(), constants);
    let record = |manifest: &mut Manifest, path: &Path| -> Result<(), Failure> {
        manifest.record_file(&dir, path)?;
        Ok(())
    };

    let blow_up;
    match mode {
        SolveMode::Direct => {
            let (phi, blew, t_star) =
                solve_direct_phi(grid, moll, constants, cfg.seed, &initial, &opts)?;
            blow_up = blew;
            let last = phi.n_steps();
            let path = dir.join("phi_final.phi4");
            write_snapshot(
                &path,
                phi.time(last),
                &SnapshotPayload::Real(phi.snapshot(last).clone()),
            )?;
            record(&mut manifest, &path)?;
            println!(
                "direct solve: blow_up={blew} t_star={t_star:?} final sup={:.6}",
                phi.snapshot(last).linf_norm()
            );
        }
        SolveMode::Transform | SolveMode::Both => {
            let with_direct = matches!(mode, SolveMode::Both) || cfg.with_direct;
            let result = run_transform_with_retry(
                grid, moll, constants, cfg.seed, &initial, &opts, with_direct,
            )?;
            blow_up = result.blow_up;
            let last = result.u.n_steps();
            for (name, tf) in [("u", &result.u), ("y", &result.y), ("phi", &result.phi)] {
                let path = dir.join(format!("{name}_final.phi4"));
                write_snapshot(
                    &path,
                    tf.time(last),
                    &SnapshotPayload::Real(tf.snapshot(last).clone()),
                )?;
                record(&mut manifest, &path)?;
            }
            if let Some(phi_direct) = &result.phi_direct {
                let path = dir.join("phi_direct_final.phi4");
                write_snapshot(
                    &path,
                    phi_direct.time(last),
                    &SnapshotPayload::Real(phi_direct.snapshot(last).clone()),
                )?;
                record(&mut manifest, &path)?;
                let gap = result
                    .phi
                    .snapshot(last)
                    .sub(phi_direct.snapshot(last))
                    .linf_norm();
                let scale = 1.0 + phi_direct.snapshot(last).linf_norm();
                println!("reconstruction gap at t_end: {gap:.3e} (relative {:.3e})", gap / scale);
            }
            let csv = dir.join("norms.csv");
            write_norms_csv(&csv, &result.norms)?;
            record(&mut manifest, &csv)?;
            println!(
                "transform solve: blow_up={} t_star={:?} final sup(u)={:.6}",
                result.blow_up,
                result.t_star,
                result.u.snapshot(last).linf_norm()
            );
        }
    }
    manifest.write(&dir.join("manifest.json"))?;
    if blow_up {
        return Err(Failure::Numerical(
            "solution crossed the blow-up threshold".to_string(),
        ));
    }
    Ok(())
}

fn print_estimates(reports: &[lab::EstimateReport]) -> bool {
    let mut all_pass = true;
    for r in reports {
        println!(
            "{:6} {:28} calibration={:.4e} fresh_max={:.4e} headroom={} degenerate={}",
            if r.pass { "pass" } else { "FAIL" },
            r.name,
            r.calibration_constant,
            r.fresh_max_ratio,
            r.headroom,
            r.degenerate
        );
        all_pass &= r.pass;
    }
    all_pass
}

fn verify(common: &CommonArgs, suite: Suite, samples: usize) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let grid = cfg.grid();
    let mut reports: Vec<lab::EstimateReport> = vec![];
    let mut pass = true;
    match suite {
        Suite::Lp => {
            reports.push(lab::check_product(grid, samples));
            reports.push(lab::check_paraproduct_linf(grid, samples));
            reports.push(lab::check_paraproduct_neg(grid, samples));
            reports.push(lab::check_interpolation(grid, samples));
            reports.push(lab::check_semigroup(grid, samples));
            pass = print_estimates(&reports);
        }
        Suite::Schauder => {
            reports.push(lab::check_schauder(grid, samples));
            reports.push(lab::check_schauder_pointwise(grid, samples));
            pass = print_estimates(&reports);
        }
        Suite::Maxprinciple => {
            let rep = lab::check_max_principle(grid, samples);
            println!(
                "{:6} max principle: {}/{} violations, worst ratio {:.4}",
                if rep.violations == 0 { "pass" } else { "FAIL" },
                rep.violations,
                rep.n_samples,
                rep.worst_ratio
            );
            pass = rep.violations == 0;
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
                write_json(&dir.join("maxprinciple.json"), &rep)?;
            }
        }
        Suite::Ubounds => {
            let constants = constants_for(&cfg);
            let grid = TorusGrid::new(cfg.dimension, cfg.resolution.min(8)).expect("valid grid");
            let triple =
                lab::check_u_bounds(grid, cfg.mollifier(), constants, samples, 0.05)?;
            reports.extend(triple);
            pass = print_estimates(&reports);
        }
        Suite::Trees => {
            let constants = constants_for(&cfg);
            let ens = trees::generate_ensemble_with(
                grid,
                cfg.mollifier(),
                cfg.seed,
                cfg.t_end.min(0.1),
                cfg.dt,
                cfg.scheme,
                cfg.product_rule,
                constants,
            );
            let leibniz = trees::leibniz_equivalence_check(&ens, cfg.product_rule);
            println!("gradient-identity residual (O(dt) in time discretization): {leibniz:.3e}");
            let seeds: Vec<u64> = (0..4).map(|i| cfg.seed + i).collect();
            let rows = trees::regularity_report(
                grid,
                cfg.mollifier(),
                &seeds,
                cfg.t_end.min(0.1),
                cfg.dt,
                cfg.save_stride,
                cfg.scheme,
                cfg.product_rule,
                constants,
            );
            for row in &rows {
                let ok = (row.mean_slope - row.expected).abs() <= row.tolerance || row.soft;
                println!(
                    "{:6} {:4} slope={:+.3} expected {:+.2} ± {:.2}{}",
                    if ok { "pass" } else { "FAIL" },
                    row.name,
                    row.mean_slope,
                    row.expected,
                    row.tolerance,
                    if row.soft { " (soft)" } else { "" }
                );
                pass &= ok;
            }
        }
    }
    if !reports.is_empty() {
        if let Some(dir) = &common.out {
            std::fs::create_dir_all(dir)
                .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
            write_json(&dir.join("estimates.json"), &reports)?;
        }
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Check("one or more checks failed".to_string()))
    }
}

fn run_study(common: &CommonArgs, study: Study) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let grid = cfg.grid();
    let initial = initial_data(&cfg);
    let opts = cfg.solver_options();
    match study {
        Study::Delta | Study::Mollifier => {
            let families: &[MollifierFamily] = match study {
                Study::Delta => &[cfg.family],
                _ => &[MollifierFamily::Sharp, MollifierFamily::Gaussian],
            };
            let deltas: Vec<f64> = (1..=4).map(|m| (2.0f64).powi(-m)).collect();
            let report = lab::delta_convergence_study(
                grid, families, &deltas, cfg.seed, &opts, &initial,
            )?;
            write_json(&dir.join("convergence.json"), &report)?;
            for (fam, diffs) in report.families.iter().zip(&report.pair_diffs) {
                println!("{fam:?}: consecutive-δ diffs {diffs:?}");
            }
            if let Some(cross) = &report.cross_family_diffs {
                println!("cross-family diffs per δ: {cross:?}");
            }
            if !report.monotone {
                return Err(Failure::Check(
                    "consecutive-δ differences are not decreasing".to_string(),
                ));
            }
        }
        Study::Global => {
            let constants = constants_for(&cfg);
            let rows = lab::global_bound_study(
                grid,
                cfg.mollifier(),
                constants,
                cfg.seed,
                &[1.0, 5.0, 10.0],
                &opts,
            )?;
            write_json(&dir.join("global.json"), &rows)?;
            let mut ok = true;
            for row in &rows {
                println!(
                    "magnitude {:5.1}: blow_up={} late-window besov sup {:.4}",
                    row.magnitude, row.blow_up, row.sup_late_besov
                );
                ok &= !row.blow_up;
            }
            if !ok {
                return Err(Failure::Numerical("a study run blew up".to_string()));
            }
        }
    }
    println!("study report written to {}", dir.display());
    Ok(())
}

fn info(common: &CommonArgs) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let constants = constants_for(&cfg);
    println!("{}", cfg.to_toml_string().trim_end());
    println!("# derived");
    println!("# modes        = {}", cfg.grid().len());
    println!("# steps        = {}", (cfg.t_end / cfg.dt).round() as usize);
    println!("# wick a       = {:.12}", constants.a);
    println!("# second-order b = {:.12}", constants.b);
    Ok(())
}
