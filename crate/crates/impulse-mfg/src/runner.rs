//! Scenario orchestration: run one experiment config, write artifacts, and
//! return the invariant report.

use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, Scenario};
use crate::error::{Error, Result};
use crate::fokker_planck::{
    check_fp_solution, duality_identity_from, duality_value, epsilon_sweep,
    solve_penalized_multi, solve_penalized_stationary, DualityMode, LimitDensity, SweepSetup,
};
use crate::grid::{adjoint_pairing, integrate, ScalarField, SpaceTimeField, TorusGrid};
use crate::io;
use crate::lp;
use crate::mfg::{
    check_mfg_solution, optimal_control_objective,
    solve_penalized_mfg, solve_stationary_mfg, InitialGuess,
};
use crate::oracle::{simulate_limit, simulate_penalized};
use crate::qvi::{solve_constrained_equality, solve_qvi, JumpSystem};
use crate::report::{thresholds as tol, Report};
use crate::rng::SeqRng;

/// Upper bound on LP size for the `D_lp` column of `duality.csv`.
const LP_SIZE_CAP: usize = 2048;

pub struct RunOutcome {
    pub report: Report,
    pub out_dir: PathBuf,
}

/// Execute a parsed config into `out_dir`. Artifacts and `report.json` are
/// written there; the returned report's `pass` field drives the exit code.
pub fn run(cfg: &ExperimentConfig, base_dir: &Path, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate(base_dir)?;
    std::fs::create_dir_all(out_dir)?;
    let grid = cfg.build_grid()?;
    let seed = cfg.numerics.seed;
    let mut report = match cfg.problem.scenario {
        Scenario::FpSingle | Scenario::FpMulti => run_fp(cfg, base_dir, out_dir, grid)?,
        Scenario::FpStationary => run_fp_stationary(cfg, base_dir, out_dir, grid)?,
        Scenario::Qvi => run_qvi(cfg, base_dir, out_dir, grid)?,
        Scenario::Mfg => run_mfg(cfg, base_dir, out_dir, grid)?,
        Scenario::MfgStationary => run_mfg_stationary(cfg, base_dir, out_dir, grid, false)?,
        Scenario::OptimalControl => run_mfg_stationary(cfg, base_dir, out_dir, grid, true)?,
        Scenario::OracleCompare => run_oracle_compare(cfg, base_dir, out_dir, grid)?,
    };
    report.metrics.insert("seed".into(), seed.to_string());
    report.write(out_dir)?;
    Ok(RunOutcome {
        report,
        out_dir: out_dir.to_path_buf(),
    })
}

fn write_mass_trace(out: &Path, trace: &[f64], grid: TorusGrid) -> Result<()> {
    let rows: Vec<Vec<String>> = trace
        .iter()
        .enumerate()
        .map(|(l, m)| vec![io::fmt_f64(grid.time(l)), io::fmt_f64(*m)])
        .collect();
    io::write_csv(&out.join("mass_trace.csv"), "t,mass", &rows)
}

fn duality_checks(
    report: &mut Report,
    m: &SpaceTimeField,
    m0: &ScalarField,
    js: &JumpSystem,
    epsilon: f64,
    grid: TorusGrid,
) -> Result<()> {
    let witness = solve_constrained_equality(js, &SpaceTimeField::zeros(grid), grid)?;
    let pairing = adjoint_pairing(m, &witness.u, m0)?;
    let identity = duality_identity_from(m, js, epsilon, grid)?;
    let rel = (pairing - identity).abs() / identity.abs().max(1e-300);
    if identity.abs() > 1e-14 {
        report.check_at_most("duality_identity_rel", rel, tol::DUALITY_REL);
    } else {
        report.check_at_most("duality_identity_abs", (pairing - identity).abs(), 1e-12);
    }
    report.metric("duality_identity", identity);
    report.metric("duality_pairing", pairing);
    Ok(())
}

fn sweep_section(
    report: &mut Report,
    cfg: &ExperimentConfig,
    setup: &SweepSetup,
    out_dir: &Path,
    grid: TorusGrid,
) -> Result<LimitDensity> {
    let limit = epsilon_sweep(setup, &cfg.numerics.ladder, grid)?;
    // duality.csv: epsilon, D_identity, D_lp, int_A_m
    let lp_feasible = grid.nt * grid.points() <= LP_SIZE_CAP;
    let mut rows = Vec::new();
    for (i, &eps) in limit.epsilons.iter().enumerate() {
        let d_lp = if lp_feasible {
            let run = solve_penalized_multi(&setup.m0, &setup.js, eps, grid)?;
            let v = duality_value(
                &run.m,
                &setup.m0,
                &setup.js,
                grid,
                DualityMode::Lp,
                cfg.numerics.lp_box,
            )?;
            io::fmt_f64(v.value)
        } else {
            "nan".to_string()
        };
        rows.push(vec![
            io::fmt_f64(eps),
            io::fmt_f64(limit.d_estimates[i]),
            d_lp,
            io::fmt_f64(limit.int_a_m[i]),
        ]);
    }
    io::write_csv(
        &out_dir.join("duality.csv"),
        "epsilon,D_identity,D_lp,int_A_m",
        &rows,
    )?;
    io::write_space_time_field(&out_dir.join("limit_density.bin"), &limit.m)?;

    report.check_at_least("sweep_slope", limit.slope, tol::SLOPE_BAND.0);
    report.check_at_most("sweep_slope_upper", limit.slope, tol::SLOPE_BAND.1);
    let sup = *limit.residual_on_a.last().unwrap();
    report.check_at_most(
        "limit_vanishes_on_a",
        sup,
        tol::VANISH_REL * limit.m.sup_norm(),
    );
    let monotone = limit
        .residual_on_a
        .windows(2)
        .all(|w| w[1] <= 1.1 * w[0]);
    report.check_flag("residual_on_a_nonincreasing", monotone);
    let lo = &limit.d_estimates[limit.d_estimates.len() / 2..];
    let dmax = lo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let dmin = lo.iter().cloned().fold(f64::INFINITY, f64::min);
    report.check_at_most(
        "duality_spread_bottom_half",
        dmax - dmin,
        tol::D_SPREAD_REL * dmax.abs().max(dmin.abs()).max(1e-300),
    );
    report.metric("sweep_slope", limit.slope);
    report.metric("int_a_m_finest", *limit.int_a_m.last().unwrap());
    report.metric("d_identity_finest", *limit.d_estimates.last().unwrap());
    Ok(limit)
}

fn run_fp(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    grid: TorusGrid,
) -> Result<Report> {
    let mut report = Report::new(
        if cfg.problem.scenario == Scenario::FpSingle { "fp_single" } else { "fp_multi" },
        cfg.numerics.seed,
    );
    let m0 = cfg.build_initial(grid, base_dir)?;
    let js = cfg.build_jump_system(grid, base_dir)?;
    let eps = cfg.numerics.epsilon;
    let run = solve_penalized_multi(&m0, &js, eps, grid)?;

    report.check_at_most("mass_conservation_rel", run.max_mass_drift(), tol::MASS_REL);
    report.check_at_least(
        "positivity_min",
        run.m.min(),
        -tol::POSITIVITY_REL * m0.sup_norm(),
    );
    let init_diff = run.m.slices[0]
        .values
        .iter()
        .zip(&m0.values)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    report.check_at_most("initial_slice_exact", init_diff, 0.0);
    duality_checks(&mut report, &run.m, &m0, &js, eps, grid)?;
    report.metric("epsilon", eps);
    report.metric("final_mass", *run.mass_trace.last().unwrap());

    io::write_space_time_field(&out_dir.join("density.bin"), &run.m)?;
    io::write_scalar_csv(&out_dir.join("density_final.csv"), &run.m.slices[grid.nt])?;
    write_mass_trace(out_dir, &run.mass_trace, grid)?;

    if !cfg.numerics.ladder.is_empty() {
        let setup = SweepSetup { m0: m0.clone(), js: js.clone() };
        let limit = sweep_section(&mut report, cfg, &setup, out_dir, grid)?;
        let fp_check = check_fp_solution(&limit.m, &m0, &js, grid, 10, cfg.numerics.seed)?;
        report.check_flag("limit_margins_nonnegative", fp_check.margins_pass);
        report.metric("limit_min_margin", fp_check.min_margin);
        report.metric("limit_max_on_a", fp_check.max_on_a);
    }
    Ok(report)
}

fn run_fp_stationary(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    grid: TorusGrid,
) -> Result<Report> {
    let mut report = Report::new("fp_stationary", cfg.numerics.seed);
    let st = cfg.stationary.as_ref().unwrap();
    let rho = st.rho.build(grid, base_dir)?;
    let js = cfg.build_jump_system(grid, base_dir)?;
    let run = solve_penalized_stationary(&rho, &js, st.delta, cfg.numerics.epsilon, grid)?;
    report.check_at_most("stationary_mass_rel", run.mass_residual, tol::STATIONARY_MASS_REL);
    report.check_at_least(
        "positivity_min",
        run.m.min(),
        -tol::POSITIVITY_REL * rho.sup_norm().max(1.0),
    );
    report.metric("jump_flux", run.jump_flux);
    report.metric("total_mass", integrate(&run.m));
    io::write_scalar_field(&out_dir.join("density.bin"), &run.m)?;
    io::write_scalar_csv(&out_dir.join("density.csv"), &run.m)?;
    Ok(report)
}

fn run_qvi(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    grid: TorusGrid,
) -> Result<Report> {
    let mut report = Report::new("qvi", cfg.numerics.seed);
    let js = cfg.build_jump_system(grid, base_dir)?;
    let f = cfg.source.as_ref().unwrap().build(grid, base_dir)?;
    let solver_cfg = cfg.numerics.solver_config();
    let sol = solve_qvi(&js, &f, grid, &solver_cfg)?;

    report.check_at_least("feasibility_margin", sol.feasibility_margin, -tol::QVI_FEAS);
    report.check_at_most(
        "complementarity_residual",
        sol.complementarity_residual,
        tol::QVI_COMP,
    );
    report.check_flag("outer_iterates_decreasing", sol.monotone);
    report.check_at_most(
        "terminal_condition",
        sol.u.slices[grid.nt].sup_norm(),
        0.0,
    );
    report.check_at_most(
        "inactive_pde_residual",
        sol.inactive_pde_residual,
        tol::QVI_COMP,
    );
    report.metric_count("outer_iterations", sol.outer_iterations);
    report.metric("tol_active", sol.tol_active);

    io::write_space_time_field(&out_dir.join("value.bin"), &sol.u)?;
    io::write_space_time_field(&out_dir.join("pde_residual.bin"), &sol.pde_residual)?;
    let sidecar = serde_json::json!({
        "outer_iterations": sol.outer_iterations,
        "monotone": sol.monotone,
        "feasibility_margin": io::fmt_f64(sol.feasibility_margin),
        "complementarity_residual": io::fmt_f64(sol.complementarity_residual),
        "inactive_pde_residual": io::fmt_f64(sol.inactive_pde_residual),
        "tol_active": io::fmt_f64(sol.tol_active),
        "tolerances": {
            "tol_pde": io::fmt_f64(solver_cfg.tol_pde),
            "tol_qvi": io::fmt_f64(solver_cfg.tol_qvi),
            "tol_outer": io::fmt_f64(solver_cfg.tol_outer),
            "omega": io::fmt_f64(solver_cfg.omega),
        },
    });
    std::fs::write(
        out_dir.join("qvi_solution.json"),
        serde_json::to_string_pretty(&sidecar).unwrap() + "\n",
    )?;
    Ok(report)
}

fn run_mfg(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    grid: TorusGrid,
) -> Result<Report> {
    let mut report = Report::new("mfg", cfg.numerics.seed);
    let m0 = cfg.build_initial(grid, base_dir)?;
    let js = cfg.build_jump_system(grid, base_dir)?;
    let coupling = cfg.coupling.as_ref().unwrap().build()?;
    let mfg_cfg = cfg.numerics.mfg_config()?;
    let eps = cfg.numerics.epsilon;
    let sol = solve_penalized_mfg(&m0, &js, &coupling, eps, grid, &mfg_cfg)?;

    report.check_flag("fixed_point_converged", sol.converged);
    let f = coupling.apply(&sol.m);
    report.check_at_most(
        "complementarity_integral",
        sol.residuals.complementarity,
        tol::MFG_COMP_REL * f.sup_norm() * grid.t_final,
    );
    report.check_at_least(
        "feasibility_margin",
        sol.residuals.feasibility_margin,
        -tol::QVI_FEAS,
    );
    report.check_at_most("fp_residual", sol.residuals.fp_residual, tol::MASS_REL);
    let checker = check_mfg_solution(&sol, &coupling, &js, &m0, grid, 20, cfg.numerics.seed)?;
    report.check_at_least("vi_battery_min_margin", checker.min_vi_margin, -tol::VI_MARGIN);
    report.check_flag("duality_finite", !checker.duality_box_pinned);
    report.metric("duality_value", checker.duality_value);
    report.metric_count("iterations", sol.iterations);

    // second initialization for the uniqueness criterion
    if coupling.monotone {
        let mut alt_cfg = mfg_cfg.clone();
        alt_cfg.initial = match mfg_cfg.initial {
            InitialGuess::HeatFlow => InitialGuess::Uniform,
            InitialGuess::Uniform => InitialGuess::HeatFlow,
        };
        let alt = solve_penalized_mfg(&m0, &js, &coupling, eps, grid, &alt_cfg)?;
        let mut diff = sol.m.clone();
        for l in 0..=grid.nt {
            diff.slices[l] = diff.slices[l].axpy(-1.0, &alt.m.slices[l]);
        }
        let rel = diff.l2_norm() / sol.m.l2_norm().max(1e-300);
        report.check_at_most("uniqueness_two_inits_l2", rel, tol::MFG_UNIQUENESS_L2);
    }

    io::write_space_time_field(&out_dir.join("value.bin"), &sol.u)?;
    io::write_space_time_field(&out_dir.join("density.bin"), &sol.m)?;
    io::write_space_time_field(&out_dir.join("alpha.bin"), &sol.alpha)?;
    for (xi, v) in sol.intensity.iter().enumerate() {
        io::write_space_time_field(&out_dir.join(format!("intensity_{xi}.bin")), v)?;
    }
    let trace_rows: Vec<Vec<String>> = sol
        .complementarity_trace
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let upd = sol
                .update_trace
                .get(j)
                .map(|u| io::fmt_f64(*u))
                .unwrap_or_else(|| "nan".into());
            vec![j.to_string(), upd, io::fmt_f64(*c)]
        })
        .collect();
    io::write_csv(
        &out_dir.join("fixed_point_trace.csv"),
        "iteration,update_l2,complementarity",
        &trace_rows,
    )?;
    let mfg_json = serde_json::json!({
        "iterations": sol.iterations,
        "converged": sol.converged,
        "residuals": {
            "qvi_residual": io::fmt_f64(sol.residuals.qvi_residual),
            "fp_residual": io::fmt_f64(sol.residuals.fp_residual),
            "complementarity": io::fmt_f64(sol.residuals.complementarity),
            "feasibility_margin": io::fmt_f64(sol.residuals.feasibility_margin),
        },
        "checker": {
            "min_vi_margin": io::fmt_f64(checker.min_vi_margin),
            "duality_value": io::fmt_f64(checker.duality_value),
            "duality_box_pinned": checker.duality_box_pinned,
            "complementarity_integral": io::fmt_f64(checker.complementarity_integral),
        },
    });
    std::fs::write(
        out_dir.join("mfg_report.json"),
        serde_json::to_string_pretty(&mfg_json).unwrap() + "\n",
    )?;
    Ok(report)
}

fn run_mfg_stationary(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    grid: TorusGrid,
    optimal_control: bool,
) -> Result<Report> {
    let mut report = Report::new(
        if optimal_control { "optimal_control" } else { "mfg_stationary" },
        cfg.numerics.seed,
    );
    let st = cfg.stationary.as_ref().unwrap();
    let rho = st.rho.build(grid, base_dir)?;
    let js = cfg.build_jump_system(grid, base_dir)?;
    let coupling = cfg.coupling.as_ref().unwrap().build()?;
    let delta = st.delta;
    let lambda = st.lambda.unwrap_or(delta);
    if optimal_control && (lambda - delta).abs() > 0.0 {
        return Err(Error::Config(
            "the optimal-control interpretation needs lambda = delta".into(),
        ));
    }
    let mfg_cfg = cfg.numerics.mfg_config()?;
    let sol = solve_stationary_mfg(
        &rho,
        &js,
        &coupling,
        delta,
        lambda,
        cfg.numerics.epsilon,
        grid,
        &mfg_cfg,
    )?;
    report.check_flag("fixed_point_converged", sol.converged);
    report.check_at_most("stationary_mass_rel", sol.mass_residual, tol::STATIONARY_MASS_REL);
    report.check_at_most(
        "complementarity",
        sol.complementarity,
        tol::STATIONARY_COMP_REL * sol.complementarity_scale,
    );
    report.check_at_least("feasibility_margin", sol.feasibility_margin, -tol::QVI_FEAS);
    report.metric("u_side_margin", sol.u_side_margin);
    report.metric("m_side_margin", sol.m_side_margin);
    report.metric_count("iterations", sol.iterations);
    io::write_scalar_field(&out_dir.join("value.bin"), &sol.u)?;
    io::write_scalar_field(&out_dir.join("density.bin"), &sol.m)?;
    io::write_scalar_csv(&out_dir.join("density.csv"), &sol.m)?;

    if optimal_control {
        // D vanishes on the resolvent of rho
        let zero_v: Vec<SpaceTimeField> =
            js.jumps.iter().map(|_| SpaceTimeField::zeros(grid)).collect();
        let js_free = js.with_intensity(zero_v)?;
        let resolvent = solve_penalized_stationary(&rho, &js_free, delta, 1.0, grid)?;
        let max_k = js.cost.iter().fold(0.0f64, |a, c| a.max(c.max()));
        let bound = cfg
            .numerics
            .lp_box
            .unwrap_or(10.0 * (rho.sup_norm() / delta + max_k));
        let d_mu = lp::duality_lp_stationary(&resolvent.m, &rho, &js, delta, grid, bound, false)?;
        report.check_at_most("resolvent_duality_abs", d_mu.value.abs(), tol::RESOLVENT_DUALITY_ABS);

        let at_solution =
            optimal_control_objective(&sol.m, &coupling, &js, &rho, delta, grid, cfg.numerics.lp_box)?;
        report.check_flag("objective_box_free", !at_solution.box_pinned);
        let mut rng = SeqRng::new(cfg.numerics.seed, 0x0C);
        let mut worst_slack = f64::NEG_INFINITY;
        let mut rows = vec![vec![
            "solution".to_string(),
            io::fmt_f64(at_solution.objective),
            io::fmt_f64(at_solution.potential),
            io::fmt_f64(at_solution.duality),
        ]];
        for k in 0..20 {
            let perturbed = ScalarField {
                grid,
                values: sol
                    .m
                    .values
                    .iter()
                    .map(|&v| (v + rng.range(-0.2, 0.4)).max(0.0))
                    .collect(),
            };
            let other = optimal_control_objective(
                &perturbed, &coupling, &js, &rho, delta, grid, cfg.numerics.lp_box,
            )?;
            worst_slack = worst_slack.max(at_solution.objective - other.objective);
            rows.push(vec![
                format!("perturbation_{k}"),
                io::fmt_f64(other.objective),
                io::fmt_f64(other.potential),
                io::fmt_f64(other.duality),
            ]);
        }
        report.check_at_most("objective_minimality_slack", worst_slack, tol::OPTIMALITY_SLACK);
        io::write_csv(
            &out_dir.join("objective.csv"),
            "candidate,objective,potential,duality",
            &rows,
        )?;
    }
    Ok(report)
}

fn run_oracle_compare(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    grid: TorusGrid,
) -> Result<Report> {
    let mut report = Report::new("oracle_compare", cfg.numerics.seed);
    let m0 = cfg.build_initial(grid, base_dir)?;
    let js = cfg.build_jump_system(grid, base_dir)?;
    let oracle_cfg = cfg.oracle.clone().unwrap_or(crate::config::OracleConfig {
        particles: 100_000,
        limit_compare: false,
    });
    let eps = cfg.numerics.epsilon;
    let pde = solve_penalized_multi(&m0, &js, eps, grid)?;
    let particles = simulate_penalized(&m0, &js, eps, grid, oracle_cfg.particles, cfg.numerics.seed)?;
    let l1 = particles.l1_distance(grid.nt, &pde.m.slices[grid.nt]);
    report.check_at_most("oracle_l1_final", l1, tol::ORACLE_L1_PENALIZED);
    report.metric("oracle_l1_final", l1);
    report.metric_count("particles", oracle_cfg.particles);
    report.metric_count("substeps", particles.substeps);

    // histogram and jump-log artifacts
    let mut hist_rows = Vec::new();
    for (l, h) in particles.histograms.iter().enumerate() {
        for (i, v) in h.values.iter().enumerate() {
            hist_rows.push(vec![l.to_string(), i.to_string(), io::fmt_f64(*v)]);
        }
    }
    io::write_csv(
        &out_dir.join("particles_hist.csv"),
        "level,bin,density",
        &hist_rows,
    )?;
    let mut log_rows = Vec::new();
    for (l, counts) in particles.jump_log.iter().enumerate() {
        for (xi, c) in counts.iter().enumerate() {
            log_rows.push(vec![l.to_string(), xi.to_string(), c.to_string()]);
        }
    }
    io::write_csv(&out_dir.join("jump_log.csv"), "step,jump,count", &log_rows)?;
    io::write_space_time_field(&out_dir.join("density.bin"), &pde.m)?;

    if oracle_cfg.limit_compare {
        if cfg.numerics.ladder.is_empty() {
            return Err(Error::Config("limit_compare needs an epsilon ladder".into()));
        }
        if js.jumps.len() != 1 {
            return Err(Error::Config("limit_compare needs a single jump".into()));
        }
        let a = js.union_mask()?;
        let static_slice = a.slices[0].clone();
        if a.slices.iter().any(|s| *s != static_slice) {
            return Err(Error::Config("limit_compare needs a static jump set".into()));
        }
        let setup = SweepSetup { m0: m0.clone(), js: js.clone() };
        let limit = epsilon_sweep(&setup, &cfg.numerics.ladder, grid)?;
        let limit_particles = simulate_limit(
            &m0,
            &static_slice,
            &js.jumps[0],
            grid,
            oracle_cfg.particles,
            cfg.numerics.seed.wrapping_add(1),
        )?;
        let skip = grid.nt.div_ceil(20);
        let mut worst = 0.0f64;
        for l in skip..=grid.nt {
            worst = worst.max(limit_particles.l1_distance(l, &limit.m.slices[l]));
        }
        report.check_at_most("oracle_l1_limit", worst, tol::ORACLE_L1_LIMIT);
        report.metric("oracle_l1_limit", worst);
    }
    Ok(report)
}

/// Sweep parameter names accepted by the CLI.
pub const SWEEP_PARAMS: [&str; 5] = ["epsilon", "n", "nt", "N", "theta"];

/// One sweep entry: override a parameter and run into a subdirectory.
pub fn run_sweep_entry(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_root: &Path,
    param: &str,
    value: f64,
) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    match param {
        "epsilon" => cfg.numerics.epsilon = value,
        "n" => cfg.grid.n = value as usize,
        "nt" => cfg.grid.nt = value as usize,
        "N" => {
            let particles = value as usize;
            match &mut cfg.oracle {
                Some(o) => o.particles = particles,
                None => {
                    cfg.oracle = Some(crate::config::OracleConfig {
                        particles,
                        limit_compare: false,
                    })
                }
            }
        }
        "theta" => cfg.numerics.theta = Some(value),
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter '{other}' (expected one of {SWEEP_PARAMS:?})"
            )))
        }
    }
    let sub = out_root.join(format!("{param}_{value:e}"));
    run(&cfg, base_dir, &sub)
}
