//! Forward solvers for the penalized Fokker-Planck equations of jumping
//! particles, the `epsilon -> 0` limit extraction and the duality functional.
//!
//! The single-jump equation
//! `d_t m - nu Lap m + (1/eps) 1_A m - (1/eps)(1_A m)(t, x - xi) = 0`
//! (and its multi-jump version driven by an intensity `V`) is marched with a
//! fully implicit Euler step,
//!
//! `(I + dt(-nu Lap_h + (1/eps)(diag(sum_xi V_xi) - sum_xi S_xi diag(V_xi)))) m_{l+1} = m_l`,
//!
//! with the exchange coefficients frozen at the left endpoint `t_l` of each
//! step. Both properties the theory rests on hold exactly for this scheme:
//! the system matrix is an M-matrix with unit column sums (positivity and
//! exact mass conservation), and the discrete Green identity against
//! [`crate::grid::adjoint_pairing`] closes without any `O(dt)` remainder, so
//! the measured duality value equals `-(1/eps) sum_l dt <k, V m_{l+1}>_A` to
//! solver precision.

use crate::error::{Error, Result};
use crate::grid::{
    adjoint_pairing, integrate, LatticeJump, ScalarField, SpaceTimeField, SpaceTimeMask,
    TorusGrid,
};
use crate::linalg::{CscMatrix, LinearSolver};
use crate::lp;
use crate::qvi::{solve_constrained_equality, JumpSystem};
use crate::rng::SeqRng;

/// Positivity floor: slices must stay above `-TOL_POS_REL * |m0|_inf`.
pub const TOL_POS_REL: f64 = 1e-10;
/// Relative mass-conservation tolerance of a penalized run.
pub const MASS_TOL_REL: f64 = 1e-10;

/// One penalized forward run.
#[derive(Debug, Clone)]
pub struct PenalizedRun {
    pub m: SpaceTimeField,
    pub epsilon: f64,
    /// Total mass per time level.
    pub mass_trace: Vec<f64>,
    /// Aggregate jump cost rate per step interval:
    /// `(1/eps) h^d sum_x sum_xi V_xi(l,x) k_xi(x) m_{l+1}(x)`.
    pub jump_flux: Vec<f64>,
}

impl PenalizedRun {
    /// `-(1/eps) int_A k m`, the value the duality functional attains.
    pub fn duality_identity(&self) -> f64 {
        let dt = self.m.grid.dt();
        -self.jump_flux.iter().map(|f| f * dt).sum::<f64>()
    }

    /// Largest relative mass drift over the trace.
    pub fn max_mass_drift(&self) -> f64 {
        let m0 = self.mass_trace[0];
        let scale = m0.abs().max(1e-300);
        self.mass_trace
            .iter()
            .fold(0.0f64, |a, &m| a.max((m - m0).abs() / scale))
    }
}

/// Per-step intensity view: one coefficient slice per jump.
fn intensity_slices<'a>(js: &'a JumpSystem, l: usize) -> Result<Vec<&'a [f64]>> {
    let vs = js
        .intensity
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("penalized solver needs an intensity".into()))?;
    Ok(vs.iter().map(|v| v.slices[l].values.as_slice()).collect())
}

fn step_matrix(
    grid: TorusGrid,
    jumps: &[LatticeJump],
    v_slices: &[&[f64]],
    epsilon: f64,
    dt: f64,
) -> CscMatrix {
    let npts = grid.points();
    let inv_h2 = (grid.n * grid.n) as f64;
    let off = grid.nu * dt * inv_h2;
    let diag = 1.0 + 2.0 * grid.d as f64 * off;
    let mut trip: Vec<(usize, usize, f64)> =
        Vec::with_capacity(npts * (1 + 2 * grid.d) + npts * jumps.len());
    let rate = dt / epsilon;
    for i in 0..npts {
        let mut d = diag;
        for v in v_slices {
            d += rate * v[i];
        }
        trip.push((i, i, d));
        for axis in 0..grid.d {
            trip.push((i, grid.neighbor(i, axis, 1), -off));
            trip.push((i, grid.neighbor(i, axis, -1), -off));
        }
    }
    // arrivals: row x + xi receives (dt/eps) V_xi(x) from column x
    for (jump, v) in jumps.iter().zip(v_slices) {
        for x in 0..npts {
            if v[x] > 0.0 {
                trip.push((grid.translate(x, &jump.offset), x, -rate * v[x]));
            }
        }
    }
    CscMatrix::from_triplets(npts, &trip)
}

/// One fully implicit step of the single-jump penalized equation.
pub fn fp_step_single(
    m_prev: &ScalarField,
    a_slice: &[bool],
    xi: &LatticeJump,
    epsilon: f64,
    grid: TorusGrid,
) -> Result<ScalarField> {
    if m_prev.grid != grid {
        return Err(Error::GridMismatch("fp_step_single arguments".into()));
    }
    if a_slice.len() != grid.points() {
        return Err(Error::InvalidInput("mask length mismatch".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("need epsilon > 0, got {epsilon}")));
    }
    let v: Vec<f64> = a_slice.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let matrix = step_matrix(grid, std::slice::from_ref(xi), &[&v], epsilon, grid.dt());
    let solver = LinearSolver::new(matrix)?;
    let values = solver.solve(&m_prev.values)?;
    ScalarField::new(grid, values)
}

fn march(
    m0: &ScalarField,
    js: &JumpSystem,
    epsilon: f64,
    grid: TorusGrid,
) -> Result<PenalizedRun> {
    if m0.grid != grid || js.grid() != grid {
        return Err(Error::GridMismatch("penalized solver arguments".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("need epsilon > 0, got {epsilon}")));
    }
    if m0.min() < 0.0 {
        return Err(Error::InvalidInput(format!(
            "initial density dips to {}",
            m0.min()
        )));
    }
    let dt = grid.dt();
    let npts = grid.points();
    let mut slices = Vec::with_capacity(grid.nt + 1);
    slices.push(m0.clone());
    let mut jump_flux = Vec::with_capacity(grid.nt);
    let mut cached: Option<(CscMatrix, LinearSolver)> = None;

    for l in 0..grid.nt {
        let vs = intensity_slices(js, l)?;
        let matrix = step_matrix(grid, &js.jumps, &vs, epsilon, dt);
        let reuse = matches!(&cached, Some((prev, _)) if *prev == matrix);
        if !reuse {
            let solver = LinearSolver::new(matrix.clone())?;
            cached = Some((matrix, solver));
        }
        let (_, solver) = cached.as_ref().unwrap();
        let next = solver.solve(&slices[l].values)?;
        let next = ScalarField::new(grid, next)?;
        let mut flux = 0.0;
        for (xi, v) in vs.iter().enumerate() {
            for x in 0..npts {
                if v[x] > 0.0 {
                    flux += v[x] * js.cost[xi].values[x] * next.values[x];
                }
            }
        }
        jump_flux.push(flux * grid.cell_volume() / epsilon);
        slices.push(next);
    }

    let m = SpaceTimeField::new(grid, slices)?;
    let tol_pos = TOL_POS_REL * m0.sup_norm();
    let min = m.min();
    if min < -tol_pos {
        return Err(Error::SolverBreakdown(format!(
            "positivity lost: min m = {min:.3e} below -{tol_pos:.3e} (the implicit scheme is an M-matrix, this indicates a solver bug)"
        )));
    }
    let mass_trace: Vec<f64> = m.slices.iter().map(integrate).collect();
    let run = PenalizedRun { m, epsilon, mass_trace, jump_flux };
    if run.max_mass_drift() > MASS_TOL_REL && run.mass_trace[0].abs() > 1e-300 {
        return Err(Error::SolverBreakdown(format!(
            "mass drift {:.3e} exceeds {MASS_TOL_REL:.0e}",
            run.max_mass_drift()
        )));
    }
    Ok(run)
}

/// Penalized run for a single jump on the space-time set `A`.
pub fn solve_penalized_single(
    m0: &ScalarField,
    a: &SpaceTimeMask,
    xi: &LatticeJump,
    epsilon: f64,
    grid: TorusGrid,
) -> Result<PenalizedRun> {
    if a.grid != grid {
        return Err(Error::GridMismatch("mask grid".into()));
    }
    let intensity = SpaceTimeField::new(
        grid,
        a.slices
            .iter()
            .map(|s| {
                ScalarField {
                    grid,
                    values: s.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                }
            })
            .collect(),
    )?;
    let js = JumpSystem::new(
        vec![xi.clone()],
        vec![ScalarField::constant(grid, 1.0)],
        1.0,
        Some(vec![intensity]),
    )?;
    march(m0, &js, epsilon, grid)
}

/// Penalized run with the multi-jump exchange operator of the intensity `V`.
pub fn solve_penalized_multi(
    m0: &ScalarField,
    js: &JumpSystem,
    epsilon: f64,
    grid: TorusGrid,
) -> Result<PenalizedRun> {
    march(m0, js, epsilon, grid)
}

/// Stationary penalized solve.
#[derive(Debug, Clone)]
pub struct StationaryRun {
    pub m: ScalarField,
    pub epsilon: f64,
    /// `(1/eps) h^d sum_x sum_xi V_xi(x) k_xi(x) m(x)`.
    pub jump_flux: f64,
    /// `|delta int m - int rho|` relative to `int rho`.
    pub mass_residual: f64,
}

/// Solve `-nu Lap m + delta m + (1/eps)(m sum V - sum S_xi(V_xi m)) = rho`
/// directly. Global balance `delta int m = int rho` holds because the
/// exchange columns cancel.
pub fn solve_penalized_stationary(
    rho: &ScalarField,
    js: &JumpSystem,
    delta: f64,
    epsilon: f64,
    grid: TorusGrid,
) -> Result<StationaryRun> {
    if rho.grid != grid || js.grid() != grid {
        return Err(Error::GridMismatch("stationary solver arguments".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("need delta > 0, got {delta}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("need epsilon > 0, got {epsilon}")));
    }
    if rho.min() < 0.0 {
        return Err(Error::InvalidInput("entry rate rho must be >= 0".into()));
    }
    let vs = intensity_slices(js, 0)?;
    let npts = grid.points();
    let inv_h2 = (grid.n * grid.n) as f64;
    let off = grid.nu * inv_h2;
    let mut trip: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..npts {
        let mut d = delta + 2.0 * grid.d as f64 * off;
        for v in &vs {
            d += v[i] / epsilon;
        }
        trip.push((i, i, d));
        for axis in 0..grid.d {
            trip.push((i, grid.neighbor(i, axis, 1), -off));
            trip.push((i, grid.neighbor(i, axis, -1), -off));
        }
    }
    for (jump, v) in js.jumps.iter().zip(&vs) {
        for x in 0..npts {
            if v[x] > 0.0 {
                trip.push((grid.translate(x, &jump.offset), x, -v[x] / epsilon));
            }
        }
    }
    let solver = LinearSolver::new(CscMatrix::from_triplets(npts, &trip))?;
    let m = ScalarField::new(grid, solver.solve(&rho.values)?)?;

    let tol_pos = TOL_POS_REL * rho.sup_norm().max(1.0);
    if m.min() < -tol_pos {
        return Err(Error::SolverBreakdown(format!(
            "stationary positivity lost: min m = {:.3e}",
            m.min()
        )));
    }
    let mut flux = 0.0;
    for (xi, v) in vs.iter().enumerate() {
        for x in 0..npts {
            flux += v[x] * js.cost[xi].values[x] * m.values[x];
        }
    }
    let flux = flux * grid.cell_volume() / epsilon;
    let total_rho = integrate(rho);
    let mass_residual = (delta * integrate(&m) - total_rho).abs() / total_rho.abs().max(1e-300);
    Ok(StationaryRun { m, epsilon, jump_flux: flux, mass_residual })
}

/// Problem data for an epsilon ladder.
#[derive(Debug, Clone)]
pub struct SweepSetup {
    pub m0: ScalarField,
    /// Jump system with intensity (the jumps and the sets they act on).
    pub js: JumpSystem,
}

/// `epsilon -> 0` extraction along a ladder.
#[derive(Debug, Clone)]
pub struct LimitDensity {
    /// Finest-epsilon density, the limit surrogate.
    pub m: SpaceTimeField,
    pub epsilons: Vec<f64>,
    /// Sup of `m` over the jump set per epsilon (excluding the initial layer
    /// when the set touches `t = 0`).
    pub residual_on_a: Vec<f64>,
    /// `int_A m` (space-time) per epsilon.
    pub int_a_m: Vec<f64>,
    /// Duality value per epsilon.
    pub d_estimates: Vec<f64>,
    /// Log-log slope of `int_A m` versus `epsilon`.
    pub slope: f64,
    /// Number of initial slices excluded from the `m = 0 on A` statistics.
    pub excluded_initial_slices: usize,
}

/// Number of initial slices to exclude from on-A statistics: `ceil(nt/20)`
/// when the set is non-negligible near `t = 0` (instantaneous initial jumps
/// leave an `O(1)` boundary layer there), zero otherwise.
pub fn initial_exclusion(a: &SpaceTimeMask) -> usize {
    let nt = a.grid.nt;
    let l0 = nt.div_ceil(20);
    let touches_start = a.slices[..l0.max(1).min(nt + 1)]
        .iter()
        .any(|s| s.iter().any(|&b| b));
    if touches_start {
        l0
    } else {
        0
    }
}

/// Sup of `m` over `A` and `int_A m`, using the step-interval convention
/// (mask at level `l` weighs `m` at level `l+1`).
fn on_a_statistics(m: &SpaceTimeField, a: &SpaceTimeMask, skip: usize) -> (f64, f64) {
    let grid = m.grid;
    let dt = grid.dt();
    let mut sup = 0.0f64;
    let mut int = 0.0f64;
    for l in 0..grid.nt {
        let mut slice_sum = 0.0;
        for x in 0..grid.points() {
            if a.slices[l][x] {
                slice_sum += m.slices[l + 1].values[x];
                if l >= skip {
                    sup = sup.max(m.slices[l + 1].values[x]);
                }
            }
        }
        int += dt * grid.cell_volume() * slice_sum;
    }
    (sup, int)
}

pub fn epsilon_sweep(
    setup: &SweepSetup,
    ladder: &[f64],
    grid: TorusGrid,
) -> Result<LimitDensity> {
    if ladder.is_empty() {
        return Err(Error::InvalidInput("empty epsilon ladder".into()));
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) || ladder.iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidInput(
            "epsilon ladder must be strictly decreasing and positive".into(),
        ));
    }
    let a = setup.js.union_mask()?;
    let skip = initial_exclusion(&a);
    let mut residual_on_a = Vec::with_capacity(ladder.len());
    let mut int_a_m = Vec::with_capacity(ladder.len());
    let mut d_estimates = Vec::with_capacity(ladder.len());
    let mut finest: Option<SpaceTimeField> = None;
    for &eps in ladder {
        let run = solve_penalized_multi(&setup.m0, &setup.js, eps, grid)?;
        let (sup, int) = on_a_statistics(&run.m, &a, skip);
        residual_on_a.push(sup);
        int_a_m.push(int);
        d_estimates.push(run.duality_identity());
        finest = Some(run.m);
    }
    // least-squares slope of ln(int_A m) against ln(eps)
    let pairs: Vec<(f64, f64)> = ladder
        .iter()
        .zip(&int_a_m)
        .filter(|&(_, &v)| v > 0.0)
        .map(|(&e, &v)| (e.ln(), v.ln()))
        .collect();
    let slope = if pairs.len() >= 2 {
        let n = pairs.len() as f64;
        let sx: f64 = pairs.iter().map(|p| p.0).sum();
        let sy: f64 = pairs.iter().map(|p| p.1).sum();
        let sxx: f64 = pairs.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pairs.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    } else {
        f64::NAN
    };
    Ok(LimitDensity {
        m: finest.unwrap(),
        epsilons: ladder.to_vec(),
        residual_on_a,
        int_a_m,
        d_estimates,
        slope,
        excluded_initial_slices: skip,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualityMode {
    /// Evaluate the pairing at the equality witness `u*` built by
    /// [`solve_constrained_equality`]; attains the infimum when the equality
    /// construction succeeds.
    Identity,
    /// Solve the boxed finite linear program over the admissible cone.
    Lp,
}

#[derive(Debug, Clone, Copy)]
pub struct DualityValue {
    pub value: f64,
    pub mode_used: DualityMode,
    /// LP only: the minimizer touched the box, flagging `-infinity`.
    pub box_pinned: bool,
}

/// The duality functional
/// `D(k,m) = inf { pairing(m, v) : v admissible }`.
pub fn duality_value(
    m: &SpaceTimeField,
    m0: &ScalarField,
    js: &JumpSystem,
    grid: TorusGrid,
    mode: DualityMode,
    lp_box: Option<f64>,
) -> Result<DualityValue> {
    match mode {
        DualityMode::Identity => {
            let witness = solve_constrained_equality(js, &SpaceTimeField::zeros(grid), grid)?;
            let value = adjoint_pairing(m, &witness.u, m0)?;
            Ok(DualityValue { value, mode_used: mode, box_pinned: false })
        }
        DualityMode::Lp => {
            let bound = lp_box.unwrap_or_else(|| lp::default_box(js, grid, 0.0));
            let lp = lp::duality_lp_time(m, m0, js, grid, bound)?;
            Ok(DualityValue {
                value: lp.value,
                mode_used: mode,
                box_pinned: lp.box_pinned,
            })
        }
    }
}

/// Report of [`check_fp_solution`].
#[derive(Debug, Clone)]
pub struct FpCheckReport {
    /// Sup of `m` over the jump set (after the initial exclusion).
    pub max_on_a: f64,
    /// Threshold used for the vanishing test.
    pub vanish_threshold: f64,
    pub vanish_pass: bool,
    /// `pairing(m, v) - pairing(m, u*)` for each battery test field.
    pub margins: Vec<f64>,
    pub min_margin: f64,
    pub margin_tol: f64,
    pub margins_pass: bool,
    pub excluded_initial_slices: usize,
}

/// Repair an arbitrary field into the admissible cone: sweep
/// `w(x) <- min(w(x), w(x + xi))` on each jump support until stable.
/// Chains are acyclic for valid inputs, so this terminates.
fn make_feasible(w: &mut SpaceTimeField, js: &JumpSystem) -> Result<()> {
    let grid = w.grid;
    let vs = js
        .intensity
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("battery needs intensity".into()))?;
    for l in 0..grid.nt {
        for _pass in 0..=grid.points() {
            let mut changed = false;
            for (xi, v) in vs.iter().enumerate() {
                for x in 0..grid.points() {
                    if v.slices[l].values[x] > 0.0 {
                        let tgt = grid.translate(x, &js.jumps[xi].offset);
                        let cap = js.cost[xi].values[x] + w.slices[l].values[tgt];
                        if w.slices[l].values[x] > cap {
                            w.slices[l].values[x] = cap;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
    }
    // terminal condition
    let zero = ScalarField::zeros(grid);
    w.slices[grid.nt] = zero;
    Ok(())
}

/// Diagnostic check of a limit density against the variational
/// characterization: `m` vanishes on the jump set, and the pairing against
/// every admissible `v` stays above the pairing at the equality witness.
pub fn check_fp_solution(
    m: &SpaceTimeField,
    m0: &ScalarField,
    js: &JumpSystem,
    grid: TorusGrid,
    battery: usize,
    seed: u64,
) -> Result<FpCheckReport> {
    let a = js.union_mask()?;
    let skip = initial_exclusion(&a);
    let (max_on_a, _) = on_a_statistics(m, &a, skip);
    let vanish_threshold = 1e-2 * m.sup_norm();
    let witness = solve_constrained_equality(js, &SpaceTimeField::zeros(grid), grid)?;
    let base = adjoint_pairing(m, &witness.u, m0)?;
    let scale = 1.0 + base.abs() + m.sup_norm();
    let margin_tol = 1e-8 * scale;

    let mut margins = Vec::new();
    // v = u* itself: margin exactly zero
    margins.push(0.0);
    // space-constant decaying profile: exactly admissible
    {
        let mut v = witness.u.clone();
        for l in 0..=grid.nt {
            let c = 0.3 * (1.0 - grid.time(l) / grid.t_final);
            v.slices[l] = v.slices[l].axpy(1.0, &ScalarField::constant(grid, c));
        }
        margins.push(adjoint_pairing(m, &v, m0)? - base);
    }
    // random repaired perturbations
    let mut rng = SeqRng::new(seed, 0xF0CCE5);
    for _ in 0..battery {
        let mut v = witness.u.clone();
        for l in 0..grid.nt {
            let decay = 1.0 - grid.time(l) / grid.t_final;
            for x in 0..grid.points() {
                v.slices[l].values[x] += decay * rng.range(-0.5, 0.5);
            }
        }
        make_feasible(&mut v, js)?;
        margins.push(adjoint_pairing(m, &v, m0)? - base);
    }
    let min_margin = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(FpCheckReport {
        max_on_a,
        vanish_threshold,
        vanish_pass: max_on_a <= vanish_threshold,
        min_margin,
        margin_tol,
        margins_pass: min_margin >= -margin_tol,
        margins,
        excluded_initial_slices: skip,
    })
}

/// Cost-weighted exchange integral `-(1/eps) sum_l dt h^d sum_A k V m_{l+1}`
/// computed from a density and a jump system (the right-hand side of the
/// duality identity).
pub fn duality_identity_from(
    m: &SpaceTimeField,
    js: &JumpSystem,
    epsilon: f64,
    grid: TorusGrid,
) -> Result<f64> {
    let vs = js
        .intensity
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("needs intensity".into()))?;
    let dt = grid.dt();
    let mut total = 0.0;
    for l in 0..grid.nt {
        let mut acc = 0.0;
        for (xi, v) in vs.iter().enumerate() {
            for x in 0..grid.points() {
                acc += v.slices[l].values[x] * js.cost[xi].values[x] * m.slices[l + 1].values[x];
            }
        }
        total += dt * grid.cell_volume() * acc;
    }
    Ok(-total / epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::shift;

    fn grid1d(n: usize, nt: usize, t_final: f64, nu: f64) -> TorusGrid {
        TorusGrid::new(1, n, nt, t_final, nu).unwrap()
    }

    /// The standard single-jump setup: A = [0.25, 0.5), xi = 1/2, uniform m0.
    fn standard_setup(grid: TorusGrid, k0: f64) -> SweepSetup {
        let jump = LatticeJump::new(vec![grid.n as i64 / 2], &grid).unwrap();
        let v = SpaceTimeField::from_fn(grid, |_, x| {
            if x[0] >= 0.25 && x[0] < 0.5 {
                1.0
            } else {
                0.0
            }
        });
        let js = JumpSystem::new(
            vec![jump],
            vec![ScalarField::constant(grid, k0)],
            k0,
            Some(vec![v]),
        )
        .unwrap();
        SweepSetup {
            m0: ScalarField::constant(grid, 1.0),
            js,
        }
    }

    #[test]
    fn empty_mask_is_pure_heat_step() {
        let grid = grid1d(32, 8, 1.0, 0.05);
        let m = ScalarField::from_fn(grid, |x| 1.0 + (x[0] * 9.0).sin().powi(2));
        let xi = LatticeJump::new(vec![16], &grid).unwrap();
        let stepped = fp_step_single(&m, &vec![false; 32], &xi, 1e-2, grid).unwrap();
        assert!((integrate(&stepped) - integrate(&m)).abs() <= 1e-12 * integrate(&m));
    }

    #[test]
    fn symmetric_density_cancels_full_mask_exchange() {
        // A = everything, xi = half torus, m symmetric under the half shift:
        // leaving and arriving terms cancel pointwise.
        let grid = grid1d(32, 8, 1.0, 0.05);
        let m = ScalarField::from_fn(grid, |x| 1.2 + (4.0 * std::f64::consts::PI * x[0]).cos());
        let xi = LatticeJump::new(vec![16], &grid).unwrap();
        let sym_check = shift(&m, &xi);
        for i in 0..grid.points() {
            assert!((sym_check.values[i] - m.values[i]).abs() < 1e-12);
        }
        let with_jumps = fp_step_single(&m, &vec![true; 32], &xi, 1e-2, grid).unwrap();
        let heat_only = fp_step_single(&m, &vec![false; 32], &xi, 1e-2, grid).unwrap();
        for i in 0..grid.points() {
            assert!(
                (with_jumps.values[i] - heat_only.values[i]).abs() <= 1e-11,
                "index {i}"
            );
        }
    }

    #[test]
    fn zero_initial_density_stays_zero() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let setup = standard_setup(grid, 0.5);
        let run = solve_penalized_multi(&ScalarField::zeros(grid), &setup.js, 1e-2, grid).unwrap();
        assert_eq!(run.m.sup_norm(), 0.0);
    }

    #[test]
    fn mass_conserved_and_positive() {
        let grid = grid1d(32, 16, 1.0, 0.05);
        let setup = standard_setup(grid, 0.5);
        let m0 = ScalarField::from_fn(grid, |x| (x[0] * 13.0).sin().powi(2) + 0.1);
        let run = solve_penalized_multi(&m0, &setup.js, 1e-3, grid).unwrap();
        assert!(run.max_mass_drift() <= MASS_TOL_REL);
        assert!(run.m.min() >= -TOL_POS_REL * m0.sup_norm());
        assert_eq!(run.m.slices[0].values, m0.values);
    }

    #[test]
    fn duality_identity_matches_pairing() {
        let grid = grid1d(32, 16, 1.0, 0.05);
        let setup = standard_setup(grid, 0.5);
        for eps in [1e-1, 1e-2, 1e-3] {
            let run = solve_penalized_multi(&setup.m0, &setup.js, eps, grid).unwrap();
            let witness =
                solve_constrained_equality(&setup.js, &SpaceTimeField::zeros(grid), grid).unwrap();
            let pairing = adjoint_pairing(&run.m, &witness.u, &setup.m0).unwrap();
            let identity = run.duality_identity();
            let aux = duality_identity_from(&run.m, &setup.js, eps, grid).unwrap();
            assert!((identity - aux).abs() <= 1e-12 * identity.abs().max(1.0));
            assert!(
                (pairing - identity).abs() <= 1e-8 * identity.abs(),
                "eps {eps}: pairing {pairing} vs identity {identity}"
            );
        }
    }

    #[test]
    fn multi_reduces_to_single() {
        let grid = grid1d(32, 8, 1.0, 0.05);
        let setup = standard_setup(grid, 1.0);
        let a = setup.js.support_mask(0).unwrap();
        let xi = setup.js.jumps[0].clone();
        let m0 = ScalarField::from_fn(grid, |x| 1.0 + x[0]);
        let single = solve_penalized_single(&m0, &a, &xi, 1e-2, grid).unwrap();
        let multi = solve_penalized_multi(&m0, &setup.js, 1e-2, grid).unwrap();
        for l in 0..=grid.nt {
            assert_eq!(single.m.slices[l].values, multi.m.slices[l].values);
        }
    }

    #[test]
    fn linear_in_initial_data() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let setup = standard_setup(grid, 0.5);
        let m0a = ScalarField::from_fn(grid, |x| 1.0 + (x[0] * 7.0).sin().powi(2));
        let m0b = ScalarField::from_fn(grid, |x| 0.5 + x[0]);
        let combo = m0a.scaled(2.0).axpy(3.0, &m0b);
        let ra = solve_penalized_multi(&m0a, &setup.js, 1e-2, grid).unwrap();
        let rb = solve_penalized_multi(&m0b, &setup.js, 1e-2, grid).unwrap();
        let rc = solve_penalized_multi(&combo, &setup.js, 1e-2, grid).unwrap();
        for l in 0..=grid.nt {
            for i in 0..grid.points() {
                let lin = 2.0 * ra.m.slices[l].values[i] + 3.0 * rb.m.slices[l].values[i];
                assert!(
                    (rc.m.slices[l].values[i] - lin).abs() <= 1e-12 * (1.0 + lin.abs()),
                    "slice {l} index {i}"
                );
            }
        }
    }

    #[test]
    fn stationary_constant_solution_and_balance() {
        let grid = grid1d(16, 4, 1.0, 0.05);
        let jump = LatticeJump::new(vec![8], &grid).unwrap();
        let zero_v = SpaceTimeField::zeros(grid);
        let js = JumpSystem::new(
            vec![jump],
            vec![ScalarField::constant(grid, 0.5)],
            0.5,
            Some(vec![zero_v]),
        )
        .unwrap();
        let delta = 0.8;
        let run =
            solve_penalized_stationary(&ScalarField::constant(grid, 2.0), &js, delta, 1e-2, grid)
                .unwrap();
        for &v in &run.m.values {
            assert!((v - 2.0 / delta).abs() <= 1e-10);
        }
        assert!(run.mass_residual <= 1e-10);

        let zero =
            solve_penalized_stationary(&ScalarField::zeros(grid), &js, delta, 1e-2, grid).unwrap();
        assert!(zero.m.sup_norm() <= 1e-12);
    }

    #[test]
    fn stationary_balance_with_active_jumps() {
        let grid = grid1d(32, 4, 1.0, 0.05);
        let setup = standard_setup(grid, 0.5);
        let rho = ScalarField::from_fn(grid, |x| 1.0 + (x[0] * 5.0).cos().powi(2));
        let run = solve_penalized_stationary(&rho, &setup.js, 0.7, 1e-3, grid).unwrap();
        assert!(run.mass_residual <= 1e-10, "residual {}", run.mass_residual);
        assert!(run.m.min() >= -1e-12);
    }

    #[test]
    fn sweep_empty_set_has_zero_residual() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let jump = LatticeJump::new(vec![8], &grid).unwrap();
        let js = JumpSystem::new(
            vec![jump],
            vec![ScalarField::constant(grid, 0.5)],
            0.5,
            Some(vec![SpaceTimeField::zeros(grid)]),
        )
        .unwrap();
        let setup = SweepSetup {
            m0: ScalarField::constant(grid, 1.0),
            js,
        };
        let limit = epsilon_sweep(&setup, &[1e-1, 1e-2], grid).unwrap();
        assert!(limit.residual_on_a.iter().all(|&r| r == 0.0));
        assert!(limit.int_a_m.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn sweep_slope_near_one() {
        let grid = grid1d(32, 64, 1.0, 0.004);
        let setup = standard_setup(grid, 0.5);
        let ladder = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];
        let limit = epsilon_sweep(&setup, &ladder, grid).unwrap();
        assert!(
            limit.slope >= 0.8 && limit.slope <= 1.2,
            "slope {} out of band; int_A m = {:?}",
            limit.slope,
            limit.int_a_m
        );
        // residual_on_a nonincreasing within 10% slack
        for w in limit.residual_on_a.windows(2) {
            assert!(w[1] <= 1.1 * w[0], "residuals {:?}", limit.residual_on_a);
        }
        // duality estimates bounded, spread of the bottom half within 10%
        let lo = &limit.d_estimates[limit.d_estimates.len() / 2..];
        let dmax = lo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dmin = lo.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            dmax - dmin <= 0.10 * dmax.abs().max(dmin.abs()),
            "D spread: {:?}",
            limit.d_estimates
        );
        // limit vanishes on A
        let sup = *limit.residual_on_a.last().unwrap();
        assert!(sup <= 1e-2 * limit.m.sup_norm(), "sup_A m = {sup}");
    }

    #[test]
    fn sweep_rejects_bad_ladder() {
        let grid = grid1d(16, 4, 1.0, 0.05);
        let setup = standard_setup(grid, 0.5);
        assert!(epsilon_sweep(&setup, &[], grid).is_err());
        assert!(epsilon_sweep(&setup, &[1e-2, 1e-1], grid).is_err());
        assert!(epsilon_sweep(&setup, &[1e-1, -1.0], grid).is_err());
    }

    #[test]
    fn duality_lp_agrees_with_identity_on_small_grid() {
        let grid = grid1d(8, 8, 1.0, 0.05);
        let setup = standard_setup(grid, 0.5);
        let run = solve_penalized_multi(&setup.m0, &setup.js, 1e-2, grid).unwrap();
        let ident = duality_value(&run.m, &setup.m0, &setup.js, grid, DualityMode::Identity, None)
            .unwrap();
        let lp = duality_value(&run.m, &setup.m0, &setup.js, grid, DualityMode::Lp, None).unwrap();
        assert!(!lp.box_pinned);
        assert!(
            (ident.value - lp.value).abs() <= 1e-6 * ident.value.abs().max(1.0),
            "identity {} vs lp {}",
            ident.value,
            lp.value
        );
    }

    #[test]
    fn check_report_margins() {
        let grid = grid1d(32, 16, 1.0, 0.01);
        let setup = standard_setup(grid, 0.5);
        let limit = epsilon_sweep(&setup, &[1e-2, 1e-3], grid).unwrap();
        let report =
            check_fp_solution(&limit.m, &setup.m0, &setup.js, grid, 8, 2024).unwrap();
        assert_eq!(report.margins[0], 0.0);
        assert!(
            report.margins_pass,
            "min margin {} (tol {})",
            report.min_margin,
            report.margin_tol
        );
    }

    #[test]
    fn larger_jump_set_pays_at_least_as_much() {
        // A strictly contained in B: the bigger set drains at least as much
        // aggregate cost, so D(m_B) <= D(m_A) + tol.
        let grid = grid1d(32, 16, 1.0, 0.01);
        let setup_a = standard_setup(grid, 0.5);
        let jump = setup_a.js.jumps[0].clone();
        let v_b = SpaceTimeField::from_fn(grid, |_, x| {
            if x[0] >= 0.20 && x[0] < 0.55 {
                1.0
            } else {
                0.0
            }
        });
        let js_b = JumpSystem::new(
            vec![jump],
            vec![ScalarField::constant(grid, 0.5)],
            0.5,
            Some(vec![v_b]),
        )
        .unwrap();
        let eps = 1e-3;
        let run_a = solve_penalized_multi(&setup_a.m0, &setup_a.js, eps, grid).unwrap();
        let run_b = solve_penalized_multi(&setup_a.m0, &js_b, eps, grid).unwrap();
        let d_a = run_a.duality_identity();
        let d_b = run_b.duality_identity();
        assert!(d_b <= d_a + 1e-8, "D_B = {d_b} vs D_A = {d_a}");
        // and the pairing of m_B against any globally feasible v stays above D_B
        let witness_b =
            solve_constrained_equality(&js_b, &SpaceTimeField::zeros(grid), grid).unwrap();
        let mut v = witness_b.u.clone();
        for l in 0..=grid.nt {
            let c = 0.2 * (1.0 - grid.time(l) / grid.t_final);
            v.slices[l] = v.slices[l].axpy(1.0, &ScalarField::constant(grid, c));
        }
        let pairing = adjoint_pairing(&run_b.m, &v, &setup_a.m0).unwrap();
        assert!(pairing >= d_b - 1e-8 * d_b.abs().max(1.0));
    }
}
