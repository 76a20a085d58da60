//! Backward quasi-variational-inequality solvers for impulse control.
//!
//! The value function of the impulse control problem solves
//! `max(-d_t u - nu Lap u - f, u - Mu) = 0`, `u(T) = 0`, where
//! `Mu(x) = inf_xi { k(x,xi) + u(x + xi) }` is the jump operator. The solver
//! follows the classical construction: an outer iteration freezing the
//! obstacle at `M u^n` (starting from the unconstrained backward heat
//! solution, i.e. obstacle `+infinity`), each inner problem being a discrete
//! parabolic obstacle problem solved time step by time step with projected
//! SOR. The outer iterates decrease pointwise because `M` is monotone, which
//! is asserted on every accepted iterate.
//!
//! Time convention: slice `l` lives at `t_l = l*dt`; the backward step
//! producing slice `l` from slice `l+1` enforces the obstacle and the source
//! at level `l`. The discrete backward-operator residual on step interval `l`
//! is `R_l = (u_l - u_{l+1})/dt - nu Lap u_l - f_l`.

use crate::error::{Error, Result};
use crate::grid::{
    laplacian, shift, LatticeJump, ScalarField, SpaceTimeField, SpaceTimeMask,
    TorusGrid,
};
use crate::linalg::{CscMatrix, LinearSolver};

/// Obstacle entries at or above this sentinel mean "unconstrained".
pub const OBSTACLE_FREE: f64 = 1e30;

/// Tolerances and iteration caps shared by the QVI-family solvers.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// PSOR relaxation parameter.
    pub omega: f64,
    pub max_psor_iters: usize,
    pub max_outer: usize,
    /// Target for PDE / complementarity residuals, in backward-operator units.
    pub tol_pde: f64,
    /// Feasibility and complementarity tolerance of the returned solution.
    pub tol_qvi: f64,
    /// Stopping tolerance (sup norm) for the outer obstacle iteration.
    pub tol_outer: f64,
    /// Active set band: `u >= Mu - tol_active_rel * (1 + |u|_inf)`.
    pub tol_active_rel: f64,
    /// Sources must satisfy `min f >= -source_lower_bound`.
    pub source_lower_bound: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            omega: 1.5,
            max_psor_iters: 50_000,
            max_outer: 100,
            tol_pde: 1e-10,
            tol_qvi: 1e-8,
            tol_outer: 1e-10,
            tol_active_rel: 1e-6,
            source_lower_bound: 1e9,
        }
    }
}

/// The finite jump set `K`, its costs and (optionally) the jump intensity
/// `V(xi, t, x)` describing which jump is used where.
#[derive(Debug, Clone)]
pub struct JumpSystem {
    pub jumps: Vec<LatticeJump>,
    /// Per-jump cost field `k(., xi)`.
    pub cost: Vec<ScalarField>,
    /// Uniform lower bound `k0 > 0` with `k >= k0` everywhere.
    pub k0: f64,
    /// Per-jump intensity `V(xi,.,.)` with `V >= 0`, `sum_xi V <= 1`.
    pub intensity: Option<Vec<SpaceTimeField>>,
}

impl JumpSystem {
    pub fn new(
        jumps: Vec<LatticeJump>,
        cost: Vec<ScalarField>,
        k0: f64,
        intensity: Option<Vec<SpaceTimeField>>,
    ) -> Result<Self> {
        if jumps.is_empty() {
            return Err(Error::InvalidInput("jump set K is empty".into()));
        }
        if cost.len() != jumps.len() {
            return Err(Error::InvalidInput(format!(
                "{} cost fields for {} jumps",
                cost.len(),
                jumps.len()
            )));
        }
        if !(k0 > 0.0) {
            return Err(Error::InvalidInput(format!("need k0 > 0, got {k0}")));
        }
        let grid = cost[0].grid;
        for c in &cost {
            if c.grid != grid {
                return Err(Error::GridMismatch("cost fields on different grids".into()));
            }
            if c.min() < k0 {
                return Err(Error::InvalidInput(format!(
                    "cost dips to {} below the declared bound k0 = {k0}",
                    c.min()
                )));
            }
        }
        if let Some(vs) = &intensity {
            if vs.len() != jumps.len() {
                return Err(Error::InvalidInput(format!(
                    "{} intensity fields for {} jumps",
                    vs.len(),
                    jumps.len()
                )));
            }
            for v in vs {
                if v.grid != grid {
                    return Err(Error::GridMismatch("intensity on different grid".into()));
                }
                if v.min() < 0.0 {
                    return Err(Error::InvalidInput("intensity V must be >= 0".into()));
                }
            }
            for l in 0..=grid.nt {
                for i in 0..grid.points() {
                    let total: f64 = vs.iter().map(|v| v.slices[l].values[i]).sum();
                    if total > 1.0 + 1e-12 {
                        return Err(Error::InvalidInput(format!(
                            "sum_xi V = {total} > 1 at slice {l}, point {i}"
                        )));
                    }
                }
            }
        }
        Ok(Self { jumps, cost, k0, intensity })
    }

    /// Uniform-cost system without intensity.
    pub fn constant_cost(
        jumps: Vec<LatticeJump>,
        k0: f64,
        grid: TorusGrid,
    ) -> Result<Self> {
        let cost = jumps
            .iter()
            .map(|_| ScalarField::constant(grid, k0))
            .collect();
        Self::new(jumps, cost, k0, None)
    }

    pub fn grid(&self) -> TorusGrid {
        self.cost[0].grid
    }

    pub fn with_intensity(&self, intensity: Vec<SpaceTimeField>) -> Result<Self> {
        Self::new(self.jumps.clone(), self.cost.clone(), self.k0, Some(intensity))
    }

    /// Jump set `A_xi = { V(xi,.,.) > 0 }`.
    pub fn support_mask(&self, xi_index: usize) -> Result<SpaceTimeMask> {
        let vs = self
            .intensity
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("jump system has no intensity".into()))?;
        let v = &vs[xi_index];
        let grid = self.grid();
        let slices = v
            .slices
            .iter()
            .map(|s| s.values.iter().map(|&x| x > 0.0).collect())
            .collect();
        Ok(SpaceTimeMask { grid, slices })
    }

    /// Union `A = cup_xi A_xi`.
    pub fn union_mask(&self) -> Result<SpaceTimeMask> {
        let mut mask = SpaceTimeMask::empty(self.grid());
        for xi in 0..self.jumps.len() {
            mask = mask.union(&self.support_mask(xi)?);
        }
        Ok(mask)
    }

    /// Pointwise minimum of the costs over the jump set.
    pub fn k_star(&self) -> ScalarField {
        let grid = self.grid();
        let mut values = self.cost[0].values.clone();
        for c in &self.cost[1..] {
            for (v, &cv) in values.iter_mut().zip(&c.values) {
                *v = v.min(cv);
            }
        }
        ScalarField { grid, values }
    }
}

/// `M(k,u)(x) = min_xi { k(x,xi) + u(x + xi) }` together with the minimizing
/// jump index (ties broken by list order).
pub fn apply_m(js: &JumpSystem, u: &ScalarField) -> (ScalarField, Vec<usize>) {
    let grid = u.grid;
    let mut best = vec![f64::INFINITY; grid.points()];
    let mut argmin = vec![0usize; grid.points()];
    for (xi_idx, (jump, cost)) in js.jumps.iter().zip(&js.cost).enumerate() {
        let translated = shift(u, &jump.inverse()); // translated(x) = u(x + xi)
        for i in 0..grid.points() {
            let cand = cost.values[i] + translated.values[i];
            if cand < best[i] {
                best[i] = cand;
                argmin[i] = xi_idx;
            }
        }
    }
    (ScalarField { grid, values: best }, argmin)
}

/// Discrete complementarity system of one backward step with frozen obstacle:
/// find `u` with `B u <= b`, `u <= psi` and pointwise equality in one of the
/// two, where `B = a I - b_lap Lap_h`. Solved by projected SOR.
///
/// Returns the solution and the final LCP residual `max |min(b - Bu, psi - u)|`.
fn psor(
    grid: TorusGrid,
    a: f64,
    b_lap: f64,
    rhs: &[f64],
    obstacle: &[f64],
    initial: &[f64],
    cfg: &SolverConfig,
    atol: f64,
) -> Result<(Vec<f64>, f64)> {
    let npts = grid.points();
    let inv_h2 = (grid.n * grid.n) as f64;
    let off = b_lap * inv_h2;
    let diag = a + 2.0 * grid.d as f64 * off;
    let mut u: Vec<f64> = initial
        .iter()
        .zip(obstacle)
        .map(|(&x, &p)| if p < OBSTACLE_FREE { x.min(p) } else { x })
        .collect();

    let neighbor_sum = |u: &[f64], i: usize| -> f64 {
        let mut s = 0.0;
        for axis in 0..grid.d {
            s += u[grid.neighbor(i, axis, 1)] + u[grid.neighbor(i, axis, -1)];
        }
        s
    };

    let mut residual = f64::INFINITY;
    for sweep in 0..cfg.max_psor_iters {
        for i in 0..npts {
            let gs = (rhs[i] + off * neighbor_sum(&u, i)) / diag;
            let mut cand = u[i] + cfg.omega * (gs - u[i]);
            if obstacle[i] < OBSTACLE_FREE {
                cand = cand.min(obstacle[i]);
            }
            u[i] = cand;
        }
        if sweep % 4 == 3 || sweep + 1 == cfg.max_psor_iters {
            residual = 0.0f64;
            for i in 0..npts {
                let r = rhs[i] - (diag * u[i] - off * neighbor_sum(&u, i));
                let m = if obstacle[i] < OBSTACLE_FREE {
                    r.min(obstacle[i] - u[i])
                } else {
                    r
                };
                residual = residual.max(m.abs());
            }
            if residual <= atol {
                return Ok((u, residual));
            }
        }
    }
    Err(Error::NonConvergence {
        what: "projected SOR".into(),
        iterations: cfg.max_psor_iters,
        residual,
    })
}

/// One backward implicit-Euler time step of the obstacle problem with frozen
/// obstacle: `(I - nu dt Lap_h) u <= u_next + dt f`, `u <= obstacle`,
/// complementarity pointwise. Obstacle entries `>= 1e30` are unconstrained.
pub fn solve_obstacle_step(
    f_slice: &ScalarField,
    u_next: &ScalarField,
    obstacle: &ScalarField,
    grid: TorusGrid,
    cfg: &SolverConfig,
) -> Result<ScalarField> {
    if f_slice.grid != grid || u_next.grid != grid || obstacle.grid != grid {
        return Err(Error::GridMismatch("solve_obstacle_step arguments".into()));
    }
    let dt = grid.dt();
    let rhs: Vec<f64> = u_next
        .values
        .iter()
        .zip(&f_slice.values)
        .map(|(&un, &f)| un + dt * f)
        .collect();
    let scale = rhs.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let atol = cfg.tol_pde * dt * scale;
    let (values, _res) = psor(
        grid,
        1.0,
        grid.nu * dt,
        &rhs,
        &obstacle.values,
        &u_next.values,
        cfg,
        atol,
    )?;
    Ok(ScalarField { grid, values })
}

/// Solution of a backward QVI with the measured residuals.
#[derive(Debug, Clone)]
pub struct QviSolution {
    pub u: SpaceTimeField,
    /// `{ u = Mu }` within the active band.
    pub active: SpaceTimeMask,
    /// Backward-operator residual `R_l = (u_l - u_{l+1})/dt - nu Lap u_l - f_l`
    /// on step intervals `l = 0..nt-1` (slice `nt` is zero).
    pub pde_residual: SpaceTimeField,
    pub outer_iterations: usize,
    /// Whether the outer iterates were pointwise nonincreasing (within
    /// `tol_outer`).
    pub monotone: bool,
    /// `min (Mu - u)` over all points and levels; feasibility requires this
    /// to be `>= -tol_qvi`.
    pub feasibility_margin: f64,
    /// `max |min(Mu - u, -R)|` over step intervals.
    pub complementarity_residual: f64,
    /// Sup-norm residual of the PDE on the inactive set.
    pub inactive_pde_residual: f64,
    /// Active band actually used: `tol_active_rel * (1 + |u|_inf)`.
    pub tol_active: f64,
}

fn backward_sweep(
    js: &JumpSystem,
    f: &SpaceTimeField,
    grid: TorusGrid,
    cfg: &SolverConfig,
    previous: Option<&SpaceTimeField>,
) -> Result<SpaceTimeField> {
    let free = ScalarField::constant(grid, OBSTACLE_FREE);
    let mut slices = vec![ScalarField::zeros(grid); grid.nt + 1];
    for l in (0..grid.nt).rev() {
        let obstacle = match previous {
            Some(prev) => apply_m(js, &prev.slices[l]).0,
            None => free.clone(),
        };
        let next = slices[l + 1].clone();
        slices[l] = solve_obstacle_step(&f.slices[l], &next, &obstacle, grid, cfg)?;
    }
    SpaceTimeField::new(grid, slices)
}

fn qvi_report(
    js: &JumpSystem,
    f: &SpaceTimeField,
    u: SpaceTimeField,
    outer_iterations: usize,
    monotone: bool,
    cfg: &SolverConfig,
) -> QviSolution {
    let grid = u.grid;
    let dt = grid.dt();
    let tol_active = cfg.tol_active_rel * (1.0 + u.sup_norm());
    let mut active = SpaceTimeMask::empty(grid);
    let mut residual_slices = vec![ScalarField::zeros(grid); grid.nt + 1];
    let mut feasibility_margin = f64::INFINITY;
    let mut complementarity = 0.0f64;
    let mut inactive_res = 0.0f64;

    let mut gaps: Vec<Vec<f64>> = Vec::with_capacity(grid.nt + 1);
    for l in 0..=grid.nt {
        let (mu, _) = apply_m(js, &u.slices[l]);
        let gap: Vec<f64> = mu
            .values
            .iter()
            .zip(&u.slices[l].values)
            .map(|(m, v)| m - v)
            .collect();
        for &g in &gap {
            feasibility_margin = feasibility_margin.min(g);
        }
        active.slices[l] = gap.iter().map(|&g| g <= tol_active).collect();
        gaps.push(gap);
    }
    for l in 0..grid.nt {
        let lap = laplacian(&u.slices[l]);
        let mut vals = vec![0.0; grid.points()];
        for i in 0..grid.points() {
            let r = (u.slices[l].values[i] - u.slices[l + 1].values[i]) / dt
                - grid.nu * lap.values[i]
                - f.slices[l].values[i];
            vals[i] = r;
            complementarity = complementarity.max(gaps[l][i].min(-r).abs());
            if !active.slices[l][i] {
                inactive_res = inactive_res.max(r.abs());
            }
        }
        residual_slices[l] = ScalarField { grid, values: vals };
    }

    QviSolution {
        u,
        active,
        pde_residual: SpaceTimeField { grid, slices: residual_slices },
        outer_iterations,
        monotone,
        feasibility_margin,
        complementarity_residual: complementarity,
        inactive_pde_residual: inactive_res,
        tol_active,
    }
}

/// Solve the backward QVI `max(-d_t u - nu Lap u - f, u - Mu) = 0`,
/// `u(T) = 0`, by the decreasing outer iteration with frozen obstacles.
pub fn solve_qvi(
    js: &JumpSystem,
    f: &SpaceTimeField,
    grid: TorusGrid,
    cfg: &SolverConfig,
) -> Result<QviSolution> {
    if f.grid != grid || js.grid() != grid {
        return Err(Error::GridMismatch("solve_qvi arguments".into()));
    }
    let fmin = f.min();
    if fmin < -cfg.source_lower_bound {
        return Err(Error::InvalidInput(format!(
            "source unbounded below: min f = {fmin} < -{}",
            cfg.source_lower_bound
        )));
    }

    let mut u = backward_sweep(js, f, grid, cfg, None)?;
    let mut monotone = true;
    for outer in 1..=cfg.max_outer {
        let next = backward_sweep(js, f, grid, cfg, Some(&u))?;
        let mut sup_diff = 0.0f64;
        let mut max_increase = 0.0f64;
        for l in 0..=grid.nt {
            for i in 0..grid.points() {
                let d = next.slices[l].values[i] - u.slices[l].values[i];
                sup_diff = sup_diff.max(d.abs());
                max_increase = max_increase.max(d);
            }
        }
        if max_increase > cfg.tol_outer {
            monotone = false;
        }
        u = next;
        if sup_diff <= cfg.tol_outer {
            return Ok(qvi_report(js, f, u, outer, monotone, cfg));
        }
    }
    Err(Error::NonConvergence {
        what: "QVI outer iteration".into(),
        iterations: cfg.max_outer,
        residual: f64::NAN,
    })
}

/// Stationary QVI solution.
#[derive(Debug, Clone)]
pub struct StationaryQviSolution {
    pub u: ScalarField,
    pub active: Vec<bool>,
    pub outer_iterations: usize,
    pub monotone: bool,
    pub feasibility_margin: f64,
    pub complementarity_residual: f64,
    pub tol_active: f64,
}

/// Solve `max(-nu Lap u + lambda u - f, u - Mu) = 0` in the torus by the same
/// decreasing outer iteration with the elliptic operator.
pub fn solve_stationary_qvi(
    js: &JumpSystem,
    f: &ScalarField,
    lambda: f64,
    grid: TorusGrid,
    cfg: &SolverConfig,
) -> Result<StationaryQviSolution> {
    if f.grid != grid || js.grid() != grid {
        return Err(Error::GridMismatch("solve_stationary_qvi arguments".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("need lambda > 0, got {lambda}")));
    }
    if f.min() < -cfg.source_lower_bound {
        return Err(Error::InvalidInput("source unbounded below".into()));
    }
    let scale = f.sup_norm().max(1.0);
    let atol = cfg.tol_pde * scale;
    let free = vec![OBSTACLE_FREE; grid.points()];
    let guess: Vec<f64> = f.values.iter().map(|v| v / lambda).collect();
    let (mut u, _) = psor(grid, lambda, grid.nu, &f.values, &free, &guess, cfg, atol)?;

    let mut monotone = true;
    let mut iterations = cfg.max_outer;
    let mut converged = false;
    for outer in 1..=cfg.max_outer {
        let u_field = ScalarField { grid, values: u.clone() };
        let (obstacle, _) = apply_m(js, &u_field);
        let (next, _) = psor(grid, lambda, grid.nu, &f.values, &obstacle.values, &u, cfg, atol)?;
        let mut sup_diff = 0.0f64;
        let mut max_increase = 0.0f64;
        for i in 0..grid.points() {
            let d = next[i] - u[i];
            sup_diff = sup_diff.max(d.abs());
            max_increase = max_increase.max(d);
        }
        if max_increase > cfg.tol_outer {
            monotone = false;
        }
        u = next;
        if sup_diff <= cfg.tol_outer {
            iterations = outer;
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "stationary QVI outer iteration".into(),
            iterations: cfg.max_outer,
            residual: f64::NAN,
        });
    }

    let u_field = ScalarField { grid, values: u };
    let (mu, _) = apply_m(js, &u_field);
    let tol_active = cfg.tol_active_rel * (1.0 + u_field.sup_norm());
    let lap = laplacian(&u_field);
    let mut feasibility_margin = f64::INFINITY;
    let mut complementarity = 0.0f64;
    let mut active = vec![false; grid.points()];
    for i in 0..grid.points() {
        let gap = mu.values[i] - u_field.values[i];
        feasibility_margin = feasibility_margin.min(gap);
        active[i] = gap <= tol_active;
        let r = -grid.nu * lap.values[i] + lambda * u_field.values[i] - f.values[i];
        complementarity = complementarity.max(gap.min(-r).abs());
    }
    Ok(StationaryQviSolution {
        u: u_field,
        active,
        outer_iterations: iterations,
        monotone,
        feasibility_margin,
        complementarity_residual: complementarity,
        tol_active,
    })
}

/// Result of the equality-constrained backward solve used to build the
/// duality witness `u*`.
#[derive(Debug, Clone)]
pub struct ConstrainedSolution {
    pub u: SpaceTimeField,
    /// Sup of `|u(x) - k(x,xi) - u(x+xi)|` over the jump sets.
    pub equality_residual: f64,
    /// Sup of the backward PDE residual off the jump sets.
    pub pde_residual: f64,
    /// `min over A_xi of min_{xi' != xi} (k(x,xi') + u(x+xi') - u(x))`;
    /// positive iff the strict-separation condition holds.
    pub separation_margin: f64,
    pub separation_ok: bool,
}

/// Build `u` satisfying the backward heat equation with source `f` off the
/// jump sets and the jump equality `u(t,x) = k(x,xi) + u(t,x+xi)` on each
/// `A_xi = {V(xi) > 0}`, by eliminating constrained points along their jump
/// chains into the implicit step system.
///
/// Fails with `HypothesisViolated` if a jump chain cycles inside the jump
/// sets (infinitely many simultaneous jumps).
pub fn solve_constrained_equality(
    js: &JumpSystem,
    f: &SpaceTimeField,
    grid: TorusGrid,
) -> Result<ConstrainedSolution> {
    if f.grid != grid || js.grid() != grid {
        return Err(Error::GridMismatch("solve_constrained_equality arguments".into()));
    }
    let intensities = js
        .intensity
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("constrained solve needs an intensity".into()))?;
    let npts = grid.points();
    let dt = grid.dt();
    let inv_h2 = (grid.n * grid.n) as f64;
    let off = grid.nu * dt * inv_h2;
    let diag = 1.0 + 2.0 * grid.d as f64 * off;

    let mut slices = vec![ScalarField::zeros(grid); grid.nt + 1];
    let mut cached: Option<(Vec<Option<usize>>, LinearSolver, Vec<usize>, Vec<usize>)> = None;

    for l in (0..grid.nt).rev() {
        // region(x) = first jump whose set contains x at this level
        let region: Vec<Option<usize>> = (0..npts)
            .map(|i| {
                intensities
                    .iter()
                    .position(|v| v.slices[l].values[i] > 0.0)
            })
            .collect();

        // Resolve each constrained point to (free endpoint, accumulated cost).
        let mut endpoint = vec![usize::MAX; npts];
        let mut chain_cost = vec![0.0f64; npts];
        for start in 0..npts {
            if region[start].is_none() {
                continue;
            }
            let mut hops = 0usize;
            let mut x = start;
            let mut acc = 0.0;
            loop {
                match region[x] {
                    None => break,
                    Some(xi) => {
                        acc += js.cost[xi].values[x];
                        x = grid.translate(x, &js.jumps[xi].offset);
                        hops += 1;
                        if hops > npts {
                            return Err(Error::HypothesisViolated(format!(
                                "jump chain starting at point {start} (slice {l}) never leaves the jump sets"
                            )));
                        }
                    }
                }
            }
            endpoint[start] = x;
            chain_cost[start] = acc;
        }

        // Reduced implicit system on the free points.
        let rebuild = match &cached {
            Some((prev_region, ..)) => prev_region != &region,
            None => true,
        };
        if rebuild {
            let free: Vec<usize> = (0..npts).filter(|&i| region[i].is_none()).collect();
            if free.is_empty() {
                return Err(Error::HypothesisViolated(format!(
                    "every point of slice {l} lies in the jump sets"
                )));
            }
            let mut reduced_index = vec![usize::MAX; npts];
            for (r, &i) in free.iter().enumerate() {
                reduced_index[i] = r;
            }
            let mut trip: Vec<(usize, usize, f64)> = Vec::new();
            for (r, &i) in free.iter().enumerate() {
                trip.push((r, r, diag));
                for axis in 0..grid.d {
                    for step in [-1i64, 1] {
                        let nb = grid.neighbor(i, axis, step);
                        if region[nb].is_none() {
                            trip.push((r, reduced_index[nb], -off));
                        } else {
                            trip.push((r, reduced_index[endpoint[nb]], -off));
                        }
                    }
                }
            }
            let matrix = CscMatrix::from_triplets(free.len(), &trip);
            cached = Some((region.clone(), LinearSolver::new(matrix)?, free, reduced_index));
        }
        let (_, solver, free, reduced_index) = cached.as_ref().unwrap();

        let mut rhs = vec![0.0f64; free.len()];
        let u_next = slices[l + 1].clone();
        for (r, &i) in free.iter().enumerate() {
            let mut b = u_next.values[i] + dt * f.slices[l].values[i];
            for axis in 0..grid.d {
                for step in [-1i64, 1] {
                    let nb = grid.neighbor(i, axis, step);
                    if region[nb].is_some() {
                        b += off * chain_cost[nb];
                    }
                }
            }
            rhs[r] = b;
        }
        let sol = solver.solve(&rhs)?;
        let mut values = vec![0.0f64; npts];
        for i in 0..npts {
            values[i] = if region[i].is_none() {
                sol[reduced_index[i]]
            } else {
                chain_cost[i] + sol[reduced_index[endpoint[i]]]
            };
        }
        slices[l] = ScalarField { grid, values };
    }

    let u = SpaceTimeField::new(grid, slices)?;

    // Residuals and the strict-separation condition on the result.
    let mut equality_residual = 0.0f64;
    let mut pde_residual = 0.0f64;
    let mut separation_margin = f64::INFINITY;
    for l in 0..grid.nt {
        let lap = laplacian(&u.slices[l]);
        for i in 0..npts {
            let on_some_set = intensities.iter().any(|v| v.slices[l].values[i] > 0.0);
            if on_some_set {
                for (xi, v) in intensities.iter().enumerate() {
                    if v.slices[l].values[i] > 0.0 {
                        let tgt = grid.translate(i, &js.jumps[xi].offset);
                        let r = u.slices[l].values[i]
                            - js.cost[xi].values[i]
                            - u.slices[l].values[tgt];
                        equality_residual = equality_residual.max(r.abs());
                    } else {
                        let tgt = grid.translate(i, &js.jumps[xi].offset);
                        let margin = js.cost[xi].values[i] + u.slices[l].values[tgt]
                            - u.slices[l].values[i];
                        separation_margin = separation_margin.min(margin);
                    }
                }
            } else {
                let r = (u.slices[l].values[i] - u.slices[l + 1].values[i]) / dt
                    - grid.nu * lap.values[i]
                    - f.slices[l].values[i];
                pde_residual = pde_residual.max(r.abs());
            }
        }
    }
    if !separation_margin.is_finite() {
        // single jump, or no point carries a competing jump
        separation_margin = f64::INFINITY;
    }

    Ok(ConstrainedSolution {
        separation_ok: separation_margin > 0.0,
        equality_residual,
        pde_residual,
        separation_margin,
        u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1d(n: usize, nt: usize, t_final: f64, nu: f64) -> TorusGrid {
        TorusGrid::new(1, n, nt, t_final, nu).unwrap()
    }

    fn singleton_system(grid: TorusGrid, offset: i64, k0: f64) -> JumpSystem {
        let jump = LatticeJump::new(vec![offset], &grid).unwrap();
        JumpSystem::constant_cost(vec![jump], k0, grid).unwrap()
    }

    #[test]
    fn apply_m_constant_cost() {
        let grid = grid1d(16, 4, 1.0, 0.05);
        let js = singleton_system(grid, 5, 0.7);
        let u = ScalarField::zeros(grid);
        let (mu, arg) = apply_m(&js, &u);
        assert!(mu.values.iter().all(|&v| v == 0.7));
        assert!(arg.iter().all(|&a| a == 0));
    }

    #[test]
    fn apply_m_singleton_matches_shift() {
        let grid = grid1d(16, 4, 1.0, 0.05);
        let js = singleton_system(grid, 3, 0.5);
        let u = ScalarField::from_fn(grid, |x| (x[0] * 9.0).sin());
        let (mu, _) = apply_m(&js, &u);
        let expected = shift(&u, &js.jumps[0].inverse());
        for i in 0..grid.points() {
            assert_eq!(mu.values[i], 0.5 + expected.values[i]);
        }
    }

    #[test]
    fn apply_m_constant_shift_invariance() {
        let grid = grid1d(16, 4, 1.0, 0.05);
        let j1 = LatticeJump::new(vec![2], &grid).unwrap();
        let j2 = LatticeJump::new(vec![7], &grid).unwrap();
        let cost = vec![
            ScalarField::from_fn(grid, |x| 0.5 + 0.2 * (x[0] * 5.0).cos().abs()),
            ScalarField::from_fn(grid, |x| 0.5 + 0.3 * x[0]),
        ];
        let js = JumpSystem::new(vec![j1, j2], cost, 0.5, None).unwrap();
        let u = ScalarField::from_fn(grid, |x| (x[0] * 13.0).sin());
        let (mu, arg) = apply_m(&js, &u);
        let u_shifted = u.axpy(1.0, &ScalarField::constant(grid, 2.25));
        let (mu2, arg2) = apply_m(&js, &u_shifted);
        assert_eq!(arg, arg2);
        for i in 0..grid.points() {
            assert!((mu2.values[i] - mu.values[i] - 2.25).abs() < 1e-12);
        }
    }

    #[test]
    fn obstacle_step_constant_heat() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let cfg = SolverConfig::default();
        let free = ScalarField::constant(grid, OBSTACLE_FREE);
        let u = solve_obstacle_step(
            &ScalarField::zeros(grid),
            &ScalarField::constant(grid, 3.0),
            &free,
            grid,
            &cfg,
        )
        .unwrap();
        for &v in &u.values {
            assert!((v - 3.0).abs() <= 1e-11);
        }
    }

    #[test]
    fn obstacle_step_binding_everywhere() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let cfg = SolverConfig::default();
        let u = solve_obstacle_step(
            &ScalarField::zeros(grid),
            &ScalarField::constant(grid, 1.0),
            &ScalarField::zeros(grid),
            grid,
            &cfg,
        )
        .unwrap();
        for &v in &u.values {
            assert!(v.abs() <= 1e-12, "constraint should bind at 0, got {v}");
        }
    }

    #[test]
    fn obstacle_step_uniform_source() {
        // (I - nu dt Lap) u = dt * 1 has the exact solution u = dt.
        let grid = grid1d(16, 8, 1.0, 0.05);
        let cfg = SolverConfig::default();
        let free = ScalarField::constant(grid, OBSTACLE_FREE);
        let u = solve_obstacle_step(
            &ScalarField::constant(grid, 1.0),
            &ScalarField::zeros(grid),
            &free,
            grid,
            &cfg,
        )
        .unwrap();
        let dt = grid.dt();
        for &v in &u.values {
            assert!((v - dt).abs() <= 1e-12);
        }
    }

    #[test]
    fn qvi_zero_source() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let js = singleton_system(grid, 8, 0.5);
        let sol = solve_qvi(&js, &SpaceTimeField::zeros(grid), grid, &SolverConfig::default())
            .unwrap();
        assert!(sol.u.sup_norm() <= 1e-10);
        assert!(sol.monotone);
        assert!(sol.feasibility_margin >= 0.4);
    }

    #[test]
    fn qvi_constant_source_analytic() {
        // For c*T <= k0, the cap never binds and u(t) = c*(T - t) exactly.
        let grid = grid1d(16, 16, 1.0, 0.05);
        let c = 0.4;
        let js = singleton_system(grid, 8, 0.5);
        let f = SpaceTimeField::constant(grid, c);
        let sol = solve_qvi(&js, &f, grid, &SolverConfig::default()).unwrap();
        for l in 0..=grid.nt {
            let expected = c * (grid.t_final - grid.time(l));
            for &v in &sol.u.slices[l].values {
                assert!(
                    (v - expected).abs() <= 1e-10,
                    "level {l}: {v} vs {expected}"
                );
            }
        }
        assert!(sol.monotone);
        assert!(sol.complementarity_residual <= 1e-8);
    }

    #[test]
    fn qvi_source_perturbation_stability() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let js = singleton_system(grid, 8, 0.2);
        let cfg = SolverConfig::default();
        let f = SpaceTimeField::from_fn(grid, |_, x| 1.0 + (x[0] * 11.0).sin().abs());
        let base = solve_qvi(&js, &f, grid, &cfg).unwrap();
        let bump = SpaceTimeField::from_fn(grid, |t, x| (x[0] * 5.0).cos() * (1.0 + t));
        let mut last = f64::INFINITY;
        for delta in [1e-1, 1e-2, 1e-3] {
            let mut perturbed = f.clone();
            for l in 0..=grid.nt {
                perturbed.slices[l] = perturbed.slices[l].axpy(delta, &bump.slices[l]);
            }
            let sol = solve_qvi(&js, &perturbed, grid, &cfg).unwrap();
            let mut diff = sol.u.clone();
            for l in 0..=grid.nt {
                diff.slices[l] = diff.slices[l].axpy(-1.0, &base.u.slices[l]);
            }
            let err = diff.l2_norm();
            assert!(err < 0.5 * last, "delta {delta}: err {err} vs last {last}");
            last = err;
        }
    }

    #[test]
    fn stationary_qvi_constant() {
        let grid = grid1d(16, 4, 1.0, 0.05);
        let js = singleton_system(grid, 8, 0.5);
        let lambda = 2.0;
        let cfg = SolverConfig::default();
        let sol =
            solve_stationary_qvi(&js, &ScalarField::constant(grid, 0.8), lambda, grid, &cfg)
                .unwrap();
        for &v in &sol.u.values {
            assert!((v - 0.4).abs() <= 1e-10);
        }
        let zero = solve_stationary_qvi(&js, &ScalarField::zeros(grid), lambda, grid, &cfg)
            .unwrap();
        assert!(zero.u.sup_norm() <= 1e-10);
    }

    #[test]
    fn constrained_equality_empty_reduces_to_heat() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let jump = LatticeJump::new(vec![8], &grid).unwrap();
        let zero_v = vec![SpaceTimeField::zeros(grid)];
        let js = JumpSystem::new(
            vec![jump],
            vec![ScalarField::constant(grid, 0.5)],
            0.5,
            Some(zero_v),
        )
        .unwrap();
        let f = SpaceTimeField::from_fn(grid, |_, x| (x[0] * 7.0).sin());
        let sol = solve_constrained_equality(&js, &f, grid).unwrap();
        assert!(sol.pde_residual <= 1e-9);
        // matches the plain unconstrained backward sweep
        let plain = backward_sweep(&js, &f, grid, &SolverConfig::default(), None).unwrap();
        assert!(sol.u.sup_diff(&plain) <= 1e-9);
    }

    #[test]
    fn constrained_equality_strip() {
        let grid = grid1d(32, 16, 1.0, 0.05);
        let jump = LatticeJump::new(vec![16], &grid).unwrap();
        let v = SpaceTimeField::from_fn(grid, |_, x| {
            if x[0] >= 0.25 && x[0] < 0.5 {
                1.0
            } else {
                0.0
            }
        });
        let js = JumpSystem::new(
            vec![jump.clone()],
            vec![ScalarField::constant(grid, 0.5)],
            0.5,
            Some(vec![v]),
        )
        .unwrap();
        let sol =
            solve_constrained_equality(&js, &SpaceTimeField::zeros(grid), grid).unwrap();
        assert!(sol.equality_residual <= 1e-12);
        assert!(sol.pde_residual <= 1e-8);
        // on A the value is the cost plus the value half a torus away
        for l in 0..grid.nt {
            for i in 0..grid.points() {
                let x = i as f64 * grid.h();
                if (0.25..0.5).contains(&x) {
                    let tgt = grid.translate(i, &jump.offset);
                    let expect = 0.5 + sol.u.slices[l].values[tgt];
                    assert!((sol.u.slices[l].values[i] - expect).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn constrained_equality_full_space_fails() {
        let grid = grid1d(16, 4, 1.0, 0.05);
        let jump = LatticeJump::new(vec![8], &grid).unwrap();
        let js = JumpSystem::new(
            vec![jump],
            vec![ScalarField::constant(grid, 0.5)],
            0.5,
            Some(vec![SpaceTimeField::constant(grid, 1.0)]),
        )
        .unwrap();
        let err =
            solve_constrained_equality(&js, &SpaceTimeField::zeros(grid), grid).unwrap_err();
        assert!(matches!(err, Error::HypothesisViolated(_)));
    }

    #[test]
    fn jump_system_validation() {
        let grid = grid1d(16, 4, 1.0, 0.05);
        let jump = LatticeJump::new(vec![4], &grid).unwrap();
        // cost below k0
        assert!(JumpSystem::new(
            vec![jump.clone()],
            vec![ScalarField::constant(grid, 0.1)],
            0.5,
            None
        )
        .is_err());
        // intensity above 1
        assert!(JumpSystem::new(
            vec![jump],
            vec![ScalarField::constant(grid, 0.5)],
            0.5,
            Some(vec![SpaceTimeField::constant(grid, 1.5)]),
        )
        .is_err());
    }
}
