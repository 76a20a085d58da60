//! Heat equation in a time-dependent domain and the adjoint test functions
//! used by the uniqueness diagnostics.
//!
//! The Dirichlet problem `d_t u - nu Lap u = f` in `B`, `u = phi` on the
//! complement `A`, is solved by penalization:
//! `d_t u_eps - nu Lap u_eps + (1/eps) 1_A (u_eps - phi) = f`, `u(0) = phi(0)`.
//!
//! The adjoint construction iterates the monotone map `T`: each application
//! solves the backward heat equation in `B` with Dirichlet data `M w` on `A`
//! (boundary rows eliminated directly) and source equal to the discrete
//! backward action of the equality witness `u*` plus a small perturbation.
//! Its fixed point `v` satisfies `v = Mv` on `A` and pairs against densities
//! vanishing on `A` exactly like `u*` shifted by the perturbation.

use crate::error::{Error, Result};
use crate::grid::{laplacian, ScalarField, SpaceTimeField, SpaceTimeMask, TorusGrid};
use crate::linalg::{CscMatrix, LinearSolver};
use crate::qvi::{apply_m, solve_qvi, JumpSystem, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    /// `B(t)` nondecreasing in time for inclusion (so `A` shrinks).
    Nondecreasing,
    /// Lipschitz space-time boundary, as declared by the caller.
    Lipschitz,
    General,
}

/// Partition of the space-time grid into the PDE region `B` and its
/// complement `A`.
#[derive(Debug, Clone)]
pub struct DomainMask {
    pub b: SpaceTimeMask,
    pub a: SpaceTimeMask,
    pub monotonicity: Monotonicity,
}

impl DomainMask {
    /// Build from the PDE region `B`; `A` is the complement.
    pub fn from_pde_region(b: SpaceTimeMask, monotonicity: Monotonicity) -> Result<Self> {
        let grid = b.grid;
        let a = SpaceTimeMask {
            grid,
            slices: b
                .slices
                .iter()
                .map(|s| s.iter().map(|&x| !x).collect())
                .collect(),
        };
        let dm = Self { b, a, monotonicity };
        dm.check_declaration()?;
        Ok(dm)
    }

    /// Build from the constrained region `A`; `B` is the complement.
    pub fn from_complement(a: SpaceTimeMask, monotonicity: Monotonicity) -> Result<Self> {
        let grid = a.grid;
        let b = SpaceTimeMask {
            grid,
            slices: a
                .slices
                .iter()
                .map(|s| s.iter().map(|&x| !x).collect())
                .collect(),
        };
        let dm = Self { b, a, monotonicity };
        dm.check_declaration()?;
        Ok(dm)
    }

    fn check_declaration(&self) -> Result<()> {
        if self.monotonicity == Monotonicity::Nondecreasing {
            for l in 1..self.b.slices.len() {
                for i in 0..self.b.grid.points() {
                    if self.b.slices[l - 1][i] && !self.b.slices[l][i] {
                        return Err(Error::InvalidInput(format!(
                            "domain declared nondecreasing but B shrinks at slice {l}, point {i}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of the penalized Dirichlet solve.
#[derive(Debug, Clone)]
pub struct PenalizedDirichlet {
    pub u: SpaceTimeField,
    pub epsilon: f64,
    /// `sup_A |u - phi|` (diagnostic; decreases with epsilon).
    pub misfit_on_a: f64,
    /// Discrete `L^2((0,T), H^1)` norm of `u`.
    pub l2_h1_norm: f64,
}

/// Discrete `L^2(H^1)` norm, with the gradient term evaluated through the
/// exact summation-by-parts identity `<grad f, grad f> = <-Lap f, f>`.
pub fn l2_h1_norm(u: &SpaceTimeField) -> f64 {
    let grid = u.grid;
    let dt = grid.dt();
    let mut total = 0.0;
    for l in 1..=grid.nt {
        let s = &u.slices[l];
        let lap = laplacian(s);
        let mut l2 = 0.0;
        let mut energy = 0.0;
        for i in 0..grid.points() {
            l2 += s.values[i] * s.values[i];
            energy += -lap.values[i] * s.values[i];
        }
        total += dt * grid.cell_volume() * (l2 + energy);
    }
    total.sqrt()
}

/// Implicit Euler in time with the penalty `(1/eps) 1_A (u - phi)`; the mask
/// and data are taken at the new time level of each step.
pub fn solve_penalized_dirichlet(
    phi: &SpaceTimeField,
    f: &SpaceTimeField,
    mask: &DomainMask,
    epsilon: f64,
    grid: TorusGrid,
) -> Result<PenalizedDirichlet> {
    if phi.grid != grid || f.grid != grid || mask.a.grid != grid {
        return Err(Error::GridMismatch("solve_penalized_dirichlet arguments".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("need epsilon > 0, got {epsilon}")));
    }
    let npts = grid.points();
    let dt = grid.dt();
    let inv_h2 = (grid.n * grid.n) as f64;
    let off = grid.nu * dt * inv_h2;
    let pen = dt / epsilon;

    let mut slices = Vec::with_capacity(grid.nt + 1);
    slices.push(phi.slices[0].clone());
    let mut cached: Option<(Vec<bool>, LinearSolver)> = None;
    for l in 0..grid.nt {
        let a_slice = &mask.a.slices[l + 1];
        let rebuild = match &cached {
            Some((prev, _)) => prev != a_slice,
            None => true,
        };
        if rebuild {
            let mut trip = Vec::with_capacity(npts * (1 + 2 * grid.d));
            for i in 0..npts {
                let mut d = 1.0 + 2.0 * grid.d as f64 * off;
                if a_slice[i] {
                    d += pen;
                }
                trip.push((i, i, d));
                for axis in 0..grid.d {
                    trip.push((i, grid.neighbor(i, axis, 1), -off));
                    trip.push((i, grid.neighbor(i, axis, -1), -off));
                }
            }
            cached = Some((
                a_slice.clone(),
                LinearSolver::new(CscMatrix::from_triplets(npts, &trip))?,
            ));
        }
        let (_, solver) = cached.as_ref().unwrap();
        let mut rhs = vec![0.0; npts];
        for i in 0..npts {
            rhs[i] = slices[l].values[i] + dt * f.slices[l + 1].values[i];
            if a_slice[i] {
                rhs[i] += pen * phi.slices[l + 1].values[i];
            }
        }
        slices.push(ScalarField::new(grid, solver.solve(&rhs)?)?);
    }
    let u = SpaceTimeField::new(grid, slices)?;
    let mut misfit = 0.0f64;
    for l in 0..=grid.nt {
        for i in 0..npts {
            if mask.a.slices[l][i] {
                misfit = misfit.max((u.slices[l].values[i] - phi.slices[l].values[i]).abs());
            }
        }
    }
    let l2_h1 = l2_h1_norm(&u);
    Ok(PenalizedDirichlet {
        u,
        epsilon,
        misfit_on_a: misfit,
        l2_h1_norm: l2_h1,
    })
}

/// The discrete backward-operator action of a field:
/// `R_l = (u_l - u_{l+1})/dt - nu Lap_h u_l` on step intervals (slice `nt`
/// zero).
pub fn backward_action(u: &SpaceTimeField) -> SpaceTimeField {
    let grid = u.grid;
    let dt = grid.dt();
    let mut slices = Vec::with_capacity(grid.nt + 1);
    for l in 0..grid.nt {
        let lap = laplacian(&u.slices[l]);
        let values = (0..grid.points())
            .map(|i| (u.slices[l].values[i] - u.slices[l + 1].values[i]) / dt
                - grid.nu * lap.values[i])
            .collect();
        slices.push(ScalarField { grid, values });
    }
    slices.push(ScalarField::zeros(grid));
    SpaceTimeField { grid, slices }
}

/// Adjoint test field built by the monotone fixed point.
#[derive(Debug, Clone)]
pub struct AdjointTest {
    pub v: SpaceTimeField,
    pub iterations: usize,
    /// Sup of `|v - Mv|` over `A` at the fixed point.
    pub boundary_residual: f64,
    /// Measured strict-separation margin of `u*` (infinite for a singleton
    /// jump set).
    pub separation_margin: f64,
    /// Perturbation bound actually enforced.
    pub eps_bound: f64,
    /// How far any iterate escaped the bracket `[v1, v2]` from the two QVI
    /// solutions (0 when contained).
    pub bracket_violation: f64,
}

/// One application of the monotone map: solve the backward heat equation in
/// `B` with Dirichlet data `M w` on `A` and the given source.
fn apply_t(
    js: &JumpSystem,
    w: &SpaceTimeField,
    source: &SpaceTimeField,
    a: &SpaceTimeMask,
    terminal: &ScalarField,
    grid: TorusGrid,
    cache: &mut Option<(Vec<bool>, LinearSolver, Vec<usize>, Vec<usize>)>,
) -> Result<SpaceTimeField> {
    let npts = grid.points();
    let dt = grid.dt();
    let inv_h2 = (grid.n * grid.n) as f64;
    let off = grid.nu * dt * inv_h2;
    let diag = 1.0 + 2.0 * grid.d as f64 * off;

    let mut slices = vec![ScalarField::zeros(grid); grid.nt + 1];
    slices[grid.nt] = terminal.clone();
    for l in (0..grid.nt).rev() {
        let a_slice = &a.slices[l];
        let (boundary, _) = apply_m(js, &w.slices[l]);
        let rebuild = match cache {
            Some((prev, ..)) => prev != a_slice,
            None => true,
        };
        if rebuild {
            let free: Vec<usize> = (0..npts).filter(|&i| !a_slice[i]).collect();
            if free.is_empty() {
                return Err(Error::HypothesisViolated(format!(
                    "slice {l}: the PDE region B is empty"
                )));
            }
            let mut reduced = vec![usize::MAX; npts];
            for (r, &i) in free.iter().enumerate() {
                reduced[i] = r;
            }
            let mut trip = Vec::new();
            for (r, &i) in free.iter().enumerate() {
                trip.push((r, r, diag));
                for axis in 0..grid.d {
                    for step in [-1i64, 1] {
                        let nb = grid.neighbor(i, axis, step);
                        if !a_slice[nb] {
                            trip.push((r, reduced[nb], -off));
                        }
                    }
                }
            }
            *cache = Some((
                a_slice.clone(),
                LinearSolver::new(CscMatrix::from_triplets(free.len(), &trip))?,
                free,
                reduced,
            ));
        }
        let (_, solver, free, reduced) = cache.as_ref().unwrap();
        let mut rhs = vec![0.0; free.len()];
        let next = slices[l + 1].clone();
        for (r, &i) in free.iter().enumerate() {
            let mut b = next.values[i] + dt * source.slices[l].values[i];
            for axis in 0..grid.d {
                for step in [-1i64, 1] {
                    let nb = grid.neighbor(i, axis, step);
                    if a_slice[nb] {
                        b += off * boundary.values[nb];
                    }
                }
            }
            rhs[r] = b;
        }
        let sol = solver.solve(&rhs)?;
        let mut values = vec![0.0; npts];
        for i in 0..npts {
            values[i] = if a_slice[i] {
                boundary.values[i]
            } else {
                sol[reduced[i]]
            };
        }
        slices[l] = ScalarField { grid, values };
    }
    SpaceTimeField::new(grid, slices)
}

/// Strict-separation margin of `u*`: on each `A_xi`, the slack of every
/// competing jump `xi' != xi`.
fn separation_margin(js: &JumpSystem, u_star: &SpaceTimeField, grid: TorusGrid) -> Result<f64> {
    let vs = js
        .intensity
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("adjoint test needs intensity".into()))?;
    let mut margin = f64::INFINITY;
    for l in 0..grid.nt {
        for x in 0..grid.points() {
            for (xi, v) in vs.iter().enumerate() {
                if v.slices[l].values[x] > 0.0 {
                    for (xi2, jump2) in js.jumps.iter().enumerate() {
                        if xi2 != xi {
                            let tgt = grid.translate(x, &jump2.offset);
                            margin = margin.min(
                                js.cost[xi2].values[x] + u_star.slices[l].values[tgt]
                                    - u_star.slices[l].values[x],
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(margin)
}

/// Build the adjoint test field `v` of the uniqueness argument: the monotone
/// fixed point of `T` for the source `(-d_t u* - nu Lap u*) + f_perturb`,
/// satisfying `v = Mv` on `A` and `v(T) = u*(T)`.
pub fn build_adjoint_test(
    js: &JumpSystem,
    u_star: &SpaceTimeField,
    f_perturb: &SpaceTimeField,
    grid: TorusGrid,
    cfg: &SolverConfig,
) -> Result<AdjointTest> {
    if u_star.grid != grid || f_perturb.grid != grid {
        return Err(Error::GridMismatch("build_adjoint_test arguments".into()));
    }
    let margin = separation_margin(js, u_star, grid)?;
    let mut eps_bound = 0.1 * js.k0 / grid.t_final;
    if margin.is_finite() {
        eps_bound = eps_bound.min(0.5 * margin);
    }
    let f_sup = f_perturb.sup_norm();
    if f_sup > eps_bound {
        return Err(Error::InvalidInput(format!(
            "perturbation sup {f_sup:.3e} exceeds the admissible bound {eps_bound:.3e} \
             (separation margin {margin:.3e})"
        )));
    }

    // union of the jump supports, aligned to step intervals
    let mut a = SpaceTimeMask::empty(grid);
    for xi in 0..js.jumps.len() {
        a = a.union(&js.support_mask(xi)?);
    }

    let residual_star = backward_action(u_star);
    let mut source = residual_star.clone();
    for l in 0..grid.nt {
        source.slices[l] = source.slices[l].axpy(1.0, &f_perturb.slices[l]);
    }
    let terminal = u_star.slices[grid.nt].clone();

    // bracketing QVI solutions from the existence proof
    let f1 = source.clone();
    let mut f2 = residual_star.clone();
    for l in 0..grid.nt {
        f2.slices[l] = f2.slices[l].axpy(-1.0, &f_perturb.slices[l]);
    }
    let mut bracket = None;
    if let (Ok(q1), Ok(q2)) = (
        solve_qvi(js, &f1, grid, cfg),
        solve_qvi(js, &f2, grid, cfg),
    ) {
        let mut v2 = u_star.clone();
        for l in 0..=grid.nt {
            v2.slices[l] = v2.slices[l].scaled(2.0).axpy(-1.0, &q2.u.slices[l]);
        }
        bracket = Some((q1.u, v2));
    }

    let mut cache = None;
    let mut v = u_star.clone();
    let mut bracket_violation = 0.0f64;
    let mut iterations = 0;
    let mut converged = false;
    for outer in 1..=cfg.max_outer {
        let next = apply_t(js, &v, &source, &a, &terminal, grid, &mut cache)?;
        if let Some((v1, v2)) = &bracket {
            for l in 0..=grid.nt {
                for i in 0..grid.points() {
                    let x = next.slices[l].values[i];
                    bracket_violation = bracket_violation
                        .max(v1.slices[l].values[i] - x)
                        .max(x - v2.slices[l].values[i]);
                }
            }
        }
        let diff = next.sup_diff(&v);
        v = next;
        iterations = outer;
        if diff <= cfg.tol_outer {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: format!(
                "monotone adjoint iteration (bracket violation {bracket_violation:.3e})"
            ),
            iterations,
            residual: f64::NAN,
        });
    }

    let mut boundary_residual = 0.0f64;
    for l in 0..grid.nt {
        let (mv, _) = apply_m(js, &v.slices[l]);
        for i in 0..grid.points() {
            if a.slices[l][i] {
                boundary_residual =
                    boundary_residual.max((v.slices[l].values[i] - mv.values[i]).abs());
            }
        }
    }
    Ok(AdjointTest {
        v,
        iterations,
        boundary_residual,
        separation_margin: margin,
        eps_bound,
        bracket_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LatticeJump;
    use crate::qvi::solve_constrained_equality;

    fn grid1d(n: usize, nt: usize, t_final: f64, nu: f64) -> TorusGrid {
        TorusGrid::new(1, n, nt, t_final, nu).unwrap()
    }

    fn half_torus_system(grid: TorusGrid, k0: f64) -> JumpSystem {
        let jump = LatticeJump::new(vec![grid.n as i64 / 2], &grid).unwrap();
        let v = SpaceTimeField::from_fn(grid, |_, x| {
            if x[0] >= 0.25 && x[0] < 0.5 {
                1.0
            } else {
                0.0
            }
        });
        JumpSystem::new(
            vec![jump],
            vec![ScalarField::constant(grid, k0)],
            k0,
            Some(vec![v]),
        )
        .unwrap()
    }

    #[test]
    fn nondecreasing_declaration_checked() {
        let grid = grid1d(8, 4, 1.0, 0.05);
        // B shrinks between slices 1 and 2
        let b = SpaceTimeMask::from_fn(grid, |t, x| !(t > 0.3 && x[0] < 0.5));
        assert!(DomainMask::from_pde_region(b.clone(), Monotonicity::Nondecreasing).is_err());
        assert!(DomainMask::from_pde_region(b, Monotonicity::General).is_ok());
    }

    #[test]
    fn empty_a_is_plain_heat_solve() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let mask =
            DomainMask::from_complement(SpaceTimeMask::empty(grid), Monotonicity::General)
                .unwrap();
        let phi = SpaceTimeField::from_fn(grid, |_, x| (x[0] * 7.0).sin());
        let f = SpaceTimeField::constant(grid, 0.4);
        let sol = solve_penalized_dirichlet(&phi, &f, &mask, 1e-3, grid).unwrap();
        // manual implicit march
        let npts = grid.points();
        let dt = grid.dt();
        let inv_h2 = (grid.n * grid.n) as f64;
        let mut trip = Vec::new();
        for i in 0..npts {
            trip.push((i, i, 1.0 + 2.0 * grid.nu * dt * inv_h2));
            trip.push((i, grid.neighbor(i, 0, 1), -grid.nu * dt * inv_h2));
            trip.push((i, grid.neighbor(i, 0, -1), -grid.nu * dt * inv_h2));
        }
        let solver = LinearSolver::new(CscMatrix::from_triplets(npts, &trip)).unwrap();
        let mut cur = phi.slices[0].clone();
        for l in 0..grid.nt {
            let rhs: Vec<f64> = cur.values.iter().map(|&v| v + dt * 0.4).collect();
            cur = ScalarField::new(grid, solver.solve(&rhs).unwrap()).unwrap();
            for i in 0..npts {
                assert!((sol.u.slices[l + 1].values[i] - cur.values[i]).abs() <= 1e-11);
            }
        }
    }

    #[test]
    fn zero_data_zero_solution() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let mask = DomainMask::from_complement(
            SpaceTimeMask::static_from_fn(grid, |x| x[0] >= 0.5),
            Monotonicity::General,
        )
        .unwrap();
        let sol = solve_penalized_dirichlet(
            &SpaceTimeField::zeros(grid),
            &SpaceTimeField::zeros(grid),
            &mask,
            1e-3,
            grid,
        )
        .unwrap();
        assert_eq!(sol.u.sup_norm(), 0.0);
    }

    #[test]
    fn penalty_misfit_scales_linearly_in_epsilon() {
        // phi = t makes the penalty chase a moving target: on A the residual
        // is O(1), so |u - phi| on A scales like epsilon.
        let grid = grid1d(32, 32, 1.0, 0.05);
        let mask = DomainMask::from_complement(
            SpaceTimeMask::static_from_fn(grid, |x| x[0] >= 0.5),
            Monotonicity::General,
        )
        .unwrap();
        let phi = SpaceTimeField::from_fn(grid, |t, _| t);
        let f = SpaceTimeField::zeros(grid);
        let ladder = [1e-1, 1e-2, 1e-3, 1e-4];
        let mut misfits = Vec::new();
        let mut norms = Vec::new();
        for &eps in &ladder {
            let sol = solve_penalized_dirichlet(&phi, &f, &mask, eps, grid).unwrap();
            misfits.push(sol.misfit_on_a);
            norms.push(sol.l2_h1_norm);
        }
        let pairs: Vec<(f64, f64)> = ladder
            .iter()
            .zip(&misfits)
            .map(|(&e, &m)| (e.ln(), m.ln()))
            .collect();
        let n = pairs.len() as f64;
        let sx: f64 = pairs.iter().map(|p| p.0).sum();
        let sy: f64 = pairs.iter().map(|p| p.1).sum();
        let sxx: f64 = pairs.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pairs.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!(
            (0.8..=1.2).contains(&slope),
            "slope {slope}, misfits {misfits:?}"
        );
        // uniform L2(H1) bound along the ladder
        let max = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max <= 3.0 * min, "norms {norms:?}");
    }

    #[test]
    fn adjoint_fixed_point_unperturbed_is_u_star() {
        let grid = grid1d(32, 16, 1.0, 0.05);
        let js = half_torus_system(grid, 0.5);
        let star = solve_constrained_equality(&js, &SpaceTimeField::zeros(grid), grid).unwrap();
        let cfg = SolverConfig::default();
        let test =
            build_adjoint_test(&js, &star.u, &SpaceTimeField::zeros(grid), grid, &cfg).unwrap();
        assert!(test.v.sup_diff(&star.u) <= 1e-8, "diff {}", test.v.sup_diff(&star.u));
        assert!(test.boundary_residual <= 1e-8);
        assert!(test.bracket_violation <= 1e-8);
    }

    #[test]
    fn adjoint_empty_a_constant_perturbation() {
        // With no jump set the map has no boundary part; a constant
        // perturbation c shifts the fixed point by exactly c*(T - t).
        let grid = grid1d(16, 8, 1.0, 0.05);
        let jump = LatticeJump::new(vec![8], &grid).unwrap();
        let js = JumpSystem::new(
            vec![jump],
            vec![ScalarField::constant(grid, 0.8)],
            0.8,
            Some(vec![SpaceTimeField::zeros(grid)]),
        )
        .unwrap();
        let star = solve_constrained_equality(&js, &SpaceTimeField::zeros(grid), grid).unwrap();
        let c = 0.05;
        let cfg = SolverConfig::default();
        let test = build_adjoint_test(
            &js,
            &star.u,
            &SpaceTimeField::constant(grid, c),
            grid,
            &cfg,
        )
        .unwrap();
        for l in 0..=grid.nt {
            let expect = c * (grid.t_final - grid.time(l));
            for i in 0..grid.points() {
                let got = test.v.slices[l].values[i] - star.u.slices[l].values[i];
                assert!(
                    (got - expect).abs() <= 1e-9,
                    "slice {l}: shift {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn adjoint_rejects_oversized_perturbation() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let js = half_torus_system(grid, 0.5);
        let star = solve_constrained_equality(&js, &SpaceTimeField::zeros(grid), grid).unwrap();
        let too_big = SpaceTimeField::constant(grid, 10.0 * js.k0 / grid.t_final);
        let err = build_adjoint_test(
            &js,
            &star.u,
            &too_big,
            grid,
            &SolverConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn monotone_map_preserves_order() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let js = half_torus_system(grid, 0.5);
        let star = solve_constrained_equality(&js, &SpaceTimeField::zeros(grid), grid).unwrap();
        let source = backward_action(&star.u);
        let a = js.union_mask().unwrap();
        let terminal = ScalarField::zeros(grid);
        let lo = star.u.clone();
        let mut hi = star.u.clone();
        for l in 0..=grid.nt {
            let bump = ScalarField::from_fn(grid, |x| 0.2 + 0.1 * (x[0] * 3.0).sin().powi(2));
            hi.slices[l] = hi.slices[l].axpy(1.0, &bump);
        }
        let mut cache = None;
        let t_lo = apply_t(&js, &lo, &source, &a, &terminal, grid, &mut cache).unwrap();
        let t_hi = apply_t(&js, &hi, &source, &a, &terminal, grid, &mut cache).unwrap();
        for l in 0..=grid.nt {
            for i in 0..grid.points() {
                assert!(
                    t_lo.slices[l].values[i] <= t_hi.slices[l].values[i] + 1e-10,
                    "order violated at slice {l}, point {i}"
                );
            }
        }
    }
}
