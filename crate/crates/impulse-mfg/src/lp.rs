//! Linear-programming evaluation of the duality functional.
//!
//! The duality value is the infimum of the discrete adjoint pairing over the
//! admissible cone (test fields satisfying `v(x) - v(x+xi) <= k(x,xi)` on the
//! jump supports, `v(T) = 0`). The cone is unbounded, so the LP is run inside
//! a box `[-B, B]`; a solution pinned to the box flags the `-infinity`
//! surrogate.
//!
//! The pairing is linear in `v`; its coefficients are exactly those of
//! [`crate::grid::adjoint_pairing`]:
//! `c_l(x) = h^d [ m_{l+1}(x) - m_l(x) - nu dt (Lap_h m_{l+1})(x) ]`
//! with `m_0` replaced by the initial datum at `l = 0`.

use microlp::{ComparisonOp, OptimizationDirection, Problem};

use crate::error::{Error, Result};
use crate::grid::{laplacian, ScalarField, SpaceTimeField, TorusGrid};
use crate::qvi::JumpSystem;

#[derive(Debug, Clone, Copy)]
pub struct LpValue {
    pub value: f64,
    /// The box constraint is active: enlarging it lowers the objective, so
    /// the true infimum may be `-infinity`.
    pub box_pinned: bool,
}

fn box_binds(at_box: f64, at_larger: f64) -> bool {
    at_larger < at_box - 1e-9 * (1.0 + at_box.abs())
}

/// Default box bound: `10 * (T * f_sup + max k)`.
pub fn default_box(js: &JumpSystem, grid: TorusGrid, f_sup: f64) -> f64 {
    let max_k = js.cost.iter().fold(0.0f64, |a, c| a.max(c.max()));
    10.0 * (grid.t_final * f_sup + max_k)
}

/// Minimize the discrete pairing over `v` in the admissible cone of the jump
/// system (constraints on the intensity supports), `v(T) = 0`, `|v| <= box`.
pub fn duality_lp_time(
    m: &SpaceTimeField,
    m0: &ScalarField,
    js: &JumpSystem,
    grid: TorusGrid,
    box_bound: f64,
) -> Result<LpValue> {
    let value = duality_lp_time_at(m, m0, js, grid, box_bound)?;
    let wider = duality_lp_time_at(m, m0, js, grid, 2.0 * box_bound)?;
    Ok(LpValue {
        value,
        box_pinned: box_binds(value, wider),
    })
}

fn duality_lp_time_at(
    m: &SpaceTimeField,
    m0: &ScalarField,
    js: &JumpSystem,
    grid: TorusGrid,
    box_bound: f64,
) -> Result<f64> {
    if m.grid != grid || m0.grid != grid {
        return Err(Error::GridMismatch("duality_lp_time arguments".into()));
    }
    let intensities = js
        .intensity
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("LP duality needs an intensity".into()))?;
    let npts = grid.points();
    let vol = grid.cell_volume();
    let dt = grid.dt();

    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let mut vars = Vec::with_capacity(grid.nt * npts);
    for l in 0..grid.nt {
        let lap = laplacian(&m.slices[l + 1]);
        let prev = if l == 0 { m0 } else { &m.slices[l] };
        for x in 0..npts {
            let c = vol
                * (m.slices[l + 1].values[x]
                    - prev.values[x]
                    - grid.nu * dt * lap.values[x]);
            vars.push(problem.add_var(c, (-box_bound, box_bound)));
        }
    }
    for l in 0..grid.nt {
        for (xi, v) in intensities.iter().enumerate() {
            for x in 0..npts {
                if v.slices[l].values[x] > 0.0 {
                    let tgt = grid.translate(x, &js.jumps[xi].offset);
                    problem.add_constraint(
                        [(vars[l * npts + x], 1.0), (vars[l * npts + tgt], -1.0)],
                        ComparisonOp::Le,
                        js.cost[xi].values[x],
                    );
                }
            }
        }
    }
    let solution = problem
        .solve()
        .map_err(|e| Error::SolverBreakdown(format!("LP solve failed: {e}")))?;
    Ok(solution.objective())
}

/// Minimize the stationary pairing
/// `nu <grad m, grad v> + delta <m, v> - <rho, v>` over `v <= Mv` (imposed on
/// the intensity supports when `masked`, everywhere otherwise), `|v| <= box`.
pub fn duality_lp_stationary(
    m: &ScalarField,
    rho: &ScalarField,
    js: &JumpSystem,
    delta: f64,
    grid: TorusGrid,
    box_bound: f64,
    masked: bool,
) -> Result<LpValue> {
    let value = duality_lp_stationary_at(m, rho, js, delta, grid, box_bound, masked)?;
    let wider = duality_lp_stationary_at(m, rho, js, delta, grid, 2.0 * box_bound, masked)?;
    Ok(LpValue {
        value,
        box_pinned: box_binds(value, wider),
    })
}

fn duality_lp_stationary_at(
    m: &ScalarField,
    rho: &ScalarField,
    js: &JumpSystem,
    delta: f64,
    grid: TorusGrid,
    box_bound: f64,
    masked: bool,
) -> Result<f64> {
    if m.grid != grid || rho.grid != grid {
        return Err(Error::GridMismatch("duality_lp_stationary arguments".into()));
    }
    let npts = grid.points();
    let vol = grid.cell_volume();
    let lap = laplacian(m);

    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let mut vars = Vec::with_capacity(npts);
    for x in 0..npts {
        let c = vol * (-grid.nu * lap.values[x] + delta * m.values[x] - rho.values[x]);
        vars.push(problem.add_var(c, (-box_bound, box_bound)));
    }
    for (xi, jump) in js.jumps.iter().enumerate() {
        for x in 0..npts {
            let constrained = if masked {
                match &js.intensity {
                    Some(vs) => vs[xi].slices[0].values[x] > 0.0,
                    None => false,
                }
            } else {
                true
            };
            if constrained {
                let tgt = grid.translate(x, &jump.offset);
                problem.add_constraint(
                    [(vars[x], 1.0), (vars[tgt], -1.0)],
                    ComparisonOp::Le,
                    js.cost[xi].values[x],
                );
            }
        }
    }
    let solution = problem
        .solve()
        .map_err(|e| Error::SolverBreakdown(format!("LP solve failed: {e}")))?;
    Ok(solution.objective())
}
