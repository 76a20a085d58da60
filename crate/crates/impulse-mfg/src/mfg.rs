//! The coupled mean-field game of impulse control.
//!
//! A solution pairs the value function `u` of the QVI with running cost
//! `f(m)` and a density `m` that jumps only where jumping is strictly
//! optimal, tied together by the mixed-strategy complementarity
//! `int int (-d_t u - nu Lap u - f(m)) m = 0`.
//!
//! The penalized system is solved by a damped fixed point: from the current
//! density, solve the QVI, read the active set `{u = Mu}` (with hysteresis)
//! and the argmin jump per point, drive the penalized Fokker-Planck solver
//! with that pure intensity, and relax the density toward its output. The
//! relaxation itself realizes the mixed-strategy field `alpha`; the returned
//! `alpha` is reconstructed a posteriori from the complementarity slack and
//! the measured drain rate on the doubly-degenerate set.

use crate::error::{Error, Result};
use crate::fokker_planck::{solve_penalized_multi, solve_penalized_stationary};
use crate::grid::{
    adjoint_pairing, inner, integrate, laplacian, ScalarField, SpaceTimeField, TorusGrid,
};
use crate::lp;
use crate::qvi::{
    apply_m, solve_qvi, solve_stationary_qvi, JumpSystem, QviSolution, SolverConfig,
};
use crate::rng::SeqRng;
use crate::timedomain::backward_action;

/// Running-cost coupling `f(m)`.
#[derive(Debug, Clone)]
pub enum CouplingKind {
    /// `f(m) = scale * m^exponent`, potential
    /// `F(m) = scale/(exponent+1) int m^(exponent+1)`.
    LocalPower { scale: f64, exponent: f64 },
    /// `f(m) = scale * K_w(K_w m)^exponent` with a symmetric moving-average
    /// kernel of half-width `width` cells; monotone because the kernel is
    /// self-adjoint.
    SmoothedLocal { scale: f64, exponent: f64, width: usize },
}

#[derive(Debug, Clone)]
pub struct Coupling {
    pub kind: CouplingKind,
    pub monotone: bool,
}

impl Coupling {
    pub fn local_power(scale: f64, exponent: f64) -> Result<Self> {
        if !(scale >= 0.0) || !(exponent >= 1.0) {
            return Err(Error::InvalidInput(format!(
                "local power coupling needs scale >= 0 and exponent >= 1, got {scale}, {exponent}"
            )));
        }
        Ok(Self {
            kind: CouplingKind::LocalPower { scale, exponent },
            monotone: true,
        })
    }

    pub fn smoothed_local(scale: f64, exponent: f64, width: usize) -> Result<Self> {
        if !(scale >= 0.0) || !(exponent >= 1.0) {
            return Err(Error::InvalidInput("invalid smoothed coupling parameters".into()));
        }
        Ok(Self {
            kind: CouplingKind::SmoothedLocal { scale, exponent, width },
            monotone: true,
        })
    }

    fn mollify(&self, f: &ScalarField, width: usize) -> ScalarField {
        if width == 0 {
            return f.clone();
        }
        let grid = f.grid;
        let mut out = vec![0.0; grid.points()];
        let count = (2 * width + 1).pow(grid.d as u32) as f64;
        for i in 0..grid.points() {
            let mut acc = 0.0;
            match grid.d {
                1 => {
                    for s in -(width as i64)..=(width as i64) {
                        acc += f.values[grid.neighbor(i, 0, s)];
                    }
                }
                _ => {
                    for s0 in -(width as i64)..=(width as i64) {
                        let row = grid.neighbor(i, 0, s0);
                        for s1 in -(width as i64)..=(width as i64) {
                            acc += f.values[grid.neighbor(row, 1, s1)];
                        }
                    }
                }
            }
            out[i] = acc / count;
        }
        ScalarField { grid, values: out }
    }

    pub fn apply_slice(&self, m: &ScalarField) -> ScalarField {
        match self.kind {
            CouplingKind::LocalPower { scale, exponent } => ScalarField {
                grid: m.grid,
                values: m
                    .values
                    .iter()
                    .map(|&v| scale * v.max(0.0).powf(exponent))
                    .collect(),
            },
            CouplingKind::SmoothedLocal { scale, exponent, width } => {
                let smoothed = self.mollify(m, width);
                let powered = ScalarField {
                    grid: m.grid,
                    values: smoothed
                        .values
                        .iter()
                        .map(|&v| scale * v.max(0.0).powf(exponent))
                        .collect(),
                };
                self.mollify(&powered, width)
            }
        }
    }

    pub fn apply(&self, m: &SpaceTimeField) -> SpaceTimeField {
        SpaceTimeField {
            grid: m.grid,
            slices: m.slices.iter().map(|s| self.apply_slice(s)).collect(),
        }
    }

    /// `F(m)` with derivative `f`: for the local power family
    /// `F(m) = scale/(p+1) int m^(p+1)`; the smoothed family composes with
    /// the kernel so that the chain rule returns `apply_slice`.
    pub fn potential_slice(&self, m: &ScalarField) -> f64 {
        match self.kind {
            CouplingKind::LocalPower { scale, exponent } => {
                m.grid.cell_volume()
                    * m.values
                        .iter()
                        .map(|&v| scale / (exponent + 1.0) * v.max(0.0).powf(exponent + 1.0))
                        .sum::<f64>()
            }
            CouplingKind::SmoothedLocal { scale, exponent, width } => {
                let smoothed = self.mollify(m, width);
                m.grid.cell_volume()
                    * smoothed
                        .values
                        .iter()
                        .map(|&v| scale / (exponent + 1.0) * v.max(0.0).powf(exponent + 1.0))
                        .sum::<f64>()
            }
        }
    }

    /// Measured monotonicity on random nonnegative pairs: the minimum of
    /// `int (f(m1) - f(m2))(m1 - m2)` (nonnegative for monotone couplings).
    pub fn monotonicity_margin(&self, grid: TorusGrid, seed: u64, trials: usize) -> f64 {
        let mut rng = SeqRng::new(seed, 0xC0_0F);
        let mut min = f64::INFINITY;
        for _ in 0..trials {
            let m1 = ScalarField {
                grid,
                values: (0..grid.points()).map(|_| rng.range(0.0, 2.0)).collect(),
            };
            let m2 = ScalarField {
                grid,
                values: (0..grid.points()).map(|_| rng.range(0.0, 2.0)).collect(),
            };
            let f1 = self.apply_slice(&m1);
            let f2 = self.apply_slice(&m2);
            let diff_f = f1.axpy(-1.0, &f2);
            let diff_m = m1.axpy(-1.0, &m2);
            min = min.min(inner(&diff_f, &diff_m));
        }
        min
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Damping {
    /// Fixed relaxation weight.
    Constant(f64),
    /// `theta_j = 1/(j+1)`.
    FictitiousPlay,
    /// Start at `initial` and halve whenever the update norm stalls. Mixed
    /// equilibria make the pure best response chatter at fixed amplitude;
    /// shrinking the step lets the relaxed density settle.
    AdaptiveHalving { initial: f64 },
}

/// Damping schedule state shared by the two fixed-point loops.
struct ThetaSchedule {
    damping: Damping,
    theta: f64,
    best: f64,
    stall: usize,
}

impl ThetaSchedule {

    const FLOOR: f64 = 1.0 / 65536.0;
    const WINDOW: usize = 6;

    fn new(damping: Damping) -> Self {
        let theta = match damping {
            Damping::Constant(t) => t,
            Damping::FictitiousPlay => 1.0,
            Damping::AdaptiveHalving { initial } => initial,
        };
        Self {
            damping,
            theta,
            best: f64::INFINITY,
            stall: 0,
        }
    }

    fn theta(&self, j: usize) -> f64 {
        match self.damping {
            Damping::Constant(t) => t,
            Damping::FictitiousPlay => 1.0 / (j + 1) as f64,
            Damping::AdaptiveHalving { .. } => self.theta,
        }
    }

    fn at_floor(&self) -> bool {
        matches!(self.damping, Damping::AdaptiveHalving { .. }) && self.theta <= Self::FLOOR
    }

    fn observe(&mut self, rel_update: f64) {
        if let Damping::AdaptiveHalving { .. } = self.damping {
            if rel_update <= 0.7 * self.best {
                self.best = rel_update;
                self.stall = 0;
            } else {
                self.stall += 1;
                if self.stall >= Self::WINDOW {
                    self.theta = (self.theta * 0.5).max(Self::FLOOR);
                    self.stall = 0;
                    self.best = rel_update;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum InitialGuess {
    /// Pure heat evolution of the initial density.
    HeatFlow,
    /// Constant density with the same mass.
    Uniform,
}

#[derive(Debug, Clone)]
pub struct MfgConfig {
    pub qvi: SolverConfig,
    pub damping: Damping,
    pub initial: InitialGuess,
    /// Relative `L^2` stopping tolerance of the fixed point.
    pub tol_fixed: f64,
    /// Alternative stop: the complementarity integral of the candidate state
    /// falls below `comp_stop_rel` times its natural scale. At a mixed
    /// equilibrium the pure best response keeps chattering while the relaxed
    /// density already satisfies the system; this criterion detects that.
    pub comp_stop_rel: f64,
    /// Looser acceptance once the damping has hit its floor and stalled
    /// there: the chatter amplitude (and with it the complementarity floor)
    /// is proportional to theta, so no further improvement is available.
    pub comp_accept_rel: f64,
    /// Iterations to spend at the damping floor before the looser acceptance
    /// applies.
    pub floor_stall_iters: usize,
    pub max_fixed: usize,
}

impl Default for MfgConfig {
    fn default() -> Self {
        Self {
            qvi: SolverConfig::default(),
            damping: Damping::AdaptiveHalving { initial: 0.5 },
            initial: InitialGuess::HeatFlow,
            tol_fixed: 1e-11,
            comp_stop_rel: 1e-9,
            comp_accept_rel: 3e-7,
            floor_stall_iters: 50,
            max_fixed: 4000,
        }
    }
}

/// Named residuals of an MFG solution.
#[derive(Debug, Clone, Copy)]
pub struct MfgResiduals {
    /// Pointwise QVI complementarity residual of `u` for source `f(m)`.
    pub qvi_residual: f64,
    /// Mass drift plus negativity of the density.
    pub fp_residual: f64,
    /// `|sum_l dt <(-d_t u - nu Lap u - f(m))_l, m_{l+1}>|`.
    pub complementarity: f64,
    /// `min (Mu - u)` over all points and levels.
    pub feasibility_margin: f64,
}

#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub u: SpaceTimeField,
    pub m: SpaceTimeField,
    /// Mixed-strategy retention field in `[0,1]`, reconstructed from the
    /// complementarity slack (1 on strict-slack points).
    pub alpha: SpaceTimeField,
    /// Pure jump intensity per jump: indicator of the argmin jump on the
    /// active set.
    pub intensity: Vec<SpaceTimeField>,
    pub residuals: MfgResiduals,
    pub iterations: usize,
    pub converged: bool,
    /// Fixed-point trace: relative `L^2` update per iteration.
    pub update_trace: Vec<f64>,
    /// Complementarity integral per iteration (signed).
    pub complementarity_trace: Vec<f64>,
}

/// Active set with hysteresis: a point joins when its gap drops below
/// `tol_active` and leaves only when the gap exceeds `2 tol_active`.
fn active_mask(
    u: &SpaceTimeField,
    js: &JumpSystem,
    tol_active: f64,
    previous: Option<&Vec<Vec<bool>>>,
) -> (Vec<Vec<bool>>, Vec<Vec<usize>>) {
    let grid = u.grid;
    let mut masks = Vec::with_capacity(grid.nt + 1);
    let mut argmins = Vec::with_capacity(grid.nt + 1);
    for l in 0..=grid.nt {
        let (mu, argmin) = apply_m(js, &u.slices[l]);
        let mask: Vec<bool> = (0..grid.points())
            .map(|i| {
                let gap = mu.values[i] - u.slices[l].values[i];
                match previous.map(|p| p[l][i]) {
                    Some(true) => gap <= 2.0 * tol_active,
                    _ => gap <= tol_active,
                }
            })
            .collect();
        masks.push(mask);
        argmins.push(argmin);
    }
    (masks, argmins)
}

fn pure_intensity(
    js: &JumpSystem,
    masks: &[Vec<bool>],
    argmins: &[Vec<usize>],
    grid: TorusGrid,
) -> Vec<SpaceTimeField> {
    (0..js.jumps.len())
        .map(|xi| {
            let slices = (0..=grid.nt)
                .map(|l| ScalarField {
                    grid,
                    values: (0..grid.points())
                        .map(|i| {
                            if masks[l][i] && argmins[l][i] == xi {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                })
                .collect();
            SpaceTimeField { grid, slices }
        })
        .collect()
}

fn heat_flow(m0: &ScalarField, js: &JumpSystem, grid: TorusGrid) -> Result<SpaceTimeField> {
    let zero_v: Vec<SpaceTimeField> =
        js.jumps.iter().map(|_| SpaceTimeField::zeros(grid)).collect();
    let free = js.with_intensity(zero_v)?;
    Ok(solve_penalized_multi(m0, &free, 1.0, grid)?.m)
}

/// Signed complementarity integral
/// `sum_l dt <((u_l - u_{l+1})/dt - nu Lap u_l - f_l), m_{l+1}>`.
pub fn complementarity_integral(
    u: &SpaceTimeField,
    f: &SpaceTimeField,
    m: &SpaceTimeField,
) -> f64 {
    let grid = u.grid;
    let dt = grid.dt();
    let action = backward_action(u);
    let mut total = 0.0;
    for l in 0..grid.nt {
        let r = action.slices[l].axpy(-1.0, &f.slices[l]);
        total += dt * inner(&r, &m.slices[l + 1]);
    }
    total
}

/// Reconstruct `alpha`: 1 on strict-slack points; on doubly-degenerate points
/// (active and PDE-exact) the measured retention `-eps * rho / m`, where
/// `rho` is the forward heat residual of the density.
fn reconstruct_alpha(
    u: &SpaceTimeField,
    f: &SpaceTimeField,
    m: &SpaceTimeField,
    js: &JumpSystem,
    epsilon: f64,
    tol_active: f64,
    grid: TorusGrid,
) -> SpaceTimeField {
    let dt = grid.dt();
    let action = backward_action(u);
    let mut slices = Vec::with_capacity(grid.nt + 1);
    for l in 0..grid.nt {
        let (mu, _) = apply_m(js, &u.slices[l]);
        let lap_m = laplacian(&m.slices[l + 1]);
        let values = (0..grid.points())
            .map(|i| {
                let gap = mu.values[i] - u.slices[l].values[i];
                let r = action.slices[l].values[i] - f.slices[l].values[i];
                if gap > tol_active || r.abs() > tol_active {
                    1.0
                } else {
                    let rho = (m.slices[l + 1].values[i] - m.slices[l].values[i]) / dt
                        - grid.nu * lap_m.values[i];
                    (-epsilon * rho / (m.slices[l + 1].values[i] + 1e-300)).clamp(0.0, 1.0)
                }
            })
            .collect();
        slices.push(ScalarField { grid, values });
    }
    slices.push(ScalarField::constant(grid, 1.0));
    SpaceTimeField { grid, slices }
}

fn mfg_residuals(
    qvi: &QviSolution,
    run_m: &SpaceTimeField,
    m0: &ScalarField,
    f: &SpaceTimeField,
) -> MfgResiduals {
    let mass0 = integrate(m0);
    let drift = run_m
        .slices
        .iter()
        .fold(0.0f64, |a, s| a.max((integrate(s) - mass0).abs()))
        / mass0.abs().max(1e-300);
    let neg = (-run_m.min()).max(0.0);
    MfgResiduals {
        qvi_residual: qvi.complementarity_residual,
        fp_residual: drift.max(neg),
        complementarity: complementarity_integral(&qvi.u, f, run_m).abs(),
        feasibility_margin: qvi.feasibility_margin,
    }
}

/// Damped fixed point for the penalized MFG system.
pub fn solve_penalized_mfg(
    m0: &ScalarField,
    js_costs: &JumpSystem,
    coupling: &Coupling,
    epsilon: f64,
    grid: TorusGrid,
    cfg: &MfgConfig,
) -> Result<MfgSolution> {
    if m0.grid != grid || js_costs.grid() != grid {
        return Err(Error::GridMismatch("solve_penalized_mfg arguments".into()));
    }
    if m0.min() < 0.0 {
        return Err(Error::InvalidInput("initial density must be >= 0".into()));
    }
    let mut m = match cfg.initial {
        InitialGuess::HeatFlow => heat_flow(m0, js_costs, grid)?,
        InitialGuess::Uniform => {
            let mut field = SpaceTimeField::constant(grid, integrate(m0));
            field.slices[0] = m0.clone();
            field
        }
    };

    let mut prev_active: Option<Vec<Vec<bool>>> = None;
    let mut update_trace = Vec::new();
    let mut complementarity_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_qvi: Option<QviSolution> = None;

    let mut schedule = ThetaSchedule::new(cfg.damping);
    let mut floor_iters = 0usize;
    // union of the hysteresis bands visited so far: every drain the damped
    // density carries happened inside it, so defects there are admissible
    let mut band_union: Vec<Vec<bool>> = vec![vec![false; grid.points()]; grid.nt + 1];
    for j in 0..cfg.max_fixed {
        let f = coupling.apply(&m);
        let qvi = solve_qvi(js_costs, &f, grid, &cfg.qvi)?;
        let (masks, argmins) = active_mask(&qvi.u, js_costs, qvi.tol_active, prev_active.as_ref());
        // equilibrium test on the consistent state (u solves the QVI for
        // f(m); the system's remaining line is the complementarity integral)
        let comp = complementarity_integral(&qvi.u, &f, &m);
        complementarity_trace.push(comp);
        let comp_scale = (f.sup_norm() * grid.t_final).max(1e-300);
        iterations = j + 1;
        if schedule.at_floor() {
            floor_iters += 1;
        }
        let candidate = comp.abs() <= cfg.comp_stop_rel * comp_scale
            || (floor_iters >= cfg.floor_stall_iters
                && comp.abs() <= cfg.comp_accept_rel * comp_scale);
        if candidate {
            // accept only if the density's variational line holds: the value
            // function must attain the duality infimum for m
            let deficit = fp_attainment_deficit(
                &m,
                &qvi.u,
                js_costs,
                4.0 * qvi.tol_active,
                Some(&band_union),
                grid,
            );
            let deficit_scale = (1.0 + m.sup_norm()) * (1.0 + js_costs.k0);
            if deficit <= 1e-4 * deficit_scale {
                last_qvi = Some(qvi);
                converged = true;
                break;
            }
        }

        for l in 0..=grid.nt {
            for i in 0..grid.points() {
                if masks[l][i] {
                    band_union[l][i] = true;
                }
            }
        }
        let intensity = pure_intensity(js_costs, &masks, &argmins, grid);
        let js_v = js_costs.with_intensity(intensity)?;
        let run = solve_penalized_multi(m0, &js_v, epsilon, grid)?;

        let theta = schedule.theta(j);
        let mut next_slices = Vec::with_capacity(grid.nt + 1);
        for l in 0..=grid.nt {
            next_slices.push(m.slices[l].scaled(1.0 - theta).axpy(theta, &run.m.slices[l]));
        }
        let next = SpaceTimeField::new(grid, next_slices)?;
        let mut diff = next.clone();
        for l in 0..=grid.nt {
            diff.slices[l] = diff.slices[l].axpy(-1.0, &m.slices[l]);
        }
        let rel_update = diff.l2_norm() / (1.0 + next.l2_norm());
        update_trace.push(rel_update);
        schedule.observe(rel_update);

        m = next;
        prev_active = Some(masks);
        last_qvi = Some(qvi);
        if rel_update <= cfg.tol_fixed {
            converged = true;
            break;
        }
    }

    // Final consistent state: QVI against the converged density.
    let f = coupling.apply(&m);
    let qvi = match converged {
        true => solve_qvi(js_costs, &f, grid, &cfg.qvi)?,
        false => last_qvi.ok_or_else(|| Error::InvalidInput("no iterations run".into()))?,
    };
    let (masks, argmins) = active_mask(&qvi.u, js_costs, qvi.tol_active, prev_active.as_ref());
    let intensity = pure_intensity(js_costs, &masks, &argmins, grid);
    let residuals = mfg_residuals(&qvi, &m, m0, &f);
    let alpha = reconstruct_alpha(&qvi.u, &f, &m, js_costs, epsilon, qvi.tol_active, grid);
    Ok(MfgSolution {
        u: qvi.u,
        m,
        alpha,
        intensity,
        residuals,
        iterations,
        converged,
        update_trace,
        complementarity_trace,
    })
}

/// Report of [`check_mfg_solution`].
#[derive(Debug, Clone)]
pub struct MfgCheckReport {
    pub feasibility_margin: f64,
    pub qvi_complementarity: f64,
    /// Finite surrogate of `D(m)` over the global admissible cone (LP).
    pub duality_value: f64,
    pub duality_box_pinned: bool,
    /// `pairing(m, v) - pairing(m, u)` over the battery; all should be
    /// `>= -tol`.
    pub vi_margins: Vec<f64>,
    pub min_vi_margin: f64,
    pub complementarity_integral: f64,
    pub complementarity_bound: f64,
    pub pass: bool,
}

/// Bound on how far `u` can miss the duality infimum for `m` — the
/// Fokker-Planck side of the system measured without the LP.
///
/// The forward defect `delta_l = (m_{l+1} - m_l) - nu dt Lap_h m_{l+1}` of an
/// admissible density decomposes as drains `g >= 0` on the obstacle band of
/// `u` matched by arrivals one argmin jump away; drains where `u` has slack
/// `gap` (or negative drains anywhere) cost the pairing at most
/// `|defect| * gap` (resp. `|g| * k`). The returned value sums those charges;
/// it is solver-noise small for genuine (mixtures of) penalized runs and
/// `O(|m| * k0)` for densities that do not solve any admissible equation.
fn fp_attainment_deficit(
    m: &SpaceTimeField,
    u: &SpaceTimeField,
    js: &JumpSystem,
    band: f64,
    history: Option<&[Vec<bool>]>,
    grid: TorusGrid,
) -> f64 {
    let dt = grid.dt();
    let npts = grid.points();
    let vol = grid.cell_volume();
    let mut deficit = 0.0f64;
    for l in 0..grid.nt {
        let lap = laplacian(&m.slices[l + 1]);
        let delta: Vec<f64> = (0..npts)
            .map(|i| {
                m.slices[l + 1].values[i] - m.slices[l].values[i]
                    - grid.nu * dt * lap.values[i]
            })
            .collect();
        let (mu, argmin) = apply_m(js, &u.slices[l]);
        let gap: Vec<f64> = (0..npts)
            .map(|i| (mu.values[i] - u.slices[l].values[i]).max(0.0))
            .collect();
        let in_band: Vec<bool> = (0..npts)
            .map(|i| gap[i] <= band || history.map_or(false, |h| h[l][i]))
            .collect();
        // drains on the banded set; chains are acyclic for admissible
        // structures so the sweeps settle
        let mut g = vec![0.0f64; npts];
        for _ in 0..=npts {
            let mut changed = false;
            for i in 0..npts {
                if in_band[i] {
                    let mut arrivals = 0.0;
                    for (xi, jump) in js.jumps.iter().enumerate() {
                        let src = grid.translate(i, &jump.inverse().offset);
                        if in_band[src] && argmin[src] == xi {
                            arrivals += g[src];
                        }
                    }
                    let new_g = arrivals - delta[i];
                    if (new_g - g[i]).abs() > 1e-15 * (1.0 + new_g.abs()) {
                        g[i] = new_g;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        for i in 0..npts {
            let mut arrivals = 0.0;
            for (xi, jump) in js.jumps.iter().enumerate() {
                let src = grid.translate(i, &jump.inverse().offset);
                if in_band[src] && argmin[src] == xi {
                    arrivals += g[src];
                }
            }
            if in_band[i] {
                // explained up to the sign of the drain
                if g[i] < 0.0 {
                    deficit += vol * (-g[i]) * js.cost[argmin[i]].values[i];
                }
            } else {
                let unexplained = (delta[i] - arrivals).abs();
                deficit += vol * unexplained * gap[i];
            }
        }
    }
    deficit
}


/// Repair an arbitrary field into the global cone `v <= Mv` (Bellman
/// relaxation; terminates because jump costs are positive).
fn repair_global(v: &mut SpaceTimeField, js: &JumpSystem) {
    let grid = v.grid;
    for l in 0..=grid.nt {
        for _ in 0..=grid.points() {
            let mut changed = false;
            for (xi, jump) in js.jumps.iter().enumerate() {
                for x in 0..grid.points() {
                    let tgt = grid.translate(x, &jump.offset);
                    let cap = js.cost[xi].values[x] + v.slices[l].values[tgt];
                    if v.slices[l].values[x] > cap + 1e-15 {
                        v.slices[l].values[x] = cap;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
    }
    v.slices[grid.nt] = ScalarField::zeros(grid);
}

/// Verify every line of the MFG system on a solved quadruple: QVI residuals,
/// the finite-duality surrogate, the variational inequality against a battery
/// of admissible fields, and the complementarity integral.
pub fn check_mfg_solution(
    sol: &MfgSolution,
    coupling: &Coupling,
    js_costs: &JumpSystem,
    m0: &ScalarField,
    grid: TorusGrid,
    battery: usize,
    seed: u64,
) -> Result<MfgCheckReport> {
    let f = coupling.apply(&sol.m);
    let action = backward_action(&sol.u);
    let mut feasibility = f64::INFINITY;
    let mut qvi_comp = 0.0f64;
    for l in 0..=grid.nt {
        let (mu, _) = apply_m(js_costs, &sol.u.slices[l]);
        for i in 0..grid.points() {
            let gap = mu.values[i] - sol.u.slices[l].values[i];
            feasibility = feasibility.min(gap);
            if l < grid.nt {
                let r = action.slices[l].values[i] - f.slices[l].values[i];
                qvi_comp = qvi_comp.max(gap.min(-r).abs());
            }
        }
    }

    // D(m) over the global cone: intensity with full support
    let full: Vec<SpaceTimeField> = js_costs
        .jumps
        .iter()
        .map(|_| SpaceTimeField::constant(grid, 1.0 / js_costs.jumps.len() as f64))
        .collect();
    let js_full = js_costs.with_intensity(full)?;
    let f_sup = f.sup_norm();
    let bound = lp::default_box(&js_full, grid, f_sup);
    let lp_val = lp::duality_lp_time(&sol.m, m0, &js_full, grid, bound)?;

    // battery of admissible v
    let base = adjoint_pairing(&sol.m, &sol.u, m0)?;
    let mut vi_margins = Vec::new();
    vi_margins.push(adjoint_pairing(&sol.m, &sol.u, m0)? - base);
    let mut rng = SeqRng::new(seed, 0xBEEF);
    for _ in 0..battery {
        let mut v = sol.u.clone();
        for l in 0..grid.nt {
            let decay = 1.0 - grid.time(l) / grid.t_final;
            for x in 0..grid.points() {
                v.slices[l].values[x] += decay * rng.range(-0.4, 0.4);
            }
        }
        repair_global(&mut v, js_costs);
        vi_margins.push(adjoint_pairing(&sol.m, &v, m0)? - base);
    }
    let min_vi_margin = vi_margins.iter().cloned().fold(f64::INFINITY, f64::min);

    let comp = complementarity_integral(&sol.u, &f, &sol.m).abs();
    let comp_bound = 1e-6 * f.sup_norm() * grid.t_final;
    let pass = feasibility >= -1e-8
        && min_vi_margin >= -1e-6
        && comp <= comp_bound.max(1e-14)
        && !lp_val.box_pinned;
    Ok(MfgCheckReport {
        feasibility_margin: feasibility,
        qvi_complementarity: qvi_comp,
        duality_value: lp_val.value,
        duality_box_pinned: lp_val.box_pinned,
        vi_margins,
        min_vi_margin,
        complementarity_integral: comp,
        complementarity_bound: comp_bound,
        pass,
    })
}

/// Stationary MFG report.
#[derive(Debug, Clone)]
pub struct StationaryMfgSolution {
    pub u: ScalarField,
    pub m: ScalarField,
    pub iterations: usize,
    pub converged: bool,
    /// `|delta int m - int rho| / int rho`.
    pub mass_residual: f64,
    /// `|<(-nu Lap u + lambda u - f(m)), m>|`.
    pub complementarity: f64,
    pub complementarity_scale: f64,
    pub feasibility_margin: f64,
    /// Margins of the two variational inequalities of the saddle system,
    /// measured over a battery (see [`check_systvi`]).
    pub u_side_margin: f64,
    pub m_side_margin: f64,
}

/// Margins of the stationary variational-inequality system: for the u-side,
/// `max over mu >= 0 of <(-nu Lap u + lambda u - f(m)), mu - m>` (should be
/// `<= tol`); for the m-side,
/// `min over v <= Mv of nu<grad m, grad(v-u)> + delta<m, v-u> - <rho, v-u>`
/// (should be `>= -tol`).
pub fn check_systvi(
    u: &ScalarField,
    m: &ScalarField,
    f_of_m: &ScalarField,
    rho: &ScalarField,
    js: &JumpSystem,
    delta: f64,
    lambda: f64,
    grid: TorusGrid,
    battery: usize,
    seed: u64,
) -> (f64, f64) {
    let lap_u = laplacian(u);
    let r_u = ScalarField {
        grid,
        values: (0..grid.points())
            .map(|i| -grid.nu * lap_u.values[i] + lambda * u.values[i] - f_of_m.values[i])
            .collect(),
    };
    let lap_m = laplacian(m);
    // m-side linear functional L(w) = nu<-Lap m, w> + delta<m, w> - <rho, w>
    let lm = ScalarField {
        grid,
        values: (0..grid.points())
            .map(|i| -grid.nu * lap_m.values[i] + delta * m.values[i] - rho.values[i])
            .collect(),
    };
    let mut rng = SeqRng::new(seed, 0x57A7);
    let mut u_side = f64::NEG_INFINITY;
    let mut m_side = f64::INFINITY;
    for _ in 0..battery {
        // mu >= 0 trial
        let mu = ScalarField {
            grid,
            values: (0..grid.points()).map(|_| rng.range(0.0, 2.0)).collect(),
        };
        let diff = mu.axpy(-1.0, m);
        u_side = u_side.max(inner(&r_u, &diff));
        // v <= Mv trial: repaired random around u
        let mut v = u.clone();
        for x in 0..grid.points() {
            v.values[x] += rng.range(-0.4, 0.4);
        }
        for _ in 0..=grid.points() {
            let mut changed = false;
            for (xi, jump) in js.jumps.iter().enumerate() {
                for x in 0..grid.points() {
                    let tgt = grid.translate(x, &jump.offset);
                    let cap = js.cost[xi].values[x] + v.values[tgt];
                    if v.values[x] > cap + 1e-15 {
                        v.values[x] = cap;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let dv = v.axpy(-1.0, u);
        m_side = m_side.min(inner(&lm, &dv));
    }
    (u_side, m_side)
}

/// Damped fixed point alternating the stationary QVI and the stationary
/// penalized Fokker-Planck solve.
pub fn solve_stationary_mfg(
    rho: &ScalarField,
    js_costs: &JumpSystem,
    coupling: &Coupling,
    delta: f64,
    lambda: f64,
    epsilon: f64,
    grid: TorusGrid,
    cfg: &MfgConfig,
) -> Result<StationaryMfgSolution> {
    if rho.grid != grid || js_costs.grid() != grid {
        return Err(Error::GridMismatch("solve_stationary_mfg arguments".into()));
    }
    if !(delta > 0.0) || !(lambda > 0.0) {
        return Err(Error::InvalidInput("need delta > 0 and lambda > 0".into()));
    }
    // resolvent initial guess (zero intensity)
    let zero_v: Vec<SpaceTimeField> = js_costs
        .jumps
        .iter()
        .map(|_| SpaceTimeField::zeros(grid))
        .collect();
    let js_free = js_costs.with_intensity(zero_v)?;
    let mut m = solve_penalized_stationary(rho, &js_free, delta, epsilon, grid)?.m;

    let mut prev_active: Option<Vec<bool>> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut schedule = ThetaSchedule::new(cfg.damping);
    let mut floor_iters = 0usize;
    for j in 0..cfg.max_fixed {
        let f = coupling.apply_slice(&m);
        let qvi = solve_stationary_qvi(js_costs, &f, lambda, grid, &cfg.qvi)?;
        // consistent-state complementarity
        let lap_u = laplacian(&qvi.u);
        let mut comp = 0.0;
        for i in 0..grid.points() {
            comp += (-grid.nu * lap_u.values[i] + lambda * qvi.u.values[i] - f.values[i])
                * m.values[i];
        }
        comp = (comp * grid.cell_volume()).abs();
        let comp_scale = (1.0 + f.sup_norm()) * (1.0 + integrate(&m).abs());
        iterations = j + 1;
        if schedule.at_floor() {
            floor_iters += 1;
        }
        if comp <= cfg.comp_stop_rel * comp_scale
            || (floor_iters >= cfg.floor_stall_iters
                && comp <= cfg.comp_accept_rel * comp_scale)
        {
            converged = true;
            break;
        }
        let (mu, argmin) = apply_m(js_costs, &qvi.u);
        let active: Vec<bool> = (0..grid.points())
            .map(|i| {
                let gap = mu.values[i] - qvi.u.values[i];
                match prev_active.as_ref().map(|p| p[i]) {
                    Some(true) => gap <= 2.0 * qvi.tol_active,
                    _ => gap <= qvi.tol_active,
                }
            })
            .collect();
        let intensity: Vec<SpaceTimeField> = (0..js_costs.jumps.len())
            .map(|xi| {
                let slice = ScalarField {
                    grid,
                    values: (0..grid.points())
                        .map(|i| if active[i] && argmin[i] == xi { 1.0 } else { 0.0 })
                        .collect(),
                };
                SpaceTimeField {
                    grid,
                    slices: vec![slice; grid.nt + 1],
                }
            })
            .collect();
        let js_v = js_costs.with_intensity(intensity)?;
        let run = solve_penalized_stationary(rho, &js_v, delta, epsilon, grid)?;
        let theta = schedule.theta(j);
        let next = m.scaled(1.0 - theta).axpy(theta, &run.m);
        let rel = next.axpy(-1.0, &m).l2_norm() / (1.0 + next.l2_norm());
        schedule.observe(rel);
        m = next;
        prev_active = Some(active);
        if rel <= cfg.tol_fixed {
            converged = true;
            break;
        }
    }

    let f = coupling.apply_slice(&m);
    let qvi = solve_stationary_qvi(js_costs, &f, lambda, grid, &cfg.qvi)?;
    let lap_u = laplacian(&qvi.u);
    let r_u = ScalarField {
        grid,
        values: (0..grid.points())
            .map(|i| -grid.nu * lap_u.values[i] + lambda * qvi.u.values[i] - f.values[i])
            .collect(),
    };
    let complementarity = inner(&r_u, &m).abs();
    let complementarity_scale = (1.0 + f.sup_norm()) * (1.0 + integrate(&m).abs());
    let total_rho = integrate(rho);
    let mass_residual =
        (delta * integrate(&m) - total_rho).abs() / total_rho.abs().max(1e-300);
    let (u_side, m_side) = check_systvi(
        &qvi.u, &m, &f, rho, js_costs, delta, lambda, grid, 20, 0x5EED,
    );
    Ok(StationaryMfgSolution {
        u: qvi.u,
        m,
        iterations,
        converged,
        mass_residual,
        complementarity,
        complementarity_scale,
        feasibility_margin: qvi.feasibility_margin,
        u_side_margin: u_side,
        m_side_margin: m_side,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub potential: f64,
    pub duality: f64,
    pub box_pinned: bool,
}

/// `F(m) - D(m)` for the stationary optimal-control problem; `D` is the
/// boxed LP over the global cone `v <= Mv`.
pub fn optimal_control_objective(
    m: &ScalarField,
    coupling: &Coupling,
    js_costs: &JumpSystem,
    rho: &ScalarField,
    delta: f64,
    grid: TorusGrid,
    lp_box: Option<f64>,
) -> Result<ObjectiveValue> {
    if m.min() < -1e-12 {
        return Err(Error::InvalidInput("objective needs m >= 0".into()));
    }
    let potential = coupling.potential_slice(m);
    let max_k = js_costs.cost.iter().fold(0.0f64, |a, c| a.max(c.max()));
    let bound = lp_box.unwrap_or(10.0 * (rho.sup_norm() / delta + max_k));
    let lp_val = lp::duality_lp_stationary(m, rho, js_costs, delta, grid, bound, false)?;
    Ok(ObjectiveValue {
        objective: potential - lp_val.value,
        potential,
        duality: lp_val.value,
        box_pinned: lp_val.box_pinned,
    })
}

/// Cross monotonicity check of the uniqueness argument: returns
/// `(int (f(m1) - f(m2))(m1 - m2), pairing cross term)`; the first is
/// bounded by the second, which is `<= tol`, when both pairs solve the
/// system.
pub fn uniqueness_cross_check(
    a: &MfgSolution,
    b: &MfgSolution,
    coupling: &Coupling,
    m0: &ScalarField,
) -> Result<(f64, f64)> {
    let grid = a.m.grid;
    let dt = grid.dt();
    let fa = coupling.apply(&a.m);
    let fb = coupling.apply(&b.m);
    let mut lhs = 0.0;
    for l in 0..grid.nt {
        let df = fa.slices[l].axpy(-1.0, &fb.slices[l]);
        let dm = a.m.slices[l + 1].axpy(-1.0, &b.m.slices[l + 1]);
        lhs += dt * inner(&df, &dm);
    }
    let mut du = a.u.clone();
    for l in 0..=grid.nt {
        du.slices[l] = du.slices[l].axpy(-1.0, &b.u.slices[l]);
    }
    let zero = ScalarField::zeros(grid);
    let mut dm_field = a.m.clone();
    for l in 0..=grid.nt {
        dm_field.slices[l] = dm_field.slices[l].axpy(-1.0, &b.m.slices[l]);
    }
    let _ = m0;
    let rhs = adjoint_pairing(&dm_field, &du, &zero)?;
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LatticeJump;

    fn grid1d(n: usize, nt: usize, t_final: f64, nu: f64) -> TorusGrid {
        TorusGrid::new(1, n, nt, t_final, nu).unwrap()
    }

    fn singleton_costs(grid: TorusGrid, k0: f64) -> JumpSystem {
        let jump = LatticeJump::new(vec![grid.n as i64 / 2], &grid).unwrap();
        JumpSystem::constant_cost(vec![jump], k0, grid).unwrap()
    }

    #[test]
    fn coupling_families_monotone() {
        let grid = grid1d(16, 4, 1.0, 0.05);
        let lin = Coupling::local_power(1.0, 1.0).unwrap();
        assert!(lin.monotonicity_margin(grid, 1, 10) >= 0.0);
        let pow = Coupling::local_power(0.5, 2.0).unwrap();
        assert!(pow.monotonicity_margin(grid, 2, 10) >= 0.0);
        let smooth = Coupling::smoothed_local(1.0, 1.0, 2).unwrap();
        assert!(smooth.monotonicity_margin(grid, 3, 10) >= -1e-12);
    }

    #[test]
    fn coupling_potential_derivative() {
        // finite-difference directional derivative of F matches <f(m), dm>
        let grid = grid1d(16, 4, 1.0, 0.05);
        for coupling in [
            Coupling::local_power(0.7, 2.0).unwrap(),
            Coupling::smoothed_local(0.7, 2.0, 1).unwrap(),
        ] {
            let m = ScalarField::from_fn(grid, |x| 1.0 + 0.5 * (x[0] * 7.0).sin().powi(2));
            let dm = ScalarField::from_fn(grid, |x| (x[0] * 3.0).cos());
            let t = 1e-6;
            let fd = (coupling.potential_slice(&m.axpy(t, &dm))
                - coupling.potential_slice(&m.axpy(-t, &dm)))
                / (2.0 * t);
            let analytic = inner(&coupling.apply_slice(&m), &dm);
            assert!(
                (fd - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()),
                "fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn decoupled_mfg_is_heat_flow() {
        let grid = grid1d(16, 8, 1.0, 0.05);
        let js = singleton_costs(grid, 0.5);
        let coupling = Coupling::local_power(0.0, 1.0).unwrap();
        let m0 = ScalarField::from_fn(grid, |x| 1.0 + (x[0] * 5.0).sin().powi(2));
        let cfg = MfgConfig::default();
        let sol = solve_penalized_mfg(&m0, &js, &coupling, 1e-3, grid, &cfg).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 2, "iterations {}", sol.iterations);
        assert!(sol.u.sup_norm() <= 1e-9);
        let heat = heat_flow(&m0, &js, grid).unwrap();
        assert!(sol.m.sup_diff(&heat) <= 1e-9);
        assert!(sol.residuals.complementarity <= 1e-12);
        // empty active set
        assert!(sol.intensity.iter().all(|v| v.sup_norm() == 0.0));
    }

    #[test]
    fn monotone_mfg_two_inits_agree() {
        let grid = grid1d(32, 32, 1.0, 0.02);
        let js = singleton_costs(grid, 0.08);
        let coupling = Coupling::local_power(1.0, 1.0).unwrap();
        let m0 = ScalarField::from_fn(grid, |x| {
            1.0 + (2.0 * std::f64::consts::PI * x[0]).cos()
        });
        let eps = 1e-5;
        let mut cfg = MfgConfig::default();
        cfg.tol_fixed = 1e-12;
        let sol_a = solve_penalized_mfg(&m0, &js, &coupling, eps, grid, &cfg).unwrap();
        cfg.initial = InitialGuess::Uniform;
        let sol_b = solve_penalized_mfg(&m0, &js, &coupling, eps, grid, &cfg).unwrap();
        assert!(sol_a.converged && sol_b.converged);
        let mut diff = sol_a.m.clone();
        for l in 0..=grid.nt {
            diff.slices[l] = diff.slices[l].axpy(-1.0, &sol_b.m.slices[l]);
        }
        let rel = diff.l2_norm() / sol_a.m.l2_norm();
        assert!(rel <= 1e-4, "relative L2 distance {rel}");
        // jumping genuinely shaped the density
        let decoupled = Coupling::local_power(0.0, 1.0).unwrap();
        let free = solve_penalized_mfg(&m0, &js, &decoupled, eps, grid, &MfgConfig::default())
            .unwrap();
        let mut dh = sol_a.m.clone();
        for l in 0..=grid.nt {
            dh.slices[l] = dh.slices[l].axpy(-1.0, &free.m.slices[l]);
        }
        assert!(dh.l2_norm() / sol_a.m.l2_norm() >= 1e-2);
        // cross-monotonicity chain
        let (lhs, rhs) = uniqueness_cross_check(&sol_a, &sol_b, &coupling, &m0).unwrap();
        assert!(lhs <= rhs + 1e-6, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn mfg_complementarity_small_at_convergence() {
        let grid = grid1d(32, 32, 1.0, 0.02);
        let js = singleton_costs(grid, 0.08);
        let coupling = Coupling::local_power(1.0, 1.0).unwrap();
        let m0 = ScalarField::from_fn(grid, |x| {
            1.0 + (2.0 * std::f64::consts::PI * x[0]).cos()
        });
        let cfg = MfgConfig::default();
        let sol = solve_penalized_mfg(&m0, &js, &coupling, 1e-5, grid, &cfg).unwrap();
        assert!(sol.converged);
        let f = coupling.apply(&sol.m);
        let bound = 1e-6 * f.sup_norm() * grid.t_final;
        assert!(
            sol.residuals.complementarity <= bound,
            "complementarity {} vs bound {bound}",
            sol.residuals.complementarity
        );
        let report =
            check_mfg_solution(&sol, &coupling, &js, &m0, grid, 10, 77).unwrap();
        assert!(report.pass, "report: {report:?}");
        assert!(report.min_vi_margin >= -1e-6);
    }

    #[test]
    fn stationary_mfg_decoupled_constants() {
        let grid = grid1d(16, 4, 1.0, 0.05);
        let js = singleton_costs(grid, 0.5);
        let coupling = Coupling::local_power(0.0, 1.0).unwrap();
        let rho = ScalarField::constant(grid, 1.4);
        let delta = 0.7;
        let lambda = 0.9;
        let cfg = MfgConfig::default();
        let sol =
            solve_stationary_mfg(&rho, &js, &coupling, delta, lambda, 1e-3, grid, &cfg).unwrap();
        assert!(sol.converged);
        assert!(sol.u.sup_norm() <= 1e-10);
        for &v in &sol.m.values {
            assert!((v - 2.0).abs() <= 1e-10);
        }
        assert!(sol.mass_residual <= 1e-10);
        assert!(sol.complementarity <= 1e-6 * sol.complementarity_scale);
    }

    #[test]
    fn stationary_mfg_coupled_identities() {
        let grid = grid1d(32, 4, 1.0, 0.02);
        let js = singleton_costs(grid, 0.05);
        let coupling = Coupling::local_power(1.0, 1.0).unwrap();
        let rho = ScalarField::from_fn(grid, |x| {
            1.0 + (2.0 * std::f64::consts::PI * x[0]).cos()
        });
        let delta = 0.8;
        let cfg = MfgConfig::default();
        let sol =
            solve_stationary_mfg(&rho, &js, &coupling, delta, delta, 1e-6, grid, &cfg).unwrap();
        assert!(sol.converged, "not converged after {} iterations", sol.iterations);
        assert!(sol.mass_residual <= 1e-10, "mass residual {}", sol.mass_residual);
        assert!(
            sol.complementarity <= 1e-6 * sol.complementarity_scale,
            "complementarity {} scale {}",
            sol.complementarity,
            sol.complementarity_scale
        );
        assert!(sol.u_side_margin <= 1e-6, "u-side {}", sol.u_side_margin);
        // the m-side margin floors at the active-band discretization level
        // of the mixed equilibrium; it is reported, not certified
        assert!(sol.m_side_margin >= -0.02, "m-side {}", sol.m_side_margin);
    }

    #[test]
    fn optimal_control_resolvent_and_minimality() {
        let grid = grid1d(32, 4, 1.0, 0.02);
        let js = singleton_costs(grid, 0.05);
        let coupling = Coupling::local_power(1.0, 1.0).unwrap();
        let rho = ScalarField::from_fn(grid, |x| {
            1.0 + (2.0 * std::f64::consts::PI * x[0]).cos()
        });
        let delta = 0.8;
        let cfg = MfgConfig::default();
        let sol =
            solve_stationary_mfg(&rho, &js, &coupling, delta, delta, 1e-6, grid, &cfg).unwrap();
        let at_solution =
            optimal_control_objective(&sol.m, &coupling, &js, &rho, delta, grid, None).unwrap();
        assert!(!at_solution.box_pinned);
        let mut rng = SeqRng::new(31, 4);
        for _ in 0..8 {
            let perturbed = ScalarField {
                grid,
                values: sol
                    .m
                    .values
                    .iter()
                    .map(|&v| (v + rng.range(-0.2, 0.4)).max(0.0))
                    .collect(),
            };
            let other =
                optimal_control_objective(&perturbed, &coupling, &js, &rho, delta, grid, None)
                    .unwrap();
            assert!(
                at_solution.objective <= other.objective + 1e-8,
                "objective {} vs perturbed {}",
                at_solution.objective,
                other.objective
            );
        }
    }
}
