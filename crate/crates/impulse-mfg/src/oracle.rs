//! Monte-Carlo particle simulator of the jump diffusion — the independent
//! brute-force oracle for the PDE solvers.
//!
//! Particles follow `dX = sqrt(2 nu) dW` between jumps. In the penalized
//! model a particle sitting in a jump support fires the jump `xi` within a
//! substep of length `dt_sub` with probability `1 - exp(-V(xi)/eps * dt_sub)`;
//! competing jumps are resolved by an exponential race (selection
//! proportional to the rates). In the limit model a particle entering the
//! static set `A` instantly applies the iterated jump `n(x) * xi`, where
//! `n(x)` is the smallest count landing outside `A`.
//!
//! Randomness is counter-based and keyed by `(seed, particle, step, slot)`,
//! so trajectories are bit-identical regardless of execution order.

use crate::error::{Error, Result};
use crate::grid::{integrate, LatticeJump, ScalarField, SpaceTimeField, TorusGrid};
use crate::qvi::JumpSystem;
use crate::rng::CounterRng;

/// Hard cap on substeps per time step before the rate is declared too stiff.
pub const MAX_SUBSTEPS: usize = 8192;
/// Target bound for `total rate * dt_sub`.
pub const RATE_DT_TARGET: f64 = 0.2;

/// Trajectory summary: per-level density histograms on the solver grid plus
/// the jump log.
#[derive(Debug, Clone)]
pub struct ParticleResult {
    /// Density estimate per time level, scaled so its integral matches the
    /// initial mass.
    pub histograms: Vec<ScalarField>,
    /// `jump_log[time step][jump index]` = number of jump firings.
    pub jump_log: Vec<Vec<u64>>,
    pub n_particles: usize,
    pub seed: u64,
    /// Substeps used per time step.
    pub substeps: usize,
    /// Total mass represented by the ensemble.
    pub total_mass: f64,
}

impl ParticleResult {
    /// `L^1` distance between the histogram at a level and a density slice.
    pub fn l1_distance(&self, level: usize, reference: &ScalarField) -> f64 {
        let grid = reference.grid;
        grid.cell_volume()
            * self.histograms[level]
                .values
                .iter()
                .zip(&reference.values)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
    }
}

struct Sampler {
    cumulative: Vec<f64>,
}

impl Sampler {
    fn new(m0: &ScalarField) -> Result<Self> {
        if m0.min() < 0.0 {
            return Err(Error::InvalidInput("initial density must be >= 0".into()));
        }
        let total: f64 = m0.values.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput("initial density has no mass".into()));
        }
        let mut cumulative = Vec::with_capacity(m0.values.len());
        let mut acc = 0.0;
        for &v in &m0.values {
            acc += v / total;
            cumulative.push(acc);
        }
        Ok(Self { cumulative })
    }

    fn cell(&self, u: f64) -> usize {
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&u).unwrap())
        {
            Ok(i) => i + 1,
            Err(i) => i,
        }
        .min(self.cumulative.len() - 1)
    }
}

#[inline]
fn wrap(x: f64) -> f64 {
    x - x.floor()
}

#[inline]
fn cell_of(x: &[f64], grid: TorusGrid) -> usize {
    let n = grid.n;
    let mut idx = 0usize;
    for &c in x {
        let i = ((c * n as f64) as usize).min(n - 1);
        idx = idx * n + i;
    }
    idx
}

/// Initial position of a particle: cell drawn from the density, uniform
/// placement within the cell. Counter space `2^63..` is reserved for the
/// initial draws.
fn initial_position(rng: &CounterRng, sampler: &Sampler, grid: TorusGrid) -> Vec<f64> {
    const BASE: u64 = 1 << 63;
    let cell = sampler.cell(rng.uniform_at(BASE));
    let coords = grid.coords(cell);
    let h = grid.h();
    (0..grid.d)
        .map(|axis| wrap((coords[axis] as f64 + rng.uniform_at(BASE + 1 + axis as u64)) * h))
        .collect()
}

fn histogram(
    positions: &[Vec<f64>],
    grid: TorusGrid,
    total_mass: f64,
) -> ScalarField {
    let mut counts = vec![0.0f64; grid.points()];
    for p in positions {
        counts[cell_of(p, grid)] += 1.0;
    }
    let scale = total_mass / (positions.len() as f64 * grid.cell_volume());
    ScalarField {
        grid,
        values: counts.into_iter().map(|c| c * scale).collect(),
    }
}

/// Simulate the penalized dynamics driven by the intensity of `js`.
pub fn simulate_penalized(
    m0: &ScalarField,
    js: &JumpSystem,
    epsilon: f64,
    grid: TorusGrid,
    n_particles: usize,
    seed: u64,
) -> Result<ParticleResult> {
    if m0.grid != grid || js.grid() != grid {
        return Err(Error::GridMismatch("simulate_penalized arguments".into()));
    }
    if n_particles == 0 {
        return Err(Error::InvalidInput("need at least one particle".into()));
    }
    let intensities = js
        .intensity
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("simulation needs an intensity".into()))?;
    let dt = grid.dt();
    // sup of the total rate over all levels used by the marching (0..nt-1)
    let mut max_rate = 0.0f64;
    for l in 0..grid.nt {
        for x in 0..grid.points() {
            let r: f64 = intensities.iter().map(|v| v.slices[l].values[x]).sum();
            max_rate = max_rate.max(r / epsilon);
        }
    }
    let substeps = ((max_rate * dt / RATE_DT_TARGET).ceil() as usize).max(1);
    if substeps > MAX_SUBSTEPS {
        return Err(Error::InvalidInput(format!(
            "jump rate {max_rate:.3e} needs {substeps} substeps per step (cap {MAX_SUBSTEPS})"
        )));
    }
    let dt_sub = dt / substeps as f64;
    let sigma = (2.0 * grid.nu * dt_sub).sqrt();
    let total_mass = integrate(m0);
    let sampler = Sampler::new(m0)?;

    let mut positions: Vec<Vec<f64>> = (0..n_particles)
        .map(|p| initial_position(&CounterRng::new(seed, p as u64), &sampler, grid))
        .collect();
    let mut histograms = Vec::with_capacity(grid.nt + 1);
    histograms.push(histogram(&positions, grid, total_mass));
    let mut jump_log = vec![vec![0u64; js.jumps.len()]; grid.nt];

    let n_jumps = js.jumps.len();
    let mut rates = vec![0.0f64; n_jumps];
    for l in 0..grid.nt {
        for (p, pos) in positions.iter_mut().enumerate() {
            let rng = CounterRng::new(seed, p as u64);
            for s in 0..substeps {
                let base = ((l * MAX_SUBSTEPS + s) as u64) * 8;
                // Brownian increment
                let (g0, g1) = rng.normal_pair_at(base);
                pos[0] = wrap(pos[0] + sigma * g0);
                if grid.d == 2 {
                    pos[1] = wrap(pos[1] + sigma * g1);
                }
                // jump clocks at the current cell, coefficients at level l
                let cell = cell_of(pos, grid);
                let mut total = 0.0;
                for (xi, v) in intensities.iter().enumerate() {
                    let r = v.slices[l].values[cell] / epsilon;
                    rates[xi] = r;
                    total += r;
                }
                if total > 0.0 {
                    let p_jump = 1.0 - (-total * dt_sub).exp();
                    if rng.uniform_at(base + 4) < p_jump {
                        // exponential race: select proportional to rates
                        let mut pick = rng.uniform_at(base + 5) * total;
                        let mut chosen = 0;
                        for xi in 0..n_jumps {
                            if pick < rates[xi] {
                                chosen = xi;
                                break;
                            }
                            pick -= rates[xi];
                            chosen = xi;
                        }
                        let h = grid.h();
                        for axis in 0..grid.d {
                            pos[axis] =
                                wrap(pos[axis] + js.jumps[chosen].offset[axis] as f64 * h);
                        }
                        jump_log[l][chosen] += 1;
                    }
                }
            }
        }
        histograms.push(histogram(&positions, grid, total_mass));
    }
    Ok(ParticleResult {
        histograms,
        jump_log,
        n_particles,
        seed,
        substeps,
        total_mass,
    })
}

/// Simulate the limit dynamics: instantaneous iterated jumps on entering the
/// static set `A`.
pub fn simulate_limit(
    m0: &ScalarField,
    a_static: &[bool],
    xi: &LatticeJump,
    grid: TorusGrid,
    n_particles: usize,
    seed: u64,
) -> Result<ParticleResult> {
    if m0.grid != grid {
        return Err(Error::GridMismatch("simulate_limit arguments".into()));
    }
    if a_static.len() != grid.points() {
        return Err(Error::InvalidInput("mask length mismatch".into()));
    }
    if n_particles == 0 {
        return Err(Error::InvalidInput("need at least one particle".into()));
    }
    // iterated jump count per cell; cycles mean the hypothesis fails
    let mut n_of_cell = vec![0usize; grid.points()];
    for c in 0..grid.points() {
        if a_static[c] {
            let mut cur = c;
            let mut hops = 0;
            while a_static[cur] {
                cur = grid.translate(cur, &xi.offset);
                hops += 1;
                if hops > grid.points() {
                    return Err(Error::HypothesisViolated(format!(
                        "iterated jump chain from cell {c} never leaves A"
                    )));
                }
            }
            n_of_cell[c] = hops;
        }
    }

    let dt = grid.dt();
    // substep so a diffusion step rarely crosses a whole cell
    let diffusion_time = grid.h() * grid.h() / (2.0 * grid.nu);
    let substeps = ((dt / diffusion_time).ceil() as usize).clamp(1, MAX_SUBSTEPS);
    let dt_sub = dt / substeps as f64;
    let sigma = (2.0 * grid.nu * dt_sub).sqrt();
    let total_mass = integrate(m0);
    let sampler = Sampler::new(m0)?;

    let mut positions: Vec<Vec<f64>> = (0..n_particles)
        .map(|p| {
            let mut pos = initial_position(&CounterRng::new(seed, p as u64), &sampler, grid);
            // initial relocation if sampled inside A
            let cell = cell_of(&pos, grid);
            if a_static[cell] {
                let h = grid.h();
                for axis in 0..grid.d {
                    pos[axis] =
                        wrap(pos[axis] + n_of_cell[cell] as f64 * xi.offset[axis] as f64 * h);
                }
            }
            pos
        })
        .collect();
    let mut histograms = Vec::with_capacity(grid.nt + 1);
    histograms.push(histogram(&positions, grid, total_mass));
    let mut jump_log = vec![vec![0u64; 1]; grid.nt];

    for l in 0..grid.nt {
        for (p, pos) in positions.iter_mut().enumerate() {
            let rng = CounterRng::new(seed, p as u64);
            for s in 0..substeps {
                let base = ((l * MAX_SUBSTEPS + s) as u64) * 8;
                let (g0, g1) = rng.normal_pair_at(base);
                pos[0] = wrap(pos[0] + sigma * g0);
                if grid.d == 2 {
                    pos[1] = wrap(pos[1] + sigma * g1);
                }
                let cell = cell_of(pos, grid);
                if a_static[cell] {
                    let hops = n_of_cell[cell];
                    let h = grid.h();
                    for axis in 0..grid.d {
                        pos[axis] = wrap(pos[axis] + hops as f64 * xi.offset[axis] as f64 * h);
                    }
                    jump_log[l][0] += hops as u64;
                }
            }
        }
        histograms.push(histogram(&positions, grid, total_mass));
    }
    Ok(ParticleResult {
        histograms,
        jump_log,
        n_particles,
        seed,
        substeps,
        total_mass,
    })
}

/// Pure-diffusion reference: `simulate_penalized` with zero intensity, kept
/// as its own entry point for scaling studies.
pub fn simulate_diffusion(
    m0: &ScalarField,
    grid: TorusGrid,
    n_particles: usize,
    seed: u64,
) -> Result<ParticleResult> {
    let axis_offset = vec![vec![grid.n as i64 / 2], vec![grid.n as i64 / 2, 0]];
    let jump = LatticeJump::new(axis_offset[grid.d - 1].clone(), &grid)?;
    let js = JumpSystem::new(
        vec![jump],
        vec![ScalarField::constant(grid, 1.0)],
        1.0,
        Some(vec![SpaceTimeField::zeros(grid)]),
    )?;
    simulate_penalized(m0, &js, 1.0, grid, n_particles, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fokker_planck::{solve_penalized_multi, solve_penalized_single};
    use crate::grid::SpaceTimeMask;

    fn grid1d(n: usize, nt: usize, t_final: f64, nu: f64) -> TorusGrid {
        TorusGrid::new(1, n, nt, t_final, nu).unwrap()
    }

    fn standard_js(grid: TorusGrid) -> JumpSystem {
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
            vec![ScalarField::constant(grid, 0.5)],
            0.5,
            Some(vec![v]),
        )
        .unwrap()
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let grid = grid1d(16, 8, 0.5, 0.05);
        let js = standard_js(grid);
        let m0 = ScalarField::constant(grid, 1.0);
        let a = simulate_penalized(&m0, &js, 1e-1, grid, 500, 42).unwrap();
        let b = simulate_penalized(&m0, &js, 1e-1, grid, 500, 42).unwrap();
        for l in 0..=grid.nt {
            for i in 0..grid.points() {
                assert_eq!(
                    a.histograms[l].values[i].to_bits(),
                    b.histograms[l].values[i].to_bits()
                );
            }
        }
        assert_eq!(a.jump_log, b.jump_log);
        let c = simulate_penalized(&m0, &js, 1e-1, grid, 500, 43).unwrap();
        assert_ne!(a.histograms[grid.nt].values, c.histograms[grid.nt].values);
    }

    #[test]
    fn particle_count_is_conserved() {
        let grid = grid1d(16, 8, 0.5, 0.05);
        let js = standard_js(grid);
        let m0 = ScalarField::from_fn(grid, |x| 0.2 + (x[0] * 7.0).sin().powi(2));
        let run = simulate_penalized(&m0, &js, 1e-1, grid, 300, 7).unwrap();
        let mass0 = integrate(&run.histograms[0]);
        for l in 1..=grid.nt {
            let m = integrate(&run.histograms[l]);
            assert!((m - mass0).abs() <= 1e-12 * mass0);
        }
    }

    #[test]
    fn diffusion_matches_heat_solve() {
        let grid = grid1d(32, 16, 0.25, 0.05);
        let m0 = ScalarField::from_fn(grid, |x| {
            1.0 + (2.0 * std::f64::consts::PI * x[0]).cos()
        });
        let run = simulate_diffusion(&m0, grid, 40_000, 11).unwrap();
        // grid reference: pure heat march (empty mask)
        let xi = LatticeJump::new(vec![16], &grid).unwrap();
        let pde = solve_penalized_single(&m0, &SpaceTimeMask::empty(grid), &xi, 1.0, grid)
            .unwrap();
        let l1 = run.l1_distance(grid.nt, &pde.m.slices[grid.nt]);
        let bound = 3.0 * ((run.n_particles as f64).powf(-0.5) + grid.h());
        assert!(l1 <= bound, "L1 {l1} vs bound {bound}");
    }

    #[test]
    fn penalized_density_matches_pde() {
        let grid = grid1d(32, 32, 0.5, 0.05);
        let js = standard_js(grid);
        let m0 = ScalarField::constant(grid, 1.0);
        let run = simulate_penalized(&m0, &js, 1e-2, grid, 30_000, 99).unwrap();
        let pde = solve_penalized_multi(&m0, &js, 1e-2, grid).unwrap();
        let l1 = run.l1_distance(grid.nt, &pde.m.slices[grid.nt]);
        assert!(l1 <= 0.05, "L1 at final time {l1}");
    }

    #[test]
    fn two_disjoint_jumps_match_pde() {
        let grid = grid1d(32, 32, 0.5, 0.05);
        let j1 = LatticeJump::new(vec![16], &grid).unwrap();
        let j2 = LatticeJump::new(vec![8], &grid).unwrap();
        let v1 = SpaceTimeField::from_fn(grid, |_, x| {
            if x[0] >= 0.25 && x[0] < 0.375 { 1.0 } else { 0.0 }
        });
        let v2 = SpaceTimeField::from_fn(grid, |_, x| {
            if x[0] >= 0.625 && x[0] < 0.75 { 0.8 } else { 0.0 }
        });
        let js = JumpSystem::new(
            vec![j1, j2],
            vec![
                ScalarField::constant(grid, 0.5),
                ScalarField::constant(grid, 0.5),
            ],
            0.5,
            Some(vec![v1, v2]),
        )
        .unwrap();
        let m0 = ScalarField::constant(grid, 1.0);
        let run = simulate_penalized(&m0, &js, 1e-2, grid, 30_000, 123).unwrap();
        let pde = solve_penalized_multi(&m0, &js, 1e-2, grid).unwrap();
        let l1 = run.l1_distance(grid.nt, &pde.m.slices[grid.nt]);
        assert!(l1 <= 0.05, "L1 at final time {l1}");
        // both jumps fired
        let fired: Vec<u64> = (0..2)
            .map(|xi| run.jump_log.iter().map(|l| l[xi]).sum())
            .collect();
        assert!(fired[0] > 0 && fired[1] > 0, "jump log {fired:?}");
    }

    #[test]
    fn limit_sim_pure_diffusion_when_a_empty() {
        let grid = grid1d(16, 8, 0.25, 0.05);
        let xi = LatticeJump::new(vec![8], &grid).unwrap();
        let m0 = ScalarField::constant(grid, 1.0);
        let run = simulate_limit(&m0, &vec![false; 16], &xi, grid, 2_000, 5).unwrap();
        assert!(run.jump_log.iter().all(|l| l[0] == 0));
        let mass0 = integrate(&run.histograms[0]);
        let mass_end = integrate(&run.histograms[grid.nt]);
        assert!((mass_end - mass0).abs() <= 1e-12 * mass0);
    }

    #[test]
    fn limit_sim_cycle_detected() {
        let grid = grid1d(16, 8, 0.25, 0.05);
        let xi = LatticeJump::new(vec![8], &grid).unwrap();
        let m0 = ScalarField::constant(grid, 1.0);
        let err = simulate_limit(&m0, &vec![true; 16], &xi, grid, 100, 5).unwrap_err();
        assert!(matches!(err, Error::HypothesisViolated(_)));
    }

    #[test]
    fn stiff_rate_is_rejected() {
        let grid = grid1d(16, 4, 1.0, 0.05);
        let js = standard_js(grid);
        let m0 = ScalarField::constant(grid, 1.0);
        let err = simulate_penalized(&m0, &js, 1e-9, grid, 10, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn monte_carlo_error_scales_with_sqrt_n() {
        let grid = grid1d(32, 16, 0.25, 0.05);
        let m0 = ScalarField::from_fn(grid, |x| {
            1.0 + (2.0 * std::f64::consts::PI * x[0]).cos()
        });
        let xi = LatticeJump::new(vec![16], &grid).unwrap();
        let pde = solve_penalized_single(&m0, &SpaceTimeMask::empty(grid), &xi, 1.0, grid)
            .unwrap();
        let reference = &pde.m.slices[grid.nt];
        let mut errors = Vec::new();
        for (n, seed) in [(10_000, 21), (40_000, 22), (160_000, 23)] {
            let run = simulate_diffusion(&m0, grid, n, seed).unwrap();
            errors.push(run.l1_distance(grid.nt, reference));
        }
        for w in errors.windows(2) {
            let factor = w[0] / w[1];
            assert!(
                (1.6..=2.6).contains(&factor),
                "error factors off: {errors:?}"
            );
        }
    }
}
