//! Torus grids, periodic fields and the discrete operators every solver
//! builds on.
//!
//! The spatial domain is the unit torus in dimension 1 or 2, discretized with
//! `n` points per axis (spacing `h = 1/n`) and `nt` implicit-Euler time steps
//! on `(0, T)`. Space-time fields carry `nt + 1` slices, slice `l` living at
//! time `t_l = l * dt`.
//!
//! Jumps are restricted to lattice vectors `xi = h * offset` so that
//! translation is an exact permutation of grid values: mass identities and the
//! discrete duality identity then hold to machine precision instead of `O(h)`.
//!
//! The discrete adjoint pairing is matched to the forward solver: for a
//! density marched by `(I + dt*G_l) m_{l+1} = m_l` (exchange coefficients
//! frozen at the left endpoint of each step) and any test field `v` with
//! `v(T) = 0`, summation by parts is exact, so the pairing reduces to the
//! exchange term alone. See [`adjoint_pairing`].

use crate::error::{Error, Result};

/// Discretization of `(0,T) x T^d`: spatial resolution, time steps and the
/// diffusion coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusGrid {
    /// Spatial dimension, 1 or 2.
    pub d: usize,
    /// Points per axis; `h = 1/n`.
    pub n: usize,
    /// Number of time steps; fields carry `nt + 1` slices.
    pub nt: usize,
    /// Time horizon.
    pub t_final: f64,
    /// Diffusion coefficient `nu > 0`.
    pub nu: f64,
}

impl TorusGrid {
    pub fn new(d: usize, n: usize, nt: usize, t_final: f64, nu: f64) -> Result<Self> {
        if d != 1 && d != 2 {
            return Err(Error::InvalidInput(format!("dimension must be 1 or 2, got {d}")));
        }
        if n < 4 {
            return Err(Error::InvalidInput(format!("need n >= 4 points per axis, got {n}")));
        }
        if nt < 1 {
            return Err(Error::InvalidInput(format!("need nt >= 1 time steps, got {nt}")));
        }
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::InvalidInput(format!("need nu > 0, got {nu}")));
        }
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(Error::InvalidInput(format!("need T > 0, got {t_final}")));
        }
        Ok(Self { d, n, nt, t_final, nu })
    }

    /// Grid spacing `1/n`.
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Time step `T/nt`.
    pub fn dt(&self) -> f64 {
        self.t_final / self.nt as f64
    }

    /// Total number of spatial points `n^d`.
    pub fn points(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// Cell volume `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.d as i32)
    }

    /// Time of slice `l`.
    pub fn time(&self, l: usize) -> f64 {
        l as f64 * self.dt()
    }

    /// Flat index of the point with per-axis coordinates `coords` (taken
    /// modulo `n`). Row-major in 2d: `idx = i * n + j`.
    pub fn index(&self, coords: &[i64]) -> usize {
        debug_assert_eq!(coords.len(), self.d);
        let n = self.n as i64;
        let mut idx = 0i64;
        for &c in coords {
            idx = idx * n + c.rem_euclid(n);
        }
        idx as usize
    }

    /// Per-axis coordinates of the flat index.
    pub fn coords(&self, idx: usize) -> Vec<i64> {
        let n = self.n;
        match self.d {
            1 => vec![idx as i64],
            _ => vec![(idx / n) as i64, (idx % n) as i64],
        }
    }

    /// Flat index reached from `idx` by moving `step` cells along `axis`.
    pub fn neighbor(&self, idx: usize, axis: usize, step: i64) -> usize {
        let n = self.n;
        match self.d {
            1 => (idx as i64 + step).rem_euclid(n as i64) as usize,
            _ => {
                let (i, j) = (idx / n, idx % n);
                if axis == 0 {
                    let i2 = (i as i64 + step).rem_euclid(n as i64) as usize;
                    i2 * n + j
                } else {
                    let j2 = (j as i64 + step).rem_euclid(n as i64) as usize;
                    i * n + j2
                }
            }
        }
    }

    /// Flat index of `x + h*offset` for the point with flat index `idx`.
    pub fn translate(&self, idx: usize, offset: &[i64]) -> usize {
        let n = self.n as i64;
        match self.d {
            1 => (idx as i64 + offset[0]).rem_euclid(n) as usize,
            _ => {
                let i = (idx / self.n) as i64;
                let j = (idx % self.n) as i64;
                let i2 = (i + offset[0]).rem_euclid(n) as usize;
                let j2 = (j + offset[1]).rem_euclid(n) as usize;
                i2 * self.n + j2
            }
        }
    }
}

/// A jump vector `xi = h * offset`, stored as integer grid steps per axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeJump {
    pub offset: Vec<i64>,
}

impl LatticeJump {
    pub fn new(offset: Vec<i64>, grid: &TorusGrid) -> Result<Self> {
        if offset.len() != grid.d {
            return Err(Error::InvalidInput(format!(
                "jump offset has {} components, grid dimension is {}",
                offset.len(),
                grid.d
            )));
        }
        let n = grid.n as i64;
        if offset.iter().all(|&c| c.rem_euclid(n) == 0) {
            return Err(Error::InvalidInput(
                "jump offset is zero modulo the grid period".into(),
            ));
        }
        Ok(Self { offset })
    }

    /// The negated jump.
    pub fn inverse(&self) -> Self {
        Self {
            offset: self.offset.iter().map(|c| -c).collect(),
        }
    }
}

/// Real-valued function on the spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: TorusGrid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.points() {
            return Err(Error::InvalidInput(format!(
                "field has {} values, grid has {} points",
                values.len(),
                grid.points()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("field contains non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.points()],
        }
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Sample a function of torus coordinates at the cell corners `x = i*h`.
    pub fn from_fn(grid: TorusGrid, f: impl Fn(&[f64]) -> f64) -> Self {
        let h = grid.h();
        let values = (0..grid.points())
            .map(|idx| {
                let x: Vec<f64> = grid.coords(idx).iter().map(|&c| c as f64 * h).collect();
                f(&x)
            })
            .collect();
        Self { grid, values }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Discrete `L^2` norm `sqrt(h^d * sum f^2)`.
    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell_volume() * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &Self) -> Self {
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x + a * y)
                .collect(),
        }
    }
}

/// Function on the space-time grid: `nt + 1` slices indexed by time level.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub grid: TorusGrid,
    pub slices: Vec<ScalarField>,
}

impl SpaceTimeField {
    pub fn new(grid: TorusGrid, slices: Vec<ScalarField>) -> Result<Self> {
        if slices.len() != grid.nt + 1 {
            return Err(Error::InvalidInput(format!(
                "space-time field has {} slices, expected nt + 1 = {}",
                slices.len(),
                grid.nt + 1
            )));
        }
        if slices.iter().any(|s| s.grid != grid) {
            return Err(Error::GridMismatch("slice grid differs from field grid".into()));
        }
        Ok(Self { grid, slices })
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        Self {
            grid,
            slices: (0..=grid.nt).map(|_| ScalarField::constant(grid, c)).collect(),
        }
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Sample a function of `(t, x)`.
    pub fn from_fn(grid: TorusGrid, f: impl Fn(f64, &[f64]) -> f64) -> Self {
        let slices = (0..=grid.nt)
            .map(|l| {
                let t = grid.time(l);
                ScalarField::from_fn(grid, |x| f(t, x))
            })
            .collect();
        Self { grid, slices }
    }

    pub fn slice(&self, l: usize) -> &ScalarField {
        &self.slices[l]
    }

    pub fn sup_norm(&self) -> f64 {
        self.slices.iter().fold(0.0, |a, s| a.max(s.sup_norm()))
    }

    pub fn min(&self) -> f64 {
        self.slices.iter().fold(f64::INFINITY, |a, s| a.min(s.min()))
    }

    /// Discrete `L^2((0,T) x T^d)` norm: `sqrt(sum_l dt * |slice_l|^2)` over
    /// the `nt` step intervals, each interval represented by its right
    /// endpoint (matching the implicit time-marching).
    pub fn l2_norm(&self) -> f64 {
        let dt = self.grid.dt();
        (1..=self.grid.nt)
            .map(|l| {
                let s = &self.slices[l];
                dt * self.grid.cell_volume() * s.values.iter().map(|v| v * v).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn sup_diff(&self, other: &Self) -> f64 {
        self.slices
            .iter()
            .zip(&other.slices)
            .fold(0.0, |a, (s, o)| {
                a.max(
                    s.values
                        .iter()
                        .zip(&o.values)
                        .fold(0.0f64, |b, (x, y)| b.max((x - y).abs())),
                )
            })
    }
}

/// Boolean space-time mask; slice `l` at time `t_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeMask {
    pub grid: TorusGrid,
    pub slices: Vec<Vec<bool>>,
}

impl SpaceTimeMask {
    pub fn empty(grid: TorusGrid) -> Self {
        Self {
            grid,
            slices: vec![vec![false; grid.points()]; grid.nt + 1],
        }
    }

    pub fn full(grid: TorusGrid) -> Self {
        Self {
            grid,
            slices: vec![vec![true; grid.points()]; grid.nt + 1],
        }
    }

    /// Static-in-time mask from a spatial predicate on cell corners.
    pub fn static_from_fn(grid: TorusGrid, f: impl Fn(&[f64]) -> bool) -> Self {
        let h = grid.h();
        let slice: Vec<bool> = (0..grid.points())
            .map(|idx| {
                let x: Vec<f64> = grid.coords(idx).iter().map(|&c| c as f64 * h).collect();
                f(&x)
            })
            .collect();
        Self {
            grid,
            slices: vec![slice; grid.nt + 1],
        }
    }

    pub fn from_fn(grid: TorusGrid, f: impl Fn(f64, &[f64]) -> bool) -> Self {
        let h = grid.h();
        let slices = (0..=grid.nt)
            .map(|l| {
                let t = grid.time(l);
                (0..grid.points())
                    .map(|idx| {
                        let x: Vec<f64> = grid.coords(idx).iter().map(|&c| c as f64 * h).collect();
                        f(t, &x)
                    })
                    .collect()
            })
            .collect();
        Self { grid, slices }
    }

    pub fn is_empty(&self) -> bool {
        self.slices.iter().all(|s| s.iter().all(|&b| !b))
    }

    /// Union with another mask.
    pub fn union(&self, other: &Self) -> Self {
        let slices = self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x || *y).collect())
            .collect();
        Self {
            grid: self.grid,
            slices,
        }
    }
}

/// Second-order central-difference Laplacian with periodic wrap:
/// `(L f)_i = sum_axes (f_{i+e} - 2 f_i + f_{i-e}) / h^2`.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let g = f.grid;
    let inv_h2 = (g.n as f64) * (g.n as f64);
    let mut out = vec![0.0; g.points()];
    match g.d {
        1 => {
            let n = g.n;
            for i in 0..n {
                let ip = if i + 1 == n { 0 } else { i + 1 };
                let im = if i == 0 { n - 1 } else { i - 1 };
                out[i] = (f.values[ip] - 2.0 * f.values[i] + f.values[im]) * inv_h2;
            }
        }
        _ => {
            let n = g.n;
            for i in 0..n {
                let ip = if i + 1 == n { 0 } else { i + 1 };
                let im = if i == 0 { n - 1 } else { i - 1 };
                for j in 0..n {
                    let jp = if j + 1 == n { 0 } else { j + 1 };
                    let jm = if j == 0 { n - 1 } else { j - 1 };
                    let c = f.values[i * n + j];
                    out[i * n + j] = (f.values[ip * n + j]
                        + f.values[im * n + j]
                        + f.values[i * n + jp]
                        + f.values[i * n + jm]
                        - 4.0 * c)
                        * inv_h2;
                }
            }
        }
    }
    ScalarField { grid: g, values: out }
}

/// Periodic translation: `result(x) = f(x - h*offset)`. An exact permutation
/// of the entries.
pub fn shift(f: &ScalarField, jump: &LatticeJump) -> ScalarField {
    let g = f.grid;
    let mut out = vec![0.0; g.points()];
    let neg: Vec<i64> = jump.offset.iter().map(|c| -c).collect();
    for idx in 0..g.points() {
        out[idx] = f.values[g.translate(idx, &neg)];
    }
    ScalarField { grid: g, values: out }
}

/// `h^d * sum f`, the discrete integral over the unit torus.
///
/// Values are accumulated in sorted order, so the integral is bit-for-bit
/// invariant under any relabeling of grid points — in particular under
/// [`shift`]. Mass-balance identities rely on this.
pub fn integrate(f: &ScalarField) -> f64 {
    let mut vals = f.values.clone();
    vals.sort_unstable_by(f64::total_cmp);
    f.grid.cell_volume() * vals.iter().sum::<f64>()
}

/// `h^d * sum f g`, the discrete `L^2` inner product.
pub fn inner(f: &ScalarField, g: &ScalarField) -> f64 {
    debug_assert_eq!(f.grid, g.grid);
    f.grid.cell_volume()
        * f.values
            .iter()
            .zip(&g.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
}

/// Discrete analogue of
/// `int_0^T <-d_t v - nu Lap v, m> dt - int v(0) m0`,
/// matched to the implicit-Euler forward marching so that the discrete Green
/// identity is exact:
///
/// `P(m, v, m0) = sum_{l=0}^{nt-1} [ <v_l - v_{l+1}, m_{l+1}> + dt <-nu Lap v_l, m_{l+1}> ] - <v_0, m0>`.
///
/// For `m` marched by `(I + dt G_l) m_{l+1} = m_l` with `m`-slice 0 equal to
/// `m0` and any `v` with `v(T) = 0`, summation by parts gives exactly
/// `P = - sum_l dt <v_l, G_l m_{l+1}>` plus the diffusion cancellation, i.e.
/// the pairing sees only the exchange part of `G`.
pub fn adjoint_pairing(m: &SpaceTimeField, v: &SpaceTimeField, m0: &ScalarField) -> Result<f64> {
    if m.grid != v.grid || m0.grid != m.grid {
        return Err(Error::GridMismatch("adjoint_pairing arguments".into()));
    }
    let g = m.grid;
    let dt = g.dt();
    let nu = g.nu;
    let mut total = 0.0;
    for l in 0..g.nt {
        let vl = &v.slices[l];
        let vl1 = &v.slices[l + 1];
        let ml1 = &m.slices[l + 1];
        let lap_vl = laplacian(vl);
        let mut acc = 0.0;
        for i in 0..g.points() {
            acc += (vl.values[i] - vl1.values[i] - dt * nu * lap_vl.values[i]) * ml1.values[i];
        }
        total += g.cell_volume() * acc;
    }
    total -= inner(&v.slices[0], m0);
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1d(n: usize, nt: usize) -> TorusGrid {
        TorusGrid::new(1, n, nt, 1.0, 0.05).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(TorusGrid::new(3, 8, 4, 1.0, 0.1).is_err());
        assert!(TorusGrid::new(1, 3, 4, 1.0, 0.1).is_err());
        assert!(TorusGrid::new(1, 8, 0, 1.0, 0.1).is_err());
        assert!(TorusGrid::new(1, 8, 4, 1.0, 0.0).is_err());
        assert!(TorusGrid::new(2, 8, 4, 1.0, 0.1).is_ok());
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let g = grid1d(16, 4);
        let f = ScalarField::constant(g, 3.7);
        let lf = laplacian(&f);
        assert!(lf.sup_norm() == 0.0);
    }

    #[test]
    fn laplacian_cosine_eigenvalue() {
        // The sampled cosine is an exact eigenvector of the periodic stencil
        // with eigenvalue -(2/h^2)(1 - cos(2 pi h)).
        let g = grid1d(64, 4);
        let h = g.h();
        let f = ScalarField::from_fn(g, |x| (2.0 * std::f64::consts::PI * x[0]).cos());
        let lf = laplacian(&f);
        let lam = -(2.0 / (h * h)) * (1.0 - (2.0 * std::f64::consts::PI * h).cos());
        for i in 0..g.points() {
            assert!(
                (lf.values[i] - lam * f.values[i]).abs() <= 1e-9 * lam.abs(),
                "index {i}: {} vs {}",
                lf.values[i],
                lam * f.values[i]
            );
        }
    }

    #[test]
    fn laplacian_delta_stencil() {
        let g = grid1d(16, 4);
        let mut v = vec![0.0; 16];
        v[0] = 1.0;
        let f = ScalarField::new(g, v).unwrap();
        let lf = laplacian(&f);
        let inv_h2 = 256.0;
        assert_eq!(lf.values[0], -2.0 * inv_h2);
        assert_eq!(lf.values[1], inv_h2);
        assert_eq!(lf.values[15], inv_h2);
        for i in 2..15 {
            assert_eq!(lf.values[i], 0.0);
        }
    }

    #[test]
    fn laplacian_conserves_mass() {
        let g = grid1d(32, 4);
        let f = ScalarField::from_fn(g, |x| (7.3 * x[0]).sin() + 0.4 * (23.0 * x[0]).cos());
        let lf = laplacian(&f);
        assert!(integrate(&lf).abs() <= 1e-12 * f.sup_norm());
        let g2 = TorusGrid::new(2, 12, 4, 1.0, 0.05).unwrap();
        let f2 = ScalarField::from_fn(g2, |x| (5.0 * x[0]).sin() * (3.0 * x[1]).cos() + x[0]);
        assert!(integrate(&laplacian(&f2)).abs() <= 1e-12 * f2.sup_norm());
    }

    #[test]
    fn shift_roundtrip_and_sum() {
        let g = grid1d(16, 4);
        let f = ScalarField::from_fn(g, |x| x[0] * x[0] + 0.3);
        let j = LatticeJump::new(vec![5], &g).unwrap();
        let shifted = shift(&f, &j);
        let back = shift(&shifted, &j.inverse());
        assert_eq!(f.values, back.values);
        let s1 = integrate(&f);
        let s2 = integrate(&shifted);
        assert_eq!(s1.to_bits(), s2.to_bits());
    }

    #[test]
    fn shift_constant_invariance() {
        let g = grid1d(8, 4);
        let f = ScalarField::constant(g, 2.5);
        let j = LatticeJump::new(vec![3], &g).unwrap();
        assert_eq!(shift(&f, &j).values, f.values);
    }

    #[test]
    fn shift_2d_matches_coordinates() {
        let g = TorusGrid::new(2, 8, 2, 1.0, 0.05).unwrap();
        let f = ScalarField::from_fn(g, |x| 10.0 * x[0] + x[1]);
        let j = LatticeJump::new(vec![2, 3], &g).unwrap();
        let sh = shift(&f, &j);
        // result(x) = f(x - h*offset)
        for idx in 0..g.points() {
            let c = g.coords(idx);
            let src = g.index(&[c[0] - 2, c[1] - 3]);
            assert_eq!(sh.values[idx], f.values[src]);
        }
    }

    #[test]
    fn zero_jump_rejected() {
        let g = grid1d(8, 4);
        assert!(LatticeJump::new(vec![0], &g).is_err());
        assert!(LatticeJump::new(vec![8], &g).is_err());
        let g2 = TorusGrid::new(2, 8, 2, 1.0, 0.05).unwrap();
        assert!(LatticeJump::new(vec![0, 0], &g2).is_err());
        assert!(LatticeJump::new(vec![8, 16], &g2).is_err());
        assert!(LatticeJump::new(vec![0, 1], &g2).is_ok());
    }

    #[test]
    fn integrate_constant_and_linearity() {
        let g = grid1d(32, 4);
        assert!((integrate(&ScalarField::constant(g, 1.0)) - 1.0).abs() < 1e-15);
        let f = ScalarField::from_fn(g, |x| x[0]);
        let fg = ScalarField::from_fn(g, |x| 1.0 - x[0].cos());
        let lin = integrate(&f) + integrate(&fg);
        let sum_field = f.axpy(1.0, &fg);
        assert!((integrate(&sum_field) - lin).abs() < 1e-14);
    }

    #[test]
    fn pairing_zero_cases() {
        let g = grid1d(8, 4);
        let m = SpaceTimeField::zeros(g);
        let v = SpaceTimeField::from_fn(g, |t, x| t + x[0]);
        let z = ScalarField::zeros(g);
        assert_eq!(adjoint_pairing(&m, &SpaceTimeField::zeros(g), &z).unwrap(), 0.0);
        assert_eq!(adjoint_pairing(&m, &v, &z).unwrap(), 0.0);
    }

    #[test]
    fn pairing_grid_mismatch() {
        let g = grid1d(8, 4);
        let g2 = grid1d(16, 4);
        let m = SpaceTimeField::zeros(g);
        let v = SpaceTimeField::zeros(g2);
        assert!(adjoint_pairing(&m, &v, &ScalarField::zeros(g)).is_err());
    }
}
