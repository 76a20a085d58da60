//! Experiment configuration: TOML schema, validation, and construction of
//! solver inputs.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::grid::{LatticeJump, ScalarField, SpaceTimeField, TorusGrid};
use crate::io;
use crate::mfg::{Coupling, Damping, InitialGuess, MfgConfig};
use crate::qvi::{JumpSystem, SolverConfig};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub d: usize,
    pub n: usize,
    pub nt: usize,
    pub t_final: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    FpSingle,
    FpMulti,
    FpStationary,
    Qvi,
    Mfg,
    MfgStationary,
    OptimalControl,
    OracleCompare,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub scenario: Scenario,
}

/// Axis-aligned rectangle in torus coordinates with an optional time window.
/// Intervals are half-open `[lo, hi)` and may wrap (`lo > hi`).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectSpec {
    /// One `[lo, hi]` pair per axis.
    pub x: Vec<[f64; 2]>,
    /// Time window `[t0, t1]` (inclusive of slice times); whole horizon if
    /// absent.
    #[serde(default)]
    pub t: Option<[f64; 2]>,
    /// Intensity value on the rectangle.
    #[serde(default = "one")]
    pub value: f64,
}

fn one() -> f64 {
    1.0
}

fn in_interval(x: f64, lo: f64, hi: f64) -> bool {
    if lo <= hi {
        x >= lo && x < hi
    } else {
        x >= lo || x < hi
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostSpec {
    Constant { k0: f64 },
    File { path: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensitySpec {
    Rects { rects: Vec<RectSpec> },
    File { path: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpConfig {
    pub offset: Vec<i64>,
    pub cost: CostSpec,
    #[serde(default)]
    pub intensity: Option<IntensitySpec>,
}

/// Spatial field specification.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSpec {
    Uniform {
        value: f64,
    },
    /// `base + amplitude * cos(2 pi frequency x_0)` (first axis).
    Cosine {
        base: f64,
        amplitude: f64,
        #[serde(default = "one_u32")]
        frequency: u32,
    },
    File {
        path: String,
    },
}

fn one_u32() -> u32 {
    1
}

impl FieldSpec {
    pub fn build(&self, grid: TorusGrid, base_dir: &Path) -> Result<ScalarField> {
        match self {
            FieldSpec::Uniform { value } => Ok(ScalarField::constant(grid, *value)),
            FieldSpec::Cosine { base, amplitude, frequency } => Ok(ScalarField::from_fn(
                grid,
                |x| base + amplitude * (2.0 * std::f64::consts::PI * *frequency as f64 * x[0]).cos(),
            )),
            FieldSpec::File { path } => io::read_scalar_field(&base_dir.join(path), grid),
        }
    }
}

/// Space-time source specification (constant in time unless a file).
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSpec {
    Uniform { value: f64 },
    Cosine { base: f64, amplitude: f64, #[serde(default = "one_u32")] frequency: u32 },
    File { path: String },
}

impl SourceSpec {
    pub fn build(&self, grid: TorusGrid, base_dir: &Path) -> Result<SpaceTimeField> {
        match self {
            SourceSpec::Uniform { value } => Ok(SpaceTimeField::constant(grid, *value)),
            SourceSpec::Cosine { base, amplitude, frequency } => {
                let slice = ScalarField::from_fn(grid, |x| {
                    base + amplitude
                        * (2.0 * std::f64::consts::PI * *frequency as f64 * x[0]).cos()
                });
                Ok(SpaceTimeField {
                    grid,
                    slices: vec![slice; grid.nt + 1],
                })
            }
            SourceSpec::File { path } => io::read_space_time_field(&base_dir.join(path), grid),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub kind: String,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "one")]
    pub exponent: f64,
    #[serde(default)]
    pub width: usize,
}

impl CouplingConfig {
    pub fn build(&self) -> Result<Coupling> {
        match self.kind.as_str() {
            "local_power" => Coupling::local_power(self.scale, self.exponent),
            "smoothed_local" => Coupling::smoothed_local(self.scale, self.exponent, self.width),
            other => Err(Error::Config(format!("unknown coupling kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationaryConfig {
    pub rho: FieldSpec,
    pub delta: f64,
    #[serde(default)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub ladder: Vec<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default)]
    pub damping: Option<String>,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub max_fixed: Option<usize>,
    #[serde(default)]
    pub max_outer: Option<usize>,
    #[serde(default)]
    pub lp_box: Option<f64>,
}

fn default_epsilon() -> f64 {
    1e-2
}

fn default_seed() -> u64 {
    1234
}

impl NumericsConfig {
    pub fn solver_config(&self) -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if let Some(w) = self.omega {
            cfg.omega = w;
        }
        if let Some(m) = self.max_outer {
            cfg.max_outer = m;
        }
        cfg
    }

    pub fn mfg_config(&self) -> Result<MfgConfig> {
        let mut cfg = MfgConfig {
            qvi: self.solver_config(),
            ..MfgConfig::default()
        };
        let theta = self.theta.unwrap_or(0.5);
        cfg.damping = match self.damping.as_deref() {
            None | Some("adaptive") => Damping::AdaptiveHalving { initial: theta },
            Some("constant") => Damping::Constant(theta),
            Some("fictitious") => Damping::FictitiousPlay,
            Some(other) => {
                return Err(Error::Config(format!("unknown damping schedule '{other}'")))
            }
        };
        if let Some(m) = self.max_fixed {
            cfg.max_fixed = m;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_particles")]
    pub particles: usize,
    /// Compare against the limit-trajectory simulation as well.
    #[serde(default)]
    pub limit_compare: bool,
}

fn default_particles() -> usize {
    100_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub jumps: Vec<JumpConfig>,
    #[serde(default)]
    pub initial: Option<FieldSpec>,
    #[serde(default)]
    pub source: Option<SourceSpec>,
    #[serde(default)]
    pub coupling: Option<CouplingConfig>,
    #[serde(default)]
    pub stationary: Option<StationaryConfig>,
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub output: Option<OutputConfig>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((cfg, base))
    }

    pub fn build_grid(&self) -> Result<TorusGrid> {
        TorusGrid::new(
            self.grid.d,
            self.grid.n,
            self.grid.nt,
            self.grid.t_final,
            self.grid.nu,
        )
    }

    /// Validate everything buildable without running a solver.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        let grid = self.build_grid()?;
        if self.numerics.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self
            .numerics
            .ladder
            .windows(2)
            .any(|w| w[1] >= w[0])
            || self.numerics.ladder.iter().any(|&e| e <= 0.0)
        {
            return Err(Error::Config(
                "epsilon ladder must be strictly decreasing and positive".into(),
            ));
        }
        if !self.jumps.is_empty() {
            self.build_jump_system(grid, base_dir)?;
        }
        if let Some(init) = &self.initial {
            let m0 = init.build(grid, base_dir)?;
            if m0.min() < 0.0 {
                return Err(Error::Config("initial density must be >= 0".into()));
            }
        }
        if let Some(src) = &self.source {
            src.build(grid, base_dir)?;
        }
        if let Some(c) = &self.coupling {
            c.build()?;
        }
        if let Some(st) = &self.stationary {
            if st.delta <= 0.0 {
                return Err(Error::Config("delta must be positive".into()));
            }
            if st.lambda.is_some_and(|l| l <= 0.0) {
                return Err(Error::Config("lambda must be positive".into()));
            }
            let rho = st.rho.build(grid, base_dir)?;
            if rho.min() < 0.0 {
                return Err(Error::Config("entry rate rho must be >= 0".into()));
            }
        }
        // scenario-specific requirements
        use Scenario::*;
        match self.problem.scenario {
            FpSingle => {
                if self.jumps.len() != 1 {
                    return Err(Error::Config("fp_single needs exactly one jump".into()));
                }
                self.require_intensity()?;
                self.require_initial()?;
            }
            FpMulti => {
                if self.jumps.is_empty() {
                    return Err(Error::Config("fp_multi needs at least one jump".into()));
                }
                self.require_intensity()?;
                self.require_initial()?;
            }
            FpStationary => {
                self.require_intensity()?;
                if self.stationary.is_none() {
                    return Err(Error::Config("fp_stationary needs a [stationary] block".into()));
                }
            }
            Qvi => {
                if self.jumps.is_empty() {
                    return Err(Error::Config("qvi needs jumps".into()));
                }
                if self.source.is_none() {
                    return Err(Error::Config("qvi needs a [source] block".into()));
                }
            }
            Mfg => {
                if self.jumps.is_empty() || self.coupling.is_none() {
                    return Err(Error::Config("mfg needs jumps and a [coupling] block".into()));
                }
                self.require_initial()?;
            }
            MfgStationary | OptimalControl => {
                if self.jumps.is_empty() || self.coupling.is_none() || self.stationary.is_none() {
                    return Err(Error::Config(
                        "stationary MFG needs jumps, [coupling] and [stationary]".into(),
                    ));
                }
            }
            OracleCompare => {
                self.require_intensity()?;
                self.require_initial()?;
            }
        }
        Ok(())
    }

    fn require_intensity(&self) -> Result<()> {
        if self.jumps.iter().any(|j| j.intensity.is_none()) {
            return Err(Error::Config(
                "this scenario needs an intensity on every jump".into(),
            ));
        }
        Ok(())
    }

    fn require_initial(&self) -> Result<()> {
        if self.initial.is_none() {
            return Err(Error::Config("this scenario needs an [initial] block".into()));
        }
        Ok(())
    }

    pub fn build_initial(&self, grid: TorusGrid, base_dir: &Path) -> Result<ScalarField> {
        self.initial
            .as_ref()
            .ok_or_else(|| Error::Config("missing [initial] block".into()))?
            .build(grid, base_dir)
    }

    /// Jump system with whatever intensities the config declares.
    pub fn build_jump_system(&self, grid: TorusGrid, base_dir: &Path) -> Result<JumpSystem> {
        if self.jumps.is_empty() {
            return Err(Error::Config("no jumps configured".into()));
        }
        let mut jumps = Vec::new();
        let mut costs = Vec::new();
        let mut k0 = f64::INFINITY;
        let mut intensities = Vec::new();
        let mut any_intensity = false;
        for jc in &self.jumps {
            let jump = LatticeJump::new(jc.offset.clone(), &grid)
                .map_err(|e| Error::Config(format!("invalid jump offset: {e}")))?;
            let cost = match &jc.cost {
                CostSpec::Constant { k0 } => {
                    if *k0 <= 0.0 {
                        return Err(Error::Config("jump cost bound k0 must be > 0".into()));
                    }
                    ScalarField::constant(grid, *k0)
                }
                CostSpec::File { path } => io::read_scalar_field(&base_dir.join(path), grid)?,
            };
            k0 = k0.min(cost.min());
            let v = match &jc.intensity {
                Some(IntensitySpec::Rects { rects }) => {
                    any_intensity = true;
                    Some(build_rect_intensity(grid, rects)?)
                }
                Some(IntensitySpec::File { path }) => {
                    any_intensity = true;
                    Some(io::read_space_time_field(&base_dir.join(path), grid)?)
                }
                None => None,
            };
            jumps.push(jump);
            costs.push(cost);
            intensities.push(v);
        }
        if k0 <= 0.0 {
            return Err(Error::Config("jump costs must stay positive".into()));
        }
        let intensity = if any_intensity {
            Some(
                intensities
                    .into_iter()
                    .map(|v| v.unwrap_or_else(|| SpaceTimeField::zeros(grid)))
                    .collect(),
            )
        } else {
            None
        };
        JumpSystem::new(jumps, costs, k0, intensity)
            .map_err(|e| Error::Config(format!("invalid jump system: {e}")))
    }

    pub fn initial_guess(&self) -> InitialGuess {
        InitialGuess::HeatFlow
    }
}

fn build_rect_intensity(grid: TorusGrid, rects: &[RectSpec]) -> Result<SpaceTimeField> {
    for r in rects {
        if r.x.len() != grid.d {
            return Err(Error::Config(format!(
                "rectangle has {} axis intervals, grid dimension is {}",
                r.x.len(),
                grid.d
            )));
        }
        if !(0.0..=1.0).contains(&r.value) {
            return Err(Error::Config("intensity value must lie in [0, 1]".into()));
        }
    }
    let h = grid.h();
    let mut slices = Vec::with_capacity(grid.nt + 1);
    for l in 0..=grid.nt {
        let t = grid.time(l);
        let values = (0..grid.points())
            .map(|idx| {
                let coords = grid.coords(idx);
                let mut v = 0.0f64;
                for r in rects {
                    let in_time = r.t.map_or(true, |[t0, t1]| t >= t0 && t <= t1);
                    if !in_time {
                        continue;
                    }
                    let inside = (0..grid.d)
                        .all(|a| in_interval(coords[a] as f64 * h, r.x[a][0], r.x[a][1]));
                    if inside {
                        v = v.max(r.value);
                    }
                }
                v
            })
            .collect();
        slices.push(ScalarField { grid, values });
    }
    SpaceTimeField::new(grid, slices)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[grid]
d = 1
n = 32
nt = 16
t_final = 1.0
nu = 0.05

[problem]
scenario = "fp_single"

[[jumps]]
offset = [16]
cost = { constant = { k0 = 0.5 } }
intensity = { rects = { rects = [ { x = [[0.25, 0.5]] } ] } }

[initial]
uniform = { value = 1.0 }

[numerics]
epsilon = 1e-2
"#;

    #[test]
    fn minimal_config_parses_and_validates() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate(Path::new(".")).unwrap();
        let grid = cfg.build_grid().unwrap();
        let js = cfg.build_jump_system(grid, Path::new(".")).unwrap();
        assert_eq!(js.jumps.len(), 1);
        let mask = js.support_mask(0).unwrap();
        // A = [0.25, 0.5) covers 8 of 32 cells
        assert_eq!(mask.slices[0].iter().filter(|&&b| b).count(), 8);
    }

    #[test]
    fn zero_offset_rejected() {
        let bad = MINIMAL.replace("offset = [16]", "offset = [0]");
        let cfg: ExperimentConfig = toml::from_str(&bad).unwrap();
        let err = cfg.validate(Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("offset"));
    }

    #[test]
    fn increasing_ladder_rejected() {
        let bad = MINIMAL.replace("epsilon = 1e-2", "epsilon = 1e-2\nladder = [1e-3, 1e-2]");
        let cfg: ExperimentConfig = toml::from_str(&bad).unwrap();
        assert!(cfg.validate(Path::new(".")).is_err());
    }

    #[test]
    fn wrapping_rectangle() {
        let grid = TorusGrid::new(1, 8, 2, 1.0, 0.05).unwrap();
        let rects = vec![RectSpec {
            x: vec![[0.75, 0.25]],
            t: None,
            value: 1.0,
        }];
        let v = build_rect_intensity(grid, &rects).unwrap();
        let on: Vec<usize> = (0..8).filter(|&i| v.slices[0].values[i] > 0.0).collect();
        assert_eq!(on, vec![0, 1, 6, 7]);
    }
}
