//! Invariant-check records and the pinned acceptance thresholds.
//!
//! Every solver identity asserted by a run is recorded as a named check with
//! its measured value, threshold and direction; `report.json` holds the full
//! list and `summary.txt` one line per check. No timestamps anywhere: reruns
//! of a config are byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::io::fmt_f64;

/// Spec-pinned tolerances for the acceptance identities.
pub mod thresholds {
    /// Relative mass drift of a penalized forward run, per time level.
    pub const MASS_REL: f64 = 1e-10;
    /// Density positivity floor, relative to the initial sup norm.
    pub const POSITIVITY_REL: f64 = 1e-10;
    /// Relative error of the duality identity
    /// `pairing(m, u*, m0) = -(1/eps) int_A k m`.
    pub const DUALITY_REL: f64 = 1e-8;
    /// Band for the fitted log-log slope of `int_A m` versus epsilon.
    pub const SLOPE_BAND: (f64, f64) = (0.8, 1.2);
    /// The limit density vanishes on A: `sup_A m <= VANISH_REL * |m|_inf`.
    pub const VANISH_REL: f64 = 1e-2;
    /// Spread of the duality estimates over the bottom half of the ladder.
    pub const D_SPREAD_REL: f64 = 0.10;
    /// QVI feasibility `u <= Mu + QVI_FEAS`.
    pub const QVI_FEAS: f64 = 1e-8;
    /// QVI pointwise complementarity residual.
    pub const QVI_COMP: f64 = 1e-8;
    /// Pointwise tolerance for the decreasing outer iterates.
    pub const QVI_MONOTONE: f64 = 1e-10;
    /// Constant-source analytic solution match.
    pub const QVI_ANALYTIC: f64 = 1e-10;
    /// L1 distance between the PDE density and the particle oracle at t = T.
    pub const ORACLE_L1_PENALIZED: f64 = 0.05;
    /// Same for the limit-trajectory oracle, away from the initial layer.
    pub const ORACLE_L1_LIMIT: f64 = 0.08;
    /// MFG complementarity integral, relative to `|f(m)|_inf * T`.
    pub const MFG_COMP_REL: f64 = 1e-6;
    /// Relative L2 distance between densities from two fixed-point
    /// initializations.
    pub const MFG_UNIQUENESS_L2: f64 = 1e-4;
    /// Stationary mass identity `delta int m = int rho`.
    pub const STATIONARY_MASS_REL: f64 = 1e-10;
    /// Constant-data closed forms `m = c/delta`, `u = c/lambda`.
    pub const CLOSED_FORM_ABS: f64 = 1e-10;
    /// Stationary complementarity, relative to its scale.
    pub const STATIONARY_COMP_REL: f64 = 1e-6;
    /// `D(resolvent) = 0` tolerance.
    pub const RESOLVENT_DUALITY_ABS: f64 = 1e-8;
    /// Optimal-control minimality slack against perturbations.
    pub const OPTIMALITY_SLACK: f64 = 1e-8;
    /// Adjoint uniqueness probe, relative to `|m| * |f|`.
    pub const PROBE_REL: f64 = 1e-4;
    /// Variational-inequality battery margin for MFG checks.
    pub const VI_MARGIN: f64 = 1e-6;
    /// N^(-1/2) scaling band for the Monte-Carlo error when quadrupling N.
    pub const MC_SCALING_BAND: (f64, f64) = (1.6, 2.6);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Pass when `value <= threshold`.
    AtMost,
    /// Pass when `value >= threshold`.
    AtLeast,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: String,
    pub threshold: String,
    pub direction: Direction,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub checks: Vec<Check>,
    /// Headline metrics (also the source of sweep.csv columns).
    pub metrics: BTreeMap<String, String>,
    pub pass: bool,
}

impl Report {
    pub fn new(scenario: &str, seed: u64) -> Self {
        Self {
            scenario: scenario.to_string(),
            seed,
            checks: Vec::new(),
            metrics: BTreeMap::new(),
            pass: true,
        }
    }

    pub fn check_at_most(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        let pass = value <= threshold;
        self.push(name, value, threshold, Direction::AtMost, pass);
        pass
    }

    pub fn check_at_least(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        let pass = value >= threshold;
        self.push(name, value, threshold, Direction::AtLeast, pass);
        pass
    }

    pub fn check_flag(&mut self, name: &str, flag: bool) -> bool {
        self.push(name, if flag { 1.0 } else { 0.0 }, 1.0, Direction::AtLeast, flag);
        flag
    }

    fn push(&mut self, name: &str, value: f64, threshold: f64, direction: Direction, pass: bool) {
        self.checks.push(Check {
            name: name.to_string(),
            value: fmt_f64(value),
            threshold: fmt_f64(threshold),
            direction,
            pass,
        });
        if !pass {
            self.pass = false;
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), fmt_f64(value));
    }

    pub fn metric_count(&mut self, name: &str, value: usize) {
        self.metrics.insert(name.to_string(), value.to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .expect("report serialization cannot fail");
        std::fs::write(dir.join("report.json"), json + "\n")?;
        let mut lines = Vec::with_capacity(self.checks.len() + 2);
        for c in &self.checks {
            let op = match c.direction {
                Direction::AtMost => "<=",
                Direction::AtLeast => ">=",
            };
            lines.push(format!(
                "{} {}: {} {} {}",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                op,
                c.threshold
            ));
        }
        lines.push(format!(
            "{}: {} of {} checks passed",
            if self.pass { "OK" } else { "FAILED" },
            self.checks.iter().filter(|c| c.pass).count(),
            self.checks.len()
        ));
        std::fs::write(dir.join("summary.txt"), lines.join("\n") + "\n")?;
        Ok(())
    }
}
