use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-size rule for projected gradient ascent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    /// Constant step `eta`. No monotonicity guarantee.
    Fixed { eta: f64 },
    /// Barzilai-Borwein proposal (starting from `alpha0`) with Armijo
    /// backtracking: shrink by `shrink` until
    /// `f(x+) >= f(x) + c * <g, x+ - x>`.
    Backtracking { alpha0: f64, shrink: f64, c: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Backtracking {
            alpha0: 1.0,
            shrink: 0.5,
            c: 1e-4,
        }
    }
}

/// Solver settings. Every field has a default, so config files may list
/// only the fields they override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub step_rule: StepRule,
    /// Target for the largest KKT residual (stationarity, tightness,
    /// feasibility, complementarity).
    pub tol_kkt: f64,
    pub tol_feas: f64,
    /// Dykstra rounds per projection when groups are not singletons.
    pub dykstra_iters: usize,
    /// Utility floor relative to the buyer's largest valuation.
    pub x_floor: f64,
    /// Holdings above this count as "held" in dual recovery.
    pub x_thresh: f64,
    /// KKT residuals are evaluated every this many iterations.
    pub check_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 100_000,
            step_rule: StepRule::default(),
            tol_kkt: 1e-8,
            tol_feas: 1e-10,
            dykstra_iters: 50,
            x_floor: 1e-12,
            x_thresh: 1e-6,
            check_every: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        for (name, v) in [
            ("tol_kkt", self.tol_kkt),
            ("tol_feas", self.tol_feas),
            ("x_floor", self.x_floor),
            ("x_thresh", self.x_thresh),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        match self.step_rule {
            StepRule::Fixed { eta } if !(eta > 0.0 && eta.is_finite()) => {
                bad("eta must be positive")
            }
            StepRule::Backtracking { alpha0, shrink, c }
                if !(alpha0 > 0.0 && shrink > 0.0 && shrink < 1.0 && c > 0.0 && c < 1.0) =>
            {
                bad("backtracking needs alpha0 > 0, shrink in (0,1), c in (0,1)")
            }
            _ => Ok(()),
        }
    }

    /// Reads a JSON or TOML file (chosen by extension; TOML otherwise).
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SolverConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg: SolverConfig =
            toml::from_str("tol_kkt = 1e-9\n[step_rule]\nkind = \"fixed\"\neta = 0.1\n").unwrap();
        assert_eq!(cfg.tol_kkt, 1e-9);
        assert_eq!(cfg.step_rule, StepRule::Fixed { eta: 0.1 });
        assert_eq!(cfg.dykstra_iters, 50);
    }

    #[test]
    fn json_round_trip() {
        let cfg = SolverConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<SolverConfig>(&s).unwrap(), cfg);
    }

    #[test]
    fn rejects_nonpositive_tolerance() {
        let cfg = SolverConfig {
            tol_kkt: 0.0,
            ..SolverConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
