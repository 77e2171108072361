//! Projected gradient ascent for the (AMO-)Eisenberg-Gale program.
//!
//! Iterates are kept item-major (`M x N`) so that the per-item projections
//! work on contiguous rows. Duals are recovered after the fact from the
//! allocation.

mod config;
mod duals;
mod projection;

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

pub use config::{SolverConfig, StepRule};
pub use duals::{kkt_report, recover_duals, recover_duals_with, Duals, KktReport};
pub use projection::{project_capped_column, project_feasible};

use crate::error::{Error, Result};
use crate::market::Market;

/// Which program is solved: with the at-most-one group caps or without.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Amo,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub residuals: KktReport,
    pub x_thresh: f64,
    /// False when some Dykstra projection stopped before `tol_feas`.
    pub projection_exact: bool,
    /// Some buyer ended at or below the utility floor.
    pub floor_active: bool,
    /// Largest objective decrease between accepted iterates.
    pub max_decrease: f64,
    /// `max_decrease` is within the rounding level of the objective.
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub mode: Mode,
    /// `N x M` allocation.
    pub x: Array2<f64>,
    pub p: Array1<f64>,
    /// `N x |K|` group multipliers; zero in plain mode.
    pub lambda: Array2<f64>,
    pub beta: Array1<f64>,
    pub objective: f64,
    pub diagnostics: Diagnostics,
}

impl Solution {
    pub fn duals(&self) -> Duals {
        Duals {
            p: self.p.clone(),
            lambda: self.lambda.clone(),
            beta: self.beta.clone(),
        }
    }

    pub fn utilities(&self, market: &Market) -> Array1<f64> {
        market.utilities(&self.x)
    }
}

pub fn solve_amo_eg(market: &Market, cfg: &SolverConfig) -> Result<Solution> {
    solve(market, cfg, Mode::Amo, None)
}

pub fn solve_eg_plain(market: &Market, cfg: &SolverConfig) -> Result<Solution> {
    solve(market, cfg, Mode::Plain, None)
}

/// Residuals of `sol` against `market`, recomputed from scratch.
pub fn kkt_residuals(sol: &Solution, market: &Market) -> KktReport {
    kkt_report(
        &sol.x,
        &sol.duals(),
        market,
        sol.mode,
        sol.diagnostics.x_thresh,
    )
}

struct Problem<'a> {
    market: &'a Market,
    /// `M x N` valuations.
    vt: Array2<f64>,
    floors: Array1<f64>,
    cap: f64,
    use_groups: bool,
}

impl Problem<'_> {
    fn utilities(&self, xt: &Array2<f64>) -> Array1<f64> {
        let mut u = Array1::<f64>::zeros(self.vt.ncols());
        for (vr, xr) in self.vt.rows().into_iter().zip(xt.rows()) {
            Zip::from(&mut u)
                .and(vr)
                .and(xr)
                .for_each(|u, &v, &x| *u += v * x);
        }
        u
    }

    fn objective(&self, u: &Array1<f64>) -> f64 {
        Zip::from(u)
            .and(&self.market.budgets)
            .and(&self.floors)
            .fold(0.0, |acc, &u, &b, &fl| acc + b * u.max(fl).ln())
    }

    /// `f(x + step) - f(x)` computed from the utility change, which keeps
    /// its relative accuracy when the two objective values nearly agree.
    fn objective_change(&self, u: &Array1<f64>, step: &Array2<f64>) -> f64 {
        let du = self.utilities(step);
        Zip::from(u)
            .and(&du)
            .and(&self.market.budgets)
            .and(&self.floors)
            .fold(0.0, |acc, &u, &du, &b, &fl| {
                let d = if u > fl && u + du > fl {
                    (du / u).ln_1p()
                } else {
                    (u + du).max(fl).ln() - u.max(fl).ln()
                };
                acc + b * d
            })
    }

    fn gradient(&self, u: &Array1<f64>, g: &mut Array2<f64>) {
        let w = Zip::from(u)
            .and(&self.market.budgets)
            .and(&self.floors)
            .map_collect(|&u, &b, &fl| b / u.max(fl));
        Zip::from(g.rows_mut())
            .and(self.vt.rows())
            .for_each(|mut gr, vr| {
                Zip::from(&mut gr)
                    .and(vr)
                    .and(&w)
                    .for_each(|g, &v, &w| *g = v * w);
            });
    }

    fn project(&self, xt: &mut Array2<f64>, cfg: &SolverConfig) -> bool {
        projection::project_item_major(xt, self.market, self.cap, self.use_groups, cfg)
    }

    /// Writes the projection of `xt + alpha * g` into `out` and returns
    /// whether it was exact together with `<g, out - xt>`.
    ///
    /// Without groups each item row is shifted by its least held bid before
    /// the projection, which leaves the result unchanged but solves for the
    /// threshold on small numbers, so the step stays accurate near the
    /// optimum.
    fn ascent_step(
        &self,
        xt: &Array2<f64>,
        g: &Array2<f64>,
        alpha: f64,
        out: &mut Array2<f64>,
        cfg: &SolverConfig,
    ) -> (bool, f64) {
        if self.use_groups {
            out.assign(xt);
            out.scaled_add(alpha, g);
            let exact = self.project(out, cfg);
            return (exact, dot(g, &(&*out - xt)));
        }
        let mut events = Vec::new();
        let mut gd = 0.0;
        for (j, mut row) in out.rows_mut().into_iter().enumerate() {
            let (xr, gr) = (xt.row(j), g.row(j));
            let shift =
                Zip::from(&xr).and(&gr).fold(
                    f64::INFINITY,
                    |m, &x, &g| if x > 0.0 { m.min(g) } else { m },
                );
            let shift = if shift.is_finite() { shift } else { 0.0 };
            Zip::from(&mut row)
                .and(&xr)
                .and(&gr)
                .for_each(|o, &x, &g| *o = x + alpha * (g - shift));
            projection::project_view(
                row.view_mut(),
                self.cap,
                self.market.supplies[j],
                -alpha * shift,
                &mut events,
            );
            let (mut shifted, mut moved) = (0.0, 0.0);
            Zip::from(&row).and(&xr).and(&gr).for_each(|&o, &x, &g| {
                shifted += (g - shift) * (o - x);
                moved += o - x;
            });
            gd += shifted + shift * moved;
        }
        (true, gd)
    }
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + x * y)
}

/// Solves the program in `mode`, optionally starting from `warm` (`N x M`,
/// projected before use).
pub fn solve(
    market: &Market,
    cfg: &SolverConfig,
    mode: Mode,
    warm: Option<&Array2<f64>>,
) -> Result<Solution> {
    market.ensure_valid()?;
    cfg.validate()?;
    let (n, m) = market.valuations.dim();
    if let Some(w) = warm {
        if w.dim() != (n, m) {
            return Err(Error::InvalidArgument(format!(
                "warm start has shape {:?}, expected ({n}, {m})",
                w.dim()
            )));
        }
    }

    let prob = Problem {
        market,
        vt: market.valuations.t().as_standard_layout().into_owned(),
        floors: market
            .valuations
            .rows()
            .into_iter()
            .map(|r| cfg.x_floor * r.fold(0.0f64, |a, &v| a.max(v)))
            .collect(),
        cap: if mode == Mode::Amo {
            1.0
        } else {
            f64::INFINITY
        },
        use_groups: mode == Mode::Amo && !market.has_singleton_groups(),
    };

    let mut xt = match warm {
        Some(w) => w.t().as_standard_layout().into_owned(),
        None => Array2::from_shape_fn((m, n), |(j, _)| (market.supplies[j] / n as f64).min(1.0)),
    };
    let mut projection_exact = prob.project(&mut xt, cfg);

    let mut u = prob.utilities(&xt);
    let mut f = prob.objective(&u);
    let mut g = Array2::zeros((m, n));
    prob.gradient(&u, &mut g);

    let gmax = g
        .iter()
        .fold(0.0f64, |a, &v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let (mut alpha, shrink, c_armijo, fixed) = match cfg.step_rule {
        StepRule::Fixed { eta } => (eta, 1.0, 0.0, true),
        StepRule::Backtracking { alpha0, shrink, c } => (alpha0 / gmax, shrink, c, false),
    };

    // Objective changes below this are rounding: the iterate is stored to
    // absolute precision and every column sum is exact only to a few ulps.
    let noise = 8.0 * f64::EPSILON * (1.0 + (n as f64).sqrt()) * market.budgets.sum();
    let mut max_decrease = 0.0f64;
    let mut iterations = 0;
    let mut converged = false;
    let mut x_new = xt.clone();
    let mut g_new = g.clone();

    let evaluate = |xt: &Array2<f64>| {
        let x = xt.t().as_standard_layout().into_owned();
        let d = recover_duals_with(&x, market, mode, cfg.x_thresh, cfg.x_floor);
        let r = kkt_report(&x, &d, market, mode, cfg.x_thresh);
        (x, d, r)
    };

    while iterations < cfg.max_iters {
        iterations += 1;
        let mut stalled = false;
        let mut f_new;
        let mut u_new;
        let mut gain;
        loop {
            let (exact, gd) = prob.ascent_step(&xt, &g, alpha, &mut x_new, cfg);
            projection_exact &= exact;
            let step = &x_new - &xt;
            u_new = prob.utilities(&x_new);
            f_new = prob.objective(&u_new);
            gain = prob.objective_change(&u, &step);
            if fixed {
                break;
            }
            let moved = step.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if moved == 0.0 {
                stalled = true;
                break;
            }
            if gain >= c_armijo * gd - noise {
                break;
            }
            alpha *= shrink;
            if alpha * gmax < 1e-18 {
                stalled = true;
                break;
            }
        }
        if stalled {
            iterations -= 1;
            converged = evaluate(&xt).2.max() <= cfg.tol_kkt;
            break;
        }
        max_decrease = max_decrease.max(-gain);
        prob.gradient(&u_new, &mut g_new);

        if !fixed {
            let s = &x_new - &xt;
            let y = &g_new - &g;
            let sy = dot(&s, &y);
            let ss = dot(&s, &s);
            alpha = if sy < 0.0 { ss / -sy } else { alpha * 2.0 };
            alpha = alpha.clamp(1e-16 / gmax, 1e16 / gmax);
        }
        std::mem::swap(&mut xt, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        u = u_new;
        f = f_new;

        if (iterations % cfg.check_every.max(1) == 0 || iterations == cfg.max_iters)
            && evaluate(&xt).2.max() <= cfg.tol_kkt
        {
            converged = true;
            break;
        }
    }

    let (x, duals, report) = evaluate(&xt);
    let floor_active = Zip::from(&u)
        .and(&prob.floors)
        .fold(false, |a, &u, &fl| a || u <= fl);
    let converged = converged && !floor_active && report.max() <= cfg.tol_kkt;

    Ok(Solution {
        mode,
        x,
        p: duals.p,
        lambda: duals.lambda,
        beta: duals.beta,
        objective: f,
        diagnostics: Diagnostics {
            iterations,
            converged,
            residuals: report,
            x_thresh: cfg.x_thresh,
            projection_exact,
            floor_active,
            max_decrease,
            monotone: max_decrease <= noise,
        },
    })
}

/// Sparse JSON form: entries of `x` and `lambda` above `x_thresh` (resp.
/// nonzero) as `[row, col, value]` triplets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionJson {
    pub mode: Mode,
    pub n_buyers: usize,
    pub n_items: usize,
    pub n_groups: usize,
    pub x: Vec<(usize, usize, f64)>,
    pub p: Vec<f64>,
    pub lambda: Vec<(usize, usize, f64)>,
    pub beta: Vec<f64>,
    pub objective: f64,
    pub diagnostics: Diagnostics,
}

fn triplets(a: &Array2<f64>, above: f64) -> Vec<(usize, usize, f64)> {
    a.indexed_iter()
        .filter(|(_, &v)| v > above)
        .map(|((i, j), &v)| (i, j, v))
        .collect()
}

fn dense(shape: (usize, usize), t: &[(usize, usize, f64)]) -> Result<Array2<f64>> {
    let mut a = Array2::zeros(shape);
    for &(i, j, v) in t {
        let cell = a
            .get_mut((i, j))
            .ok_or_else(|| Error::InvalidArgument(format!("triplet ({i}, {j}) out of range")))?;
        *cell = v;
    }
    Ok(a)
}

impl Solution {
    pub fn to_json(&self) -> SolutionJson {
        let (n, m) = self.x.dim();
        SolutionJson {
            mode: self.mode,
            n_buyers: n,
            n_items: m,
            n_groups: self.lambda.ncols(),
            x: triplets(&self.x, self.diagnostics.x_thresh),
            p: self.p.to_vec(),
            lambda: triplets(&self.lambda, 0.0),
            beta: self.beta.to_vec(),
            objective: self.objective,
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_json())?)
    }

    /// Inverse of [`Solution::to_json`]; entries of `x` at or below
    /// `x_thresh` come back as zero.
    pub fn from_json(j: SolutionJson) -> Result<Solution> {
        if j.p.len() != j.n_items || j.beta.len() != j.n_buyers {
            return Err(Error::InvalidArgument(
                "solution vectors do not match declared sizes".into(),
            ));
        }
        Ok(Solution {
            mode: j.mode,
            x: dense((j.n_buyers, j.n_items), &j.x)?,
            p: Array1::from(j.p),
            lambda: dense((j.n_buyers, j.n_groups), &j.lambda)?,
            beta: Array1::from(j.beta),
            objective: j.objective,
            diagnostics: j.diagnostics,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Solution> {
        Solution::from_json(serde_json::from_str(s)?)
    }
}
