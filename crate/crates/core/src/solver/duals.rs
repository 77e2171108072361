//! Post-hoc dual recovery and KKT residuals.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::Mode;
use crate::market::Market;

/// Supply prices `p`, group multipliers `lambda` (`N x |K|`) and utility
/// prices `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub p: Array1<f64>,
    pub lambda: Array2<f64>,
    pub beta: Array1<f64>,
}

/// Relative slack below which a supply constraint counts as binding.
const SUPPLY_SLACK_REL: f64 = 1e-9;

fn utility_floor(market: &Market, i: usize, x_floor: f64) -> f64 {
    x_floor * market.valuations.row(i).fold(0.0f64, |m, &v| m.max(v))
}

/// `beta_i = B_i / u_i` (with `u_i` floored at `x_floor * max_j v_ij`), the
/// least-winning-bid price rule and `lambda_ik = max(0, best held bid in k -
/// price)`. For [`Mode::Plain`] the multipliers are identically zero.
pub fn recover_duals_with(
    x: &Array2<f64>,
    market: &Market,
    mode: Mode,
    x_thresh: f64,
    x_floor: f64,
) -> Duals {
    let (n, m) = market.valuations.dim();
    let u = market.utilities(x);
    let beta = Array1::from_shape_fn(n, |i| {
        market.budgets[i] / u[i].max(utility_floor(market, i, x_floor))
    });

    let mut p = Array1::zeros(m);
    for j in 0..m {
        let s = market.supplies[j];
        let used: f64 = x.column(j).sum();
        if used < s - SUPPLY_SLACK_REL * s.max(1.0) {
            continue;
        }
        let mut low = f64::INFINITY;
        for i in 0..n {
            if x[[i, j]] > x_thresh {
                low = low.min(beta[i] * market.valuations[[i, j]]);
            }
        }
        if low.is_finite() {
            p[j] = low;
        }
    }

    let mut lambda = Array2::zeros((n, market.n_groups()));
    if mode == Mode::Amo {
        for (k, g) in market.groups.iter().enumerate() {
            for i in 0..n {
                let mut best = 0.0f64;
                for &j in g {
                    if x[[i, j]] > x_thresh {
                        best = best.max(beta[i] * market.valuations[[i, j]] - p[j]);
                    }
                }
                lambda[[i, k]] = best;
            }
        }
    }
    Duals { p, lambda, beta }
}

/// [`recover_duals_with`] at the default thresholds for AMO-EG.
pub fn recover_duals(x: &Array2<f64>, market: &Market) -> Duals {
    let d = super::SolverConfig::default();
    recover_duals_with(x, market, Mode::Amo, d.x_thresh, d.x_floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktReport {
    /// `max(0, beta_i v_ij - p_j - lambda_ik)` over all entries.
    pub stationarity: f64,
    /// `|beta_i v_ij - p_j - lambda_ik|` over held entries.
    pub tightness: f64,
    pub primal_feas: f64,
    pub dual_feas: f64,
    pub complementarity: f64,
    /// `|sum_j x_ij (p_j + lambda_ik(j)) - B_i|`.
    pub budget: f64,
}

impl KktReport {
    /// Largest residual used as the stopping criterion. The budget residual is
    /// implied by tightness and is reported separately.
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.tightness)
            .max(self.primal_feas)
            .max(self.dual_feas)
            .max(self.complementarity)
    }
}

pub fn kkt_report(
    x: &Array2<f64>,
    duals: &Duals,
    market: &Market,
    mode: Mode,
    x_thresh: f64,
) -> KktReport {
    let (n, m) = market.valuations.dim();
    let group_of = market.group_of();
    let amo = mode == Mode::Amo;
    let mut r = KktReport::default();

    for i in 0..n {
        let mut spend = 0.0;
        for j in 0..m {
            let lam = if amo {
                duals.lambda[[i, group_of[j]]]
            } else {
                0.0
            };
            let gap = duals.beta[i] * market.valuations[[i, j]] - duals.p[j] - lam;
            r.stationarity = r.stationarity.max(gap);
            let xij = x[[i, j]];
            if xij > x_thresh {
                r.tightness = r.tightness.max(gap.abs());
            }
            r.primal_feas = r.primal_feas.max(-xij);
            spend += xij * (duals.p[j] + lam);
        }
        r.budget = r.budget.max((spend - market.budgets[i]).abs());
    }

    for j in 0..m {
        let slack = market.supplies[j] - x.column(j).sum();
        r.primal_feas = r.primal_feas.max(-slack);
        r.complementarity = r.complementarity.max(duals.p[j] * slack.max(0.0));
        r.dual_feas = r.dual_feas.max(-duals.p[j]);
    }
    if amo {
        for (k, g) in market.groups.iter().enumerate() {
            for i in 0..n {
                let total: f64 = g.iter().map(|&j| x[[i, j]]).sum();
                let slack = 1.0 - total;
                r.primal_feas = r.primal_feas.max(-slack);
                r.complementarity = r.complementarity.max(duals.lambda[[i, k]] * slack.max(0.0));
                r.dual_feas = r.dual_feas.max(-duals.lambda[[i, k]]);
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn counterexample() -> (Market, Array2<f64>) {
        let m = Market::from_rows(&[&[1.0, 1.0], &[1.0, 100.0]], &[2.0, 1.0]).unwrap();
        let t = 0.005;
        (m, array![[1.0, t], [1.0, 1.0 - t]])
    }

    #[test]
    fn counterexample_duals_by_hand() {
        let (m, x) = counterexample();
        let d = recover_duals(&x, &m);
        let b1 = 1.0 / 1.005;
        let b2 = 1.0 / 100.5;
        assert!((d.beta[0] - b1).abs() < 1e-12 && (d.beta[1] - b2).abs() < 1e-12);
        assert!((d.p[1] - b1).abs() < 1e-12);
        assert!((d.p[0] - b2).abs() < 1e-12);
        // Both buyers bid the same on item 2 at t = 1/200.
        assert!(d.lambda[[1, 1]].abs() < 1e-12);
        assert!((d.lambda[[0, 0]] - (b1 - b2)).abs() < 1e-12);
        let r = kkt_report(&x, &d, &m, Mode::Amo, 1e-6);
        assert!(r.max() < 1e-6, "{r:?}");
        assert!(r.budget < 1e-9);
    }

    #[test]
    fn slack_supply_has_zero_price() {
        let m = Market::from_rows(&[&[1.0, 2.0]], &[3.0, 1.0]).unwrap();
        let d = recover_duals(&array![[1.0, 1.0]], &m);
        assert_eq!(d.p[0], 0.0);
    }

    #[test]
    fn infeasibility_is_measured() {
        let (m, _) = counterexample();
        let x = array![[1.25, 0.5], [1.0, 0.5]];
        let d = recover_duals(&x, &m);
        let r = kkt_report(&x, &d, &m, Mode::Amo, 1e-6);
        assert!((r.primal_feas - 0.25).abs() < 1e-12);
    }

    #[test]
    fn perturbed_price_shows_in_tightness() {
        let (m, x) = counterexample();
        let mut d = recover_duals(&x, &m);
        d.p[1] += 0.1;
        let r = kkt_report(&x, &d, &m, Mode::Amo, 1e-6);
        assert!(r.tightness >= 0.1 - 1e-9);
    }
}
