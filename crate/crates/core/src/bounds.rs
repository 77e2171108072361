//! Explicit approximate-equilibrium bounds from twin structure.
//!
//! Buyers `i` and `i'` are `eps`-twins when `||v_i - v_i'||_inf <= eps`.
//! A buyer counts as its own twin: if its own group total is below one the
//! group multiplier vanishes by complementary slackness, which is the
//! zero-epsilon case of the twin bound.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::error::{Error, Result};
use crate::market::Market;
use crate::solver::{Mode, Solution};

/// A twin is unconstrained in a group when its total there is below
/// `1 - FREE_SLACK` and its multiplier is at most `DOMINANCE_SLACK`.
pub const FREE_SLACK: f64 = 1e-9;
/// Slack allowed in every dominance check.
pub const DOMINANCE_SLACK: f64 = 1e-8;

/// `d[[i, i']] = ||v_i - v_i'||_inf`.
pub fn pairwise_distances(valuations: &Array2<f64>) -> Array2<f64> {
    let n = valuations.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let vi = valuations.row(i);
            (0..n)
                .map(|k| {
                    vi.iter()
                        .zip(valuations.row(k).iter())
                        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                })
                .collect()
        })
        .collect();
    Array2::from_shape_fn((n, n), |(i, k)| rows[i][k])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinStructure {
    pub eps: f64,
    pub distance: Array2<f64>,
    /// Other buyers within `eps`, ascending.
    pub twins: Vec<Vec<usize>>,
    /// `free[[i, k]]`: buyer `i` holds less than one unit of group `k` and its
    /// multiplier there vanishes.
    pub free: Array2<bool>,
}

impl TwinStructure {
    pub fn twin_count(&self, i: usize) -> usize {
        self.twins[i].len()
    }

    /// Unconstrained `eps`-twins of `i` in group `k`, `i` itself first when free.
    pub fn unconstrained(&self, i: usize, k: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(i)
            .chain(self.twins[i].iter().copied())
            .filter(move |&t| self.free[[t, k]])
    }
}

/// `lambda` is the `N x |K|` group multiplier matrix of the solution.
pub fn twin_structure(
    market: &Market,
    x: &Array2<f64>,
    lambda: &Array2<f64>,
    eps: f64,
) -> Result<TwinStructure> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument("eps must be nonnegative".into()));
    }
    let distance = pairwise_distances(&market.valuations);
    let n = market.n_buyers();
    let twins = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&t| t != i && distance[[i, t]] <= eps)
                .collect()
        })
        .collect();
    let free = Array2::from_shape_fn((n, market.n_groups()), |(i, k)| {
        market.groups[k].iter().map(|&j| x[[i, j]]).sum::<f64>() < 1.0 - FREE_SLACK
            && lambda[[i, k]] <= DOMINANCE_SLACK
    });
    Ok(TwinStructure {
        eps,
        distance,
        twins,
        free,
    })
}

fn extremes(market: &Market) -> Result<(f64, f64)> {
    let lo = market
        .valuations
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = market.valuations.iter().copied().fold(0.0, f64::max);
    if !(lo > 0.0) {
        return Err(Error::BoundUnavailable(
            "the bounds need every valuation to be positive".into(),
        ));
    }
    Ok((lo, hi))
}

/// `(sum B v_down / (v_up^2 sum s), sum B / (|K| v_down))`.
pub fn beta_bounds(market: &Market) -> Result<(f64, f64)> {
    let (lo, hi) = extremes(market)?;
    let b = market.budgets.sum();
    let s = market.supplies.sum();
    let k = market.n_groups() as f64;
    Ok((b * lo / (hi * hi * s), b / (k * lo)))
}

/// `(B_i / beta_upper, B_i / beta_lower)` per buyer.
pub fn utility_bounds(market: &Market) -> Result<(Array1<f64>, Array1<f64>)> {
    let (bl, bu) = beta_bounds(market)?;
    Ok((
        market.budgets.mapv(|b| b / bu),
        market.budgets.mapv(|b| b / bl),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsFactors {
    pub down: f64,
    /// `inf` when `eps` reaches the smallest valuation.
    pub up: f64,
}

impl EpsFactors {
    pub fn up_finite(&self) -> bool {
        self.up.is_finite()
    }
}

/// `min v / (v + eps)` and `max v / (v - eps)` over the given valuations.
pub fn epsilon_factors(eps: f64, values: impl IntoIterator<Item = f64>) -> EpsFactors {
    if eps == 0.0 {
        return EpsFactors { down: 1.0, up: 1.0 };
    }
    let lo = values.into_iter().fold(f64::INFINITY, f64::min);
    // Both expressions are monotone in v, so the smallest valuation decides.
    EpsFactors {
        down: lo / (lo + eps),
        up: if eps >= lo {
            f64::INFINITY
        } else {
            lo / (lo - eps)
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaBound {
    pub buyer: usize,
    pub group: usize,
    pub twin: usize,
    /// Held item of `buyer` in the group with the largest holding.
    pub item: usize,
    pub eps_beta: f64,
    pub eps_v: f64,
    pub bound: f64,
    pub lambda: f64,
    pub holds: bool,
}

fn held_item(x: &Array2<f64>, i: usize, group: &[usize], x_thresh: f64) -> Option<usize> {
    group
        .iter()
        .copied()
        .filter(|&j| x[[i, j]] > x_thresh)
        .max_by(|&a, &b| x[[i, a]].total_cmp(&x[[i, b]]).then(b.cmp(&a)))
}

/// `|beta_i - beta_t|`, zero for identical buyers with equal budgets (whose
/// utility prices coincide at the optimum).
fn eps_beta(sol: &Solution, market: &Market, i: usize, t: usize) -> f64 {
    if i == t
        || (market.budgets[i] == market.budgets[t]
            && market.valuations.row(i) == market.valuations.row(t))
    {
        0.0
    } else {
        (sol.beta[i] - sol.beta[t]).abs()
    }
}

/// `eps_beta v_{i j_k} + beta_t eps_v^k` for buyer `i`, group `k` and twin `t`.
pub fn lambda_bound(
    i: usize,
    k: usize,
    twin: usize,
    sol: &Solution,
    market: &Market,
) -> Result<LambdaBound> {
    let group = &market.groups[k];
    let total: f64 = group.iter().map(|&j| sol.x[[twin, j]]).sum();
    if !(total < 1.0 - FREE_SLACK && sol.lambda[[twin, k]] <= DOMINANCE_SLACK) {
        return Err(Error::Precondition(format!(
            "buyer {twin} is constrained in group {k}"
        )));
    }
    let Some(j) = held_item(&sol.x, i, group, sol.diagnostics.x_thresh) else {
        return Err(Error::Precondition(format!(
            "buyer {i} holds nothing in group {k}"
        )));
    };
    let eb = eps_beta(sol, market, i, twin);
    let ev = (market.valuations[[i, j]] - market.valuations[[twin, j]]).abs();
    let bound = eb * market.valuations[[i, j]] + sol.beta[twin] * ev;
    let lambda = sol.lambda[[i, k]];
    Ok(LambdaBound {
        buyer: i,
        group: k,
        twin,
        item: j,
        eps_beta: eb,
        eps_v: ev,
        bound,
        lambda,
        holds: lambda <= bound + DOMINANCE_SLACK,
    })
}

/// Why a bound does not apply to a buyer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inapplicable {
    pub buyer: usize,
    pub group: Option<usize>,
    pub reason: String,
}

/// The tightest twin bound for each group `i` holds something in; `None`
/// for groups without a held item. Fails naming the first group without an
/// unconstrained twin.
fn group_lambda_bounds(
    i: usize,
    sol: &Solution,
    market: &Market,
    twins: &TwinStructure,
) -> std::result::Result<Vec<Option<LambdaBound>>, Inapplicable> {
    let mut out = Vec::with_capacity(market.n_groups());
    for k in 0..market.n_groups() {
        let mut best: Option<LambdaBound> = None;
        let mut any = false;
        for t in twins.unconstrained(i, k) {
            any = true;
            match lambda_bound(i, k, t, sol, market) {
                Ok(b) => {
                    if best.as_ref().is_none_or(|c| b.bound < c.bound) {
                        best = Some(b);
                    }
                }
                Err(_) => break, // nothing held in k
            }
        }
        if !any {
            return Err(Inapplicable {
                buyer: i,
                group: Some(k),
                reason: format!("no unconstrained {}-twin in group {k}", twins.eps),
            });
        }
        out.push(best);
    }
    Ok(out)
}

/// `(u_up_i / v_down) max_k (eps_beta v_{i j_k} + beta_{i_k} eps_v^k) / beta_i`.
pub fn regret_bound(
    i: usize,
    sol: &Solution,
    market: &Market,
    twins: &TwinStructure,
) -> std::result::Result<f64, Inapplicable> {
    let unavailable = |e: Error| Inapplicable {
        buyer: i,
        group: None,
        reason: e.to_string(),
    };
    let (lo, _) = extremes(market).map_err(unavailable)?;
    let (_, u_up) = utility_bounds(market).map_err(unavailable)?;
    let per_group = group_lambda_bounds(i, sol, market, twins)?;
    let worst = per_group
        .iter()
        .flatten()
        .map(|b| b.bound)
        .fold(0.0f64, f64::max);
    Ok(u_up[i] / lo * worst / sol.beta[i])
}

/// Solution-free regret bound for a buyer whose twin set is `twin_set`
/// (including the buyer), valid when every group has an unconstrained twin.
/// `None` when `eps` reaches a valuation of the twin set.
pub fn a_priori_regret_bound(
    market: &Market,
    i: usize,
    eps: f64,
    twin_set: &[usize],
) -> Result<Option<f64>> {
    let (lo, hi) = extremes(market)?;
    let (_, u_up) = utility_bounds(market)?;
    let f = epsilon_factors(
        eps,
        twin_set
            .iter()
            .flat_map(|&t| market.valuations.row(t).to_vec()),
    );
    if !f.up_finite() {
        return Ok(None);
    }
    let b = market.budgets.sum();
    let s = market.supplies.sum();
    let kk = market.n_groups() as f64;
    let inv_beta = hi * hi * s / b;
    let beta_up = b / (kk * lo);
    let worst = market
        .groups
        .iter()
        .map(|g| {
            let v = g
                .iter()
                .map(|&j| market.valuations[[i, j]])
                .fold(0.0, f64::max);
            inv_beta * ((f.up - 1.0) * beta_up * v + beta_up * eps)
        })
        .fold(0.0, f64::max);
    Ok(Some(u_up[i] / lo * worst))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinOccupancy {
    pub per_bin: Vec<f64>,
    pub union: f64,
}

/// `P(bin i holds <= n gamma_i / c balls) <= exp(-2 n gamma_i^2 ((c-1)/c)^2)`
/// and the union bound `K exp(-2 n min gamma^2 ((c-1)/c)^2)`.
pub fn bin_occupancy_bound(n: u64, gammas: &[f64], c: f64) -> Result<BinOccupancy> {
    if !(c > 1.0) {
        return Err(Error::InvalidArgument("c must exceed 1".into()));
    }
    if gammas.is_empty() || gammas.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
        return Err(Error::InvalidArgument(
            "bin probabilities must lie in (0, 1]".into(),
        ));
    }
    if gammas.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(
            "bin probabilities sum above 1".into(),
        ));
    }
    let r = ((c - 1.0) / c).powi(2);
    let tail = |g: f64| (-2.0 * n as f64 * g * g * r).exp();
    let gmin = gammas.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(BinOccupancy {
        per_bin: gammas.iter().map(|&g| tail(g)).collect(),
        union: gammas.len() as f64 * tail(gmin),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuyerBound {
    pub twins: usize,
    /// At least `s_max` other twins.
    pub twin_condition: bool,
    pub eps_factors: EpsFactors,
    /// Largest realized `|beta_i - beta_t|` over twins.
    pub eps_beta: f64,
    pub regret_bound: Option<f64>,
    pub a_priori_bound: Option<f64>,
    pub raw_regret: f64,
    pub envy: f64,
    pub prop_share_gap: f64,
    pub inapplicable: Option<Inapplicable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checks {
    pub beta_sandwich: Option<bool>,
    pub utility_sandwich: Option<bool>,
    pub lambda: bool,
    pub regret: bool,
    /// Only with equal budgets.
    pub envy: Option<bool>,
    /// Only when `s_j / N <= 1` for every item.
    pub prop_share: Option<bool>,
    /// Certificate delta against the largest measured regret among covered buyers.
    pub delta_dominates: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub eps: f64,
    pub v_down: f64,
    pub v_up: f64,
    pub beta_lower: Option<f64>,
    pub beta_upper: Option<f64>,
    pub u_down: Option<Array1<f64>>,
    pub u_up: Option<Array1<f64>>,
    pub s_max: f64,
    pub buyers: Vec<BuyerBound>,
    pub lambda_bounds: Vec<LambdaBound>,
    /// Largest applicable regret bound.
    pub delta: Option<f64>,
    /// Every buyer is covered by `delta`.
    pub complete: bool,
    pub measured_delta: f64,
    pub checks: Checks,
}

pub fn certify(sol: &Solution, market: &Market, eps: f64) -> Result<BoundCertificate> {
    let twins = twin_structure(market, &sol.x, &sol.lambda, eps)?;
    let n = market.n_buyers();
    let v_down = market
        .valuations
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let v_up = market.valuations.iter().copied().fold(0.0, f64::max);
    let betas = beta_bounds(market).ok();
    let ubounds = utility_bounds(market).ok();
    let s_max = market
        .groups
        .iter()
        .map(|g| g.iter().map(|&j| market.supplies[j]).sum::<f64>())
        .fold(0.0, f64::max);

    let raw = analysis::raw_regret_at(sol.p.view(), &sol.x, market, Mode::Amo);
    let envy = analysis::envy(&sol.x, &market.valuations, &market.budgets).raw;
    let gap = analysis::proportional_share_gap(&sol.x, market);
    let u = market.utilities(&sol.x);

    let per: Vec<(BuyerBound, Vec<LambdaBound>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut set = vec![i];
            set.extend(&twins.twins[i]);
            let factors = epsilon_factors(
                eps,
                set.iter().flat_map(|&t| market.valuations.row(t).to_vec()),
            );
            let eb = twins.twins[i]
                .iter()
                .map(|&t| eps_beta(sol, market, i, t))
                .fold(0.0, f64::max);
            let twin_condition = twins.twin_count(i) as f64 >= s_max;
            let (regret_bound, inapplicable, lambdas) =
                match group_lambda_bounds(i, sol, market, &twins) {
                    Ok(per_group) => {
                        let r = regret_bound(i, sol, market, &twins);
                        let lambdas = per_group.into_iter().flatten().collect();
                        match r {
                            Ok(b) => (Some(b), None, lambdas),
                            Err(e) => (None, Some(e), lambdas),
                        }
                    }
                    Err(e) => (None, Some(e), Vec::new()),
                };
            let a_priori = if twin_condition {
                a_priori_regret_bound(market, i, eps, &set).ok().flatten()
            } else {
                None
            };
            (
                BuyerBound {
                    twins: twins.twin_count(i),
                    twin_condition,
                    eps_factors: factors,
                    eps_beta: eb,
                    regret_bound,
                    a_priori_bound: a_priori,
                    raw_regret: raw[i],
                    envy: envy[i],
                    prop_share_gap: gap[i],
                    inapplicable,
                },
                lambdas,
            )
        })
        .collect();
    let (buyers, lambda_lists): (Vec<BuyerBound>, Vec<Vec<LambdaBound>>) = per.into_iter().unzip();
    let lambda_bounds: Vec<LambdaBound> = lambda_lists.into_iter().flatten().collect();

    let covered: Vec<&BuyerBound> = buyers.iter().filter(|b| b.regret_bound.is_some()).collect();
    let delta = covered
        .iter()
        .filter_map(|b| b.regret_bound)
        .reduce(f64::max);
    let within = |a: f64, b: f64| a <= b + DOMINANCE_SLACK;
    let equal_budgets = market.equal_budgets();
    let small_supply = market.supplies.iter().all(|&s| s / n as f64 <= 1.0);

    let checks = Checks {
        beta_sandwich: betas.map(|(lo, hi)| {
            sol.beta
                .iter()
                .all(|&b| b >= lo * (1.0 - 1e-9) && b <= hi * (1.0 + 1e-9))
        }),
        utility_sandwich: ubounds.as_ref().map(|(lo, hi)| {
            (0..n).all(|i| u[i] >= lo[i] * (1.0 - 1e-9) && u[i] <= hi[i] * (1.0 + 1e-9))
        }),
        lambda: lambda_bounds.iter().all(|l| l.holds),
        regret: covered
            .iter()
            .all(|b| within(b.raw_regret, b.regret_bound.unwrap())),
        envy: equal_budgets.then(|| {
            covered
                .iter()
                .all(|b| within(b.envy, b.regret_bound.unwrap()))
        }),
        prop_share: small_supply.then(|| {
            covered
                .iter()
                .all(|b| within(b.prop_share_gap, b.regret_bound.unwrap()))
        }),
        delta_dominates: delta.map(|d| {
            let measured = covered.iter().map(|b| b.raw_regret).fold(0.0, f64::max);
            within(measured, d)
        }),
    };

    Ok(BoundCertificate {
        eps,
        v_down,
        v_up,
        beta_lower: betas.map(|b| b.0),
        beta_upper: betas.map(|b| b.1),
        u_down: ubounds.as_ref().map(|b| b.0.clone()),
        u_up: ubounds.map(|b| b.1),
        s_max,
        complete: covered.len() == n,
        buyers,
        lambda_bounds,
        delta,
        measured_delta: raw.fold(0.0f64, |a, &r| a.max(r)),
        checks,
    })
}

impl BoundCertificate {
    /// One row per buyer:
    /// `buyer,twins,twin_condition,applicable,regret_bound,raw_regret,envy,prop_share_gap`.
    pub fn buyers_csv(&self) -> String {
        let mut out = String::from(
            "buyer,twins,twin_condition,applicable,regret_bound,raw_regret,envy,prop_share_gap\n",
        );
        for (i, b) in self.buyers.iter().enumerate() {
            let bound = b.regret_bound.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{i},{},{},{},{bound},{},{},{}\n",
                b.twins,
                b.twin_condition,
                b.regret_bound.is_some(),
                b.raw_regret,
                b.envy,
                b.prop_share_gap
            ));
        }
        out
    }
}

/// Smallest `eps` at which every buyer has `count` other twins.
pub fn eps_for_twin_count(distance: &Array2<f64>, count: usize) -> f64 {
    distance
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let mut d: Vec<f64> = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i)
                .map(|(_, &v)| v)
                .collect();
            d.sort_by(f64::total_cmp);
            if count == 0 {
                0.0
            } else {
                d.get(count - 1).copied().unwrap_or(f64::INFINITY)
            }
        })
        .fold(0.0, f64::max)
}
