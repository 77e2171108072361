//! Paced first-price auctions driven by utility prices.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::Market;
use crate::solver::Solution;

/// Spend may exceed the budget by this much and still count as feasible.
pub const BUDGET_TOL: f64 = 1e-9;
/// Bids within this relative distance form one tie class.
const TIE_REL: f64 = 1e-12;
/// Inflation steps at or below this are under the solver's resolution.
pub const MAXIMALITY_RESOLUTION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacedOutcome {
    pub x: Array2<f64>,
    pub p: Array1<f64>,
    /// `beta_i v_ij - p_j` for winners, zero elsewhere.
    pub lambda: Array2<f64>,
    pub spend: Array1<f64>,
}

/// Items each buyer bids on: every item for singleton groups, otherwise the
/// most valuable item of each group (lowest index on ties).
fn bid_mask(market: &Market) -> Array2<bool> {
    let (n, m) = market.valuations.dim();
    if market.has_singleton_groups() {
        return Array2::from_elem((n, m), true);
    }
    let mut mask = Array2::from_elem((n, m), false);
    for i in 0..n {
        for g in &market.groups {
            let best = g.iter().copied().max_by(|&a, &b| {
                market.valuations[[i, a]]
                    .total_cmp(&market.valuations[[i, b]])
                    .then(b.cmp(&a))
            });
            if let Some(j) = best {
                mask[[i, j]] = true;
            }
        }
    }
    mask
}

/// One item: bids sorted descending (ties by buyer index); winners take one
/// unit each until supply runs out, a tie class at the margin splits what is
/// left equally, and the price is the marginal bid (zero when supply is left
/// over).
fn run_item(bids: &[(usize, f64)], supply: f64) -> (Vec<(usize, f64)>, f64) {
    let mut order: Vec<(usize, f64)> = bids.iter().copied().filter(|b| b.1 > 0.0).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut left = supply;
    let mut won = Vec::new();
    let mut price = 0.0;
    let mut start = 0;
    while start < order.len() && left > 0.0 {
        let top = order[start].1;
        let mut end = start + 1;
        while end < order.len() && top - order[end].1 <= TIE_REL * top {
            end += 1;
        }
        let class = (end - start) as f64;
        let share = if class <= left { 1.0 } else { left / class };
        for &(i, _) in &order[start..end] {
            won.push((i, share));
        }
        left -= share * class;
        if left <= 0.0 || share < 1.0 {
            price = order[end - 1].1;
            left = 0.0;
        }
        start = end;
    }
    (won, price)
}

pub fn paced_allocation(beta: &Array1<f64>, market: &Market) -> Result<PacedOutcome> {
    let (n, m) = market.valuations.dim();
    if beta.len() != n {
        return Err(Error::InvalidArgument(format!(
            "beta has length {}, expected {n}",
            beta.len()
        )));
    }
    if let Some(i) = beta.iter().position(|&b| !(b > 0.0 && b.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "beta[{i}] must be positive"
        )));
    }
    let mask = bid_mask(market);
    let per_item: Vec<(Vec<(usize, f64)>, f64)> = (0..m)
        .into_par_iter()
        .map(|j| {
            let bids: Vec<(usize, f64)> = (0..n)
                .filter(|&i| mask[[i, j]])
                .map(|i| (i, beta[i] * market.valuations[[i, j]]))
                .collect();
            run_item(&bids, market.supplies[j])
        })
        .collect();

    let mut x = Array2::zeros((n, m));
    let mut lambda = Array2::zeros((n, m));
    let mut p = Array1::zeros(m);
    let mut spend = Array1::zeros(n);
    for (j, (won, price)) in per_item.into_iter().enumerate() {
        p[j] = price;
        for (i, q) in won {
            let bid = beta[i] * market.valuations[[i, j]];
            x[[i, j]] = q;
            lambda[[i, j]] = bid - price;
            spend[i] += q * bid;
        }
    }
    Ok(PacedOutcome {
        x,
        p,
        lambda,
        spend,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bfpm {
    pub feasible: bool,
    pub spend: Array1<f64>,
}

pub fn is_bfpm(beta: &Array1<f64>, market: &Market) -> Result<Bfpm> {
    let out = paced_allocation(beta, market)?;
    let feasible = out
        .spend
        .iter()
        .zip(market.budgets.iter())
        .all(|(&s, &b)| s <= b + BUDGET_TOL);
    Ok(Bfpm {
        feasible,
        spend: out.spend,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monotonicity {
    pub beta_max: Array1<f64>,
    pub holds: bool,
    pub spend: Array1<f64>,
}

/// Checks that the pointwise maximum of two BFPM vectors is BFPM.
pub fn check_monotonicity(
    beta_a: &Array1<f64>,
    beta_b: &Array1<f64>,
    market: &Market,
) -> Result<Monotonicity> {
    for (name, b) in [("beta_a", beta_a), ("beta_b", beta_b)] {
        if !is_bfpm(b, market)?.feasible {
            return Err(Error::Precondition(format!(
                "{name} is not budget feasible"
            )));
        }
    }
    let beta_max = ndarray::Zip::from(beta_a)
        .and(beta_b)
        .map_collect(|&a, &b| a.max(b));
    let r = is_bfpm(&beta_max, market)?;
    Ok(Monotonicity {
        beta_max,
        holds: r.feasible,
        spend: r.spend,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaximalityVerdict {
    /// Inflated vector overspends: consistent with maximality.
    Rejected,
    /// Inflated vector is still budget feasible.
    Feasible,
    /// Step below [`MAXIMALITY_RESOLUTION`] and still feasible.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaximalityEntry {
    pub buyer: usize,
    pub spend: f64,
    pub budget: f64,
    pub verdict: MaximalityVerdict,
}

/// Inflates each buyer's `beta_i` by `1 + step` in turn and checks that
/// buyer's own spend.
pub fn maximality_gap(sol: &Solution, market: &Market, step: f64) -> Result<Vec<MaximalityEntry>> {
    if !(step >= 0.0) {
        return Err(Error::InvalidArgument("step must be nonnegative".into()));
    }
    (0..market.n_buyers())
        .into_par_iter()
        .map(|i| {
            let mut beta = sol.beta.clone();
            beta[i] *= 1.0 + step;
            let out = paced_allocation(&beta, market)?;
            let over = out.spend[i] > market.budgets[i] + BUDGET_TOL;
            let verdict = if over {
                MaximalityVerdict::Rejected
            } else if step <= MAXIMALITY_RESOLUTION {
                MaximalityVerdict::Inconclusive
            } else {
                MaximalityVerdict::Feasible
            };
            Ok(MaximalityEntry {
                buyer: i,
                spend: out.spend[i],
                budget: market.budgets[i],
                verdict,
            })
        })
        .collect()
}

/// Scales `beta` so that the tightest buyer spends exactly its budget.
/// Spend is linear in a common scale factor.
pub fn scale_to_budget(beta: &Array1<f64>, market: &Market) -> Result<Array1<f64>> {
    let out = paced_allocation(beta, market)?;
    let t = out
        .spend
        .iter()
        .zip(market.budgets.iter())
        .filter(|(&s, _)| s > 0.0)
        .map(|(&s, &b)| b / s)
        .fold(f64::INFINITY, f64::min);
    Ok(if t.is_finite() {
        beta * t
    } else {
        beta.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub trials: usize,
    pub passed: usize,
    /// Trial indices where the pointwise maximum overspent.
    pub failures: Vec<usize>,
}

/// Random markets of `n x m` with integer supplies in `1..=3`, each paired
/// with two budget-tight random BFPM vectors.
pub fn monotonicity_campaign(
    n: usize,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<CampaignReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for t in 0..trials {
        let v = Array2::from_shape_fn((n, m), |_| rng.random_range(0.05..1.0));
        let s = Array1::from_shape_fn(m, |_| rng.random_range(1..=3) as f64);
        let b = Array1::from_shape_fn(n, |_| rng.random_range(0.5..1.5));
        let market = Market::new(v, s)?.with_budgets(b)?;
        let mut draw = || -> Result<Array1<f64>> {
            let raw = Array1::from_shape_fn(n, |_| rng.random_range(0.1..2.0));
            scale_to_budget(&raw, &market)
        };
        let a = draw()?;
        let c = draw()?;
        if !check_monotonicity(&a, &c, &market)?.holds {
            failures.push(t);
        }
    }
    Ok(CampaignReport {
        trials,
        passed: trials - failures.len(),
        failures,
    })
}
