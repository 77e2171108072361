//! Demand under prices and the equilibrium-quality metrics built on it.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::Market;
use crate::solver::{Mode, Solution};

/// Holdings above this count toward purity statistics.
pub const PURITY_FLOOR: f64 = 1e-4;
/// Group totals above `1 + VIOLATION_TOL` count as AMO violations.
pub const VIOLATION_TOL: f64 = 1e-6;
const TIE_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandResult {
    pub bundle: Array1<f64>,
    pub utility: f64,
    pub spend: f64,
    /// The demand set has more than one element.
    pub tie_flag: bool,
}

/// One step along a group's value/cost frontier: move the group's unit from
/// item `from` (or nothing) to item `to`.
#[derive(Debug, Clone, Copy)]
struct Segment {
    group: usize,
    from: Option<usize>,
    to: usize,
    cost: f64,
    value: f64,
}

impl Segment {
    fn efficiency(&self) -> f64 {
        if self.cost <= 0.0 {
            f64::INFINITY
        } else {
            self.value / self.cost
        }
    }
}

/// Upper concave frontier of `(price, value)` over the items of one group,
/// starting from the empty choice. Also reports whether some other item lies
/// on the frontier (a tie inside the group).
fn frontier(
    prices: ArrayView1<'_, f64>,
    values: ArrayView1<'_, f64>,
    group: usize,
    items: &[usize],
    out: &mut Vec<Segment>,
) -> bool {
    let mut pts: Vec<(f64, f64, usize)> = items
        .iter()
        .filter(|&&j| values[j] > 0.0)
        .map(|&j| (prices[j], values[j], j))
        .collect();
    // Cheapest first; among equal prices the most valuable, then lowest index.
    pts.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(b.1.total_cmp(&a.1))
            .then(a.2.cmp(&b.2))
    });

    let mut tie = false;
    let mut hull: Vec<(f64, f64, Option<usize>)> = vec![(0.0, 0.0, None)];
    for &(c, v, j) in &pts {
        let &(lc, lv, _) = hull.last().expect("hull starts at the origin");
        if v < lv || (v == lv && c >= lc) {
            if v == lv && hull.len() > 1 {
                tie |= c == lc;
            }
            continue;
        }
        // Drop vertices that fall on or below the chord to the new point.
        while hull.len() >= 2 {
            let (ac, av, _) = hull[hull.len() - 2];
            let (bc, bv, _) = hull[hull.len() - 1];
            let cross = (bc - ac) * (v - av) - (bv - av) * (c - ac);
            if cross >= 0.0 {
                tie |= cross.abs() <= TIE_REL * (1.0 + v.abs() * c.abs());
                hull.pop();
            } else {
                break;
            }
        }
        hull.push((c, v, Some(j)));
    }
    for w in hull.windows(2) {
        out.push(Segment {
            group,
            from: w[0].2,
            to: w[1].2.expect("only the origin has no item"),
            cost: w[1].0 - w[0].0,
            value: w[1].1 - w[0].1,
        });
    }
    tie
}

/// A utility-maximizing affordable bundle.
///
/// With `groups = Some(..)` each group holds at most one unit in total (the
/// AMO constraint for singleton groups); the problem is a linear
/// multiple-choice knapsack, solved exactly by walking every group's concave
/// value/cost frontier in order of decreasing incremental value per unit of
/// money. Free valued items come first. With `groups = None` quantities are
/// uncapped; a free valued item then makes utility unbounded and the result
/// has `utility = inf` and an empty bundle.
pub fn demand(
    prices: ArrayView1<'_, f64>,
    values: ArrayView1<'_, f64>,
    budget: f64,
    groups: Option<&[Vec<usize>]>,
) -> DemandResult {
    let m = values.len();
    assert_eq!(prices.len(), m, "prices and values must have equal length");
    let Some(groups) = groups else {
        return demand_uncapped(prices, values, budget);
    };

    let mut segs = Vec::new();
    let mut tie = false;
    for (k, g) in groups.iter().enumerate() {
        tie |= frontier(prices, values, k, g, &mut segs);
    }
    // Stable sort keeps each group's segments in frontier order on equal keys.
    segs.sort_by(|a, b| {
        b.efficiency()
            .total_cmp(&a.efficiency())
            .then(a.to.cmp(&b.to))
    });

    let mut bundle = Array1::zeros(m);
    let mut left = budget;
    for (idx, s) in segs.iter().enumerate() {
        let t = if s.cost <= left { 1.0 } else { left / s.cost };
        if t > 0.0 {
            if let Some(f) = s.from {
                bundle[f] -= t;
            }
            bundle[s.to] += t;
            left -= t * s.cost;
        }
        if t < 1.0 {
            // Budget binds here; any other group offering the same rate on
            // either side of the cut makes the choice non-unique.
            let e = s.efficiency();
            let before = idx.checked_sub(1).map(|b| segs[b]).filter(|_| t <= 0.0);
            tie |=
                segs.iter().enumerate().any(|(o_idx, o)| {
                    o_idx != idx && o.group != s.group && same(o.efficiency(), e)
                }) || before.is_some_and(|b| b.group != s.group && same(b.efficiency(), e));
            break;
        }
    }
    for b in bundle.iter_mut() {
        *b = f64::max(*b, 0.0);
    }
    let utility = values.dot(&bundle);
    let spend = prices.dot(&bundle);
    DemandResult {
        bundle,
        utility,
        spend,
        tie_flag: tie,
    }
}

fn same(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= TIE_REL * a.abs().max(b.abs())
}

fn demand_uncapped(
    prices: ArrayView1<'_, f64>,
    values: ArrayView1<'_, f64>,
    budget: f64,
) -> DemandResult {
    let m = values.len();
    let mut bundle = Array1::zeros(m);
    if (0..m).any(|j| values[j] > 0.0 && prices[j] <= 0.0) {
        return DemandResult {
            bundle,
            utility: f64::INFINITY,
            spend: 0.0,
            tie_flag: false,
        };
    }
    let mut best: Option<(f64, usize)> = None;
    let mut tie = false;
    for j in 0..m {
        if values[j] <= 0.0 {
            continue;
        }
        let e = values[j] / prices[j];
        match best {
            Some((b, _)) if same(b, e) => tie = true,
            Some((b, _)) if b >= e => {}
            _ => {
                tie = false;
                best = Some((e, j));
            }
        }
    }
    if let Some((_, j)) = best {
        bundle[j] = budget / prices[j];
    }
    DemandResult {
        utility: values.dot(&bundle),
        spend: prices.dot(&bundle),
        bundle,
        tie_flag: tie,
    }
}

/// Per-buyer demand at `prices` with the caps of `mode`.
pub fn demands(prices: ArrayView1<'_, f64>, market: &Market, mode: Mode) -> Vec<DemandResult> {
    let groups = (mode == Mode::Amo).then_some(market.groups.as_slice());
    (0..market.n_buyers())
        .into_par_iter()
        .map(|i| demand(prices, market.values_of(i), market.budgets[i], groups))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envy {
    /// `max_{i'} v_i . (x_i' - x_i)`, never negative (the maximum includes
    /// `i' = i`).
    pub raw: Array1<f64>,
    /// `max_{i'} v_i . (B_i / B_i' x_i' - x_i)`; present only when budgets
    /// differ.
    pub budget_scaled: Option<Array1<f64>>,
}

pub fn envy(x: &Array2<f64>, valuations: &Array2<f64>, budgets: &Array1<f64>) -> Envy {
    let n = x.nrows();
    // cross[[i, k]] = v_i . x_k
    let cross = valuations.dot(&x.t());
    let own = cross.diag().to_owned();
    let raw = Array1::from_shape_fn(n, |i| {
        let best = cross.row(i).fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        (best - own[i]).max(0.0)
    });
    let equal = budgets.iter().all(|&b| b == budgets[0]);
    let budget_scaled = (!equal).then(|| {
        Array1::from_shape_fn(n, |i| {
            let best = (0..n).fold(f64::NEG_INFINITY, |a, k| {
                a.max(budgets[i] / budgets[k] * cross[[i, k]])
            });
            (best - own[i]).max(0.0)
        })
    });
    Envy { raw, budget_scaled }
}

/// `(U_i(p) - v_i . x_i) / U_i(p)` for every buyer at prices `p`, with the
/// caps of `mode`. `None` where the demand utility is zero or unbounded.
/// Rounding-level negatives (above `-1e-9`) are clamped to zero.
pub fn price_regret_at(
    prices: ArrayView1<'_, f64>,
    x: &Array2<f64>,
    market: &Market,
    mode: Mode,
) -> Vec<Option<f64>> {
    let u = market.utilities(x);
    demands(prices, market, mode)
        .iter()
        .zip(u.iter())
        .map(|(d, &ui)| {
            if !(d.utility > 0.0) || !d.utility.is_finite() {
                return None;
            }
            let r = (d.utility - ui) / d.utility;
            Some(if r < 0.0 && r > -1e-9 { 0.0 } else { r })
        })
        .collect()
}

/// `U_i(p) - v_i . x_i` per buyer, in utility units.
pub fn raw_regret_at(
    prices: ArrayView1<'_, f64>,
    x: &Array2<f64>,
    market: &Market,
    mode: Mode,
) -> Array1<f64> {
    let u = market.utilities(x);
    demands(prices, market, mode)
        .iter()
        .zip(u.iter())
        .map(|(d, &ui)| d.utility - ui)
        .collect()
}

/// Normalized price regret at the solution's supply prices (the group
/// multipliers are not part of the prices a buyer faces).
pub fn price_regret(sol: &Solution, market: &Market) -> Vec<Option<f64>> {
    price_regret_at(sol.p.view(), &sol.x, market, sol.mode)
}

/// Proportional bundle: `s_j / N` of every item, scaled down within a group
/// whose total would exceed one.
pub fn proportional_bundle(market: &Market) -> Array1<f64> {
    let n = market.n_buyers() as f64;
    let mut b = market.supplies.mapv(|s| s / n);
    for g in &market.groups {
        let total: f64 = g.iter().map(|&j| b[j]).sum();
        if total > 1.0 {
            for &j in g {
                b[j] /= total;
            }
        }
    }
    b
}

pub fn proportional_share_gap(x: &Array2<f64>, market: &Market) -> Array1<f64> {
    let prop = market.valuations.dot(&proportional_bundle(market));
    let u = market.utilities(x);
    ndarray::Zip::from(&prop)
        .and(&u)
        .map_collect(|a, b| (a - b).max(0.0))
}

/// `max_i (U_i(p) - v_i . x_i)`, at least zero; infinite if some buyer's
/// demand utility is unbounded.
pub fn certify_delta_ceei(sol: &Solution, market: &Market) -> f64 {
    delta_at(sol.p.view(), &sol.x, market, sol.mode)
}

pub fn delta_at(prices: ArrayView1<'_, f64>, x: &Array2<f64>, market: &Market, mode: Mode) -> f64 {
    raw_regret_at(prices, x, market, mode).fold(0.0f64, |acc, &r| acc.max(r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmoViolations {
    pub violators: usize,
    /// `(buyer, largest group total)` for every violator.
    pub multiplicity: Vec<(usize, f64)>,
}

impl AmoViolations {
    pub fn max_multiplicity(&self) -> Option<f64> {
        self.multiplicity.iter().map(|m| m.1).reduce(f64::max)
    }
}

pub fn amo_violations(x: &Array2<f64>, groups: &[Vec<usize>]) -> AmoViolations {
    let mut multiplicity = Vec::new();
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let top = groups
            .iter()
            .map(|g| g.iter().map(|&j| row[j]).sum::<f64>())
            .fold(0.0f64, f64::max);
        if top > 1.0 + VIOLATION_TOL {
            multiplicity.push((i, top));
        }
    }
    AmoViolations {
        violators: multiplicity.len(),
        multiplicity,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Purity {
    /// Among entries above [`PURITY_FLOOR`], the share strictly inside
    /// `(0.01, 0.99)`.
    pub fraction_fractional: f64,
    pub counted: usize,
    /// 20 equal bins over `[0, 1]` as `(left edge, count)`; entries above one
    /// fall in the last bin.
    pub histogram: Vec<(f64, usize)>,
}

pub fn purity_stats(x: &Array2<f64>) -> Purity {
    const BINS: usize = 20;
    let mut counts = [0usize; BINS];
    let mut counted = 0;
    let mut fractional = 0;
    for &v in x.iter().filter(|&&v| v > PURITY_FLOOR) {
        counted += 1;
        if v > 0.01 && v < 0.99 {
            fractional += 1;
        }
        let bin = ((v * BINS as f64) as usize).min(BINS - 1);
        counts[bin] += 1;
    }
    Purity {
        fraction_fractional: if counted == 0 {
            0.0
        } else {
            fractional as f64 / counted as f64
        },
        counted,
        histogram: counts
            .iter()
            .enumerate()
            .map(|(b, &c)| (b as f64 / BINS as f64, c))
            .collect(),
    }
}

/// `sum_i B_i log(v_i . x_i)`; an error naming the buyers with zero utility.
pub fn nash_welfare(
    x: &Array2<f64>,
    valuations: &Array2<f64>,
    budgets: &Array1<f64>,
) -> Result<f64> {
    let u = (valuations * x).sum_axis(Axis(1));
    let zero: Vec<usize> = u
        .iter()
        .enumerate()
        .filter(|(_, &v)| !(v > 0.0))
        .map(|(i, _)| i)
        .collect();
    if !zero.is_empty() {
        return Err(Error::Precondition(format!(
            "zero utility for buyers {zero:?}"
        )));
    }
    Ok(u.iter()
        .zip(budgets.iter())
        .map(|(&u, &b)| b * u.ln())
        .sum())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub envy: Envy,
    pub mean_envy: f64,
    pub price_regret: Vec<Option<f64>>,
    /// Mean over buyers with a defined regret.
    pub mean_regret: f64,
    pub prop_share_gap: Array1<f64>,
    pub delta_ceei: f64,
    pub nash_welfare: Option<f64>,
    pub amo_violations: AmoViolations,
    pub purity: Purity,
}

pub fn analyze(sol: &Solution, market: &Market) -> EquilibriumReport {
    let envy = envy(&sol.x, &market.valuations, &market.budgets);
    let price_regret = price_regret(sol, market);
    EquilibriumReport {
        mean_envy: mean(envy.raw.iter().copied()),
        envy,
        mean_regret: mean(price_regret.iter().flatten().copied()),
        price_regret,
        prop_share_gap: proportional_share_gap(&sol.x, market),
        delta_ceei: certify_delta_ceei(sol, market),
        nash_welfare: nash_welfare(&sol.x, &market.valuations, &market.budgets).ok(),
        amo_violations: amo_violations(&sol.x, &market.groups),
        purity: purity_stats(&sol.x),
    }
}

impl EquilibriumReport {
    /// One row per buyer: `buyer,envy,envy_scaled,price_regret,prop_share_gap`.
    /// Undefined values are empty fields.
    pub fn buyers_csv(&self) -> String {
        let mut out = String::from("buyer,envy,envy_scaled,price_regret,prop_share_gap\n");
        for i in 0..self.envy.raw.len() {
            let scaled = self
                .envy
                .budget_scaled
                .as_ref()
                .map(|s| s[i].to_string())
                .unwrap_or_default();
            let regret = self.price_regret[i]
                .map(|r| r.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{i},{},{scaled},{regret},{}\n",
                self.envy.raw[i], self.prop_share_gap[i]
            ));
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_edge,count\n");
        for (edge, c) in &self.purity.histogram {
            out.push_str(&format!("{edge},{c}\n"));
        }
        out
    }
}
