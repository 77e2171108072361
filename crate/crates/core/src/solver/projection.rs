//! Euclidean projections onto the feasible allocation set.

use ndarray::{Array2, ArrayViewMut1};

use super::SolverConfig;
use crate::market::Market;

/// Projection of `y` onto `{0 <= x <= cap, sum(x) <= total}`.
///
/// `x_i = clip(y_i - tau, 0, cap_i)` where `tau = 0` if that already fits the
/// total, otherwise the unique root of the piecewise-linear sum. Caps may be
/// `f64::INFINITY`.
pub fn project_capped_column(y: &[f64], cap: &[f64], total: f64) -> Vec<f64> {
    assert_eq!(y.len(), cap.len(), "cap length must match y");
    let mut out = y.to_vec();
    let mut scratch = Vec::new();
    project_in_place(&mut out, |i| cap[i], total, 0.0, &mut scratch);
    out
}

/// Threshold by sorting the breakpoints, at least `tau_min`.
fn threshold_sorted<C: Fn(usize) -> f64>(
    y: &[f64],
    cap: &C,
    total: f64,
    tau_min: f64,
    events: &mut Vec<(f64, f64)>,
) -> f64 {
    let mut value = 0.0;
    let mut slope = 0.0;
    events.clear();
    for (i, &yi) in y.iter().enumerate() {
        let z = yi - tau_min;
        if z <= 0.0 {
            continue;
        }
        let c = cap(i);
        if z >= c {
            value += c;
            events.push((yi - c, -1.0));
        } else {
            value += z;
            slope -= 1.0;
        }
        events.push((yi, 1.0));
    }
    if value <= total {
        return tau_min;
    }
    events.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

    // Sweep tau upward; `value` is the clipped sum at `tau`, `slope` its
    // right derivative.
    let mut tau = tau_min;
    for &(at, delta) in events.iter() {
        let next = value + slope * (at - tau);
        if next <= total && slope < 0.0 {
            return tau + (value - total) / -slope;
        }
        value = next;
        tau = at;
        slope += delta;
    }
    // Every entry is zero beyond the last event, so the root lies before it.
    tau
}

/// Clipped sum at `tau` and the number of coordinates strictly between the
/// bounds there.
fn clipped_sum<C: Fn(usize) -> f64>(y: &[f64], cap: &C, tau: f64) -> (f64, f64) {
    let (mut sum, mut free) = (0.0, 0.0);
    for (i, &yi) in y.iter().enumerate() {
        let z = yi - tau;
        let c = cap(i);
        if z >= c {
            sum += c;
        } else if z > 0.0 {
            sum += z;
            free += 1.0;
        }
    }
    (sum, free)
}

/// Bracketed Newton search for the threshold, starting from `guess`. The
/// clipped sum is piecewise linear, so a Newton step taken inside the final
/// piece lands on the root. Gives up (returning `None`) after a fixed number
/// of evaluations.
fn threshold_newton<C: Fn(usize) -> f64>(
    y: &[f64],
    cap: &C,
    total: f64,
    tau_min: f64,
    guess: f64,
) -> Option<f64> {
    let (sum, _) = clipped_sum(y, cap, tau_min);
    if sum <= total {
        return Some(tau_min);
    }
    let mut lo = tau_min;
    let mut hi = y.iter().fold(tau_min, |a, &v| a.max(v));
    let mut tau = guess.clamp(lo, hi);
    let tol = 4.0 * f64::EPSILON * total.max(1.0) * (y.len() as f64).sqrt();
    for _ in 0..60 {
        let (sum, free) = clipped_sum(y, cap, tau);
        let gap = sum - total;
        if gap.abs() <= tol {
            return Some(tau);
        }
        if gap > 0.0 {
            lo = tau;
        } else {
            hi = tau;
        }
        let newton = if free > 0.0 {
            tau + gap / free
        } else {
            f64::NAN
        };
        tau = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()) {
            return Some(hi);
        }
    }
    None
}

/// A few Newton corrections against the realized clipped sum; the sorted
/// sweep accumulates rounding over every breakpoint.
fn refine<C: Fn(usize) -> f64>(y: &[f64], cap: &C, total: f64, tau_min: f64, mut tau: f64) -> f64 {
    if tau <= tau_min {
        return tau;
    }
    for _ in 0..3 {
        let (sum, free) = clipped_sum(y, cap, tau);
        if sum == total || free == 0.0 {
            break;
        }
        tau = (tau + (sum - total) / free).max(tau_min);
    }
    tau
}

/// Sets `y_i <- clip(y_i - tau, 0, cap_i)` with the smallest `tau >= tau_min`
/// that meets the total. With `tau_min = 0` this is the Euclidean
/// projection; `tau_min = -shift` projects `y + shift` while solving on the
/// unshifted numbers.
pub(crate) fn project_in_place<C: Fn(usize) -> f64>(
    y: &mut [f64],
    cap: C,
    total: f64,
    tau_min: f64,
    events: &mut Vec<(f64, f64)>,
) {
    let tau = match threshold_newton(y, &cap, total, tau_min, tau_min.max(0.0)) {
        Some(t) => t,
        None => {
            let t = threshold_sorted(y, &cap, total, tau_min, events);
            refine(y, &cap, total, tau_min, t)
        }
    };
    for (i, yi) in y.iter_mut().enumerate() {
        *yi = (*yi - tau).clamp(0.0, cap(i)).max(0.0);
    }
}

pub(crate) fn project_view(
    mut row: ArrayViewMut1<'_, f64>,
    cap: f64,
    total: f64,
    tau_min: f64,
    events: &mut Vec<(f64, f64)>,
) {
    match row.as_slice_mut() {
        Some(s) => project_in_place(s, |_| cap, total, tau_min, events),
        None => {
            let mut tmp = row.to_vec();
            project_in_place(&mut tmp, |_| cap, total, tau_min, events);
            for (d, s) in row.iter_mut().zip(tmp) {
                *d = s;
            }
        }
    }
}

/// Item-major (`M x N`) projection used inside the solver.
///
/// Returns whether the projection is exact; with non-singleton groups it is
/// the Dykstra iterate after at most `cfg.dykstra_iters` rounds.
pub(crate) fn project_item_major(
    xt: &mut Array2<f64>,
    market: &Market,
    cap: f64,
    use_groups: bool,
    cfg: &SolverConfig,
) -> bool {
    let mut events = Vec::new();
    if !use_groups {
        for (j, row) in xt.rows_mut().into_iter().enumerate() {
            project_view(row, cap, market.supplies[j], 0.0, &mut events);
        }
        return true;
    }
    dykstra(xt, market, cfg, &mut events)
}

fn project_columns(a: &mut Array2<f64>, market: &Market, events: &mut Vec<(f64, f64)>) {
    for (j, row) in a.rows_mut().into_iter().enumerate() {
        project_view(row, 1.0, market.supplies[j], 0.0, events);
    }
}

fn project_group_rows(b: &mut Array2<f64>, market: &Market, events: &mut Vec<(f64, f64)>) {
    let n = b.ncols();
    let mut buf = Vec::new();
    for g in &market.groups {
        for i in 0..n {
            buf.clear();
            buf.extend(g.iter().map(|&j| b[[j, i]]));
            project_in_place(&mut buf, |_| 1.0, 1.0, 0.0, events);
            for (&j, &v) in g.iter().zip(&buf) {
                b[[j, i]] = v;
            }
        }
    }
}

/// Dykstra's method between the per-item sets and the per-(buyer, group)
/// sets. The result satisfies the group constraints exactly and the item
/// constraints up to the final inter-family displacement.
fn dykstra(
    xt: &mut Array2<f64>,
    market: &Market,
    cfg: &SolverConfig,
    events: &mut Vec<(f64, f64)>,
) -> bool {
    let mut p = Array2::<f64>::zeros(xt.raw_dim());
    let mut q = Array2::<f64>::zeros(xt.raw_dim());
    let mut y = xt.clone();
    let mut converged = false;
    for _ in 0..cfg.dykstra_iters.max(1) {
        let mut a = &y + &p;
        project_columns(&mut a, market, events);
        p = &y + &p - &a;
        let mut b = &a + &q;
        project_group_rows(&mut b, market, events);
        q = &a + &q - &b;
        let disp = a
            .iter()
            .zip(b.iter())
            .fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        y = b;
        if disp < cfg.tol_feas {
            converged = true;
            break;
        }
    }
    *xt = y;
    converged
}

/// Projection of an `N x M` allocation onto the feasible set of `market`
/// (item supplies, at-most-one per group, nonnegativity).
///
/// Exact for singleton groups. For general groups the second value reports
/// whether Dykstra's iteration met `cfg.tol_feas` within `cfg.dykstra_iters`.
pub fn project_feasible(
    x: &Array2<f64>,
    market: &Market,
    cfg: &SolverConfig,
) -> (Array2<f64>, bool) {
    let mut xt = x.t().as_standard_layout().into_owned();
    let exact = project_item_major(&mut xt, market, 1.0, !market.has_singleton_groups(), cfg);
    (xt.t().as_standard_layout().into_owned(), exact)
}
