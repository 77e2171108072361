#![allow(dead_code)]

use amoeg::Market;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `sum_i B_i ln(v_i . x_i)`, `-inf` when some utility is not positive.
pub fn nash_objective(market: &Market, x: &Array2<f64>) -> f64 {
    let mut f = 0.0;
    for i in 0..market.n_buyers() {
        let u = market.utility(i, x.row(i));
        if u <= 0.0 {
            return f64::NEG_INFINITY;
        }
        f += market.budgets[i] * u.ln();
    }
    f
}

fn feasible(market: &Market, x: &Array2<f64>) -> bool {
    x.iter().all(|&q| (0.0..=1.0).contains(&q))
        && (0..market.n_items()).all(|j| x.column(j).sum() <= market.supplies[j] * (1.0 + 1e-15))
}

/// AMO optimum by exhaustive grid search (11 levels per entry) followed by
/// pattern search over single-entry moves and same-item transfers between
/// buyers. Singleton groups only.
pub fn brute_force(market: &Market) -> (f64, Array2<f64>) {
    let (n, m) = market.valuations.dim();
    let dims = n * m;
    let ub: Vec<f64> = (0..dims).map(|e| market.supplies[e % m].min(1.0)).collect();
    let mut idx = vec![0usize; dims];
    let mut x = Array2::zeros((n, m));
    let mut best = (f64::NEG_INFINITY, x.clone());
    loop {
        for e in 0..dims {
            x[[e / m, e % m]] = ub[e] * idx[e] as f64 / 10.0;
        }
        if feasible(market, &x) {
            let f = nash_objective(market, &x);
            if f > best.0 {
                best = (f, x.clone());
            }
        }
        let mut e = 0;
        while e < dims {
            idx[e] += 1;
            if idx[e] <= 10 {
                break;
            }
            idx[e] = 0;
            e += 1;
        }
        if e == dims {
            break;
        }
    }

    let (mut f, mut x) = best;
    let mut step = 0.05;
    while step > 1e-11 {
        let mut improved = false;
        for i in 0..n {
            for j in 0..m {
                let mut moves: Vec<Vec<(usize, usize, f64)>> =
                    vec![vec![(i, j, step)], vec![(i, j, -step)]];
                for k in 0..n {
                    if k != i {
                        moves.push(vec![(i, j, step), (k, j, -step)]);
                    }
                }
                for mv in moves {
                    let mut y = x.clone();
                    for &(a, b, d) in &mv {
                        y[[a, b]] += d;
                    }
                    if feasible(market, &y) {
                        let g = nash_objective(market, &y);
                        if g > f {
                            f = g;
                            x = y;
                            improved = true;
                        }
                    }
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    (f, x)
}

/// Random market with `n * m <= 6`, positive budgets and supplies, and
/// every buyer valuing something.
pub fn small_market(rng: &mut ChaCha8Rng) -> Market {
    let shapes = [
        (1, 1),
        (1, 2),
        (1, 3),
        (1, 6),
        (2, 1),
        (2, 2),
        (2, 3),
        (3, 1),
        (3, 2),
        (6, 1),
        (1, 4),
        (4, 1),
        (1, 5),
        (5, 1),
    ];
    let (n, m) = shapes[rng.random_range(0..shapes.len())];
    let mut v = Array2::from_shape_fn((n, m), |_| {
        if rng.random::<f64>() < 0.2 {
            0.0
        } else {
            rng.random_range(0.05..1.0)
        }
    });
    for i in 0..n {
        if v.row(i).iter().all(|&q| q == 0.0) {
            v[[i, rng.random_range(0..m)]] = rng.random_range(0.05..1.0);
        }
    }
    let s = Array1::from_shape_fn(m, |_| rng.random_range(0.3..2.5));
    let b = Array1::from_shape_fn(n, |_| rng.random_range(0.5..1.5));
    Market::new(v, s).unwrap().with_budgets(b).unwrap()
}

/// Random market with strictly positive valuations.
pub fn positive_market(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Market {
    let v = Array2::from_shape_fn((n, m), |_| rng.random_range(0.1..1.0));
    let s = Array1::from_shape_fn(m, |_| rng.random_range(1..=3) as f64);
    let b = Array1::from_shape_fn(n, |_| rng.random_range(0.5..1.5));
    Market::new(v, s).unwrap().with_budgets(b).unwrap()
}

/// Spearman correlation with average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
                e += 1;
            }
            for &k in &idx[s..=e] {
                r[k] = (s + e) as f64 / 2.0;
            }
            s = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
