//! Low-rank misreports and a derivative-free search for profitable ones.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::Market;
use crate::solver::{solve, Mode, SolverConfig};

/// Gains above this count as a profitable deviation.
pub const FOUND_GAIN: f64 = 1e-4;
pub const DEFAULT_DIM: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factorization {
    /// `N x d` buyer factors.
    pub b: Array2<f64>,
    /// `M x d` item factors.
    pub k: Array2<f64>,
    /// `||V - B K^T||_F / ||V||_F`.
    pub rel_error: f64,
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// Least-squares `X` with `A X^T ~ V`, i.e. `X = V A (A^T A)^+`.
fn ls_factor(v: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = a.transpose() * a;
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let pinv = gram
        .pseudo_inverse(1e-13 * scale)
        .expect("gram matrix pseudo-inverse with nonnegative eps");
    v * a * pinv
}

/// Rank-`d` factorization `V ~ B K^T` by alternating least squares from a
/// seeded random start.
pub fn low_rank_factorize(v: &Array2<f64>, d: usize, seed: u64) -> Result<Factorization> {
    let (n, m) = v.dim();
    if d < 1 || d > n.min(m) {
        return Err(Error::InvalidArgument(format!(
            "rank {d} outside 1..={}",
            n.min(m)
        )));
    }
    let vn = to_na(v);
    let norm = vn.norm().max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
    let mut b = ls_factor(&vn, &k);
    let mut err = (&vn - &b * k.transpose()).norm() / norm;
    for _ in 0..2000 {
        k = ls_factor(&vn.transpose(), &b);
        b = ls_factor(&vn, &k);
        let next = (&vn - &b * k.transpose()).norm() / norm;
        let stalled = err - next <= 1e-15 * err.max(1e-300);
        err = next;
        if err < 1e-14 || stalled {
            break;
        }
    }
    Ok(Factorization {
        b: from_na(&b),
        k: from_na(&k),
        rel_error: err,
    })
}

/// `max(0, v_ij + b . K_j)`.
pub fn deviated_valuation(v: ArrayView1<'_, f64>, b: &[f64], k: &Array2<f64>) -> Array1<f64> {
    assert_eq!(k.ncols(), b.len(), "deviation and factor dimensions differ");
    assert_eq!(k.nrows(), v.len(), "valuation and factor lengths differ");
    let shift = k.dot(&ArrayView1::from(b));
    (&v + &shift).mapv(|x| x.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    AmoEg,
    Eg,
    WelfareMax,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amo-eg" | "amo" => Ok(Mechanism::AmoEg),
            "eg" | "plain" => Ok(Mechanism::Eg),
            "welfare-max" => Ok(Mechanism::WelfareMax),
            _ => Err(Error::InvalidArgument(format!("unknown mechanism '{s}'"))),
        }
    }
}

/// Utilitarian allocation: every item goes unit by unit to the buyers with
/// the highest value (lowest index on ties) that still have room in the
/// item's group. Exact for singleton groups; items are visited in index
/// order otherwise.
pub fn welfare_max_allocate(market: &Market) -> Array2<f64> {
    let (n, m) = market.valuations.dim();
    let group_of = market.group_of();
    let mut room = Array2::from_elem((n, market.n_groups()), 1.0f64);
    let mut x = Array2::zeros((n, m));
    let mut order: Vec<usize> = (0..n).collect();
    for j in 0..m {
        let k = group_of[j];
        order.sort_by(|&a, &b| {
            market.valuations[[b, j]]
                .total_cmp(&market.valuations[[a, j]])
                .then(a.cmp(&b))
        });
        let mut left = market.supplies[j];
        for &i in &order {
            if left <= 0.0 {
                break;
            }
            let q = room[[i, k]].min(left);
            if q > 0.0 {
                x[[i, j]] = q;
                room[[i, k]] -= q;
                left -= q;
            }
        }
    }
    x
}

fn allocate(
    market: &Market,
    mechanism: Mechanism,
    cfg: &SolverConfig,
    warm: Option<&Array2<f64>>,
) -> Result<Option<Array2<f64>>> {
    let mode = match mechanism {
        Mechanism::WelfareMax => return Ok(Some(welfare_max_allocate(market))),
        Mechanism::AmoEg => Mode::Amo,
        Mechanism::Eg => Mode::Plain,
    };
    let sol = solve(market, cfg, mode, warm)?;
    Ok(sol.diagnostics.converged.then_some(sol.x))
}

/// Truthful baseline for one target buyer, reused across evaluations.
#[derive(Debug, Clone)]
pub struct Harness {
    pub market: Market,
    pub target: usize,
    pub mechanism: Mechanism,
    pub cfg: SolverConfig,
    pub baseline_x: Array2<f64>,
    pub baseline_utility: f64,
}

impl Harness {
    pub fn new(
        market: &Market,
        target: usize,
        mechanism: Mechanism,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        if target >= market.n_buyers() {
            return Err(Error::InvalidArgument(format!("no buyer {target}")));
        }
        let baseline_x = match mechanism {
            Mechanism::WelfareMax => welfare_max_allocate(market),
            _ => {
                let mode = if mechanism == Mechanism::AmoEg {
                    Mode::Amo
                } else {
                    Mode::Plain
                };
                let sol = solve(market, cfg, mode, None)?;
                if !sol.diagnostics.converged {
                    return Err(Error::BaselineNotConverged {
                        residual: sol.diagnostics.residuals.max(),
                    });
                }
                sol.x
            }
        };
        let baseline_utility = market.utility(target, baseline_x.row(target));
        if !(baseline_utility > 0.0) {
            return Err(Error::Precondition(format!(
                "buyer {target} has zero truthful utility"
            )));
        }
        Ok(Harness {
            market: market.clone(),
            target,
            mechanism,
            cfg: cfg.clone(),
            baseline_x,
            baseline_utility,
        })
    }

    /// Relative true-utility gain from reporting `v_i + b K^T`; `None` when
    /// the re-solve does not converge or the report is not a valid market.
    pub fn gain(&self, b: &[f64], k: &Array2<f64>) -> Option<f64> {
        if b.iter().all(|&c| c == 0.0) {
            return Some(0.0);
        }
        let v = self.market.values_of(self.target);
        let report = deviated_valuation(v, b, k);
        let market = self.market.with_row(self.target, report.view());
        let x = allocate(&market, self.mechanism, &self.cfg, Some(&self.baseline_x)).ok()??;
        let u = self.market.utility(self.target, x.row(self.target));
        Some((u - self.baseline_utility) / self.baseline_utility)
    }
}

/// One-off gain evaluation (solves the truthful baseline first).
pub fn deviation_gain(
    market: &Market,
    target: usize,
    b: &[f64],
    k: &Array2<f64>,
    mechanism: Mechanism,
    cfg: &SolverConfig,
) -> Result<Option<f64>> {
    Ok(Harness::new(market, target, mechanism, cfg)?.gain(b, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationSpec {
    pub target: usize,
    /// Half-width of the search box per coordinate.
    pub radius: Vec<f64>,
    /// `M x d` item factors.
    pub k: Array2<f64>,
    pub mechanism: Mechanism,
    pub evals: usize,
    pub seed: u64,
}

impl DeviationSpec {
    pub fn dim(&self) -> usize {
        self.k.ncols()
    }

    pub fn validate(&self, market: &Market) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.k.nrows() != market.n_items() {
            return bad(format!(
                "factor rows {} != items {}",
                self.k.nrows(),
                market.n_items()
            ));
        }
        if self.dim() > market.n_items() || self.dim() == 0 {
            return bad(format!(
                "dimension {} outside 1..={}",
                self.dim(),
                market.n_items()
            ));
        }
        if self.radius.len() != self.dim()
            || self.radius.iter().any(|&r| !(r > 0.0 && r.is_finite()))
        {
            return bad("radius needs one positive entry per dimension".into());
        }
        if self.evals == 0 {
            return bad("evals must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub b: Vec<f64>,
    /// `None` for non-converged re-solves.
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationResult {
    pub target: usize,
    pub best_b: Vec<f64>,
    pub gain: f64,
    pub found: bool,
    pub trace: Vec<Evaluation>,
}

impl DeviationResult {
    /// `eval,b0,..,b{d-1},gain`; empty gain for excluded evaluations.
    pub fn trace_csv(&self) -> String {
        let d = self.best_b.len();
        let mut out = String::from("eval");
        for c in 0..d {
            out.push_str(&format!(",b{c}"));
        }
        out.push_str(",gain\n");
        for (t, e) in self.trace.iter().enumerate() {
            out.push_str(&t.to_string());
            for c in &e.b {
                out.push_str(&format!(",{c}"));
            }
            out.push(',');
            if let Some(g) = e.gain {
                out.push_str(&g.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Latin hypercube over `[-r, r]` per coordinate.
fn latin_hypercube(count: usize, radius: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = radius.len();
    let mut pts = vec![vec![0.0; d]; count];
    for (c, &r) in radius.iter().enumerate() {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(rng);
        for (p, &s) in pts.iter_mut().zip(&strata) {
            let u = (s as f64 + rng.random::<f64>()) / count as f64;
            p[c] = -r + 2.0 * r * u;
        }
    }
    pts
}

fn better(a: Option<f64>, b: f64) -> bool {
    a.is_some_and(|g| g > b)
}

/// Truth-telling first, Latin-hypercube samples for half of the remaining
/// budget (evaluated concurrently), then coordinate pattern search from the
/// best point found.
pub fn search_with(harness: &Harness, spec: &DeviationSpec) -> Result<DeviationResult> {
    spec.validate(&harness.market)?;
    let d = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trace = vec![Evaluation {
        b: vec![0.0; d],
        gain: Some(0.0),
    }];
    let mut best = (vec![0.0; d], 0.0);

    let rest = spec.evals - 1;
    let n_lhs = rest / 2;
    let samples = latin_hypercube(n_lhs, &spec.radius, &mut rng);
    let gains: Vec<Option<f64>> = samples
        .par_iter()
        .map(|b| harness.gain(b, &spec.k))
        .collect();
    for (b, g) in samples.into_iter().zip(gains) {
        if better(g, best.1) {
            best = (b.clone(), g.unwrap());
        }
        trace.push(Evaluation { b, gain: g });
    }

    let mut step: Vec<f64> = spec.radius.iter().map(|r| r / 2.0).collect();
    let mut left = rest - n_lhs;
    let mut centre = best.clone();
    while left > 0 {
        let mut improved = false;
        'poll: for c in 0..d {
            for sign in [1.0, -1.0] {
                if left == 0 {
                    break 'poll;
                }
                let mut b = centre.0.clone();
                b[c] = (b[c] + sign * step[c]).clamp(-spec.radius[c], spec.radius[c]);
                if b[c] == centre.0[c] {
                    continue;
                }
                let g = harness.gain(&b, &spec.k);
                left -= 1;
                trace.push(Evaluation {
                    b: b.clone(),
                    gain: g,
                });
                if better(g, centre.1) {
                    centre = (b, g.unwrap());
                    improved = true;
                    break 'poll;
                }
            }
        }
        if !improved {
            for s in step.iter_mut() {
                *s /= 2.0;
            }
            if step.iter().zip(&spec.radius).all(|(s, r)| *s < 1e-12 * r) {
                break;
            }
        }
        if centre.1 > best.1 {
            best = centre.clone();
        }
    }

    Ok(DeviationResult {
        target: spec.target,
        found: best.1 > FOUND_GAIN,
        gain: best.1,
        best_b: best.0,
        trace,
    })
}

pub fn search_deviation(
    spec: &DeviationSpec,
    market: &Market,
    cfg: &SolverConfig,
) -> Result<DeviationResult> {
    spec.validate(market)?;
    let harness = Harness::new(market, spec.target, spec.mechanism, cfg)?;
    search_with(&harness, spec)
}

/// `2 x` the per-coordinate standard deviation of the buyer factors.
pub fn default_radius(f: &Factorization) -> Vec<f64> {
    f.b.std_axis(Axis(0), 0.0)
        .iter()
        .map(|&s| (2.0 * s).max(1e-12))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRow {
    pub buyer: usize,
    pub gain: f64,
    pub found: bool,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub mechanism: Mechanism,
    pub dim: usize,
    pub evals: usize,
    pub factor_error: f64,
    pub rows: Vec<CampaignRow>,
    /// Sampled buyers skipped for zero truthful utility.
    pub skipped: Vec<usize>,
    pub found_rate: f64,
    pub mean_gain: f64,
    /// Standard error of the mean gain.
    pub se_gain: f64,
}

impl CampaignSummary {
    /// `mean (se)` in percent.
    pub fn table_cell(&self) -> String {
        format!(
            "{:.2} ({:.2})",
            100.0 * self.mean_gain,
            100.0 * self.se_gain
        )
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from("buyer,gain,found,excluded\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.buyer, r.gain, r.found, r.excluded
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSpec {
    pub buyers: usize,
    pub dim: usize,
    pub evals: usize,
    pub mechanism: Mechanism,
    pub seed: u64,
}

/// Factorizes the truthful valuations once, samples target buyers and runs
/// one search per buyer. Buyers with zero truthful utility under the
/// mechanism are skipped and replaced from the sample order.
pub fn campaign(
    market: &Market,
    spec: &CampaignSpec,
    cfg: &SolverConfig,
) -> Result<CampaignSummary> {
    let n = market.n_buyers();
    let dim = spec.dim.min(n.min(market.n_items()));
    let f = low_rank_factorize(&market.valuations, dim, spec.seed)?;
    let radius = default_radius(&f);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (pos, &buyer) in order.iter().enumerate() {
        if rows.len() == spec.buyers {
            break;
        }
        let harness = match Harness::new(market, buyer, spec.mechanism, cfg) {
            Ok(h) => h,
            Err(Error::Precondition(_)) => {
                skipped.push(buyer);
                continue;
            }
            Err(e) => return Err(e),
        };
        let dspec = DeviationSpec {
            target: buyer,
            radius: radius.clone(),
            k: f.k.clone(),
            mechanism: spec.mechanism,
            evals: spec.evals,
            seed: spec.seed.wrapping_add(pos as u64 + 1),
        };
        let r = search_with(&harness, &dspec)?;
        rows.push(CampaignRow {
            buyer,
            gain: r.gain,
            found: r.found,
            excluded: r.trace.iter().filter(|e| e.gain.is_none()).count(),
        });
    }
    let count = rows.len() as f64;
    let mean_gain = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.gain).sum::<f64>() / count
    };
    let se_gain = if rows.len() < 2 {
        0.0
    } else {
        let var = rows
            .iter()
            .map(|r| (r.gain - mean_gain).powi(2))
            .sum::<f64>()
            / (count - 1.0);
        (var / count).sqrt()
    };
    Ok(CampaignSummary {
        mechanism: spec.mechanism,
        dim,
        evals: spec.evals,
        factor_error: f.rel_error,
        found_rate: if rows.is_empty() {
            0.0
        } else {
            rows.iter().filter(|r| r.found).count() as f64 / count
        },
        mean_gain,
        se_gain,
        rows,
        skipped,
    })
}
