use ndarray::{s, Array1, Array2};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Market;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_RANK: u32 = 30;

/// Latent-factor market: `v_ij = theta_i . psi_j` with both factors drawn
/// uniformly from axis-aligned boxes in the nonnegative orthant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankSpec {
    pub n_buyers: usize,
    pub n_items: usize,
    pub dim: usize,
    /// Per-coordinate `(lo, hi)` for buyer factors. One entry is broadcast.
    pub theta_bounds: Vec<(f64, f64)>,
    pub psi_bounds: Vec<(f64, f64)>,
    /// Supply of every item; must exceed 1.
    pub supply: f64,
    pub seed: u64,
}

impl LowRankSpec {
    /// Unit boxes `[0, 1]^dim` for both factors.
    pub fn unit_box(n_buyers: usize, n_items: usize, dim: usize, supply: f64, seed: u64) -> Self {
        LowRankSpec {
            n_buyers,
            n_items,
            dim,
            theta_bounds: vec![(0.0, 1.0)],
            psi_bounds: vec![(0.0, 1.0)],
            supply,
            seed,
        }
    }

    fn bounds(&self, which: &[(f64, f64)], name: &str) -> Result<Vec<(f64, f64)>> {
        let b = match which.len() {
            1 => vec![which[0]; self.dim],
            d if d == self.dim => which.to_vec(),
            d => {
                return Err(Error::InvalidSpec(format!(
                    "{name} has {d} intervals, expected 1 or {}",
                    self.dim
                )))
            }
        };
        for &(lo, hi) in &b {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "{name} interval [{lo}, {hi}] is not a nonnegative compact interval"
                )));
            }
        }
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_buyers == 0 || self.n_items == 0 || self.dim == 0 {
            return Err(Error::InvalidSpec(
                "buyers, items and dim must be positive".into(),
            ));
        }
        if !(self.supply > 1.0 && self.supply.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "supply must exceed 1, got {}",
                self.supply
            )));
        }
        self.bounds(&self.theta_bounds, "theta_bounds")?;
        self.bounds(&self.psi_bounds, "psi_bounds")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankMarket {
    pub market: Market,
    /// `n_buyers x dim`
    pub theta: Array2<f64>,
    /// `n_items x dim`
    pub psi: Array2<f64>,
}

fn draw_box(rng: &mut ChaCha8Rng, rows: usize, bounds: &[(f64, f64)]) -> Array2<f64> {
    let mut out = Array2::zeros((rows, bounds.len()));
    for r in 0..rows {
        for (c, &(lo, hi)) in bounds.iter().enumerate() {
            out[[r, c]] = if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            };
        }
    }
    out
}

pub fn gen_low_rank(spec: &LowRankSpec) -> Result<LowRankMarket> {
    spec.validate()?;
    let tb = spec.bounds(&spec.theta_bounds, "theta_bounds")?;
    let pb = spec.bounds(&spec.psi_bounds, "psi_bounds")?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let theta = draw_box(&mut rng, spec.n_buyers, &tb);
    let psi = draw_box(&mut rng, spec.n_items, &pb);
    let valuations = theta.dot(&psi.t());
    let market = Market::new(valuations, Array1::from_elem(spec.n_items, spec.supply))
        .map_err(|e| Error::InvalidSpec(format!("generated market is invalid: {e}")))?;
    Ok(LowRankMarket { market, theta, psi })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ReplicationMode {
    /// Buyer `(c, i)` values item `(c', j)` at `v_ij` for every replicate `c'`.
    #[default]
    Copy,
    /// Replicates only value their own copy of the items.
    BlockDiagonal,
}

/// `k` copies of every buyer and item. Buyer `(c, i)` has index `c * N + i`,
/// item `(c, j)` has index `c * M + j`.
pub fn gen_replicator(base: &Market, k: usize, mode: ReplicationMode) -> Result<Market> {
    if k < 1 {
        return Err(Error::InvalidArgument(
            "replication factor must be >= 1".into(),
        ));
    }
    base.ensure_valid()?;
    let (n, m) = base.valuations.dim();
    let mut v = Array2::zeros((k * n, k * m));
    for c in 0..k {
        for c2 in 0..k {
            if mode == ReplicationMode::BlockDiagonal && c != c2 {
                continue;
            }
            v.slice_mut(s![c * n..(c + 1) * n, c2 * m..(c2 + 1) * m])
                .assign(&base.valuations);
        }
    }
    let supplies = Array1::from_iter((0..k).flat_map(|_| base.supplies.iter().copied()));
    let budgets = Array1::from_iter((0..k).flat_map(|_| base.budgets.iter().copied()));
    let groups = (0..k)
        .flat_map(|c| {
            base.groups
                .iter()
                .map(move |g| g.iter().map(|&j| c * m + j).collect())
        })
        .collect();
    Market::new(v, supplies)?
        .with_budgets(budgets)?
        .with_groups(groups)
}

/// Per-buyer ranked lists of `(item, rank)`; unlisted items are unranked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    pub n_items: usize,
    pub rankings: Vec<Vec<(usize, u32)>>,
}

impl RankProfile {
    /// Every buyer ranks `ranked` distinct items, drawn without replacement
    /// with per-item popularity weights in `[0.2, 1)` shared by all buyers.
    pub fn random(n_buyers: usize, n_items: usize, ranked: usize, seed: u64) -> Result<Self> {
        if ranked == 0 || ranked > n_items {
            return Err(Error::InvalidArgument(format!(
                "cannot rank {ranked} of {n_items} items"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let popularity: Vec<f64> = (0..n_items).map(|_| rng.random_range(0.2..1.0)).collect();
        let mut rankings = Vec::with_capacity(n_buyers);
        for _ in 0..n_buyers {
            let mut w = popularity.clone();
            let mut list = Vec::with_capacity(ranked);
            for r in 1..=ranked {
                let dist = WeightedIndex::new(&w).expect("positive weights remain");
                let j = dist.sample(&mut rng);
                w[j] = 0.0;
                list.push((j, r as u32));
            }
            rankings.push(list);
        }
        Ok(RankProfile { n_items, rankings })
    }
}

/// Rank `r` becomes utility `(max_rank + 1 - r) / max_rank`, unranked items 0.
pub fn ranks_to_utilities(profile: &RankProfile, max_rank: u32) -> Result<Array2<f64>> {
    if max_rank == 0 {
        return Err(Error::InvalidArgument("max_rank must be positive".into()));
    }
    let n = profile.rankings.len();
    let mut v = Array2::zeros((n, profile.n_items));
    for (i, list) in profile.rankings.iter().enumerate() {
        let mut ranks_seen = vec![false; max_rank as usize + 1];
        for &(j, r) in list {
            if r == 0 || r > max_rank {
                return Err(Error::InvalidArgument(format!(
                    "buyer {i}: rank {r} outside 1..={max_rank}"
                )));
            }
            if j >= profile.n_items {
                return Err(Error::InvalidArgument(format!(
                    "buyer {i}: item {j} out of range"
                )));
            }
            if ranks_seen[r as usize] {
                return Err(Error::DuplicateRank { buyer: i, rank: r });
            }
            ranks_seen[r as usize] = true;
            if v[[i, j]] != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "buyer {i}: item {j} ranked twice"
                )));
            }
            v[[i, j]] = f64::from(max_rank + 1 - r) / f64::from(max_rank);
        }
    }
    Ok(v)
}

/// Nested prefix markets: for every item count `m` and total supply `S`, the
/// first `m` items of the pool with uniform supply `S / m`. Count-major order.
pub fn nested_series(
    pool: &Market,
    item_counts: &[usize],
    total_supplies: &[f64],
) -> Result<Vec<Market>> {
    pool.ensure_valid()?;
    let width = pool.n_items();
    let mut out = Vec::with_capacity(item_counts.len() * total_supplies.len());
    for &m in item_counts {
        if m == 0 || m > width {
            return Err(Error::InvalidArgument(format!(
                "item count {m} exceeds pool width {width}"
            )));
        }
        let v = pool.valuations.slice(s![.., ..m]).to_owned();
        let groups: Vec<Vec<usize>> = pool
            .groups
            .iter()
            .map(|g| g.iter().copied().filter(|&j| j < m).collect::<Vec<_>>())
            .filter(|g| !g.is_empty())
            .collect();
        for &total in total_supplies {
            if !(total > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "total supply {total} must be positive"
                )));
            }
            let market = Market::new(v.clone(), Array1::from_elem(m, total / m as f64))?
                .with_budgets(pool.budgets.clone())?
                .with_groups(groups.clone())?;
            out.push(market);
        }
    }
    Ok(out)
}
