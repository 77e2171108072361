//! Problem instances: valuations, supplies, budgets and constraint groups.
//!
//! A [`Market`] is plain data. Construction through [`Market::new`] and the
//! builder methods validates, but the fields are public so that malformed
//! instances can be assembled and passed to [`Market::validate`].

mod generate;
mod io;

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{
    gen_low_rank, gen_replicator, nested_series, ranks_to_utilities, LowRankMarket, LowRankSpec,
    RankProfile, ReplicationMode, DEFAULT_MAX_RANK,
};
pub use io::{export_csv, export_json, ingest_csv, ingest_json, read_market, write_market};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Market {
    /// `valuations[[i, j]]` is buyer `i`'s value for one unit of item `j`.
    pub valuations: Array2<f64>,
    pub supplies: Array1<f64>,
    pub budgets: Array1<f64>,
    /// Partition of the item indices. Each buyer receives at most one unit in
    /// total from every group; singleton groups give plain at-most-one.
    pub groups: Vec<Vec<usize>>,
}

/// One broken invariant of a [`Market`], with coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    NonFiniteValuation {
        buyer: usize,
        item: usize,
    },
    NegativeValuation {
        buyer: usize,
        item: usize,
    },
    ZeroRow {
        buyer: usize,
    },
    NonPositiveSupply {
        item: usize,
    },
    NonPositiveBudget {
        buyer: usize,
    },
    GroupItemOutOfRange {
        group: usize,
        item: usize,
    },
    GroupsOverlap {
        item: usize,
    },
    GroupsUncovered {
        item: usize,
    },
    EmptyGroup {
        group: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match *self {
            ShapeMismatch {
                what,
                expected,
                found,
            } => {
                write!(f, "{what} has length {found}, expected {expected}")
            }
            NonFiniteValuation { buyer, item } => {
                write!(
                    f,
                    "valuation of buyer {buyer} for item {item} is not finite"
                )
            }
            NegativeValuation { buyer, item } => {
                write!(f, "valuation of buyer {buyer} for item {item} is negative")
            }
            ZeroRow { buyer } => write!(f, "buyer {buyer} has all-zero valuations"),
            NonPositiveSupply { item } => write!(f, "supply of item {item} is not positive"),
            NonPositiveBudget { buyer } => write!(f, "budget of buyer {buyer} is not positive"),
            GroupItemOutOfRange { group, item } => {
                write!(
                    f,
                    "groups not a partition: group {group} names unknown item {item}"
                )
            }
            GroupsOverlap { item } => {
                write!(
                    f,
                    "groups not a partition: item {item} appears in more than one group"
                )
            }
            GroupsUncovered { item } => {
                write!(f, "groups not a partition: item {item} is in no group")
            }
            EmptyGroup { group } => write!(f, "groups not a partition: group {group} is empty"),
        }
    }
}

impl Market {
    /// Unit budgets and singleton groups.
    pub fn new(valuations: Array2<f64>, supplies: Array1<f64>) -> Result<Self> {
        let (n, m) = valuations.dim();
        Market {
            valuations,
            supplies,
            budgets: Array1::ones(n),
            groups: singleton_groups(m),
        }
        .checked()
    }

    pub fn with_budgets(mut self, budgets: Array1<f64>) -> Result<Self> {
        self.budgets = budgets;
        self.checked()
    }

    pub fn with_groups(mut self, groups: Vec<Vec<usize>>) -> Result<Self> {
        self.groups = groups;
        for g in &mut self.groups {
            g.sort_unstable();
        }
        self.checked()
    }

    /// Convenience for tests and small hand-built instances.
    pub fn from_rows(rows: &[&[f64]], supplies: &[f64]) -> Result<Self> {
        let n = rows.len();
        let m = supplies.len();
        let mut v = Array2::zeros((n, m));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has {} entries, expected {m}",
                    row.len()
                )));
            }
            for (j, &x) in row.iter().enumerate() {
                v[[i, j]] = x;
            }
        }
        Market::new(v, Array1::from(supplies.to_vec()))
    }

    fn checked(self) -> Result<Self> {
        self.ensure_valid()?;
        Ok(self)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidMarket(v))
        }
    }

    pub fn n_buyers(&self) -> usize {
        self.valuations.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.valuations.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn values_of(&self, buyer: usize) -> ArrayView1<'_, f64> {
        self.valuations.row(buyer)
    }

    pub fn has_singleton_groups(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }

    pub fn equal_budgets(&self) -> bool {
        let b0 = self.budgets.first().copied().unwrap_or(1.0);
        self.budgets.iter().all(|&b| b == b0)
    }

    /// `group_of()[j]` is the index of the group containing item `j`.
    ///
    /// Only meaningful on a valid market; items outside every group map to
    /// `usize::MAX`.
    pub fn group_of(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.n_items()];
        for (k, g) in self.groups.iter().enumerate() {
            for &j in g {
                if j < out.len() {
                    out[j] = k;
                }
            }
        }
        out
    }

    pub fn utility(&self, buyer: usize, bundle: ArrayView1<'_, f64>) -> f64 {
        self.values_of(buyer).dot(&bundle)
    }

    pub fn utilities(&self, x: &Array2<f64>) -> Array1<f64> {
        (&self.valuations * x).sum_axis(ndarray::Axis(1))
    }

    /// Every invariant violation, in a deterministic order: shapes, then
    /// valuations row by row, supplies, budgets, groups.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let (n, m) = self.valuations.dim();
        if self.supplies.len() != m {
            out.push(Violation::ShapeMismatch {
                what: "supplies",
                expected: m,
                found: self.supplies.len(),
            });
        }
        if self.budgets.len() != n {
            out.push(Violation::ShapeMismatch {
                what: "budgets",
                expected: n,
                found: self.budgets.len(),
            });
        }

        for i in 0..n {
            let mut any_positive = false;
            for j in 0..m {
                let v = self.valuations[[i, j]];
                if !v.is_finite() {
                    out.push(Violation::NonFiniteValuation { buyer: i, item: j });
                } else if v < 0.0 {
                    out.push(Violation::NegativeValuation { buyer: i, item: j });
                } else if v > 0.0 {
                    any_positive = true;
                }
            }
            if !any_positive {
                out.push(Violation::ZeroRow { buyer: i });
            }
        }

        for (j, &s) in self.supplies.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                out.push(Violation::NonPositiveSupply { item: j });
            }
        }
        for (i, &b) in self.budgets.iter().enumerate() {
            if !(b > 0.0 && b.is_finite()) {
                out.push(Violation::NonPositiveBudget { buyer: i });
            }
        }

        let mut seen = vec![0usize; m];
        for (k, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                out.push(Violation::EmptyGroup { group: k });
            }
            for &j in g {
                if j >= m {
                    out.push(Violation::GroupItemOutOfRange { group: k, item: j });
                } else {
                    seen[j] += 1;
                }
            }
        }
        for (j, &c) in seen.iter().enumerate() {
            if c > 1 {
                out.push(Violation::GroupsOverlap { item: j });
            } else if c == 0 {
                out.push(Violation::GroupsUncovered { item: j });
            }
        }
        out
    }

    /// Copy of the market with buyer `i`'s valuation row replaced.
    pub fn with_row(&self, buyer: usize, row: ArrayView1<'_, f64>) -> Market {
        let mut out = self.clone();
        out.valuations.row_mut(buyer).assign(&row);
        out
    }
}

pub fn singleton_groups(m: usize) -> Vec<Vec<usize>> {
    (0..m).map(|j| vec![j]).collect()
}
