//! Depth reduction for abundant alignments.
//!
//! Alignments deeper than `n_max` are first filtered by coverage and
//! identity to the query, then reduced by greedy selection: starting from a
//! pool holding only the query, the candidate nearest the query in Hamming
//! distance whose identity to every pooled row is at most `ident_max` is
//! admitted, until the pool is full or nothing admissible remains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msa::{coverage, hamming_distance, sequence_identity, Msa};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrimConfig {
    pub n_max: usize,
    pub cov_min: f64,
    pub ident_max: f64,
    pub ident_min: f64,
}

impl Default for TrimConfig {
    fn default() -> Self {
        TrimConfig { n_max: 128, cov_min: 0.5, ident_max: 0.9, ident_min: 0.2 }
    }
}

impl TrimConfig {
    pub fn with_n_max(n_max: usize) -> Self {
        TrimConfig { n_max, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_max < 1 {
            return Err(Error::invalid("n_max must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.cov_min) {
            return Err(Error::invalid("cov_min must lie in [0, 1]"));
        }
        if !(0.0 <= self.ident_min && self.ident_min < self.ident_max && self.ident_max <= 1.0) {
            return Err(Error::invalid("require 0 <= ident_min < ident_max <= 1"));
        }
        Ok(())
    }
}

/// Keeps the query and every row with coverage >= `cov_min` and
/// `ident_min <= identity <= ident_max`. Order is preserved.
pub fn primary_filter(msa: &Msa, cfg: &TrimConfig) -> Msa {
    let query = msa.query();
    let keep: Vec<usize> = (0..msa.depth())
        .filter(|&i| {
            if i == 0 {
                return true;
            }
            let row = msa.row(i);
            // rows share the query length by construction
            let ident = sequence_identity(row, query).unwrap_or(0.0);
            coverage(row) >= cfg.cov_min && ident <= cfg.ident_max && ident >= cfg.ident_min
        })
        .collect();
    msa.select(&keep).expect("indices are in range and row 0 is kept")
}

/// Greedy Hamming-nearest selection with the default 0.9 identity bound.
pub fn greedy_select(msa: &Msa, n_max: usize) -> Msa {
    greedy_select_with(msa, n_max, TrimConfig::default().ident_max)
}

/// Greedy selection; ties in distance go to the smaller input index.
///
/// Pool admissibility only tightens as the pool grows, so scanning the
/// candidates once in (distance, index) order admits exactly the rows the
/// round-by-round rule would.
pub fn greedy_select_with(msa: &Msa, n_max: usize, ident_max: f64) -> Msa {
    let query = msa.query();
    let mut order: Vec<(usize, usize)> = (1..msa.depth())
        .map(|i| (hamming_distance(msa.row(i), query).unwrap_or(usize::MAX), i))
        .collect();
    order.sort_unstable();

    let mut pool = vec![0usize];
    for (_, cand) in order {
        if pool.len() >= n_max.max(1) {
            break;
        }
        let row = msa.row(cand);
        let admissible = pool
            .iter()
            .all(|&p| sequence_identity(row, msa.row(p)).map(|id| id <= ident_max).unwrap_or(false));
        if admissible {
            pool.push(cand);
        }
    }
    msa.select(&pool).expect("pool indices are in range")
}

/// Full trimming; alignments at or under the cap pass through unchanged.
pub fn trim(msa: &Msa, cfg: &TrimConfig) -> Msa {
    if msa.depth() <= cfg.n_max {
        return msa.clone();
    }
    let filtered = primary_filter(msa, cfg);
    if filtered.depth() > cfg.n_max {
        greedy_select_with(&filtered, cfg.n_max, cfg.ident_max)
    } else {
        filtered
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msa::{parse_a3m, AlignedRow};

    fn msa(rows: &[&str]) -> Msa {
        Msa::new(
            rows.iter()
                .enumerate()
                .map(|(i, s)| AlignedRow::from_aligned(format!("r{i}"), s).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrimConfig::default().validate().is_ok());
        assert!(TrimConfig { n_max: 0, ..Default::default() }.validate().is_err());
        assert!(TrimConfig { ident_min: 0.9, ..Default::default() }.validate().is_err());
        assert!(TrimConfig { cov_min: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn filter_passes_compliant_rows() {
        let m = msa(&["ACDEFGHIKL", "ACDEFGHAAA", "ACDEFAAAAA", "ACDWWWWWWW"]);
        assert_eq!(primary_filter(&m, &TrimConfig::default()), m);
    }

    #[test]
    fn filter_drops_query_duplicates() {
        let m = msa(&["ACDEFGHIKL", "ACDEFGHIKL", "ACDEFGHAAA"]);
        let out = primary_filter(&m, &TrimConfig::default());
        assert_eq!(out.depth(), 2);
        assert_eq!(out.row(1).header, "r2");
    }

    #[test]
    fn filter_threshold_edges() {
        // identity exactly 0.9 is kept, exactly 0.2 is kept, coverage exactly 0.5 is kept
        let m = msa(&[
            "ACDEFGHIKL",
            "ACDEFGHIKA", // 0.9
            "ACWWWWWWWW", // 0.2
            "ACDEF-----", // coverage 0.5, identity 0.5
            "AWWWWWWWWW", // 0.1
            "ACDE------", // coverage 0.4
        ]);
        let out = primary_filter(&m, &TrimConfig::default());
        let kept: Vec<&str> = out.rows().iter().map(|r| r.header.as_str()).collect();
        assert_eq!(kept, vec!["r0", "r1", "r2", "r3"]);
    }

    #[test]
    fn greedy_keeps_all_admissible_under_cap() {
        let m = msa(&["ACDEFGHIKL", "ACDEFGWWWW", "WWWWFGHIKL"]);
        let out = greedy_select(&m, 8);
        assert_eq!(out.depth(), 3);
        // admission order is by distance: r1 (4), r2 (4) tie broken by index
        assert_eq!(out.row(1).header, "r1");
    }

    #[test]
    fn greedy_rejects_near_duplicates_of_query() {
        let m = msa(&["ACDEFGHIKL", "ACDEFGHIKL", "ACDEFGHIKL"]);
        assert_eq!(greedy_select(&m, 4).depth(), 1);
    }

    #[test]
    fn greedy_rejects_near_duplicates_of_pool() {
        // r1 and r2 are identical to each other: only the nearer enters
        let m = msa(&["ACDEFGHIKL", "ACDEFGWWWW", "ACDEFGWWWW", "ACDWWWWWWW"]);
        let out = greedy_select(&m, 4);
        let kept: Vec<&str> = out.rows().iter().map(|r| r.header.as_str()).collect();
        assert_eq!(kept, vec!["r0", "r1", "r3"]);
    }

    #[test]
    fn trim_passthrough_and_cap_one() {
        let m = parse_a3m(">q\nACDEFGHIKL\n>a\nACDEFGWWWW\n>b\nACDWWWWWWW\n").unwrap();
        assert_eq!(trim(&m, &TrimConfig::with_n_max(8)), m);
        let one = trim(&m, &TrimConfig::with_n_max(1));
        assert_eq!(one.depth(), 1);
        assert_eq!(one.query(), m.query());
    }
}
