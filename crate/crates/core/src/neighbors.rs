//! Exact cosine kNN over a feature bank, reciprocity-based affinity and
//! expanded (neighbor-of-neighbor) sets.
//!
//! A query never retrieves itself: rows sharing the query's sample id are
//! skipped. Candidates are ordered by descending similarity, ties going to
//! the lower row index.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;

use crate::bank::FeatureBank;
use crate::error::{NrcError, Result};
use crate::math::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityConfig {
    /// Neighbors per query.
    pub k: usize,
    /// Neighbors consulted for reciprocity and expansion.
    pub m: usize,
    /// Affinity of non-reciprocal neighbors.
    pub r: f64,
    /// Weight applied to every expanded neighbor.
    pub expanded_r: f64,
    /// Collapse duplicate expanded neighbors.
    pub dedup_expanded: bool,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            k: 3,
            m: 2,
            r: 0.1,
            expanded_r: 0.1,
            dedup_expanded: false,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(NrcError::Config("k must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(NrcError::Config("m must be at least 1".into()));
        }
        if !self.r.is_finite() || !self.expanded_r.is_finite() {
            return Err(NrcError::Config("affinity values must be finite".into()));
        }
        Ok(())
    }
}

/// Neighbors of one query row.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborRow {
    pub query: usize,
    /// Bank rows, most similar first.
    pub neighbors: Vec<usize>,
    pub similarities: Vec<f64>,
    /// Whether the query is among this neighbor's M nearest.
    pub reciprocal: Vec<bool>,
    /// `1` for reciprocal neighbors, `r` otherwise.
    pub affinity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    pub rows: Vec<NeighborRow>,
}

/// Expanded neighbors of one query: concatenated M-neighbor lists of its
/// K neighbors, ego removed, duplicates kept unless deduplicated.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedRow {
    pub query: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedTable {
    pub rows: Vec<ExpandedRow>,
}

fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// The `k` most similar rows to `query` with their cosine similarities.
pub fn knn_with_similarity(
    bank: &FeatureBank,
    query: usize,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if query >= bank.len() {
        return Err(NrcError::IndexOutOfRange {
            index: query,
            len: bank.len(),
        });
    }
    let ego = bank.id(query);
    let q = bank.row(query);
    let mut cand: Vec<(usize, f64)> = (0..bank.len())
        .filter(|&j| bank.id(j) != ego)
        .map(|j| (j, dot(q, bank.row(j))))
        .collect();
    if k == 0 || k > cand.len() {
        return Err(NrcError::TooFewCandidates {
            k,
            available: cand.len(),
        });
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, rank_order);
        cand.truncate(k);
    }
    cand.sort_by(rank_order);
    Ok(cand)
}

/// Row indices of the `k` nearest neighbors of `query`, ego excluded.
pub fn knn(bank: &FeatureBank, query: usize, k: usize) -> Result<Vec<usize>> {
    Ok(knn_with_similarity(bank, query, k)?
        .into_iter()
        .map(|(j, _)| j)
        .collect())
}

/// Memoized kNN lists; a longer cached list serves any shorter request.
struct KnnCache<'a> {
    bank: &'a FeatureBank,
    lists: HashMap<usize, Vec<(usize, f64)>>,
}

impl<'a> KnnCache<'a> {
    fn new(bank: &'a FeatureBank) -> Self {
        Self {
            bank,
            lists: HashMap::new(),
        }
    }

    fn prefetch(&mut self, rows: &[usize], k: usize) -> Result<()> {
        let missing: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|r| self.lists.get(r).is_none_or(|l| l.len() < k))
            .collect();
        let found: Vec<(usize, Vec<(usize, f64)>)> = missing
            .par_iter()
            .map(|&r| knn_with_similarity(self.bank, r, k).map(|l| (r, l)))
            .collect::<Result<_>>()?;
        self.lists.extend(found);
        Ok(())
    }

    fn get(&mut self, row: usize, k: usize) -> Result<&[(usize, f64)]> {
        if self.lists.get(&row).is_none_or(|l| l.len() < k) {
            let l = knn_with_similarity(self.bank, row, k)?;
            self.lists.insert(row, l);
        }
        Ok(&self.lists[&row][..k])
    }
}

/// Neighbor and expanded tables for a subset of bank rows.
pub fn build_tables_for(
    bank: &FeatureBank,
    queries: &[usize],
    config: &AffinityConfig,
    with_expanded: bool,
) -> Result<(NeighborTable, Option<ExpandedTable>)> {
    config.validate()?;
    let mut cache = KnnCache::new(bank);
    cache.prefetch(queries, config.k)?;
    let mut rows = Vec::with_capacity(queries.len());
    for &i in queries {
        let list = cache.get(i, config.k)?.to_vec();
        let neighbors: Vec<usize> = list.iter().map(|&(j, _)| j).collect();
        cache.prefetch(&neighbors, config.m)?;
        let ego = bank.id(i);
        let mut reciprocal = Vec::with_capacity(config.k);
        for &j in &neighbors {
            let back = cache.get(j, config.m)?;
            reciprocal.push(back.iter().any(|&(t, _)| bank.id(t) == ego));
        }
        let affinity = reciprocal
            .iter()
            .map(|&rec| if rec { 1.0 } else { config.r })
            .collect();
        rows.push(NeighborRow {
            query: i,
            neighbors,
            similarities: list.iter().map(|&(_, s)| s).collect(),
            affinity,
            reciprocal,
        });
    }
    let table = NeighborTable { rows };
    let expanded = if with_expanded {
        Some(expand(bank, &table, config, &mut cache)?)
    } else {
        None
    };
    Ok((table, expanded))
}

fn expand(
    bank: &FeatureBank,
    table: &NeighborTable,
    config: &AffinityConfig,
    cache: &mut KnnCache<'_>,
) -> Result<ExpandedTable> {
    let mut rows = Vec::with_capacity(table.rows.len());
    for nr in &table.rows {
        let ego = bank.id(nr.query);
        let mut members = Vec::with_capacity(config.k * config.m);
        for &j in &nr.neighbors {
            members.extend(
                cache
                    .get(j, config.m)?
                    .iter()
                    .map(|&(t, _)| t)
                    .filter(|&t| bank.id(t) != ego),
            );
        }
        if config.dedup_expanded {
            let mut seen = std::collections::HashSet::new();
            members.retain(|t| seen.insert(*t));
        }
        rows.push(ExpandedRow {
            query: nr.query,
            members,
        });
    }
    Ok(ExpandedTable { rows })
}

/// Neighbor table over every bank row.
pub fn build_neighbor_table(bank: &FeatureBank, config: &AffinityConfig) -> Result<NeighborTable> {
    let all: Vec<usize> = (0..bank.len()).collect();
    Ok(build_tables_for(bank, &all, config, false)?.0)
}

/// Expanded table for the queries of an existing neighbor table.
pub fn build_expanded_table(
    bank: &FeatureBank,
    table: &NeighborTable,
    config: &AffinityConfig,
) -> Result<ExpandedTable> {
    config.validate()?;
    let mut cache = KnnCache::new(bank);
    let needed: Vec<usize> = table
        .rows
        .iter()
        .flat_map(|r| r.neighbors.iter().copied())
        .collect();
    cache.prefetch(&needed, config.m)?;
    expand(bank, table, config, &mut cache)
}
