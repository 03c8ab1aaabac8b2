//! Cross-modal retrieval metrics: recall-at-k and median rank under pair-
//! based or class-based correctness.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::Matrix;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "a2b")]
    AToB,
    #[serde(rename = "b2a")]
    BToA,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::AToB => "a2b",
            Direction::BToA => "b2a",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "a2b" => Ok(Direction::AToB),
            "b2a" => Ok(Direction::BToA),
            other => Err(format!("unknown direction {other:?} (expected a2b or b2a)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorType {
    /// Only the paired gallery item counts as a hit.
    Pair,
    /// Any gallery item of the query's class counts as a hit.
    Class,
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorType::Pair => "pair",
            ErrorType::Class => "class",
        })
    }
}

impl std::str::FromStr for ErrorType {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pair" => Ok(ErrorType::Pair),
            "class" => Ok(ErrorType::Class),
            other => Err(format!(
                "unknown error type {other:?} (expected pair or class)"
            )),
        }
    }
}

/// Ground truth for scoring a ranking.
#[derive(Debug, Clone, Copy)]
pub enum Truth<'a> {
    /// Gallery index paired with each query.
    Pair(&'a [usize]),
    Class {
        query: &'a [i32],
        gallery: &'a [i32],
    },
}

impl Truth<'_> {
    pub fn error_type(&self) -> ErrorType {
        match self {
            Truth::Pair(_) => ErrorType::Pair,
            Truth::Class { .. } => ErrorType::Class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub error_type: ErrorType,
    /// Recall in percent, keyed by k.
    pub r_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub n_queries: usize,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.r_at[&k]
    }
}

/// Gallery indices for every query, most similar first. Equal similarities
/// keep ascending gallery order.
pub fn rank_matrix(queries: &Matrix, gallery: &Matrix) -> Result<Vec<Vec<usize>>> {
    if queries.cols() != gallery.cols() {
        return Err(Error::dim(
            "rank_matrix",
            format!(
                "queries {}x{} vs gallery {}x{}",
                queries.rows(),
                queries.cols(),
                gallery.rows(),
                gallery.cols()
            ),
        ));
    }
    let sims = queries.matmul_t(gallery)?;
    Ok(sims
        .row_iter()
        .map(|s| {
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
            order
        })
        .collect())
}

/// 1-based rank of the first correct gallery item for each query.
pub fn hit_ranks(ranks: &[Vec<usize>], truth: Truth<'_>) -> Result<Vec<usize>> {
    let n = ranks.len();
    let truth_len = match truth {
        Truth::Pair(p) => p.len(),
        Truth::Class { query, .. } => query.len(),
    };
    if truth_len != n {
        return Err(Error::dim(
            "score",
            format!("{n} ranked queries but {truth_len} truth entries"),
        ));
    }
    ranks
        .iter()
        .enumerate()
        .map(|(q, order)| {
            let pos = match truth {
                Truth::Pair(p) => order.iter().position(|&g| g == p[q]),
                Truth::Class { query, gallery } => order
                    .iter()
                    .position(|&g| gallery.get(g) == Some(&query[q])),
            };
            pos.map(|p| p + 1).ok_or_else(|| {
                Error::Input(format!("query {q} has no correct item in the gallery"))
            })
        })
        .collect()
}

pub fn score(
    ranks: &[Vec<usize>],
    truth: Truth<'_>,
    direction: Direction,
) -> Result<RetrievalReport> {
    let hits = hit_ranks(ranks, truth)?;
    if hits.is_empty() {
        return Err(Error::Input("no queries to score".into()));
    }
    let n = hits.len();
    let r_at = RECALL_KS
        .iter()
        .map(|&k| {
            (
                k,
                100.0 * hits.iter().filter(|&&r| r <= k).count() as f64 / n as f64,
            )
        })
        .collect();
    let mut sorted = hits;
    sorted.sort_unstable();
    Ok(RetrievalReport {
        direction,
        error_type: truth.error_type(),
        r_at,
        median_rank: sorted[(n - 1) / 2] as f64,
        n_queries: n,
    })
}

/// Scores paired embeddings where query `i` is paired with gallery item `i`.
pub fn evaluate_paired(
    queries: &Matrix,
    gallery: &Matrix,
    labels: &[i32],
    direction: Direction,
    error_type: ErrorType,
) -> Result<RetrievalReport> {
    if queries.rows() != gallery.rows() {
        return Err(Error::dim(
            "evaluate_paired",
            format!(
                "{} queries vs {} gallery items",
                queries.rows(),
                gallery.rows()
            ),
        ));
    }
    let ranks = rank_matrix(queries, gallery)?;
    match error_type {
        ErrorType::Pair => {
            let pairs: Vec<usize> = (0..queries.rows()).collect();
            score(&ranks, Truth::Pair(&pairs), direction)
        }
        ErrorType::Class => score(
            &ranks,
            Truth::Class {
                query: labels,
                gallery: labels,
            },
            direction,
        ),
    }
}

/// Pair-based R@1 (percent) with query `i` paired to gallery row `i`,
/// without materializing the rankings.
pub fn pair_recall_at_1(queries: &Matrix, gallery: &Matrix) -> Result<f64> {
    if queries.shape() != gallery.shape() {
        return Err(Error::dim(
            "pair_recall_at_1",
            format!("{:?} vs {:?}", queries.shape(), gallery.shape()),
        ));
    }
    let sims = queries.matmul_t(gallery)?;
    let hits = sims
        .row_iter()
        .enumerate()
        .filter(|(i, s)| {
            let own = s[*i];
            s.iter()
                .enumerate()
                .all(|(j, &v)| !(v > own || (v == own && j < *i)))
        })
        .count();
    Ok(100.0 * hits as f64 / queries.rows() as f64)
}
