//! Ranking metrics for cross-modal retrieval: Rank-k, mAP and RSum.
//!
//! Each query ranks the whole gallery by descending cosine similarity. Equal
//! scores keep ascending gallery order. Every gallery item sharing the query's
//! identity counts as a positive.

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{cosine_sim, Matrix};

/// Cutoffs reported by default.
pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 5, 10];

/// Environment variable capping the worker threads used by [`evaluate`].
pub const THREADS_ENV: &str = "FUZZYALIGN_THREADS";

#[derive(Debug, Clone)]
pub struct RetrievalTask {
    pub query_features: Matrix,
    pub gallery_features: Matrix,
    pub query_ids: Vec<u32>,
    pub gallery_ids: Vec<u32>,
}

impl RetrievalTask {
    /// Checks shapes and that every query identity occurs in the gallery.
    pub fn new(
        query_features: Matrix,
        gallery_features: Matrix,
        query_ids: Vec<u32>,
        gallery_ids: Vec<u32>,
    ) -> Result<Self> {
        let task = Self {
            query_features,
            gallery_features,
            query_ids,
            gallery_ids,
        };
        task.validate()?;
        Ok(task)
    }

    fn validate(&self) -> Result<()> {
        let (q, g) = (&self.query_features, &self.gallery_features);
        if q.rows() != self.query_ids.len() || g.rows() != self.gallery_ids.len() {
            return Err(shape_err(
                "RetrievalTask",
                format!(
                    "{} query rows / {} ids, {} gallery rows / {} ids",
                    q.rows(),
                    self.query_ids.len(),
                    g.rows(),
                    self.gallery_ids.len()
                ),
            ));
        }
        if q.rows() > 0 && g.rows() > 0 && q.cols() != g.cols() {
            return Err(shape_err(
                "RetrievalTask",
                format!("query dim {} vs gallery dim {}", q.cols(), g.cols()),
            ));
        }
        check_identities(&self.query_ids, &self.gallery_ids)
    }

    /// Query-by-gallery cosine similarities.
    pub fn similarity(&self) -> Result<Matrix> {
        let (q, g) = (&self.query_features, &self.gallery_features);
        let mut data = Vec::with_capacity(q.rows() * g.rows());
        for i in 0..q.rows() {
            for j in 0..g.rows() {
                data.push(cosine_sim(q.row(i), g.row(j))?);
            }
        }
        Matrix::new(q.rows(), g.rows(), data)
    }
}

fn check_identities(query_ids: &[u32], gallery_ids: &[u32]) -> Result<()> {
    if query_ids.is_empty() {
        return Err(Error::InvalidArgument(
            "retrieval task has no queries".into(),
        ));
    }
    let gallery: HashSet<u32> = gallery_ids.iter().copied().collect();
    match query_ids.iter().position(|id| !gallery.contains(id)) {
        Some(query) => Err(Error::OrphanQuery {
            query,
            identity: query_ids[query],
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAt {
    pub k: usize,
    pub rank: f64,
}

/// Retrieval scores in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub rsum: f64,
    pub num_queries: usize,
    pub gallery_size: usize,
    /// Rank-k at the requested cutoffs.
    pub cutoffs: Vec<RankAt>,
    /// Cumulative match curve: entry `k - 1` is Rank-k, up to the largest cutoff.
    pub cmc: Vec<f64>,
}

impl MetricReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, f64)> = vec![
            ("Rank-1".into(), self.rank1),
            ("Rank-5".into(), self.rank5),
            ("Rank-10".into(), self.rank10),
        ];
        for c in &self.cutoffs {
            if !DEFAULT_CUTOFFS.contains(&c.k) {
                rows.push((format!("Rank-{}", c.k), c.rank));
            }
        }
        rows.push(("mAP".into(), self.map));
        rows.push(("RSum".into(), self.rsum));
        let mut out = format!(
            "{:<8} {:>8}\n{:<8} {:>8}\n",
            "queries", self.num_queries, "gallery", self.gallery_size
        );
        for (name, value) in rows {
            out.push_str(&format!("{name:<8} {value:>8.2}\n"));
        }
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Gallery indices in ranked order.
pub fn rank_row(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps ascending index among ties
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Full rankings for every query.
pub fn rank_all(task: &RetrievalTask) -> Result<Vec<Vec<usize>>> {
    let sim = task.similarity()?;
    Ok((0..sim.rows()).map(|i| rank_row(sim.row(i))).collect())
}

/// Position (0-based) of the first positive and the average precision.
fn score_query(scores: &[f64], query_id: u32, gallery_ids: &[u32]) -> (usize, f64) {
    let order = rank_row(scores);
    let mut first = None;
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (pos, &g) in order.iter().enumerate() {
        if gallery_ids[g] == query_id {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos);
        }
    }
    (
        first.expect("validated query has a positive"),
        precision_sum / hits as f64,
    )
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn per_query(sim: &Matrix, query_ids: &[u32], gallery_ids: &[u32]) -> Vec<(usize, f64)> {
    let run = || {
        (0..sim.rows())
            .into_par_iter()
            .map(|i| score_query(sim.row(i), query_ids[i], gallery_ids))
            .collect()
    };
    if sim.len() < 4096 {
        return (0..sim.rows())
            .map(|i| score_query(sim.row(i), query_ids[i], gallery_ids))
            .collect();
    }
    match thread_cap().and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(run),
        None => run(),
    }
}

/// Metrics from a precomputed query-by-gallery score matrix.
pub fn evaluate_scores(
    scores: &Matrix,
    query_ids: &[u32],
    gallery_ids: &[u32],
    ks: &[usize],
) -> Result<MetricReport> {
    if scores.rows() != query_ids.len() || scores.cols() != gallery_ids.len() {
        return Err(shape_err(
            "evaluate",
            format!(
                "scores {:?} for {} queries, {} gallery items",
                scores.shape(),
                query_ids.len(),
                gallery_ids.len()
            ),
        ));
    }
    if ks.contains(&0) {
        return Err(Error::InvalidArgument(
            "rank cutoff must be at least 1".into(),
        ));
    }
    check_identities(query_ids, gallery_ids)?;

    let results = per_query(scores, query_ids, gallery_ids);
    let n = results.len() as f64;
    let longest = ks
        .iter()
        .copied()
        .chain(DEFAULT_CUTOFFS)
        .max()
        .unwrap_or(10);
    let mut hits_at = vec![0usize; longest];
    for &(first, _) in &results {
        for h in hits_at.iter_mut().skip(first) {
            *h += 1;
        }
    }
    let cmc: Vec<f64> = hits_at.iter().map(|&h| h as f64 / n * 100.0).collect();
    let map = results.iter().map(|&(_, ap)| ap).sum::<f64>() / n * 100.0;
    let (rank1, rank5, rank10) = (cmc[0], cmc[4], cmc[9]);
    Ok(MetricReport {
        rank1,
        rank5,
        rank10,
        map,
        rsum: rank1 + rank5 + rank10,
        num_queries: query_ids.len(),
        gallery_size: gallery_ids.len(),
        cutoffs: ks
            .iter()
            .map(|&k| RankAt {
                k,
                rank: cmc[k - 1],
            })
            .collect(),
        cmc,
    })
}

/// Ranks the gallery for every query and scores the result.
pub fn evaluate(task: &RetrievalTask, ks: &[usize]) -> Result<MetricReport> {
    check_identities(&task.query_ids, &task.gallery_ids)?;
    evaluate_scores(&task.similarity()?, &task.query_ids, &task.gallery_ids, ks)
}
