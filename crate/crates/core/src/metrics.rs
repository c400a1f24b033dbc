//! Ranking and link-prediction metrics.

use serde::Serialize;

use crate::error::{Result, TkgError};

/// Rank of `truth` among `scores`, higher is better, ties counted against it.
///
/// `rank = 1 + #{score > s_true} + #{j != truth : score == s_true}`.
pub fn pessimistic_rank(scores: &[f64], truth: usize) -> Result<usize> {
    let Some(&target) = scores.get(truth) else {
        return Err(TkgError::InvalidArgument(format!(
            "true index {truth} outside {} candidates",
            scores.len()
        )));
    };
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TkgError::InvalidArgument("scores contain NaN".into()));
    }
    let worse_or_tied = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j != truth))
        .count();
    Ok(1 + worse_or_tied)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits3: f64,
    pub hits10: f64,
}

pub fn aggregate_metrics(ranks: &[usize]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(TkgError::InvalidArgument(
            "cannot aggregate an empty rank list".into(),
        ));
    }
    if ranks.contains(&0) {
        return Err(TkgError::InvalidArgument("ranks start at 1".into()));
    }
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(Metrics {
        mrr,
        hits3: hits(3),
        hits10: hits(10),
    })
}

/// Element-wise mean of several metric triples.
pub fn average_metrics(all: &[Metrics]) -> Result<Metrics> {
    if all.is_empty() {
        return Err(TkgError::InvalidArgument("no metrics to average".into()));
    }
    let n = all.len() as f64;
    Ok(Metrics {
        mrr: all.iter().map(|m| m.mrr).sum::<f64>() / n,
        hits3: all.iter().map(|m| m.hits3).sum::<f64>() / n,
        hits10: all.iter().map(|m| m.hits10).sum::<f64>() / n,
    })
}

/// Expected reciprocal rank when the truth lands uniformly among `n` candidates.
pub fn uniform_mrr(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64
}
