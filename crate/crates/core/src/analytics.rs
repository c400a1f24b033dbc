//! Weekly rolling snapshot graphs, centrality measures and z-scored trends.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{date_to_raw, raw_to_date, TemporalKG, TimeKind};
use crate::error::{Result, TkgError};

pub const DEFAULT_WINDOW_DAYS: i64 = 30;
pub const ZSCORE_WINDOW_DAYS: i64 = 365;
pub const PAGERANK_DAMPING: f64 = 0.85;
pub const PAGERANK_TOLERANCE: f64 = 1e-10;
pub const PAGERANK_MAX_ITERATIONS: usize = 10_000;
pub const EIGENVECTOR_TOLERANCE: f64 = 1e-8;
pub const EIGENVECTOR_MAX_ITERATIONS: usize = 1000;

/// Directed multigraph of the facts in a trailing window ending at `as_of`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotGraph {
    pub as_of: NaiveDate,
    pub window_days: i64,
    pub num_vertices: usize,
    /// `(source, target)` per fact; repeated pairs are kept.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Degree,
    Betweenness,
    Eigenvector,
    PageRank,
}

impl Measure {
    pub const ALL: [Measure; 4] = [
        Measure::Degree,
        Measure::Betweenness,
        Measure::Eigenvector,
        Measure::PageRank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Degree => "degree",
            Measure::Betweenness => "betweenness",
            Measure::Eigenvector => "eigenvector",
            Measure::PageRank => "pagerank",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = TkgError;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                TkgError::InvalidArgument(format!(
                    "unknown measure '{s}' (expected degree, betweenness, eigenvector or pagerank)"
                ))
            })
    }
}

fn next_sunday(d: NaiveDate) -> NaiveDate {
    d + Duration::days(((7 - d.weekday().num_days_from_sunday()) % 7) as i64)
}

fn previous_sunday(d: NaiveDate) -> NaiveDate {
    d - Duration::days(d.weekday().num_days_from_sunday() as i64)
}

/// One graph per Sunday whose window can contain a fact.
///
/// Sundays run from the first on or after the earliest fact to the last on or
/// before `latest + window - 1`. Each graph holds the facts with
/// `as_of - window < date <= as_of`.
pub fn build_snapshots(kg: &TemporalKG, window_days: i64) -> Result<Vec<SnapshotGraph>> {
    if kg.time_kind != TimeKind::Date {
        return Err(TkgError::InvalidArgument(
            "snapshot graphs need dated facts".into(),
        ));
    }
    if window_days < 1 {
        return Err(TkgError::InvalidArgument(format!(
            "window must be at least one day, got {window_days}"
        )));
    }
    let mut dated: Vec<(i64, usize, usize)> = kg
        .all_facts()
        .map(|f| (f.raw, f.quad.s, f.quad.o))
        .collect();
    if dated.is_empty() {
        return Ok(Vec::new());
    }
    dated.sort_unstable();
    let first = next_sunday(raw_to_date(dated[0].0));
    let last = previous_sunday(raw_to_date(dated[dated.len() - 1].0 + window_days - 1));
    let mut out = Vec::new();
    let mut sunday = first;
    while sunday <= last {
        let hi = date_to_raw(sunday);
        let lo = hi - window_days;
        let start = dated.partition_point(|f| f.0 <= lo);
        let end = dated.partition_point(|f| f.0 <= hi);
        out.push(SnapshotGraph {
            as_of: sunday,
            window_days,
            num_vertices: kg.vocab.num_entities(),
            edges: dated[start..end].iter().map(|&(_, s, o)| (s, o)).collect(),
        });
        sunday += Duration::days(7);
    }
    Ok(out)
}

/// `(in + out) / (2 (n - 1))`, counting parallel edges.
pub fn degree_centrality(g: &SnapshotGraph) -> Vec<f64> {
    let n = g.num_vertices;
    let mut deg = vec![0usize; n];
    for &(s, o) in &g.edges {
        deg[s] += 1;
        deg[o] += 1;
    }
    if n < 2 {
        return vec![0.0; n];
    }
    let denom = 2.0 * (n - 1) as f64;
    deg.into_iter().map(|d| d as f64 / denom).collect()
}

/// Sorted, de-duplicated out-neighbour lists without self loops.
fn simple_adjacency(g: &SnapshotGraph) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); g.num_vertices];
    for &(s, o) in &g.edges {
        if s != o {
            adj[s].push(o);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Brandes' algorithm on the simple directed projection, normalised by `(n-1)(n-2)`.
pub fn betweenness_centrality(g: &SnapshotGraph) -> Vec<f64> {
    let n = g.num_vertices;
    let mut cb = vec![0.0; n];
    if n < 3 {
        return cb;
    }
    let adj = simple_adjacency(g);
    let mut sigma = vec![0.0f64; n];
    let mut dist = vec![-1i64; n];
    let mut delta = vec![0.0f64; n];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut order = Vec::new();
    let mut queue = VecDeque::new();
    for s in (0..n).filter(|&s| !adj[s].is_empty()) {
        order.clear();
        sigma[s] = 1.0;
        dist[s] = 0;
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &w in &adj[v] {
                if dist[w] < 0 {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        for &w in order.iter().rev() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                cb[w] += delta[w];
            }
        }
        for &v in &order {
            sigma[v] = 0.0;
            dist[v] = -1;
            delta[v] = 0.0;
            preds[v].clear();
        }
    }
    let norm = ((n - 1) * (n - 2)) as f64;
    cb.iter_mut().for_each(|c| *c /= norm);
    cb
}

/// Edge multiplicities as `(source, target, weight)`, sorted.
fn weighted_edges(g: &SnapshotGraph) -> Vec<(usize, usize, f64)> {
    let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &e in &g.edges {
        *counts.entry(e).or_insert(0.0) += 1.0;
    }
    counts.into_iter().map(|((s, o), w)| (s, o, w)).collect()
}

/// Power iteration on `A + A^T + I` restricted to one connected component.
///
/// Returns the L2-normalised vector over `members` and the Rayleigh
/// quotient of `A + A^T` at it.
fn component_eigenpair(
    members: &[usize],
    edges: &[(usize, usize, f64)],
    local: &[usize],
) -> Result<(Vec<f64>, f64)> {
    let n = members.len();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let apply = |x: &[f64]| {
        let mut y = vec![0.0; n];
        for &(s, o, w) in edges {
            let (s, o) = (local[s], local[o]);
            y[s] += w * x[o];
            y[o] += w * x[s];
        }
        y
    };
    for _ in 0..EIGENVECTOR_MAX_ITERATIONS {
        let mut y = apply(&x);
        y.iter_mut().zip(&x).for_each(|(a, b)| *a += b);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        y.iter_mut().for_each(|v| *v /= norm);
        let change = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = y;
        if change < EIGENVECTOR_TOLERANCE {
            let lambda = apply(&x).iter().zip(&x).map(|(a, b)| a * b).sum();
            return Ok((x, lambda));
        }
    }
    Err(TkgError::NonConvergence {
        measure: "eigenvector",
        iterations: EIGENVECTOR_MAX_ITERATIONS,
    })
}

/// Principal eigenvector of `A + A^T`, where `A` holds edge multiplicities.
///
/// `A + A^T` is block diagonal over weakly connected components, so power
/// iteration runs on `A + A^T + I` per component from the uniform vector,
/// each converged when the max-norm change drops below the tolerance. The
/// result is the limit of the same iteration on the whole graph: components
/// whose top eigenvalue ties the largest keep their share of the uniform
/// start, every other component is zero. L2-normalised and non-negative.
pub fn eigenvector_centrality(g: &SnapshotGraph) -> Result<Vec<f64>> {
    let n = g.num_vertices;
    if n == 0 {
        return Ok(Vec::new());
    }
    let edges = weighted_edges(g);
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    for &(s, o, _) in &edges {
        let (a, b) = (root(&mut parent, s), root(&mut parent, o));
        parent[a.max(b)] = a.min(b);
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in 0..n {
        let r = root(&mut parent, v);
        components.entry(r).or_default().push(v);
    }
    let mut local = vec![0; n];
    let mut component_edges: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for members in components.values() {
        for (i, &v) in members.iter().enumerate() {
            local[v] = i;
        }
    }
    for &e in &edges {
        let r = root(&mut parent, e.0);
        component_edges.entry(r).or_default().push(e);
    }
    let pairs = components
        .iter()
        .map(|(r, members)| {
            let es = component_edges.get(r).map_or(&[][..], Vec::as_slice);
            component_eigenpair(members, es, &local)
        })
        .collect::<Result<Vec<_>>>()?;
    let top = pairs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let tied = |lambda: f64| top - lambda <= 1e-9 * top.max(1.0);
    let mut x = vec![0.0; n];
    for (members, (v, lambda)) in components.values().zip(&pairs) {
        if tied(*lambda) {
            // weight of this block in the uniform start vector
            let share: f64 = v.iter().sum();
            for (&m, &c) in members.iter().zip(v) {
                x[m] = share * c;
            }
        }
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= norm);
    Ok(x)
}

/// PageRank over multiplicity-weighted edges with uniform teleport and
/// uniform redistribution of dangling mass.
pub fn pagerank(g: &SnapshotGraph) -> Result<Vec<f64>> {
    pagerank_damped(g, PAGERANK_DAMPING)
}

pub fn pagerank_damped(g: &SnapshotGraph, damping: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&damping) {
        return Err(TkgError::InvalidArgument(format!(
            "damping must lie in [0, 1), got {damping}"
        )));
    }
    let n = g.num_vertices;
    if n == 0 {
        return Ok(Vec::new());
    }
    let edges = weighted_edges(g);
    let mut out_weight = vec![0.0; n];
    for &(s, _, w) in &edges {
        out_weight[s] += w;
    }
    let nf = n as f64;
    let mut x = vec![1.0 / nf; n];
    for _ in 0..PAGERANK_MAX_ITERATIONS {
        let dangling: f64 = (0..n).filter(|&i| out_weight[i] == 0.0).map(|i| x[i]).sum();
        let base = (1.0 - damping) / nf + damping * dangling / nf;
        let mut y = vec![base; n];
        for &(s, o, w) in &edges {
            y[o] += damping * w / out_weight[s] * x[s];
        }
        let total: f64 = y.iter().sum();
        y.iter_mut().for_each(|v| *v /= total);
        let change: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
        x = y;
        if change < PAGERANK_TOLERANCE {
            return Ok(x);
        }
    }
    Err(TkgError::NonConvergence {
        measure: "pagerank",
        iterations: PAGERANK_MAX_ITERATIONS,
    })
}

pub fn centrality(g: &SnapshotGraph, measure: Measure) -> Result<Vec<f64>> {
    centrality_with(g, measure, PAGERANK_DAMPING)
}

/// As [`centrality`], with an explicit PageRank damping factor.
pub fn centrality_with(g: &SnapshotGraph, measure: Measure, damping: f64) -> Result<Vec<f64>> {
    if g.num_vertices == 0 {
        return Err(TkgError::InvalidArgument(
            "centrality of an empty vertex set".into(),
        ));
    }
    match measure {
        Measure::Degree => Ok(degree_centrality(g)),
        Measure::Betweenness => Ok(betweenness_centrality(g)),
        Measure::Eigenvector => eigenvector_centrality(g),
        Measure::PageRank => pagerank_damped(g, damping),
    }
}

/// Z-score of each point against the points dated within the trailing window
/// `(date - window, date]`, using the sample standard deviation. Fewer than two
/// points or a vanishing deviation give 0.
pub fn rolling_zscore(series: &[(NaiveDate, f64)], window_days: i64) -> Vec<(NaiveDate, f64)> {
    let mut start = 0;
    series
        .iter()
        .enumerate()
        .map(|(i, &(date, x))| {
            while series[start].0 <= date - Duration::days(window_days) {
                start += 1;
            }
            let w = &series[start..=i];
            let n = w.len() as f64;
            if w.len() < 2 {
                return (date, 0.0);
            }
            let mean = w.iter().map(|p| p.1).sum::<f64>() / n;
            let var = w.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            if sd <= 1e-12 * mean.abs().max(1.0) {
                (date, 0.0)
            } else {
                (date, (x - mean) / sd)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub date: NaiveDate,
    pub raw: f64,
    pub zscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CentralitySeries {
    pub entity: usize,
    pub measure: Measure,
    pub points: Vec<SeriesPoint>,
}

/// Centrality of `entity` on every snapshot plus its rolling z-score.
pub fn centrality_series(
    snapshots: &[SnapshotGraph],
    entity: usize,
    measure: Measure,
    zscore_window_days: i64,
    damping: f64,
) -> Result<CentralitySeries> {
    if let Some(g) = snapshots.first() {
        if entity >= g.num_vertices {
            return Err(TkgError::InvalidArgument(format!(
                "entity id {entity} out of range"
            )));
        }
    }
    let raw: Vec<(NaiveDate, f64)> = snapshots
        .par_iter()
        .map(|g| centrality_with(g, measure, damping).map(|c| (g.as_of, c[entity])))
        .collect::<Result<_>>()?;
    let z = rolling_zscore(&raw, zscore_window_days);
    Ok(CentralitySeries {
        entity,
        measure,
        points: raw
            .iter()
            .zip(z)
            .map(|(&(date, raw), (_, zscore))| SeriesPoint { date, raw, zscore })
            .collect(),
    })
}
