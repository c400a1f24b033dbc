//! Independent reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

use std::collections::{BTreeMap, VecDeque};

use chrono::NaiveDate;
use kgt_core::data::{Fact, Interner, Quadruple, Split, TemporalKG, TimeKind, Vocab};
use kgt_core::event::{lognormal_mixture_logpdf, InterEventClock, LossWeights, MixtureComponents};
use kgt_core::kgt::KgtLayer;
use kgt_core::model::{ModelConfig, TkgModel};
use kgt_core::optim::Parameters;
use kgt_core::temporal::EmbeddingState;
use kgt_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], param: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    if param {
        Tensor::param(data, shape)
    } else {
        Tensor::new(data, shape)
    }
}

pub fn vocab(entities: usize, relations: usize, types: usize) -> Vocab {
    Vocab {
        entities: Interner::from_names((0..entities).map(|i| format!("e{i}"))),
        relations: Interner::from_names((0..relations).map(|i| format!("r{i}"))),
        entity_types: Interner::from_names((0..types).map(|i| format!("T{i}"))),
        tau: (0..entities).map(|e| e % types).collect(),
    }
}

/// Random facts spread over `buckets` buckets, all in the training split.
pub fn random_kg(
    seed: u64,
    entities: usize,
    relations: usize,
    types: usize,
    buckets: usize,
    per_bucket: usize,
) -> TemporalKG {
    let mut r = rng(seed);
    let mut facts = Vec::new();
    for t in 0..buckets {
        for _ in 0..per_bucket {
            let q = Quadruple::new(
                r.random_range(0..entities),
                r.random_range(0..relations),
                r.random_range(0..entities),
                t,
            );
            facts.push(Fact {
                quad: q,
                raw: t as i64,
                split: Split::Train,
            });
        }
    }
    TemporalKG::from_facts(vocab(entities, relations, types), facts, TimeKind::Integer).unwrap()
}

// ---------------------------------------------------------------- gradients

/// Passes when `|a - n| <= rel * max(|a|, |n|) + abs`.
pub fn close(a: f64, n: f64, rel: f64, abs: f64) -> bool {
    (a - n).abs() <= rel * a.abs().max(n.abs()) + abs
}

/// Replaces one entry of the named parameter.
pub fn set_entry<P: Parameters>(params: &mut P, name: &str, k: usize, value: f64) {
    params.visit_mut(&mut |n, t| {
        if n == name {
            let mut d = t.data().to_vec();
            d[k] = value;
            *t = Tensor::param(d, t.shape());
        }
    });
}

/// Adds seeded uniform noise in `(-scale, scale)` to every parameter entry,
/// moving zero-initialised biases off activation kinks.
pub fn jitter<P: Parameters>(params: &mut P, seed: u64, scale: f64) {
    let mut r = rng(seed);
    params.visit_mut(&mut |_, t| {
        let d = t
            .data()
            .iter()
            .map(|v| v + r.random_range(-scale..scale))
            .collect();
        *t = Tensor::param(d, t.shape());
    });
}

/// Compares analytic gradients with central differences for every parameter
/// entry (or every `stride`-th). Returns `(checked, failures)` where each
/// failure is `(name, index, analytic, numeric)`.
pub fn check_parameter_gradients<P: Parameters>(
    params: &mut P,
    loss: &dyn Fn(&P) -> f64,
    backward: &dyn Fn(&P),
    step: f64,
    stride: usize,
) -> (usize, Vec<(String, usize, f64, f64)>) {
    params.zero_grad();
    backward(params);
    let analytic = params.gradients();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    params.visit(&mut |n, t| {
        values.insert(n.to_string(), t.data().to_vec());
    });
    let mut failures = Vec::new();
    let mut checked = 0;
    let mut counter = 0usize;
    for (name, grad) in &analytic {
        let base = values[name].clone();
        for (k, &a) in grad.iter().enumerate() {
            counter += 1;
            if !counter.is_multiple_of(stride) {
                continue;
            }
            set_entry(params, name, k, base[k] + step);
            let fp = loss(params);
            set_entry(params, name, k, base[k] - step);
            let fm = loss(params);
            set_entry(params, name, k, base[k]);
            let n = (fp - fm) / (2.0 * step);
            checked += 1;
            if !close(a, n, 1e-4, 1e-8) {
                failures.push((name.clone(), k, a, n));
            }
        }
    }
    (checked, failures)
}

/// Sum of per-bucket losses over every bucket with no truncation, each
/// bucket's loss using the state before it.
pub fn full_sequence_loss(model: &TkgModel, kg: &TemporalKG, weights: LossWeights) -> Tensor {
    let mut state = model.initial_state();
    let mut clock = InterEventClock::new(model.num_entities());
    let mut total = Tensor::scalar(0.0);
    for (b, bucket) in kg.buckets.iter().enumerate() {
        let facts = bucket.quads(&[Split::Train]);
        if !facts.is_empty() {
            let l = model
                .loss(&state, &facts, &clock.gaps(&facts, b), weights)
                .unwrap();
            total = total.add(&l.reshape(&[1]));
        }
        state = model.advance(&state, &facts, b, None).unwrap();
        clock.record(&facts, b);
    }
    total
}

// ---------------------------------------------------------------- kgt layer

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    (0..rows)
        .map(|i| (0..cols).map(|j| m.data()[i * cols + j] * v[j]).sum())
        .collect()
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Loop-by-loop KGTransformer layer.
pub fn naive_layer(
    y: &Tensor,
    facts: &[Quadruple],
    types: &[usize],
    layer: &KgtLayer,
    slope: f64,
) -> Vec<Vec<f64>> {
    let n = y.shape()[0];
    let row = |i: usize| y.data()[i * y.shape()[1]..(i + 1) * y.shape()[1]].to_vec();
    let mut out = vec![Vec::new(); n];
    for head in &layer.heads {
        let nt = head.mu.shape()[0];
        let nr = head.mu.shape()[1];
        let dh = head.rel_message[0].shape()[0];
        for o in 0..n {
            let incoming: Vec<&Quadruple> = facts.iter().filter(|q| q.o == o).collect();
            let pre = if incoming.is_empty() {
                matvec(&head.message[types[o]], &row(o))
            } else {
                let q = matvec(&head.query[types[o]], &row(o));
                let logits: Vec<f64> = incoming
                    .iter()
                    .map(|f| {
                        let k = matvec(&head.key[types[f.s]], &row(f.s));
                        let wq = matvec(&head.rel_attention[f.r], &q);
                        let dot: f64 = k.iter().zip(&wq).map(|(a, b)| a * b).sum();
                        let mu = head.mu.data()[(types[f.s] * nr + f.r) * nt + types[o]];
                        dot * mu / (dh as f64).sqrt()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut acc = vec![0.0; dh];
                for (f, e) in incoming.iter().zip(&exps) {
                    let m = matvec(
                        &head.rel_message[f.r],
                        &matvec(&head.message[types[f.s]], &row(f.s)),
                    );
                    for (a, v) in acc.iter_mut().zip(m) {
                        *a += e / z * v;
                    }
                }
                acc
            };
            out[o].extend(pre.into_iter().map(|x| leaky(x, slope)));
        }
    }
    out
}

// ---------------------------------------------------------------- recurrence

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated update with weights stored `2d x d` (input-major).
pub fn naive_gru(
    x: &[f64],
    h: &[f64],
    wz: &Tensor,
    bz: &Tensor,
    wr: &Tensor,
    br: &Tensor,
    wc: &Tensor,
    bc: &Tensor,
) -> Vec<f64> {
    let d = h.len();
    let lin = |w: &Tensor, b: &Tensor, inp: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|j| {
                b.data()[j]
                    + (0..2 * d)
                        .map(|i| inp[i] * w.data()[i * d + j])
                        .sum::<f64>()
            })
            .collect()
    };
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let z: Vec<f64> = lin(wz, bz, &xh).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = lin(wr, br, &xh).into_iter().map(sigmoid).collect();
    let xrh: Vec<f64> = x
        .iter()
        .copied()
        .chain(r.iter().zip(h).map(|(a, b)| a * b))
        .collect();
    let c: Vec<f64> = lin(wc, bc, &xrh).into_iter().map(f64::tanh).collect();
    (0..d).map(|j| (1.0 - z[j]) * h[j] + z[j] * c[j]).collect()
}

// ---------------------------------------------------------------- ranking

/// Position of `truth` after sorting by descending score with the truth
/// placed after every candidate it ties with.
pub fn sort_rank(scores: &[f64], truth: usize) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| (a == truth).cmp(&(b == truth)))
    });
    idx.iter().position(|&i| i == truth).unwrap() + 1
}

pub fn naive_metrics(ranks: &[usize]) -> (f64, f64, f64) {
    let mut mrr = 0.0;
    let mut h3 = 0.0;
    let mut h10 = 0.0;
    for &r in ranks {
        mrr += 1.0 / r as f64;
        if r <= 3 {
            h3 += 1.0;
        }
        if r <= 10 {
            h10 += 1.0;
        }
    }
    let n = ranks.len() as f64;
    (mrr / n, h3 / n, h10 / n)
}

// ---------------------------------------------------------------- centrality

pub fn dense_adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for &(s, o) in edges {
        a[s][o] += 1.0;
    }
    a
}

pub fn brute_degree(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    (0..n)
        .map(|v| {
            let d = edges.iter().filter(|e| e.0 == v).count()
                + edges.iter().filter(|e| e.1 == v).count();
            if n < 2 {
                0.0
            } else {
                d as f64 / (2.0 * (n - 1) as f64)
            }
        })
        .collect()
}

/// Betweenness by enumerating every shortest path of every ordered pair.
pub fn brute_betweenness(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let mut adj = vec![vec![false; n]; n];
    for &(s, o) in edges {
        if s != o {
            adj[s][o] = true;
        }
    }
    let mut cb = vec![0.0; n];
    if n < 3 {
        return cb;
    }
    for s in 0..n {
        let mut dist = vec![usize::MAX; n];
        dist[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            for w in 0..n {
                if adj[v][w] && dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    q.push_back(w);
                }
            }
        }
        for t in 0..n {
            if t == s || dist[t] == usize::MAX {
                continue;
            }
            let mut paths: Vec<Vec<usize>> = Vec::new();
            let mut stack = vec![vec![s]];
            while let Some(p) = stack.pop() {
                let last = *p.last().unwrap();
                if last == t {
                    paths.push(p);
                    continue;
                }
                if p.len() > dist[t] {
                    continue;
                }
                for w in 0..n {
                    if adj[last][w] && !p.contains(&w) {
                        let mut np = p.clone();
                        np.push(w);
                        stack.push(np);
                    }
                }
            }
            let shortest: Vec<&Vec<usize>> =
                paths.iter().filter(|p| p.len() == dist[t] + 1).collect();
            let total = shortest.len() as f64;
            for v in 0..n {
                if v == s || v == t {
                    continue;
                }
                let through = shortest.iter().filter(|p| p.contains(&v)).count() as f64;
                cb[v] += through / total;
            }
        }
    }
    let norm = ((n - 1) * (n - 2)) as f64;
    cb.into_iter().map(|c| c / norm).collect()
}

/// Limit of power iteration on `A + A^T + I` from the uniform vector: the
/// uniform vector projected onto the eigenspace of the largest eigenvalue of
/// `A + A^T`, from a full symmetric eigen-decomposition.
pub fn spectral_eigenvector(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let a = dense_adjacency(n, edges);
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j] + a[j][i]);
    let eig = m.symmetric_eigen();
    let top = eig.eigenvalues.max();
    let u = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut x = nalgebra::DVector::zeros(n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if top - lambda <= 1e-9 * top.max(1.0) {
            let v = eig.eigenvectors.column(k);
            x += v * v.dot(&u);
        }
    }
    x.normalize().iter().copied().collect()
}

/// Stationary distribution from `(I - d P^T) x = (1 - d) / n`, with dangling
/// rows of `P` replaced by the uniform distribution.
pub fn linear_pagerank(n: usize, edges: &[(usize, usize)], damping: f64) -> Vec<f64> {
    let a = dense_adjacency(n, edges);
    let mut p = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let out: f64 = a[i].iter().sum();
        for j in 0..n {
            p[(i, j)] = if out == 0.0 {
                1.0 / n as f64
            } else {
                a[i][j] / out
            };
        }
    }
    let m = nalgebra::DMatrix::<f64>::identity(n, n) - p.transpose() * damping;
    let b = nalgebra::DVector::<f64>::from_element(n, (1.0 - damping) / n as f64);
    let x = m.lu().solve(&b).unwrap();
    let total = x.sum();
    x.iter().map(|v| v / total).collect()
}

pub fn random_digraph(r: &mut ChaCha8Rng, max_nodes: usize) -> (usize, Vec<(usize, usize)>) {
    let n = r.random_range(1..=max_nodes);
    let m = r.random_range(0..=2 * n * n / 3 + 1);
    let edges = (0..m)
        .map(|_| (r.random_range(0..n), r.random_range(0..n)))
        .collect();
    (n, edges)
}

// ---------------------------------------------------------------- backtest

/// Day-by-day wealth of a buy-and-hold portfolio rebalanced on given days.
///
/// `prices[t][k]` is asset `k` on day `t`; `rebalance[t]` holds target weights.
pub fn spreadsheet_wealth(prices: &[Vec<f64>], rebalance: &BTreeMap<usize, Vec<f64>>) -> Vec<f64> {
    let k = prices[0].len();
    let first = *rebalance.keys().next().unwrap();
    let mut units = vec![0.0; k];
    let mut out = Vec::new();
    let mut wealth = 1.0;
    for t in first..prices.len() {
        if t > first {
            wealth = (0..k).map(|i| units[i] * prices[t][i]).sum();
        }
        if let Some(w) = rebalance.get(&t) {
            for i in 0..k {
                units[i] = wealth * w[i] / prices[t][i];
            }
        }
        out.push(wealth);
    }
    out
}

pub fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

// ---------------------------------------------------------------- tensor ops

type OpFn = Box<dyn Fn(&[Tensor]) -> Tensor>;

// Weighted sum so every output entry receives a distinct upstream gradient.
fn weighted(t: &Tensor) -> Tensor {
    let w: Vec<f64> = (0..t.numel()).map(|k| 0.3 + 0.17 * k as f64).collect();
    t.mul(&Tensor::new(w, t.shape())).sum()
}

fn positive(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param((0..n).map(|_| r.random_range(0.5..1.5)).collect(), shape)
}

/// Every differentiable tensor operation wrapped as a scalar function of
/// freshly drawn inputs.
pub fn op_cases(seed: u64) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let mut r = rng(seed);
    let mut a = || random_tensor(&mut r, &[3, 4], true);
    let (a0, a1, a2, a3, a4, a5, a6, a7) = (a(), a(), a(), a(), a(), a(), a(), a());
    let mut r = rng(seed + 10_000);
    let pos = positive(&mut r, &[3, 4]);
    let groups: Vec<usize> = (0..3).map(|_| r.random_range(0..2)).collect();
    let w0 = random_tensor(&mut r, &[2, 4], true);
    let w1 = random_tensor(&mut r, &[2, 4], true);
    vec![
        (
            "add",
            Box::new(|t: &[Tensor]| weighted(&t[0].add(&t[1]))),
            vec![a0.clone(), a1.clone()],
        ),
        (
            "sub",
            Box::new(|t: &[Tensor]| weighted(&t[0].sub(&t[1]))),
            vec![a0.clone(), a1.clone()],
        ),
        (
            "mul",
            Box::new(|t: &[Tensor]| weighted(&t[0].mul(&t[1]))),
            vec![a2.clone(), a3.clone()],
        ),
        (
            "div",
            Box::new(|t: &[Tensor]| weighted(&t[0].div(&t[1]))),
            vec![a4.clone(), pos.clone()],
        ),
        (
            "scale",
            Box::new(|t: &[Tensor]| weighted(&t[0].scale(-1.7))),
            vec![a5.clone()],
        ),
        (
            "neg",
            Box::new(|t: &[Tensor]| weighted(&t[0].neg())),
            vec![a5.clone()],
        ),
        (
            "add_scalar",
            Box::new(|t: &[Tensor]| weighted(&t[0].add_scalar(0.4))),
            vec![a6.clone()],
        ),
        (
            "square",
            Box::new(|t: &[Tensor]| weighted(&t[0].square())),
            vec![a6.clone()],
        ),
        (
            "transpose",
            Box::new(|t: &[Tensor]| weighted(&t[0].transpose())),
            vec![a7.clone()],
        ),
        (
            "matmul",
            Box::new(|t: &[Tensor]| weighted(&t[0].matmul(&t[1].transpose()))),
            vec![a0.clone(), a2.clone()],
        ),
        (
            "leaky_relu",
            Box::new(|t: &[Tensor]| weighted(&t[0].leaky_relu(0.01))),
            vec![a1.clone()],
        ),
        (
            "sigmoid",
            Box::new(|t: &[Tensor]| weighted(&t[0].sigmoid())),
            vec![a2.clone()],
        ),
        (
            "tanh",
            Box::new(|t: &[Tensor]| weighted(&t[0].tanh())),
            vec![a3.clone()],
        ),
        (
            "softplus",
            Box::new(|t: &[Tensor]| weighted(&t[0].softplus())),
            vec![a4.clone()],
        ),
        (
            "exp",
            Box::new(|t: &[Tensor]| weighted(&t[0].exp())),
            vec![a5.clone()],
        ),
        (
            "ln",
            Box::new(|t: &[Tensor]| weighted(&t[0].ln())),
            vec![pos.clone()],
        ),
        (
            "mean_rows",
            Box::new(|t: &[Tensor]| weighted(&t[0].mean_rows())),
            vec![a6.clone()],
        ),
        (
            "reshape",
            Box::new(|t: &[Tensor]| weighted(&t[0].reshape(&[4, 3]))),
            vec![a7.clone()],
        ),
        (
            "add_bias",
            Box::new(|t: &[Tensor]| weighted(&t[0].add_bias(&t[1].gather_rows(&[1])))),
            vec![a0.clone(), a1.clone()],
        ),
        (
            "scale_rows",
            Box::new(|t: &[Tensor]| weighted(&t[0].scale_rows(&t[1].slice_cols(2, 3)))),
            vec![a2.clone(), a3.clone()],
        ),
        (
            "row_dot",
            Box::new(|t: &[Tensor]| weighted(&t[0].row_dot(&t[1]))),
            vec![a4.clone(), a5.clone()],
        ),
        (
            "gather_rows",
            Box::new(|t: &[Tensor]| weighted(&t[0].gather_rows(&[2, 0, 2, 1]))),
            vec![a6.clone()],
        ),
        (
            "scatter_add_rows",
            Box::new(|t: &[Tensor]| weighted(&t[0].scatter_add_rows(&[1, 1, 3], 5))),
            vec![a7.clone()],
        ),
        (
            "overwrite_rows",
            Box::new(|t: &[Tensor]| {
                weighted(&t[0].overwrite_rows(&[2, 0], &t[1].gather_rows(&[1, 2])))
            }),
            vec![a0.clone(), a3.clone()],
        ),
        (
            "select_rows",
            Box::new(|t: &[Tensor]| weighted(&t[0].select_rows(&t[1], &[true, false, true]))),
            vec![a1.clone(), a4.clone()],
        ),
        (
            "concat_cols",
            Box::new(|t: &[Tensor]| {
                weighted(&Tensor::concat_cols(&[t[0].clone(), t[1].slice_cols(1, 3)]))
            }),
            vec![a2.clone(), a5.clone()],
        ),
        (
            "concat_rows",
            Box::new(|t: &[Tensor]| {
                weighted(&Tensor::concat_rows(&[
                    t[0].clone(),
                    t[1].gather_rows(&[0]),
                ]))
            }),
            vec![a3.clone(), a6.clone()],
        ),
        (
            "slice_cols",
            Box::new(|t: &[Tensor]| weighted(&t[0].slice_cols(1, 3))),
            vec![a4.clone()],
        ),
        (
            "segment_softmax",
            Box::new(|t: &[Tensor]| {
                weighted(
                    &t[0]
                        .reshape(&[12, 1])
                        .segment_softmax(&[0, 1, 0, 2, 2, 1, 0, 3, 2, 1, 0, 2], 4),
                )
            }),
            vec![a5.clone()],
        ),
        (
            "log_softmax_rows",
            Box::new(|t: &[Tensor]| weighted(&t[0].log_softmax_rows())),
            vec![a6.clone()],
        ),
        (
            "log_sum_exp_rows",
            Box::new(|t: &[Tensor]| weighted(&t[0].log_sum_exp_rows())),
            vec![a7.clone()],
        ),
        (
            "pick",
            Box::new(|t: &[Tensor]| weighted(&t[0].pick(&[3, 0, 1]))),
            vec![a0.clone()],
        ),
        (
            "gather_elems",
            Box::new(|t: &[Tensor]| weighted(&t[0].gather_elems(&[11, 0, 5, 5]))),
            vec![a1.clone()],
        ),
        (
            "max_rows",
            Box::new(|t: &[Tensor]| weighted(&t[0].max_rows(&[0, 2]))),
            vec![a2.clone()],
        ),
        (
            "sum",
            Box::new(|t: &[Tensor]| t[0].sum().scale(1.3)),
            vec![a3.clone()],
        ),
        (
            "grouped_linear",
            Box::new(move |t: &[Tensor]| {
                weighted(&t[0].grouped_linear(&[t[1].clone(), t[2].clone()], &groups))
            }),
            vec![a4, w0, w1],
        ),
    ]
}

/// Central-difference check of one operation with respect to every input.
/// Returns `(checked, failures)`.
pub fn check_op(f: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[Tensor], step: f64) -> (usize, usize) {
    let inputs: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.data().to_vec(), t.shape()))
        .collect();
    f(&inputs).backward();
    let mut checked = 0;
    let mut failures = 0;
    for (w, t) in inputs.iter().enumerate() {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        for (k, a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut d = t.data().to_vec();
                d[k] += delta;
                let mut args = inputs.clone();
                args[w] = Tensor::new(d, t.shape());
                f(&args).item()
            };
            let n = (eval(step) - eval(-step)) / (2.0 * step);
            checked += 1;
            if !close(*a, n, 1e-4, 1e-8) {
                failures += 1;
            }
        }
    }
    (checked, failures)
}

// ---------------------------------------------------------------- node types

/// Copy of a single-type stack expanded to `types` entity types, with every
/// type-specific projection tied to the original and `mu` set to ones.
pub fn tie_types(stack: &kgt_core::kgt::KgtStack, types: usize) -> kgt_core::kgt::KgtStack {
    let mut tied = stack.clone();
    tied.num_types = types;
    let nr = stack.num_relations;
    for layer in &mut tied.layers {
        for head in &mut layer.heads {
            for list in [&mut head.key, &mut head.query, &mut head.message] {
                *list = vec![list[0].clone(); types];
            }
            head.mu = Tensor::param(vec![1.0; types * nr * types], &[types, nr, types]);
        }
    }
    tied
}

/// The type-free model with its stacks re-expressed over `types` tied types
/// and the given type assignment.
pub fn tied_type_model(untyped: &TkgModel, tau: &[usize], types: usize) -> TkgModel {
    let mut m = untyped.clone();
    m.types = tau.to_vec();
    m.num_types = types;
    m.temporal = tie_types(&untyped.temporal, types);
    m.structural = tie_types(&untyped.structural, types);
    m
}

/// Bitwise equality of two tensors' shapes and values.
pub fn bitwise_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------- configs

/// A compact training setup for fast tests.
pub fn quick_train(
    dim: usize,
    heads: usize,
    layers: usize,
    epochs: usize,
    lr: f64,
) -> kgt_core::train::TrainConfig {
    kgt_core::train::TrainConfig {
        learning_rate: lr,
        max_epochs: epochs,
        seeds: vec![0],
        model: kgt_core::model::ModelConfig {
            dim,
            heads,
            layers,
            mixture_components: 2,
            ..kgt_core::model::ModelConfig::default()
        },
        ..kgt_core::train::TrainConfig::default()
    }
}

// ---------------------------------------------------------------- fixtures

/// Split sizes and vocabulary sizes for a generated quintuple dataset.
#[derive(Debug, Clone, Copy)]
pub struct FixtureCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub entities: usize,
    pub relations: usize,
    pub types: usize,
}

/// Writes `train.txt`, `valid.txt` and `test.txt` as
/// `s \t s_type \t r \t o \t o_type \t date` rows in time order, using every
/// entity, relation and type at least once.
pub fn write_quintuple_fixture(dir: &std::path::Path, c: FixtureCounts, seed: u64) {
    assert!(c.entities >= c.types && c.train >= c.entities.max(c.relations));
    let mut r = rng(seed);
    let total = c.train + c.valid + c.test;
    let kind = |e: usize| e % c.types;
    let start = ymd(2018, 1, 1);
    let mut lines: Vec<String> = (0..total)
        .map(|i| {
            let (s, rel) = if i < c.entities.max(c.relations) {
                (i % c.entities, i % c.relations)
            } else {
                (
                    r.random_range(0..c.entities),
                    r.random_range(0..c.relations),
                )
            };
            let o = r.random_range(0..c.entities);
            let date = start + chrono::Duration::days((i * 1000 / total) as i64);
            format!(
                "ent{s}\tT{}\trel{rel}\tent{o}\tT{}\t{date}T00:00:00",
                kind(s),
                kind(o)
            )
        })
        .collect();
    let test = lines.split_off(c.train + c.valid);
    let valid = lines.split_off(c.train);
    for (name, rows) in [
        ("train.txt", lines),
        ("valid.txt", valid),
        ("test.txt", test),
    ] {
        std::fs::write(dir.join(name), rows.join("\n") + "\n").unwrap();
    }
}

/// Writes a planted market as quintuple fact files (everything in
/// `train.txt`), `prices.csv` and `map.tsv` under `dir`.
pub fn write_market_files(dir: &std::path::Path, m: &kgt_core::synth::PlantedMarket) {
    let v = &m.kg.vocab;
    let ty = |e: usize| v.entity_types.name(v.tau[e]);
    let facts: String =
        m.kg.all_facts()
            .map(|f| {
                let q = f.quad;
                format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    v.entities.name(q.s),
                    ty(q.s),
                    v.relations.name(q.r),
                    v.entities.name(q.o),
                    ty(q.o),
                    kgt_core::data::raw_to_date(f.raw)
                )
            })
            .collect();
    std::fs::write(dir.join("train.txt"), facts).unwrap();
    std::fs::write(dir.join("valid.txt"), "").unwrap();
    std::fs::write(dir.join("test.txt"), "").unwrap();

    let mut prices = String::from("date,ticker,adj_close\n");
    for day in m.prices.calendar() {
        for t in m.prices.tickers() {
            if let Some(p) = m.prices.price_on(t, day) {
                prices += &format!("{day},{t},{p}\n");
            }
        }
    }
    std::fs::write(dir.join("prices.csv"), prices).unwrap();
    let map: String = m
        .tickers
        .iter()
        .map(|(&e, t)| format!("{}\t{t}\n", v.entities.name(e)))
        .collect();
    std::fs::write(dir.join("map.tsv"), map).unwrap();
}

// ---------------------------------------------------------------- toys

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        layers: 2,
        mixture_components: 2,
        ..ModelConfig::default()
    }
}

/// Five entities, two relations, two types; three facts per bucket.
pub fn toy_kg(buckets: usize) -> TemporalKG {
    let rows = [
        (0, 0, 1),
        (2, 1, 3),
        (4, 0, 0),
        (1, 1, 2),
        (3, 0, 4),
        (0, 1, 2),
        (2, 0, 1),
        (4, 1, 3),
        (1, 0, 0),
    ];
    let facts = (0..buckets)
        .flat_map(|t| {
            rows.iter()
                .skip(t)
                .step_by(2)
                .take(3)
                .map(move |&(s, r, o)| Fact {
                    quad: Quadruple::new(s, r, o, t),
                    raw: t as i64,
                    split: Split::Train,
                })
        })
        .collect();
    TemporalKG::from_facts(vocab(5, 2, 2), facts, TimeKind::Integer).unwrap()
}

/// State after folding in every bucket of `kg`.
pub fn advanced_state(model: &TkgModel, kg: &TemporalKG) -> EmbeddingState {
    let mut state = model.initial_state();
    for (t, b) in kg.buckets.iter().enumerate() {
        state = model
            .advance(&state, &b.quads(&Split::ALL), t, None)
            .unwrap();
    }
    state
}

/// `int p(d) dd` on `d = e^x`, trapezoid rule.
pub fn integrate_mixture(c: &MixtureComponents) -> f64 {
    let lo = c
        .means
        .iter()
        .zip(&c.sigmas)
        .map(|(m, s)| m - 12.0 * s)
        .fold(f64::INFINITY, f64::min);
    let hi = c
        .means
        .iter()
        .zip(&c.sigmas)
        .map(|(m, s)| m + 12.0 * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let steps = 200_000;
    let h = (hi - lo) / steps as f64;
    (0..=steps)
        .map(|i| {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            w * (lognormal_mixture_logpdf(x.exp(), c).unwrap() + x).exp()
        })
        .sum::<f64>()
        * h
}
