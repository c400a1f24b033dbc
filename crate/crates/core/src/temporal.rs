//! Recurrent temporal and structural embeddings carried across snapshots.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::NamedTensor;
use crate::data::Quadruple;
use crate::error::{Result, TkgError};
use crate::optim::Parameters;
use crate::rng::uniform_param;
use crate::tensor::{sigmoid, Tensor};

/// Gated recurrent cell on row batches.
///
/// Weights are stored input-major (`2d x d`) so a batch `[x, h]` of shape
/// `n x 2d` is multiplied directly:
///
/// ```text
/// z  = sigmoid([x, h] Wz + bz)
/// r  = sigmoid([x, h] Wr + br)
/// h~ = tanh([x, r*h] Wc + bc)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub update: Tensor,
    pub update_bias: Tensor,
    pub reset: Tensor,
    pub reset_bias: Tensor,
    pub candidate: Tensor,
    pub candidate_bias: Tensor,
}

impl GruCell {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        GruCell {
            update: uniform_param(rng, &[2 * dim, dim], 2 * dim),
            update_bias: Tensor::param(vec![0.0; dim], &[1, dim]),
            reset: uniform_param(rng, &[2 * dim, dim], 2 * dim),
            reset_bias: Tensor::param(vec![0.0; dim], &[1, dim]),
            candidate: uniform_param(rng, &[2 * dim, dim], 2 * dim),
            candidate_bias: Tensor::param(vec![0.0; dim], &[1, dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.update.cols()
    }

    /// One step for a batch of rows.
    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Tensor {
        assert_eq!(
            x.shape(),
            h.shape(),
            "recurrence input and hidden state differ in shape"
        );
        assert_eq!(x.cols(), self.dim(), "recurrence width mismatch");
        let xh = Tensor::concat_cols(&[x.clone(), h.clone()]);
        let z = xh
            .matmul(&self.update)
            .add_bias(&self.update_bias)
            .sigmoid();
        let r = xh.matmul(&self.reset).add_bias(&self.reset_bias).sigmoid();
        let xrh = Tensor::concat_cols(&[x.clone(), r.mul(h)]);
        let cand = xrh
            .matmul(&self.candidate)
            .add_bias(&self.candidate_bias)
            .tanh();
        // h + z * (h~ - h)
        h.add(&z.mul(&cand.sub(h)))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.update"), &self.update);
        f(&format!("{prefix}.update_bias"), &self.update_bias);
        f(&format!("{prefix}.reset"), &self.reset);
        f(&format!("{prefix}.reset_bias"), &self.reset_bias);
        f(&format!("{prefix}.candidate"), &self.candidate);
        f(&format!("{prefix}.candidate_bias"), &self.candidate_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.update"), &mut self.update);
        f(&format!("{prefix}.update_bias"), &mut self.update_bias);
        f(&format!("{prefix}.reset"), &mut self.reset);
        f(&format!("{prefix}.reset_bias"), &mut self.reset_bias);
        f(&format!("{prefix}.candidate"), &mut self.candidate);
        f(
            &format!("{prefix}.candidate_bias"),
            &mut self.candidate_bias,
        );
    }
}

/// Single-vector recurrence step evaluated with plain arithmetic.
pub fn recurrence_step(x: &[f64], h_prev: &[f64], cell: &GruCell) -> Result<Vec<f64>> {
    let d = cell.dim();
    if x.len() != d || h_prev.len() != d {
        return Err(TkgError::Contract(format!(
            "recurrence expects width {d}, got input {} and hidden {}",
            x.len(),
            h_prev.len()
        )));
    }
    let affine = |w: &Tensor, b: &Tensor, left: &[f64], right: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|j| {
                let mut acc = 0.0;
                for (i, v) in left.iter().chain(right).enumerate() {
                    acc += v * w.data()[i * d + j];
                }
                acc + b.data()[j]
            })
            .collect()
    };
    let z: Vec<f64> = affine(&cell.update, &cell.update_bias, x, h_prev)
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = affine(&cell.reset, &cell.reset_bias, x, h_prev)
        .into_iter()
        .map(sigmoid)
        .collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    let cand: Vec<f64> = affine(&cell.candidate, &cell.candidate_bias, x, &rh)
        .into_iter()
        .map(f64::tanh)
        .collect();
    Ok((0..d)
        .map(|j| h_prev[j] + z[j] * (cand[j] - h_prev[j]))
        .collect())
}

/// The four recurrences: entity/relation x temporal/structural.
#[derive(Debug, Clone)]
pub struct RecurrenceParams {
    pub entity_temporal: GruCell,
    pub relation_temporal: GruCell,
    pub entity_structural: GruCell,
    pub relation_structural: GruCell,
}

impl RecurrenceParams {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        RecurrenceParams {
            entity_temporal: GruCell::new(rng, dim),
            relation_temporal: GruCell::new(rng, dim),
            entity_structural: GruCell::new(rng, dim),
            relation_structural: GruCell::new(rng, dim),
        }
    }
}

impl Parameters for RecurrenceParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.entity_temporal.visit("entity_temporal", f);
        self.relation_temporal.visit("relation_temporal", f);
        self.entity_structural.visit("entity_structural", f);
        self.relation_structural.visit("relation_structural", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.entity_temporal.visit_mut("entity_temporal", f);
        self.relation_temporal.visit_mut("relation_temporal", f);
        self.entity_structural.visit_mut("entity_structural", f);
        self.relation_structural.visit_mut("relation_structural", f);
    }
}

/// Embeddings after the snapshot at bucket `t`.
#[derive(Debug, Clone)]
pub struct EmbeddingState {
    /// Temporal entity embeddings, `|E| x d`.
    pub v: Tensor,
    /// Temporal relation embeddings, `|R| x d`.
    pub v_rel: Tensor,
    /// Structural entity embeddings, `|E| x d`.
    pub u: Tensor,
    /// Structural relation embeddings, `|R| x d`.
    pub u_rel: Tensor,
    /// Global conditioning vector, `1 x d`.
    pub g: Tensor,
    /// Last bucket folded in; `None` for the initial state.
    pub t: Option<usize>,
}

impl EmbeddingState {
    /// All-zero state before any snapshot.
    pub fn initial(num_entities: usize, num_relations: usize, dim: usize) -> Self {
        EmbeddingState {
            v: Tensor::zeros(&[num_entities, dim]),
            v_rel: Tensor::zeros(&[num_relations, dim]),
            u: Tensor::zeros(&[num_entities, dim]),
            u_rel: Tensor::zeros(&[num_relations, dim]),
            g: Tensor::zeros(&[1, dim]),
            t: None,
        }
    }

    /// Same values, no gradient history.
    pub fn detach(&self) -> Self {
        EmbeddingState {
            v: self.v.detach(),
            v_rel: self.v_rel.detach(),
            u: self.u.detach(),
            u_rel: self.u_rel.detach(),
            g: self.g.detach(),
            t: self.t,
        }
    }

    pub fn dim(&self) -> usize {
        self.v.cols()
    }

    pub fn is_finite(&self) -> bool {
        [&self.v, &self.v_rel, &self.u, &self.u_rel, &self.g]
            .iter()
            .all(|t| t.is_finite())
    }

    /// Checkpoint entries named `state.<bucket>.<part>`; the initial state uses `init`.
    pub fn to_entries(&self) -> Vec<NamedTensor> {
        let key = self.t.map_or_else(|| "init".to_string(), |t| t.to_string());
        [
            ("v", &self.v),
            ("v_rel", &self.v_rel),
            ("u", &self.u),
            ("u_rel", &self.u_rel),
            ("g", &self.g),
        ]
        .into_iter()
        .map(|(part, t)| NamedTensor::from_tensor(format!("state.{key}.{part}"), t))
        .collect()
    }

    /// Reads back the state stored for `bucket` by [`EmbeddingState::to_entries`].
    pub fn from_entries(entries: &[NamedTensor], bucket: Option<usize>) -> Result<Self> {
        let key = bucket.map_or_else(|| "init".to_string(), |t| t.to_string());
        let part = |name: &str| {
            let full = format!("state.{key}.{name}");
            entries
                .iter()
                .find(|e| e.name == full)
                .map(|e| Tensor::new(e.data.clone(), &e.shape))
                .ok_or_else(|| TkgError::Validation(format!("no '{full}' entry")))
        };
        Ok(EmbeddingState {
            v: part("v")?,
            v_rel: part("v_rel")?,
            u: part("u")?,
            u_rel: part("u_rel")?,
            g: part("g")?,
            t: bucket,
        })
    }
}

/// Entities taking part in `facts` as subject or object, ascending.
pub fn participants(facts: &[Quadruple]) -> Vec<usize> {
    facts
        .iter()
        .flat_map(|q| [q.s, q.o])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Mean of the rows of the distinct entities appearing in `facts`, as `1 x d`.
pub fn pool_relation(embeddings: &Tensor, facts: &[Quadruple]) -> Tensor {
    let ents = participants(facts);
    assert!(!ents.is_empty(), "pool_relation needs at least one fact");
    embeddings.gather_rows(&ents).mean_rows()
}

/// Element-wise maximum over the active rows; zeros when nothing is active.
pub fn global_embedding(u: &Tensor, active: &[usize]) -> Tensor {
    if active.is_empty() {
        return Tensor::zeros(&[1, u.cols()]);
    }
    u.max_rows(active)
}

/// Folds one snapshot's layer outputs into the recurrent state.
///
/// `y` feeds the temporal track and `x` the structural track. Only entities
/// taking part in `facts` and relations occurring in `facts` change.
pub fn update_state(
    state: &EmbeddingState,
    y: &Tensor,
    x: &Tensor,
    facts: &[Quadruple],
    bucket: usize,
    params: &RecurrenceParams,
) -> Result<EmbeddingState> {
    if let Some(prev) = state.t {
        if bucket != prev + 1 {
            return Err(TkgError::Contract(format!(
                "state is at bucket {prev}, cannot advance to bucket {bucket}"
            )));
        }
    }
    if y.shape() != state.v.shape() || x.shape() != state.u.shape() {
        return Err(TkgError::Contract(format!(
            "layer outputs {:?}/{:?} do not match state {:?}",
            y.shape(),
            x.shape(),
            state.v.shape()
        )));
    }
    let active = participants(facts);
    if active.is_empty() {
        return Ok(EmbeddingState {
            t: Some(bucket),
            ..state.clone()
        });
    }
    let v_new = params
        .entity_temporal
        .forward(&y.gather_rows(&active), &state.v.gather_rows(&active));
    let v = state.v.overwrite_rows(&active, &v_new);
    let u_new = params
        .entity_structural
        .forward(&x.gather_rows(&active), &state.u.gather_rows(&active));
    let u = state.u.overwrite_rows(&active, &u_new);

    let relations: Vec<usize> = facts
        .iter()
        .map(|q| q.r)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let by_relation: Vec<Vec<Quadruple>> = relations
        .iter()
        .map(|&r| facts.iter().copied().filter(|q| q.r == r).collect())
        .collect();
    let pooled_v = Tensor::concat_rows(
        &by_relation
            .iter()
            .map(|f| pool_relation(&v, f))
            .collect::<Vec<_>>(),
    );
    let pooled_u = Tensor::concat_rows(
        &by_relation
            .iter()
            .map(|f| pool_relation(&u, f))
            .collect::<Vec<_>>(),
    );
    let v_rel_new = params
        .relation_temporal
        .forward(&pooled_v, &state.v_rel.gather_rows(&relations));
    let u_rel_new = params
        .relation_structural
        .forward(&pooled_u, &state.u_rel.gather_rows(&relations));

    Ok(EmbeddingState {
        g: global_embedding(&u, &active),
        v,
        v_rel: state.v_rel.overwrite_rows(&relations, &v_rel_new),
        u,
        u_rel: state.u_rel.overwrite_rows(&relations, &u_rel_new),
        t: Some(bucket),
    })
}
