//! Event probabilities: six categorical heads for the two triplet
//! decompositions, a log-normal mixture over inter-event gaps, and the
//! composite training loss.

use rand_chacha::ChaCha8Rng;

use crate::data::Quadruple;
use crate::error::{Result, TkgError};
use crate::optim::Parameters;
use crate::rng::uniform_param;
use crate::temporal::EmbeddingState;
use crate::tensor::{log_sum_exp, Tensor};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Feed-forward network with leaky-ReLU hidden layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    /// `(weight [in, out], bias [1, out])` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
    pub slope: f64,
}

impl Mlp {
    pub fn new(
        rng: &mut ChaCha8Rng,
        input: usize,
        hidden: usize,
        output: usize,
        depth: usize,
        slope: f64,
    ) -> Self {
        assert!(depth >= 1, "an MLP needs at least one hidden layer");
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(hidden, depth));
        dims.push(output);
        let layers = dims
            .windows(2)
            .map(|w| {
                (
                    uniform_param(rng, &[w[0], w[1]], w[0]),
                    Tensor::param(vec![0.0; w[1]], &[1, w[1]]),
                )
            })
            .collect();
        Mlp { layers, slope }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").0.cols()
    }

    /// Maps each row of `x` (`n x in`) to `n x out`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w).add_bias(b);
            if i < last {
                h = h.leaky_relu(self.slope);
            }
        }
        h
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            f(&format!("{prefix}.w{i}"), w);
            f(&format!("{prefix}.b{i}"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            f(&format!("{prefix}.w{i}"), w);
            f(&format!("{prefix}.b{i}"), b);
        }
    }
}

/// Which categorical distribution to evaluate, with its conditioning ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Query {
    /// `p(o | G)`
    Object,
    /// `p(r | o, G)`
    RelationGivenObject { o: usize },
    /// `p(s | r, o, G)`
    SubjectGivenRelationObject { r: usize, o: usize },
    /// `p(s | G)`
    Subject,
    /// `p(r | s, G)`
    RelationGivenSubject { s: usize },
    /// `p(o | r, s, G)`
    ObjectGivenSubjectRelation { s: usize, r: usize },
}

/// Order in which a triplet probability is factorised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decomposition {
    /// `p(o) p(r|o) p(s|r,o)`
    ObjectFirst,
    /// `p(s) p(r|s) p(o|r,s)`
    SubjectFirst,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) || !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(TkgError::InvalidArgument(format!(
                "loss weights must be finite and non-negative, got {lambda1} and {lambda2}"
            )));
        }
        Ok(LossWeights { lambda1, lambda2 })
    }
}

/// Parameters of a log-normal mixture for one event.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponents {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
}

/// `log sum_m w_m LN(delta; mu_m, sigma_m)`.
pub fn lognormal_mixture_logpdf(delta: f64, comps: &MixtureComponents) -> Result<f64> {
    if delta <= 0.0 || !delta.is_finite() {
        return Err(TkgError::InvalidArgument(format!(
            "event gap must be positive, got {delta}"
        )));
    }
    let ln_t = delta.ln();
    let terms: Vec<f64> = comps
        .weights
        .iter()
        .zip(&comps.means)
        .zip(&comps.sigmas)
        .map(|((w, mu), sigma)| {
            let z = (ln_t - mu) / sigma;
            w.ln() - 0.5 * z * z - ln_t - sigma.ln() - LN_SQRT_2PI
        })
        .collect();
    Ok(log_sum_exp(&terms))
}

/// Categorical heads plus the gap-density network.
#[derive(Debug, Clone)]
pub struct EventModel {
    pub object_prior: Mlp,
    pub relation_given_object: Mlp,
    pub subject_given_relation_object: Mlp,
    pub subject_prior: Mlp,
    pub relation_given_subject: Mlp,
    pub object_given_subject_relation: Mlp,
    pub mixture: Mlp,
    pub components: usize,
    pub sigma_floor: f64,
    num_entities: usize,
    num_relations: usize,
}

/// Shape of an [`EventModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventShape {
    pub dim: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub components: usize,
    pub depth: usize,
    pub slope: f64,
    pub sigma_floor: f64,
}

impl EventModel {
    pub fn new(rng: &mut ChaCha8Rng, shape: EventShape) -> Result<Self> {
        if shape.components == 0 {
            return Err(TkgError::InvalidArgument(
                "mixture needs at least one component".into(),
            ));
        }
        if shape.depth == 0 {
            return Err(TkgError::InvalidArgument(
                "MLP depth must be at least 1".into(),
            ));
        }
        if shape.sigma_floor < 0.0 {
            return Err(TkgError::InvalidArgument(
                "sigma floor must be non-negative".into(),
            ));
        }
        let d = shape.dim;
        let (ne, nr) = (shape.num_entities, shape.num_relations);
        let mut mlp =
            |input: usize, out: usize| Mlp::new(rng, input, d, out, shape.depth, shape.slope);
        Ok(EventModel {
            object_prior: mlp(d, ne),
            relation_given_object: mlp(2 * d, nr),
            subject_given_relation_object: mlp(3 * d, ne),
            subject_prior: mlp(d, ne),
            relation_given_subject: mlp(2 * d, nr),
            object_given_subject_relation: mlp(3 * d, ne),
            mixture: mlp(4 * d, 3 * shape.components),
            components: shape.components,
            sigma_floor: shape.sigma_floor,
            num_entities: ne,
            num_relations: nr,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    fn check_entity(&self, e: usize) -> Result<()> {
        if e >= self.num_entities {
            return Err(TkgError::Contract(format!(
                "entity id {e} out of range ({} entities)",
                self.num_entities
            )));
        }
        Ok(())
    }

    fn check_relation(&self, r: usize) -> Result<()> {
        if r >= self.num_relations {
            return Err(TkgError::Contract(format!(
                "relation id {r} out of range ({} relations)",
                self.num_relations
            )));
        }
        Ok(())
    }

    fn check_state(&self, state: &EmbeddingState) -> Result<()> {
        if state.u.rows() != self.num_entities || state.u_rel.rows() != self.num_relations {
            return Err(TkgError::Contract(format!(
                "state covers {} entities and {} relations, heads expect {} and {}",
                state.u.rows(),
                state.u_rel.rows(),
                self.num_entities,
                self.num_relations
            )));
        }
        Ok(())
    }

    /// Pre-softmax logits of one head as a `1 x K` tensor.
    pub fn structural_logits(&self, state: &EmbeddingState, query: Query) -> Result<Tensor> {
        self.check_state(state)?;
        match query {
            Query::Object | Query::Subject => {}
            Query::RelationGivenObject { o: e } | Query::RelationGivenSubject { s: e } => {
                self.check_entity(e)?
            }
            Query::SubjectGivenRelationObject { r, o: e }
            | Query::ObjectGivenSubjectRelation { s: e, r } => {
                self.check_entity(e)?;
                self.check_relation(r)?;
            }
        }
        let g = &state.g;
        Ok(match query {
            Query::Object => self.object_prior.forward(g),
            Query::Subject => self.subject_prior.forward(g),
            Query::RelationGivenObject { o } => {
                self.relation_given_object.forward(&Tensor::concat_cols(&[
                    state.u.gather_rows(&[o]),
                    g.clone(),
                ]))
            }
            Query::RelationGivenSubject { s } => {
                self.relation_given_subject.forward(&Tensor::concat_cols(&[
                    state.u.gather_rows(&[s]),
                    g.clone(),
                ]))
            }
            Query::SubjectGivenRelationObject { r, o } => self
                .subject_given_relation_object
                .forward(&Tensor::concat_cols(&[
                    state.u_rel.gather_rows(&[r]),
                    state.u.gather_rows(&[o]),
                    g.clone(),
                ])),
            Query::ObjectGivenSubjectRelation { s, r } => self
                .object_given_subject_relation
                .forward(&Tensor::concat_cols(&[
                    state.u_rel.gather_rows(&[r]),
                    state.u.gather_rows(&[s]),
                    g.clone(),
                ])),
        })
    }

    /// `log p(s, r, o | G)` under one decomposition.
    pub fn triplet_log_prob(
        &self,
        s: usize,
        r: usize,
        o: usize,
        state: &EmbeddingState,
        order: Decomposition,
    ) -> Result<f64> {
        let fact = [Quadruple::new(s, r, o, 0)];
        for &e in &[s, o] {
            self.check_entity(e)?;
        }
        self.check_relation(r)?;
        self.check_state(state)?;
        Ok(self.fact_log_probs(state, &fact, order).item())
    }

    /// Per-fact `log p(s, r, o | G)` as an `n x 1` tensor.
    pub fn fact_log_probs(
        &self,
        state: &EmbeddingState,
        facts: &[Quadruple],
        order: Decomposition,
    ) -> Tensor {
        let n = facts.len();
        let g = state.g.gather_rows(&vec![0; n]);
        let s: Vec<usize> = facts.iter().map(|q| q.s).collect();
        let r: Vec<usize> = facts.iter().map(|q| q.r).collect();
        let o: Vec<usize> = facts.iter().map(|q| q.o).collect();
        let rel = state.u_rel.gather_rows(&r);
        let (first, first_ids, second, third, third_ids, anchor) = match order {
            Decomposition::ObjectFirst => (
                &self.object_prior,
                &o,
                &self.relation_given_object,
                &self.subject_given_relation_object,
                &s,
                state.u.gather_rows(&o),
            ),
            Decomposition::SubjectFirst => (
                &self.subject_prior,
                &s,
                &self.relation_given_subject,
                &self.object_given_subject_relation,
                &o,
                state.u.gather_rows(&s),
            ),
        };
        let a = first.forward(&g).log_softmax_rows().pick(first_ids);
        let b = second
            .forward(&Tensor::concat_cols(&[anchor.clone(), g.clone()]))
            .log_softmax_rows()
            .pick(&r);
        let c = third
            .forward(&Tensor::concat_cols(&[rel, anchor, g]))
            .log_softmax_rows()
            .pick(third_ids);
        a.add(&b).add(&c)
    }

    /// Object logits `p(o | r, s, G)` for each `(s, r)` query, `n x |E|`.
    pub fn object_logits(&self, state: &EmbeddingState, queries: &[(usize, usize)]) -> Tensor {
        let s: Vec<usize> = queries.iter().map(|q| q.0).collect();
        let r: Vec<usize> = queries.iter().map(|q| q.1).collect();
        let g = state.g.gather_rows(&vec![0; queries.len()]);
        self.object_given_subject_relation
            .forward(&Tensor::concat_cols(&[
                state.u_rel.gather_rows(&r),
                state.u.gather_rows(&s),
                g,
            ]))
    }

    /// Subject logits `p(s | r, o, G)` for each `(r, o)` query, `n x |E|`.
    pub fn subject_logits(&self, state: &EmbeddingState, queries: &[(usize, usize)]) -> Tensor {
        let r: Vec<usize> = queries.iter().map(|q| q.0).collect();
        let o: Vec<usize> = queries.iter().map(|q| q.1).collect();
        let g = state.g.gather_rows(&vec![0; queries.len()]);
        self.subject_given_relation_object
            .forward(&Tensor::concat_cols(&[
                state.u_rel.gather_rows(&r),
                state.u.gather_rows(&o),
                g,
            ]))
    }

    /// Raw mixture outputs split into `(log weights, means, sigmas)`, each `n x M`.
    fn mixture_tensors(
        &self,
        state: &EmbeddingState,
        facts: &[Quadruple],
    ) -> (Tensor, Tensor, Tensor) {
        let m = self.components;
        let s: Vec<usize> = facts.iter().map(|q| q.s).collect();
        let r: Vec<usize> = facts.iter().map(|q| q.r).collect();
        let o: Vec<usize> = facts.iter().map(|q| q.o).collect();
        let x = Tensor::concat_cols(&[
            state.v.gather_rows(&s),
            state.v_rel.gather_rows(&r),
            state.v.gather_rows(&o),
            state.g.gather_rows(&vec![0; facts.len()]),
        ]);
        let raw = self.mixture.forward(&x);
        let log_w = raw.slice_cols(0, m).log_softmax_rows();
        let means = raw.slice_cols(m, 2 * m);
        let sigmas = raw
            .slice_cols(2 * m, 3 * m)
            .softplus()
            .add_scalar(self.sigma_floor);
        (log_w, means, sigmas)
    }

    /// Mixture parameters for a single event.
    pub fn mixture_components(
        &self,
        state: &EmbeddingState,
        s: usize,
        r: usize,
        o: usize,
    ) -> Result<MixtureComponents> {
        self.check_entity(s)?;
        self.check_entity(o)?;
        self.check_relation(r)?;
        self.check_state(state)?;
        let (log_w, means, sigmas) = self.mixture_tensors(state, &[Quadruple::new(s, r, o, 0)]);
        Ok(MixtureComponents {
            weights: log_w.data().iter().map(|v| v.exp()).collect(),
            means: means.data().to_vec(),
            sigmas: sigmas.data().to_vec(),
        })
    }

    /// Per-fact gap log-density as `n x 1`.
    pub fn gap_log_density(
        &self,
        state: &EmbeddingState,
        facts: &[Quadruple],
        gaps: &[f64],
    ) -> Result<Tensor> {
        if let Some(bad) = gaps.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(TkgError::InvalidArgument(format!(
                "event gap must be positive, got {bad}"
            )));
        }
        let m = self.components;
        let (log_w, means, sigmas) = self.mixture_tensors(state, facts);
        let ln_t: Vec<f64> = gaps
            .iter()
            .flat_map(|d| std::iter::repeat_n(d.ln(), m))
            .collect();
        let ln_t = Tensor::new(ln_t, &[facts.len(), m]);
        let z = ln_t.sub(&means).div(&sigmas);
        let terms = log_w
            .sub(&z.square().scale(0.5))
            .sub(&ln_t)
            .sub(&sigmas.ln())
            .add_scalar(-LN_SQRT_2PI);
        Ok(terms.log_sum_exp_rows())
    }

    /// Negative weighted log-likelihood of the facts of one bucket.
    ///
    /// `state` must summarise every bucket before the facts' bucket and
    /// `gaps[i]` is the inter-event gap of `facts[i]`.
    pub fn composite_loss(
        &self,
        state: &EmbeddingState,
        facts: &[Quadruple],
        gaps: &[f64],
        weights: LossWeights,
    ) -> Result<Tensor> {
        if gaps.len() != facts.len() {
            return Err(TkgError::Contract(format!(
                "{} gaps supplied for {} facts",
                gaps.len(),
                facts.len()
            )));
        }
        self.check_state(state)?;
        for q in facts {
            self.check_entity(q.s)?;
            self.check_entity(q.o)?;
            self.check_relation(q.r)?;
        }
        let mut total: Option<Tensor> = None;
        let mut push = |t: Tensor| {
            total = Some(match total.take() {
                Some(acc) => acc.add(&t),
                None => t,
            })
        };
        if !facts.is_empty() && weights.lambda1 > 0.0 {
            push(
                self.gap_log_density(state, facts, gaps)?
                    .sum()
                    .scale(-weights.lambda1),
            );
        }
        if !facts.is_empty() && weights.lambda2 > 0.0 {
            let both = self
                .fact_log_probs(state, facts, Decomposition::ObjectFirst)
                .add(&self.fact_log_probs(state, facts, Decomposition::SubjectFirst));
            push(both.sum().scale(-weights.lambda2));
        }
        Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
    }
}

impl Parameters for EventModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.object_prior.visit("object_prior", f);
        self.relation_given_object.visit("relation_given_object", f);
        self.subject_given_relation_object
            .visit("subject_given_relation_object", f);
        self.subject_prior.visit("subject_prior", f);
        self.relation_given_subject
            .visit("relation_given_subject", f);
        self.object_given_subject_relation
            .visit("object_given_subject_relation", f);
        self.mixture.visit("mixture", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.object_prior.visit_mut("object_prior", f);
        self.relation_given_object
            .visit_mut("relation_given_object", f);
        self.subject_given_relation_object
            .visit_mut("subject_given_relation_object", f);
        self.subject_prior.visit_mut("subject_prior", f);
        self.relation_given_subject
            .visit_mut("relation_given_subject", f);
        self.object_given_subject_relation
            .visit_mut("object_given_subject_relation", f);
        self.mixture.visit_mut("mixture", f);
    }
}

/// Tracks the last bucket each entity took part in, for inter-event gaps.
#[derive(Debug, Clone)]
pub struct InterEventClock {
    last: Vec<Option<usize>>,
}

impl InterEventClock {
    pub const MIN_GAP: f64 = 1e-6;

    pub fn new(num_entities: usize) -> Self {
        InterEventClock {
            last: vec![None; num_entities],
        }
    }

    /// Gap for an event of `subject` at `bucket`; 1 on first occurrence.
    pub fn gap(&self, subject: usize, bucket: usize) -> f64 {
        match self.last[subject] {
            None => 1.0,
            Some(prev) => (bucket as f64 - prev as f64).max(Self::MIN_GAP),
        }
    }

    pub fn gaps(&self, facts: &[Quadruple], bucket: usize) -> Vec<f64> {
        facts.iter().map(|q| self.gap(q.s, bucket)).collect()
    }

    /// Marks every participant of `facts` as seen at `bucket`.
    pub fn record(&mut self, facts: &[Quadruple], bucket: usize) {
        for q in facts {
            self.last[q.s] = Some(bucket);
            self.last[q.o] = Some(bucket);
        }
    }
}
