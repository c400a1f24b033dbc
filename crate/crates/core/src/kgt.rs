//! KGTransformer layers: type-aware multi-head attention over one snapshot.
//!
//! For an edge `(s, r, o)` and head `h` the attention logit is
//!
//! ```text
//! alpha = (P[tau(s)] y_s)^T  W[r]  (R[tau(o)] y_o) * mu[tau(s), r, tau(o)] / sqrt(d_head)
//! ```
//!
//! softmax-normalised jointly over every incoming edge of `o`, and the message
//! is `Z[r] M[tau(s)] y_s`. Entities without incoming edges fall back to the
//! self-message `M[tau(o)] y_o`. Head outputs go through leaky-ReLU and are
//! concatenated in head order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Quadruple;
use crate::error::{Result, TkgError};
use crate::optim::Parameters;
use crate::rng::{constant_param, uniform_param};
use crate::tensor::{leaky_relu, softmax, Tensor};

/// Trainable weights of one attention head.
#[derive(Debug, Clone)]
pub struct HeadWeights {
    /// Key projections, one `d_head x d_in` matrix per entity type.
    pub key: Vec<Tensor>,
    /// Query projections, one per entity type.
    pub query: Vec<Tensor>,
    /// Message source projections, one per entity type.
    pub message: Vec<Tensor>,
    /// `d_head x d_head` attention weights, one per relation.
    pub rel_attention: Vec<Tensor>,
    /// `d_head x d_head` message weights, one per relation.
    pub rel_message: Vec<Tensor>,
    /// Meta-relation multipliers, shape `[types, relations, types]`.
    pub mu: Tensor,
}

#[derive(Debug, Clone)]
pub struct KgtLayer {
    pub heads: Vec<HeadWeights>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// `L` layers applied in sequence to one snapshot.
#[derive(Debug, Clone)]
pub struct KgtStack {
    pub layers: Vec<KgtLayer>,
    pub slope: f64,
    pub num_types: usize,
    pub num_relations: usize,
}

/// Shape of a stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackShape {
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_types: usize,
    pub num_relations: usize,
    pub slope: f64,
}

impl KgtLayer {
    pub fn head_dim(&self) -> usize {
        self.out_dim / self.heads.len()
    }

    fn new(
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        types: usize,
        relations: usize,
    ) -> Self {
        let dh = out_dim / heads;
        let heads = (0..heads)
            .map(|_| HeadWeights {
                key: (0..types)
                    .map(|_| uniform_param(rng, &[dh, in_dim], in_dim))
                    .collect(),
                query: (0..types)
                    .map(|_| uniform_param(rng, &[dh, in_dim], in_dim))
                    .collect(),
                message: (0..types)
                    .map(|_| uniform_param(rng, &[dh, in_dim], in_dim))
                    .collect(),
                rel_attention: (0..relations)
                    .map(|_| uniform_param(rng, &[dh, dh], dh))
                    .collect(),
                rel_message: (0..relations)
                    .map(|_| uniform_param(rng, &[dh, dh], dh))
                    .collect(),
                mu: constant_param(&[types, relations, types], 1.0),
            })
            .collect();
        KgtLayer {
            heads,
            in_dim,
            out_dim,
        }
    }
}

impl KgtStack {
    /// Random projections scaled by `1/sqrt(fan_in)` and `mu` set to all ones.
    pub fn new(rng: &mut ChaCha8Rng, shape: StackShape) -> Result<Self> {
        if shape.layers == 0 {
            return Err(TkgError::InvalidArgument(
                "a KGTransformer stack needs at least one layer".into(),
            ));
        }
        if shape.heads == 0 || !shape.dim.is_multiple_of(shape.heads) {
            return Err(TkgError::InvalidArgument(format!(
                "{} heads do not evenly divide embedding width {}",
                shape.heads, shape.dim
            )));
        }
        if shape.num_types == 0 || shape.num_relations == 0 {
            return Err(TkgError::InvalidArgument(
                "need at least one entity type and one relation".into(),
            ));
        }
        let layers = (0..shape.layers)
            .map(|l| {
                let din = if l == 0 { shape.input_dim } else { shape.dim };
                KgtLayer::new(
                    rng,
                    din,
                    shape.dim,
                    shape.heads,
                    shape.num_types,
                    shape.num_relations,
                )
            })
            .collect();
        Ok(KgtStack {
            layers,
            slope: shape.slope,
            num_types: shape.num_types,
            num_relations: shape.num_relations,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Runs every layer over the snapshot.
    pub fn forward(
        &self,
        base: &Tensor,
        graph: &SnapshotIndex,
        mut dropout: Option<&mut Dropout>,
    ) -> Tensor {
        let mut y = base.clone();
        for layer in &self.layers {
            y = layer_forward(
                &LayerInput {
                    embeddings: &y,
                    graph,
                },
                layer,
                self.slope,
            );
            if let Some(d) = dropout.as_deref_mut() {
                y = d.apply(&y);
            }
        }
        y
    }
}

impl Parameters for KgtStack {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                visit_head(head, &format!("l{l}.h{h}"), &mut |n, t| f(n, t));
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                let p = format!("l{l}.h{h}");
                for (kind, list) in [
                    ("key", &mut head.key),
                    ("query", &mut head.query),
                    ("message", &mut head.message),
                    ("rel_attention", &mut head.rel_attention),
                    ("rel_message", &mut head.rel_message),
                ] {
                    for (i, t) in list.iter_mut().enumerate() {
                        f(&format!("{p}.{kind}.{i}"), t);
                    }
                }
                f(&format!("{p}.mu"), &mut head.mu);
            }
        }
    }
}

fn visit_head(head: &HeadWeights, p: &str, f: &mut dyn FnMut(&str, &Tensor)) {
    for (kind, list) in [
        ("key", &head.key),
        ("query", &head.query),
        ("message", &head.message),
        ("rel_attention", &head.rel_attention),
        ("rel_message", &head.rel_message),
    ] {
        for (i, t) in list.iter().enumerate() {
            f(&format!("{p}.{kind}.{i}"), t);
        }
    }
    f(&format!("{p}.mu"), &head.mu);
}

/// Inverted dropout applied to layer outputs during training.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn apply(&mut self, x: &Tensor) -> Tensor {
        if self.rate <= 0.0 {
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let mask = (0..x.numel())
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        x.mul(&Tensor::new(mask, x.shape()))
    }
}

/// Edge lists of one snapshot, precomputed for all layers and heads.
#[derive(Debug, Clone)]
pub struct SnapshotIndex {
    pub num_entities: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub rel: Vec<usize>,
    /// Entity type of every entity.
    pub types: Vec<usize>,
    /// Flat index into `mu` for each edge.
    pub mu_index: Vec<usize>,
    pub has_incoming: Vec<bool>,
}

impl SnapshotIndex {
    pub fn new(
        facts: &[Quadruple],
        types: &[usize],
        num_types: usize,
        num_relations: usize,
    ) -> Self {
        let n = types.len();
        let mut has_incoming = vec![false; n];
        let mut idx = SnapshotIndex {
            num_entities: n,
            src: Vec::with_capacity(facts.len()),
            dst: Vec::with_capacity(facts.len()),
            rel: Vec::with_capacity(facts.len()),
            types: types.to_vec(),
            mu_index: Vec::with_capacity(facts.len()),
            has_incoming: Vec::new(),
        };
        for q in facts {
            assert!(
                q.s < n && q.o < n && q.r < num_relations,
                "fact {q:?} out of bounds"
            );
            idx.src.push(q.s);
            idx.dst.push(q.o);
            idx.rel.push(q.r);
            idx.mu_index
                .push((types[q.s] * num_relations + q.r) * num_types + types[q.o]);
            has_incoming[q.o] = true;
        }
        idx.has_incoming = has_incoming;
        idx
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

/// Previous-layer embeddings plus the snapshot they are propagated over.
pub struct LayerInput<'a> {
    pub embeddings: &'a Tensor,
    pub graph: &'a SnapshotIndex,
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = m.dims2();
    assert_eq!(cols, v.len(), "matrix-vector dimension mismatch");
    (0..rows)
        .map(|a| {
            m.data()[a * cols..(a + 1) * cols]
                .iter()
                .zip(v)
                .map(|(x, y)| x * y)
                .sum()
        })
        .collect()
}

/// Attention logit of edge `(s, r, o)` for one head.
pub fn attention_logit(
    s: usize,
    r: usize,
    o: usize,
    head: &HeadWeights,
    input: &LayerInput,
) -> f64 {
    let y = input.embeddings;
    let types = &input.graph.types;
    let k = mat_vec(&head.key[types[s]], y.row(s));
    let q = mat_vec(&head.query[types[o]], y.row(o));
    let wq = mat_vec(&head.rel_attention[r], &q);
    let dot: f64 = k.iter().zip(&wq).map(|(a, b)| a * b).sum();
    let (nt, nr) = (head.mu.shape()[0], head.mu.shape()[1]);
    let mu = head.mu.data()[(types[s] * nr + r) * nt + types[o]];
    dot * mu / (k.len() as f64).sqrt()
}

/// Softmax over the logits of all incoming `(s, r)` pairs of `o`.
pub fn attention_weights(
    o: usize,
    incoming: &[(usize, usize)],
    head: &HeadWeights,
    input: &LayerInput,
) -> Result<Vec<f64>> {
    let logits: Vec<f64> = incoming
        .iter()
        .map(|&(s, r)| attention_logit(s, r, o, head, input))
        .collect();
    softmax(&logits)
}

/// `Z[r] M[tau(s)] y_s`.
pub fn message_vector(s: usize, r: usize, head: &HeadWeights, input: &LayerInput) -> Vec<f64> {
    let m = mat_vec(&head.message[input.graph.types[s]], input.embeddings.row(s));
    mat_vec(&head.rel_message[r], &m)
}

/// One KGTransformer layer over all entities, differentiable end to end.
pub fn layer_forward(input: &LayerInput, layer: &KgtLayer, slope: f64) -> Tensor {
    let y = input.embeddings;
    let g = input.graph;
    assert_eq!(
        y.rows(),
        g.num_entities,
        "embedding rows must equal the entity count"
    );
    assert_eq!(
        y.cols(),
        layer.in_dim,
        "embedding width does not match layer input"
    );
    let scale = 1.0 / (layer.head_dim() as f64).sqrt();
    let outputs: Vec<Tensor> = layer
        .heads
        .iter()
        .map(|head| {
            let own_message = y.grouped_linear(&head.message, &g.types);
            let pre = if g.num_edges() == 0 {
                own_message
            } else {
                let keys = y.grouped_linear(&head.key, &g.types);
                let queries = y.grouped_linear(&head.query, &g.types);
                let ks = keys.gather_rows(&g.src);
                let wq = queries
                    .gather_rows(&g.dst)
                    .grouped_linear(&head.rel_attention, &g.rel);
                let mu = head.mu.gather_elems(&g.mu_index);
                let logits = ks.row_dot(&wq).mul(&mu).scale(scale);
                let att = logits.segment_softmax(&g.dst, g.num_entities);
                let msg = own_message
                    .gather_rows(&g.src)
                    .grouped_linear(&head.rel_message, &g.rel);
                let agg = msg
                    .scale_rows(&att)
                    .scatter_add_rows(&g.dst, g.num_entities);
                agg.select_rows(&own_message, &g.has_incoming)
            };
            pre.leaky_relu(slope)
        })
        .collect();
    if outputs.len() == 1 {
        outputs.into_iter().next().expect("one head")
    } else {
        Tensor::concat_cols(&outputs)
    }
}

/// Scalar reference of [`layer_forward`] for one entity and head, built from
/// [`attention_weights`] and [`message_vector`].
pub fn entity_head_output(
    o: usize,
    head: &HeadWeights,
    input: &LayerInput,
    slope: f64,
) -> Vec<f64> {
    let g = input.graph;
    let incoming: Vec<(usize, usize)> = (0..g.num_edges())
        .filter(|&e| g.dst[e] == o)
        .map(|e| (g.src[e], g.rel[e]))
        .collect();
    let pre = if incoming.is_empty() {
        mat_vec(&head.message[g.types[o]], input.embeddings.row(o))
    } else {
        let w = attention_weights(o, &incoming, head, input).expect("finite logits");
        let mut acc = vec![0.0; head.rel_message[0].rows()];
        for (&(s, r), a) in incoming.iter().zip(&w) {
            for (x, m) in acc.iter_mut().zip(message_vector(s, r, head, input)) {
                *x += a * m;
            }
        }
        acc
    };
    pre.into_iter().map(|x| leaky_relu(x, slope)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn one_dim_head(p: f64, r: f64, w: f64, m: f64, z: f64, mu: f64) -> HeadWeights {
        HeadWeights {
            key: vec![Tensor::param(vec![p], &[1, 1])],
            query: vec![Tensor::param(vec![r], &[1, 1])],
            message: vec![Tensor::param(vec![m], &[1, 1])],
            rel_attention: vec![Tensor::param(vec![w], &[1, 1])],
            rel_message: vec![Tensor::param(vec![z], &[1, 1])],
            mu: Tensor::param(vec![mu], &[1, 1, 1]),
        }
    }

    #[test]
    fn attention_logit_direct_substitution() {
        let y = Tensor::new(vec![2.0, 5.0], &[2, 1]);
        let facts = [Quadruple::new(0, 0, 1, 0)];
        let g = SnapshotIndex::new(&facts, &[0, 0], 1, 1);
        let input = LayerInput {
            embeddings: &y,
            graph: &g,
        };
        let head = one_dim_head(1.0, 1.0, 3.0, 1.0, 1.0, 0.5);
        assert_eq!(attention_logit(0, 0, 1, &head, &input), 15.0);
        let zero_mu = one_dim_head(1.0, 1.0, 3.0, 1.0, 1.0, 0.0);
        assert_eq!(attention_logit(0, 0, 1, &zero_mu, &input), 0.0);
    }

    #[test]
    fn message_vector_examples() {
        let y = Tensor::new(vec![4.0], &[1, 1]);
        let g = SnapshotIndex::new(&[], &[0], 1, 1);
        let input = LayerInput {
            embeddings: &y,
            graph: &g,
        };
        let head = one_dim_head(1.0, 1.0, 1.0, 3.0, 2.0, 1.0);
        assert_eq!(message_vector(0, 0, &head, &input), vec![24.0]);

        let y = Tensor::new(vec![0.5, -1.5, 2.0], &[1, 3]);
        let eye = Tensor::param(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]);
        let head = HeadWeights {
            key: vec![eye.clone()],
            query: vec![eye.clone()],
            message: vec![eye.clone()],
            rel_attention: vec![eye.clone()],
            rel_message: vec![eye.clone()],
            mu: Tensor::param(vec![1.0], &[1, 1, 1]),
        };
        let input = LayerInput {
            embeddings: &y,
            graph: &g,
        };
        assert_eq!(message_vector(0, 0, &head, &input), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn attention_weight_examples() {
        let y = Tensor::new(vec![1.0, 1.0, 1.0], &[3, 1]);
        let facts = [Quadruple::new(0, 0, 2, 0), Quadruple::new(1, 0, 2, 0)];
        let g = SnapshotIndex::new(&facts, &[0, 0, 0], 1, 1);
        let input = LayerInput {
            embeddings: &y,
            graph: &g,
        };
        let head = one_dim_head(1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        assert_eq!(
            attention_weights(2, &[(0, 0)], &head, &input).unwrap(),
            vec![1.0]
        );
        assert_eq!(
            attention_weights(2, &[(0, 0), (1, 0)], &head, &input).unwrap(),
            vec![0.5, 0.5]
        );
        assert!(attention_weights(2, &[], &head, &input).is_err());
    }

    fn shape(
        types: usize,
        relations: usize,
        dim: usize,
        heads: usize,
        layers: usize,
    ) -> StackShape {
        StackShape {
            input_dim: dim,
            dim,
            heads,
            layers,
            num_types: types,
            num_relations: relations,
            slope: 0.01,
        }
    }

    #[test]
    fn single_incoming_edge_passes_message_through() {
        let mut rng = stream(5, 1);
        let stack = KgtStack::new(&mut rng, shape(2, 2, 4, 2, 1)).unwrap();
        let y = uniform_param(&mut rng, &[3, 4], 1);
        let facts = [Quadruple::new(0, 1, 2, 0)];
        let g = SnapshotIndex::new(&facts, &[0, 1, 1], 2, 2);
        let input = LayerInput {
            embeddings: &y,
            graph: &g,
        };
        let out = layer_forward(&input, &stack.layers[0], 0.01);
        for (h, head) in stack.layers[0].heads.iter().enumerate() {
            let msg: Vec<f64> = message_vector(0, 1, head, &input)
                .into_iter()
                .map(|x| leaky_relu(x, 0.01))
                .collect();
            assert_eq!(&out.row(2)[h * 2..h * 2 + 2], msg.as_slice());
        }
    }

    #[test]
    fn empty_snapshot_uses_fallback_everywhere() {
        let mut rng = stream(6, 1);
        let stack = KgtStack::new(&mut rng, shape(2, 1, 4, 2, 1)).unwrap();
        let y = uniform_param(&mut rng, &[5, 4], 1);
        let g = SnapshotIndex::new(&[], &[0, 1, 0, 1, 1], 2, 1);
        let input = LayerInput {
            embeddings: &y,
            graph: &g,
        };
        let out = layer_forward(&input, &stack.layers[0], 0.01);
        assert_eq!(out.shape(), &[5, 4]);
        for o in 0..5 {
            let expect: Vec<f64> = stack.layers[0]
                .heads
                .iter()
                .flat_map(|h| entity_head_output(o, h, &input, 0.01))
                .collect();
            assert_eq!(out.row(o), expect.as_slice());
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = stream(1, 1);
        assert!(KgtStack::new(&mut rng, shape(1, 1, 6, 4, 1)).is_err());
        assert!(KgtStack::new(&mut rng, shape(1, 1, 4, 2, 0)).is_err());
    }

    #[test]
    fn one_layer_stack_is_layer_forward() {
        let mut rng = stream(8, 1);
        let stack = KgtStack::new(&mut rng, shape(2, 2, 4, 2, 1)).unwrap();
        let y = uniform_param(&mut rng, &[4, 4], 1);
        let facts = [
            Quadruple::new(0, 1, 2, 0),
            Quadruple::new(3, 0, 2, 0),
            Quadruple::new(2, 1, 1, 0),
        ];
        let g = SnapshotIndex::new(&facts, &[0, 1, 1, 0], 2, 2);
        let a = stack.forward(&y, &g, None);
        let b = layer_forward(
            &LayerInput {
                embeddings: &y,
                graph: &g,
            },
            &stack.layers[0],
            0.01,
        );
        assert_eq!(a.data(), b.data());
    }
}
