//! Full model: base embedding tables, two KGTransformer stacks, the
//! recurrences and the event heads.

use std::path::Path;

use crate::checkpoint::{self, NamedTensor};
use crate::data::{Quadruple, Vocab};
use crate::error::{Result, TkgError};
use crate::event::{EventModel, EventShape, LossWeights};
use crate::kgt::{Dropout, KgtStack, SnapshotIndex, StackShape};
use crate::optim::Parameters;
use crate::rng::{normal_param, stream, streams};
use crate::temporal::{update_state, EmbeddingState, RecurrenceParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mixture_components: usize,
    pub mlp_depth: usize,
    pub slope: f64,
    pub dropout: f64,
    /// When false every entity shares a single type.
    pub node_types: bool,
    pub sigma_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 200,
            heads: 4,
            layers: 2,
            mixture_components: 3,
            mlp_depth: 1,
            slope: 0.01,
            dropout: 0.0,
            node_types: true,
            sigma_floor: 1e-2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.heads == 0
            || self.layers == 0
            || self.mixture_components == 0
            || self.mlp_depth == 0
        {
            return Err(TkgError::InvalidArgument(
                "dim, heads, layers, mixture components and MLP depth must all be positive".into(),
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(TkgError::InvalidArgument(format!(
                "{} heads do not evenly divide embedding width {}",
                self.heads, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TkgError::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.slope.is_nan() || self.slope <= 0.0 || self.slope >= 1.0 {
            return Err(TkgError::InvalidArgument(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.slope
            )));
        }
        if self.sigma_floor.is_nan() || self.sigma_floor < 0.0 {
            return Err(TkgError::InvalidArgument(
                "sigma floor must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// FNV-1a over every vocabulary name, used to match checkpoints to datasets.
pub fn vocab_fingerprint(vocab: &Vocab) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (tag, names) in [
        (b'E', vocab.entities.names()),
        (b'R', vocab.relations.names()),
    ] {
        for n in names {
            feed(&[tag]);
            feed(n.as_bytes());
            feed(&[0]);
        }
    }
    h
}

#[derive(Debug, Clone)]
pub struct TkgModel {
    pub config: ModelConfig,
    pub types: Vec<usize>,
    pub num_types: usize,
    pub base_temporal: Tensor,
    pub base_structural: Tensor,
    pub temporal: KgtStack,
    pub structural: KgtStack,
    pub recurrence: RecurrenceParams,
    pub events: EventModel,
    fingerprint: u64,
}

impl TkgModel {
    pub fn new(vocab: &Vocab, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = vocab.num_entities();
        let r = vocab.num_relations();
        if n == 0 || r == 0 {
            return Err(TkgError::InvalidArgument(
                "vocabulary needs at least one entity and one relation".into(),
            ));
        }
        let (types, num_types) = if config.node_types {
            (vocab.tau.clone(), vocab.num_types().max(1))
        } else {
            (vec![0; n], 1)
        };
        let d = config.dim;
        let mut rng = stream(seed, streams::INIT);
        let stack_shape = StackShape {
            input_dim: d,
            dim: d,
            heads: config.heads,
            layers: config.layers,
            num_types,
            num_relations: r,
            slope: config.slope,
        };
        let base_temporal = normal_param(&mut rng, &[n, d], 0.02);
        let base_structural = normal_param(&mut rng, &[n, d], 0.02);
        let temporal = KgtStack::new(&mut rng, stack_shape)?;
        let structural = KgtStack::new(&mut rng, stack_shape)?;
        let recurrence = RecurrenceParams::new(&mut rng, d);
        let events = EventModel::new(
            &mut rng,
            EventShape {
                dim: d,
                num_entities: n,
                num_relations: r,
                components: config.mixture_components,
                depth: config.mlp_depth,
                slope: config.slope,
                sigma_floor: config.sigma_floor,
            },
        )?;
        Ok(TkgModel {
            config,
            types,
            num_types,
            base_temporal,
            base_structural,
            temporal,
            structural,
            recurrence,
            events,
            fingerprint: vocab_fingerprint(vocab),
        })
    }

    pub fn num_entities(&self) -> usize {
        self.types.len()
    }

    pub fn num_relations(&self) -> usize {
        self.events.num_relations()
    }

    pub fn initial_state(&self) -> EmbeddingState {
        EmbeddingState::initial(self.num_entities(), self.num_relations(), self.config.dim)
    }

    pub fn snapshot_index(&self, facts: &[Quadruple]) -> SnapshotIndex {
        SnapshotIndex::new(facts, &self.types, self.num_types, self.num_relations())
    }

    /// Runs both stacks over the snapshot and folds the result into `state`.
    pub fn advance(
        &self,
        state: &EmbeddingState,
        facts: &[Quadruple],
        bucket: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<EmbeddingState> {
        if facts.is_empty() {
            return update_state(state, &state.v, &state.u, facts, bucket, &self.recurrence);
        }
        let graph = self.snapshot_index(facts);
        let y = self
            .temporal
            .forward(&self.base_temporal, &graph, dropout.as_deref_mut());
        let x = self
            .structural
            .forward(&self.base_structural, &graph, dropout);
        update_state(state, &y, &x, facts, bucket, &self.recurrence)
    }

    pub fn loss(
        &self,
        state: &EmbeddingState,
        facts: &[Quadruple],
        gaps: &[f64],
        weights: LossWeights,
    ) -> Result<Tensor> {
        self.events.composite_loss(state, facts, gaps, weights)
    }

    fn meta(&self) -> Vec<NamedTensor> {
        let c = &self.config;
        let values = vec![
            self.num_entities() as f64,
            self.num_relations() as f64,
            self.num_types as f64,
            c.dim as f64,
            c.heads as f64,
            c.layers as f64,
            c.mixture_components as f64,
            c.mlp_depth as f64,
            if c.node_types { 1.0 } else { 0.0 },
            c.slope,
            c.dropout,
            c.sigma_floor,
        ];
        let fp = vec![
            (self.fingerprint >> 32) as f64,
            (self.fingerprint & 0xffff_ffff) as f64,
        ];
        vec![
            NamedTensor::new("meta.model", vec![values.len()], values),
            NamedTensor::new("meta.vocab", vec![2], fp),
        ]
    }

    /// Parameters plus configuration, suitable for [`TkgModel::load`].
    pub fn to_checkpoint(&self) -> Vec<NamedTensor> {
        let mut out = self.meta();
        out.extend(checkpoint::collect(self));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_checkpoint())
    }

    /// Rebuilds a model from checkpoint entries, checking it matches `vocab`.
    pub fn from_checkpoint(vocab: &Vocab, entries: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| TkgError::Validation(format!("checkpoint lacks '{name}'")))
        };
        let meta = &find("meta.model")?.data;
        if meta.len() != 12 {
            return Err(TkgError::Validation("malformed model metadata".into()));
        }
        let fp = &find("meta.vocab")?.data;
        let stored = ((fp[0] as u64) << 32) | fp[1] as u64;
        if meta[0] as usize != vocab.num_entities()
            || meta[1] as usize != vocab.num_relations()
            || stored != vocab_fingerprint(vocab)
        {
            return Err(TkgError::Validation(format!(
                "checkpoint was trained on a different vocabulary ({} entities, {} relations; dataset has {} and {})",
                meta[0],
                meta[1],
                vocab.num_entities(),
                vocab.num_relations()
            )));
        }
        let config = ModelConfig {
            dim: meta[3] as usize,
            heads: meta[4] as usize,
            layers: meta[5] as usize,
            mixture_components: meta[6] as usize,
            mlp_depth: meta[7] as usize,
            node_types: meta[8] != 0.0,
            slope: meta[9],
            dropout: meta[10],
            sigma_floor: meta[11],
        };
        let mut model = TkgModel::new(vocab, config, 0)?;
        if model.num_types as f64 != meta[2] {
            return Err(TkgError::Validation(format!(
                "checkpoint uses {} entity types, dataset has {}",
                meta[2], model.num_types
            )));
        }
        checkpoint::restore(&mut model, entries)?;
        Ok(model)
    }

    pub fn load(vocab: &Vocab, path: &Path) -> Result<Self> {
        TkgModel::from_checkpoint(vocab, &checkpoint::read(path)?)
    }
}

impl Parameters for TkgModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("base_temporal", &self.base_temporal);
        f("base_structural", &self.base_structural);
        self.temporal
            .visit(&mut |n, t| f(&format!("temporal.{n}"), t));
        self.structural
            .visit(&mut |n, t| f(&format!("structural.{n}"), t));
        self.recurrence
            .visit(&mut |n, t| f(&format!("recurrence.{n}"), t));
        self.events.visit(&mut |n, t| f(&format!("events.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("base_temporal", &mut self.base_temporal);
        f("base_structural", &mut self.base_structural);
        self.temporal
            .visit_mut(&mut |n, t| f(&format!("temporal.{n}"), t));
        self.structural
            .visit_mut(&mut |n, t| f(&format!("structural.{n}"), t));
        self.recurrence
            .visit_mut(&mut |n, t| f(&format!("recurrence.{n}"), t));
        self.events
            .visit_mut(&mut |n, t| f(&format!("events.{n}"), t));
    }
}
