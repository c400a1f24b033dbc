//! Truncated-BPTT training, early stopping, evaluation and multi-seed runs.

use log::{debug, info};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Split, TemporalKG};
use crate::error::{Result, TkgError};
use crate::event::{InterEventClock, LossWeights};
use crate::kgt::Dropout;
use crate::metrics::{aggregate_metrics, pessimistic_rank, Metrics};
use crate::model::{ModelConfig, TkgModel};
use crate::optim::{AdamW, Parameters};
use crate::rng::{stream, streams};
use crate::temporal::EmbeddingState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub tbptt_window: usize,
    pub seeds: Vec<u64>,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            weight_decay: 0.01,
            max_epochs: 100,
            patience: 10,
            tbptt_window: 8,
            seeds: vec![0, 1, 2],
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.tbptt_window == 0 {
            return Err(TkgError::InvalidArgument(
                "max_epochs, patience and tbptt_window must be at least 1".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(TkgError::InvalidArgument(
                "at least one seed is required".into(),
            ));
        }
        AdamW::new(self.learning_rate, self.weight_decay)?;
        LossWeights::new(self.loss.lambda1, self.loss.lambda2)?;
        self.model.validate()
    }
}

/// Same configuration with entity types collapsed to a single type.
pub fn ablate_node_types(mut config: TrainConfig) -> TrainConfig {
    config.model.node_types = false;
    config
}

/// One line of the metric history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub mrr: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub seed: u64,
}

/// Early stopping on a score where larger is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records a score; returns whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

pub struct TrainOutcome {
    pub seed: u64,
    /// Parameters from the epoch with the best validation MRR.
    pub model: TkgModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Last bucket holding training facts, requiring at least two such buckets.
fn train_horizon(kg: &TemporalKG) -> Result<usize> {
    let with_train = kg.buckets.iter().filter(|b| b.has(Split::Train)).count();
    if with_train < 2 {
        return Err(TkgError::InsufficientHistory(format!(
            "training needs at least 2 buckets with training facts, found {with_train}"
        )));
    }
    Ok(*kg.split_range(Split::Train).expect("non-empty").end())
}

/// One chronological pass over the training buckets.
///
/// Loss terms are accumulated per window of `window` buckets; at each window
/// end the sum is back-propagated, the optimiser (if any) steps, and the
/// recurrent state is detached. Without an optimiser gradients keep
/// accumulating across windows. Returns the summed loss.
fn tbptt_pass(
    model: &mut TkgModel,
    kg: &TemporalKG,
    window: usize,
    weights: LossWeights,
    mut optimizer: Option<&mut AdamW>,
    mut dropout: Option<&mut Dropout>,
) -> Result<f64> {
    let horizon = train_horizon(kg)?;
    let mut state = model.initial_state();
    let mut clock = InterEventClock::new(model.num_entities());
    let mut pending: Option<Tensor> = None;
    let mut total = 0.0;
    model.zero_grad();
    for b in 0..=horizon {
        let facts = kg.buckets[b].quads(&[Split::Train]);
        if !facts.is_empty() {
            let loss = model.loss(&state, &facts, &clock.gaps(&facts, b), weights)?;
            if !loss.item().is_finite() {
                return Err(TkgError::Divergence { bucket: b });
            }
            total += loss.item();
            pending = Some(match pending.take() {
                Some(acc) => acc.add(&loss),
                None => loss,
            });
        }
        state = model.advance(&state, &facts, b, dropout.as_deref_mut())?;
        if !state.is_finite() {
            return Err(TkgError::Divergence { bucket: b });
        }
        clock.record(&facts, b);
        if (b + 1) % window == 0 || b == horizon {
            if let Some(loss) = pending.take() {
                loss.backward();
                if let Some(opt) = optimizer.as_deref_mut() {
                    opt.step(model)?;
                    model.zero_grad();
                }
            }
            state = state.detach();
        }
    }
    Ok(total)
}

/// Gradients of one epoch's loss under truncation `window`, without updating parameters.
pub fn epoch_gradients(
    model: &mut TkgModel,
    kg: &TemporalKG,
    window: usize,
    weights: LossWeights,
) -> Result<Vec<(String, Vec<f64>)>> {
    if window == 0 {
        return Err(TkgError::InvalidArgument(
            "tbptt window must be at least 1".into(),
        ));
    }
    tbptt_pass(model, kg, window, weights, None, None)?;
    let grads = model.gradients();
    model.zero_grad();
    Ok(grads)
}

/// Per-direction ranks for every fact of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub object_ranks: Vec<usize>,
    pub subject_ranks: Vec<usize>,
    /// Aggregated over both directions.
    pub metrics: Metrics,
}

/// Rank of the true object for the query `(s, r, ?)`.
pub fn rank_object(
    model: &TkgModel,
    state: &EmbeddingState,
    s: usize,
    r: usize,
    o: usize,
) -> Result<usize> {
    let (n, nr) = (model.num_entities(), model.num_relations());
    if s >= n || o >= n || r >= nr {
        return Err(TkgError::InvalidArgument(format!(
            "query ({s}, {r}, {o}) outside the vocabulary"
        )));
    }
    pessimistic_rank(model.events.object_logits(state, &[(s, r)]).data(), o)
}

/// Rank of the true subject for the query `(?, r, o)`.
pub fn rank_subject(
    model: &TkgModel,
    state: &EmbeddingState,
    s: usize,
    r: usize,
    o: usize,
) -> Result<usize> {
    let (n, nr) = (model.num_entities(), model.num_relations());
    if s >= n || o >= n || r >= nr {
        return Err(TkgError::InvalidArgument(format!(
            "query ({s}, {r}, {o}) outside the vocabulary"
        )));
    }
    pessimistic_rank(model.events.subject_logits(state, &[(r, o)]).data(), s)
}

/// Raw ranking of every fact in `split`, with the state advanced over all
/// earlier buckets using their ground-truth facts.
pub fn evaluate(model: &TkgModel, kg: &TemporalKG, split: Split) -> Result<RankingResult> {
    if kg.vocab.num_entities() != model.num_entities()
        || kg.vocab.num_relations() != model.num_relations()
    {
        return Err(TkgError::Validation(format!(
            "model covers {} entities and {} relations, dataset has {} and {}",
            model.num_entities(),
            model.num_relations(),
            kg.vocab.num_entities(),
            kg.vocab.num_relations()
        )));
    }
    let Some(range) = kg.split_range(split) else {
        return Err(TkgError::InvalidArgument(format!(
            "split '{}' has no facts",
            split.name()
        )));
    };
    let mut state = model.initial_state();
    let mut object_ranks = Vec::new();
    let mut subject_ranks = Vec::new();
    for b in 0..=*range.end() {
        let bucket = &kg.buckets[b];
        let targets = bucket.quads(&[split]);
        if !targets.is_empty() {
            let sr: Vec<(usize, usize)> = targets.iter().map(|q| (q.s, q.r)).collect();
            let ro: Vec<(usize, usize)> = targets.iter().map(|q| (q.r, q.o)).collect();
            let obj = model.events.object_logits(&state, &sr).detach();
            let subj = model.events.subject_logits(&state, &ro).detach();
            let ranked: Vec<(usize, usize)> = targets
                .par_iter()
                .enumerate()
                .map(|(i, q)| {
                    Ok((
                        pessimistic_rank(obj.row(i), q.o)?,
                        pessimistic_rank(subj.row(i), q.s)?,
                    ))
                })
                .collect::<Result<_>>()?;
            for (a, b) in ranked {
                object_ranks.push(a);
                subject_ranks.push(b);
            }
        }
        state = model
            .advance(&state, &bucket.quads(&Split::ALL), b, None)?
            .detach();
    }
    let all: Vec<usize> = object_ranks.iter().chain(&subject_ranks).copied().collect();
    Ok(RankingResult {
        metrics: aggregate_metrics(&all)?,
        object_ranks,
        subject_ranks,
    })
}

/// Embedding state after folding in every bucket up to and including `last`.
pub fn state_through(model: &TkgModel, kg: &TemporalKG, last: usize) -> Result<EmbeddingState> {
    let mut state = model.initial_state();
    for b in 0..=last.min(kg.num_buckets().saturating_sub(1)) {
        state = model
            .advance(&state, &kg.buckets[b].quads(&Split::ALL), b, None)?
            .detach();
    }
    Ok(state)
}

/// Trains one model with the given seed.
pub fn train(kg: &TemporalKG, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    train_horizon(kg)?;
    let mut model = TkgModel::new(&kg.vocab, config.model, seed)?;
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay)?;
    let mut dropout = (config.model.dropout > 0.0).then(|| Dropout {
        rate: config.model.dropout,
        rng: stream(seed, streams::DROPOUT),
    });
    let has_valid = kg.split_range(Split::Valid).is_some();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        let loss = tbptt_pass(
            &mut model,
            kg,
            config.tbptt_window,
            config.loss,
            Some(&mut optimizer),
            dropout.as_mut(),
        )?;
        epochs_run = epoch;
        debug!("seed {seed} epoch {epoch}: training loss {loss:.4}");
        if !has_valid {
            best = model.clone();
            best_epoch = epoch;
            continue;
        }
        let m = evaluate(&model, kg, Split::Valid)?.metrics;
        info!("seed {seed} epoch {epoch}: valid mrr {:.4}", m.mrr);
        history.push(EpochRecord {
            epoch,
            split: Split::Valid,
            mrr: m.mrr,
            hits3: m.hits3,
            hits10: m.hits10,
            seed,
        });
        if stopper.observe(m.mrr) {
            best = model.clone();
            best_epoch = epoch;
        }
        if stopper.should_stop() {
            info!("seed {seed}: stopping after epoch {epoch}, best epoch {best_epoch}");
            break;
        }
    }
    Ok(TrainOutcome {
        seed,
        model: best,
        history,
        best_epoch,
        epochs_run,
    })
}

/// Trains one model per configured seed in parallel, returned in seed order.
pub fn train_seeds(kg: &TemporalKG, config: &TrainConfig) -> Result<Vec<TrainOutcome>> {
    config.validate()?;
    config
        .seeds
        .par_iter()
        .map(|&seed| train(kg, config, seed))
        .collect()
}
