//! Temporal knowledge-graph embeddings, event modelling and thematic analytics.
//!
//! Data flows from [`data`] (loading and bucketing quadruples) through
//! [`model`] (KGTransformer stacks, recurrent state and event heads) into
//! [`train`] (truncated-BPTT training and ranking evaluation). [`analytics`]
//! and [`backtest`] consume the loaded graph and trained models.

pub mod analytics;
pub mod backtest;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod event;
pub mod kgt;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use analytics::{Measure, SnapshotGraph};
pub use backtest::{PerfReport, PortfolioSchedule, PriceTable};
pub use data::{DataFormat, LoadOptions, Quadruple, Split, TemporalKG, Vocab};
pub use error::{Result, TkgError};
pub use event::{Decomposition, LossWeights};
pub use metrics::Metrics;
pub use model::{ModelConfig, TkgModel};
pub use optim::{AdamW, Parameters};
pub use temporal::EmbeddingState;
pub use tensor::Tensor;
pub use train::TrainConfig;
