use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::Context;
use kgt_core::analytics::{build_snapshots, centrality_series};
use kgt_core::backtest::{load_ticker_map, walk_forward, PriceTable, WalkForwardConfig};
use kgt_core::checkpoint;
use kgt_core::data::{load_dataset, LoadOptions, Split, TemporalKG};
use kgt_core::tensor::softmax;
use kgt_core::train::{evaluate, state_through, train_seeds, EpochRecord};
use kgt_core::{LossWeights, ModelConfig, TkgModel, TrainConfig};
use log::info;
use serde_json::json;

use crate::config::RunConfig;

/// Writes to `--output` when set, stdout otherwise.
fn emit(cfg: &RunConfig, text: &str) -> anyhow::Result<()> {
    match cfg.opt_path("output") {
        Some(path) => write_file(&path, text),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(cfg: &RunConfig) -> anyhow::Result<TemporalKG> {
    let options = LoadOptions {
        format: cfg.format()?,
        entity_types: cfg.opt_path("entity_types"),
        bucket_width: Some(cfg.usize("bucket_width")? as i64),
    };
    let kg = load_dataset(
        &cfg.path("train")?,
        &cfg.path("valid")?,
        &cfg.path("test")?,
        &options,
    )?;
    info!(
        "loaded {} facts in {} buckets",
        kg.all_facts().count(),
        kg.num_buckets()
    );
    Ok(kg)
}

fn train_config(cfg: &RunConfig) -> anyhow::Result<TrainConfig> {
    Ok(TrainConfig {
        learning_rate: cfg.f64("learning_rate")?,
        weight_decay: cfg.f64("weight_decay")?,
        max_epochs: cfg.usize("max_epochs")?,
        patience: cfg.usize("patience")?,
        tbptt_window: cfg.usize("tbptt_window")?,
        seeds: cfg.seeds()?,
        loss: LossWeights::new(cfg.f64("lambda1")?, cfg.f64("lambda2")?)?,
        model: ModelConfig {
            dim: cfg.usize("dim")?,
            heads: cfg.usize("heads")?,
            layers: cfg.usize("layers")?,
            mixture_components: cfg.usize("mixture_components")?,
            mlp_depth: cfg.usize("mlp_depth")?,
            slope: cfg.f64("slope")?,
            dropout: cfg.f64("dropout")?,
            node_types: cfg.bool("node_types")?,
            sigma_floor: cfg.f64("sigma_floor")?,
        },
    })
}

fn load_model(cfg: &RunConfig, kg: &TemporalKG) -> anyhow::Result<TkgModel> {
    let path = cfg.path("checkpoint")?;
    Ok(TkgModel::load(&kg.vocab, &path)?)
}

fn final_state(model: &TkgModel, kg: &TemporalKG) -> anyhow::Result<kgt_core::EmbeddingState> {
    Ok(match kg.num_buckets() {
        0 => model.initial_state(),
        n => state_through(model, kg, n - 1)?,
    })
}

pub fn stats(cfg: &RunConfig) -> anyhow::Result<()> {
    let kg = load(cfg)?;
    emit(cfg, &format!("{}\n", serde_json::to_string(&kg.stats())?))
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let kg = load(cfg)?;
    let config = train_config(cfg)?;
    let out_dir = cfg.path("out_dir")?;
    let outcomes = train_seeds(&kg, &config)?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut lines = String::new();
    for outcome in &outcomes {
        for record in &outcome.history {
            writeln!(lines, "{}", serde_json::to_string(record)?)?;
        }
        if kg.count(Split::Test) > 0 {
            let m = evaluate(&outcome.model, &kg, Split::Test)?.metrics;
            let record = EpochRecord {
                epoch: outcome.best_epoch,
                split: Split::Test,
                mrr: m.mrr,
                hits3: m.hits3,
                hits10: m.hits10,
                seed: outcome.seed,
            };
            writeln!(lines, "{}", serde_json::to_string(&record)?)?;
        }
        let path = out_dir.join(format!("model-seed{}.ckpt", outcome.seed));
        outcome.model.save(&path)?;
        info!(
            "seed {} checkpoint written to {}",
            outcome.seed,
            path.display()
        );
    }
    emit(cfg, &lines)
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let kg = load(cfg)?;
    let model = load_model(cfg, &kg)?;
    let split = cfg.split()?;
    let result = evaluate(&model, &kg, split)?;
    if let Some(path) = cfg.opt_path("state_out") {
        let state = final_state(&model, &kg)?;
        checkpoint::write(&path, &state.to_entries())?;
    }
    let line = json!({
        "split": split,
        "mrr": result.metrics.mrr,
        "hits3": result.metrics.hits3,
        "hits10": result.metrics.hits10,
        "queries": result.object_ranks.len() + result.subject_ranks.len(),
    });
    emit(cfg, &format!("{line}\n"))
}

pub fn predict(cfg: &RunConfig) -> anyhow::Result<()> {
    let kg = load(cfg)?;
    let model = load_model(cfg, &kg)?;
    let s = kg.vocab.entities.lookup("entity", cfg.require("source")?)?;
    let r = kg
        .vocab
        .relations
        .lookup("relation", cfg.require("relation")?)?;
    let state = final_state(&model, &kg)?;
    let probs = softmax(model.events.object_logits(&state, &[(s, r)]).data())?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let predictions: Vec<_> = order
        .iter()
        .take(cfg.usize("topk")?)
        .enumerate()
        .map(|(i, &o)| {
            json!({
                "rank": i + 1,
                "entity": kg.vocab.entities.name(o),
                "probability": probs[o],
            })
        })
        .collect();
    let out = json!({
        "source": kg.vocab.entities.name(s),
        "relation": kg.vocab.relations.name(r),
        "predictions": predictions,
    });
    emit(cfg, &format!("{out}\n"))
}

pub fn centrality(cfg: &RunConfig) -> anyhow::Result<()> {
    let kg = load(cfg)?;
    let entity = kg.vocab.entities.lookup("entity", cfg.require("entity")?)?;
    let snapshots = build_snapshots(&kg, cfg.usize("window_days")? as i64)?;
    let series = centrality_series(
        &snapshots,
        entity,
        cfg.measure()?,
        cfg.usize("zscore_days")? as i64,
        cfg.f64("damping")?,
    )?;
    let (from, to) = (cfg.opt_date("from")?, cfg.opt_date("to")?);
    let mut csv = String::from("date,raw,zscore\n");
    for p in series
        .points
        .iter()
        .filter(|p| from.is_none_or(|f| p.date >= f) && to.is_none_or(|t| p.date <= t))
    {
        writeln!(csv, "{},{},{}", p.date, p.raw, p.zscore)?;
    }
    emit(cfg, &csv)
}

pub fn backtest(cfg: &RunConfig) -> anyhow::Result<()> {
    let kg = load(cfg)?;
    let theme = kg.vocab.entities.lookup("entity", cfg.require("theme")?)?;
    let relation = kg
        .vocab
        .relations
        .lookup("relation", cfg.require("relation")?)?;
    let prices = PriceTable::from_csv(&cfg.path("prices")?)?;
    let tickers = load_ticker_map(&cfg.path("map")?, &kg.vocab)?;
    let train = train_config(cfg)?;
    let wf = WalkForwardConfig {
        seed: train.seeds[0],
        train,
        theme,
        relation,
        refit_every: cfg.usize("refit_every")?,
        window_months: u32::try_from(cfg.usize("window_months")?)
            .context("window_months is too large")?,
        from: cfg.date("from")?,
        to: cfg.date("to")?,
    };
    let result = walk_forward(&kg, &wf, &prices, &tickers)?;

    let mut curve = String::from("date,wealth\n");
    for p in &result.report.wealth {
        writeln!(curve, "{},{}", p.date, p.wealth)?;
    }
    let curve_path = cfg
        .opt_path("wealth_csv")
        .map_or_else(|| cfg.path("out_dir").map(|d| d.join("wealth.csv")), Ok)?;
    write_file(&curve_path, &curve)?;

    let out = json!({
        "report": result.report,
        "refit_dates": result.refit_dates,
        "rebalances": result.schedule.rebalances,
    });
    emit(cfg, &format!("{}\n", serde_json::to_string_pretty(&out)?))
}
