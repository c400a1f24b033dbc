//! Thematic portfolio construction and performance accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::{Datelike, Months, NaiveDate};
use log::warn;
use serde::Serialize;

use crate::data::{date_to_raw, TemporalKG, TimeKind, Vocab};
use crate::error::{Result, TkgError};
use crate::model::TkgModel;
use crate::temporal::EmbeddingState;
use crate::tensor::softmax;
use crate::train::{state_through, train, TrainConfig};

pub const TRADING_DAYS: f64 = 252.0;

/// Adjusted closes per ticker.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriceTable {
    series: BTreeMap<String, BTreeMap<NaiveDate, f64>>,
}

impl PriceTable {
    pub fn from_rows<S: Into<String>>(
        rows: impl IntoIterator<Item = (NaiveDate, S, f64)>,
    ) -> Result<Self> {
        let mut series: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
        for (date, ticker, price) in rows {
            let ticker = ticker.into();
            if !(price > 0.0 && price.is_finite()) {
                return Err(TkgError::Validation(format!(
                    "non-positive price {price} for {ticker} on {date}"
                )));
            }
            if series
                .entry(ticker.clone())
                .or_default()
                .insert(date, price)
                .is_some()
            {
                return Err(TkgError::Validation(format!(
                    "duplicate price for {ticker} on {date}"
                )));
            }
        }
        Ok(PriceTable { series })
    }

    /// Reads `date,ticker,adj_close` with a header line.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TkgError::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| TkgError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(parse_err(format!(
                    "expected 3 comma-separated fields, found {}",
                    fields.len()
                )));
            }
            let date = NaiveDate::parse_from_str(fields[0], "%Y-%m-%d")
                .map_err(|e| parse_err(format!("bad date '{}': {e}", fields[0])))?;
            let price: f64 = fields[2]
                .parse()
                .map_err(|_| parse_err(format!("bad price '{}'", fields[2])))?;
            rows.push((date, fields[1].to_string(), price));
        }
        PriceTable::from_rows(rows)
    }

    pub fn tickers(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    /// Sorted union of all trading dates.
    pub fn calendar(&self) -> Vec<NaiveDate> {
        self.series
            .values()
            .flat_map(|s| s.keys().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn price_on(&self, ticker: &str, date: NaiveDate) -> Option<f64> {
        self.series.get(ticker)?.get(&date).copied()
    }

    /// Latest price on or before `date`.
    pub fn price_at_or_before(&self, ticker: &str, date: NaiveDate) -> Option<f64> {
        self.series
            .get(ticker)?
            .range(..=date)
            .next_back()
            .map(|(_, p)| *p)
    }

    /// Copy restricted to dates in `[from, to]`.
    pub fn between(&self, from: NaiveDate, to: NaiveDate) -> PriceTable {
        PriceTable {
            series: self
                .series
                .iter()
                .map(|(t, s)| {
                    (
                        t.clone(),
                        s.range(from..=to).map(|(d, p)| (*d, *p)).collect(),
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rebalance {
    pub date: NaiveDate,
    pub weights: BTreeMap<String, f64>,
}

/// Rebalance dates in increasing order with long-only weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PortfolioSchedule {
    pub rebalances: Vec<Rebalance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WealthPoint {
    pub date: NaiveDate,
    pub wealth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfReport {
    pub annualized_return: f64,
    pub annualized_volatility: f64,
    /// `None` when volatility is zero.
    pub sharpe: Option<f64>,
    pub max_drawdown: f64,
    pub trading_days: usize,
    #[serde(skip)]
    pub wealth: Vec<WealthPoint>,
}

/// `min_t (W_t / max_{s<=t} W_s - 1)`.
pub fn max_drawdown(wealth: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &w in wealth {
        peak = peak.max(w);
        worst = worst.min(w / peak - 1.0);
    }
    worst
}

/// Annualised statistics of a daily wealth curve.
pub fn performance(wealth: Vec<WealthPoint>) -> PerfReport {
    let values: Vec<f64> = wealth.iter().map(|p| p.wealth).collect();
    let returns: Vec<f64> = values.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let n = returns.len();
    let annualized_return = if n == 0 {
        0.0
    } else {
        (values[n] / values[0]).powf(TRADING_DAYS / n as f64) - 1.0
    };
    let annualized_volatility = if n < 2 {
        0.0
    } else {
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt() * TRADING_DAYS.sqrt()
    };
    let sharpe = (annualized_volatility > 1e-12).then(|| annualized_return / annualized_volatility);
    PerfReport {
        annualized_return,
        annualized_volatility,
        sharpe,
        max_drawdown: max_drawdown(&values),
        trading_days: n,
        wealth,
    }
}

/// Buy-and-hold between rebalances, starting from wealth 1 on the first
/// rebalance date and running to the last trading date. Missing prices on
/// non-rebalance days carry the previous close forward.
pub fn run_backtest(schedule: &PortfolioSchedule, prices: &PriceTable) -> Result<PerfReport> {
    let Some(first) = schedule.rebalances.first() else {
        return Err(TkgError::InvalidArgument(
            "schedule has no rebalance dates".into(),
        ));
    };
    for (i, r) in schedule.rebalances.iter().enumerate() {
        if i > 0 && r.date <= schedule.rebalances[i - 1].date {
            return Err(TkgError::Validation(
                "rebalance dates must be strictly increasing".into(),
            ));
        }
        let total: f64 = r.weights.values().sum();
        if r.weights.values().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(TkgError::Validation(format!(
                "weights on {} must be non-negative and sum to 1",
                r.date
            )));
        }
    }
    let mut days: Vec<NaiveDate> = prices
        .calendar()
        .into_iter()
        .filter(|d| *d >= first.date)
        .collect();
    if days.first() != Some(&first.date) {
        days.insert(0, first.date);
    }
    let mut next = 0;
    let mut units: BTreeMap<&str, f64> = BTreeMap::new();
    let mut wealth = Vec::with_capacity(days.len());
    let mut current = 1.0;
    for &day in &days {
        if !units.is_empty() {
            current = 0.0;
            for (ticker, u) in &units {
                let p = prices
                    .price_at_or_before(ticker, day)
                    .expect("held tickers were priced at purchase");
                current += u * p;
            }
        }
        if next < schedule.rebalances.len() && schedule.rebalances[next].date == day {
            let r = &schedule.rebalances[next];
            units.clear();
            for (ticker, &w) in &r.weights {
                if w == 0.0 {
                    continue;
                }
                let p = prices
                    .price_on(ticker, day)
                    .ok_or_else(|| TkgError::MissingPrice {
                        ticker: ticker.clone(),
                        date: day.to_string(),
                    })?;
                units.insert(ticker.as_str(), current * w / p);
            }
            next += 1;
        }
        wealth.push(WealthPoint {
            date: day,
            wealth: current,
        });
    }
    if next < schedule.rebalances.len() {
        let r = &schedule.rebalances[next];
        let ticker = r.weights.keys().next().cloned().unwrap_or_default();
        return Err(TkgError::MissingPrice {
            ticker,
            date: r.date.to_string(),
        });
    }
    Ok(performance(wealth))
}

/// Theme-to-entity probabilities from the object head.
#[derive(Debug, Clone, PartialEq)]
pub struct ThemeScores {
    /// Mean probability over every entity in the vocabulary.
    pub mean_all: f64,
    pub universe: BTreeMap<usize, f64>,
}

/// `p(o | s = theme, r = relation, G_t)` for every `o` in `universe`.
pub fn theme_scores(
    model: &TkgModel,
    state: &EmbeddingState,
    theme: usize,
    relation: usize,
    universe: &[usize],
) -> Result<ThemeScores> {
    let n = model.num_entities();
    if theme >= n || relation >= model.num_relations() {
        return Err(TkgError::InvalidArgument(
            "theme or relation outside the vocabulary".into(),
        ));
    }
    if let Some(&e) = universe.iter().find(|&&e| e >= n) {
        return Err(TkgError::InvalidArgument(format!(
            "universe entity {e} outside the vocabulary"
        )));
    }
    let probs = softmax(
        model
            .events
            .object_logits(state, &[(theme, relation)])
            .data(),
    )?;
    Ok(ThemeScores {
        mean_all: probs.iter().sum::<f64>() / n as f64,
        universe: universe.iter().map(|&e| (e, probs[e])).collect(),
    })
}

/// Keeps scores strictly above `threshold` and renormalises them; equal
/// weights over every key when nothing clears the threshold.
pub fn select_and_weight<K: Ord + Clone>(
    scores: &BTreeMap<K, f64>,
    threshold: f64,
) -> Result<BTreeMap<K, f64>> {
    if scores.is_empty() {
        return Err(TkgError::InvalidArgument("no scores to select from".into()));
    }
    let kept: BTreeMap<K, f64> = scores
        .iter()
        .filter(|(_, &s)| s > threshold)
        .map(|(k, &s)| (k.clone(), s))
        .collect();
    let total: f64 = kept.values().sum();
    if kept.is_empty() || total <= 0.0 {
        let w = 1.0 / scores.len() as f64;
        return Ok(scores.keys().map(|k| (k.clone(), w)).collect());
    }
    Ok(kept.into_iter().map(|(k, s)| (k, s / total)).collect())
}

/// Reads `entity_name \t ticker` lines; names missing from the vocabulary
/// are dropped with a warning.
pub fn load_ticker_map(path: &Path, vocab: &Vocab) -> Result<BTreeMap<usize, String>> {
    let text = fs::read_to_string(path).map_err(|e| TkgError::io(path, e))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((entity, ticker)) = line.split_once('\t') else {
            return Err(TkgError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected 'entity<TAB>ticker'".into(),
            });
        };
        match vocab.entities.get(entity.trim()) {
            Some(id) => {
                map.insert(id, ticker.trim().to_string());
            }
            None => warn!(
                "ticker map entity '{}' is not in the vocabulary; dropped",
                entity.trim()
            ),
        }
    }
    Ok(map)
}

/// Last trading day of every calendar month with `from <= day <= to`.
pub fn month_end_dates(calendar: &[NaiveDate], from: NaiveDate, to: NaiveDate) -> Vec<NaiveDate> {
    let days: Vec<NaiveDate> = calendar
        .iter()
        .copied()
        .filter(|d| *d >= from && *d <= to)
        .collect();
    days.iter()
        .enumerate()
        .filter(|&(i, d)| {
            days.get(i + 1)
                .is_none_or(|n| (n.year(), n.month()) != (d.year(), d.month()))
        })
        .map(|(_, d)| *d)
        .collect()
}

#[derive(Debug, Clone)]
pub struct WalkForwardConfig {
    pub train: TrainConfig,
    pub seed: u64,
    pub theme: usize,
    pub relation: usize,
    pub refit_every: usize,
    pub window_months: u32,
    pub from: NaiveDate,
    pub to: NaiveDate,
}

#[derive(Debug, Clone)]
pub struct WalkForwardResult {
    pub schedule: PortfolioSchedule,
    pub report: PerfReport,
    pub refit_dates: Vec<NaiveDate>,
}

/// Facts dated within `(as_of - months, as_of]`, as a stand-alone graph.
fn trailing_window(kg: &TemporalKG, as_of: NaiveDate, months: u32) -> TemporalKG {
    let start = date_to_raw(
        as_of
            .checked_sub_months(Months::new(months))
            .expect("date in range"),
    );
    let end = date_to_raw(as_of);
    kg.restrict(|b| b.raw_start > start && b.raw_end <= end)
}

/// Weights for each month-end rebalance from a model refitted on the
/// trailing window every `refit_every` rebalances. Only facts dated on or
/// before a rebalance date inform its weights.
pub fn walk_forward_schedule(
    kg: &TemporalKG,
    cfg: &WalkForwardConfig,
    calendar: &[NaiveDate],
    tickers: &BTreeMap<usize, String>,
) -> Result<(PortfolioSchedule, Vec<NaiveDate>)> {
    if kg.time_kind != TimeKind::Date {
        return Err(TkgError::InvalidArgument(
            "walk-forward needs dated facts".into(),
        ));
    }
    if cfg.refit_every == 0 || cfg.window_months == 0 {
        return Err(TkgError::InvalidArgument(
            "refit cadence and window must be positive".into(),
        ));
    }
    let universe: Vec<usize> = tickers.keys().copied().collect();
    if universe.is_empty() {
        return Err(TkgError::InvalidArgument(
            "no mapped tickers in the universe".into(),
        ));
    }
    let dates = month_end_dates(calendar, cfg.from, cfg.to);
    if dates.is_empty() {
        return Err(TkgError::InsufficientHistory(format!(
            "no trading days between {} and {}",
            cfg.from, cfg.to
        )));
    }
    let mut train_cfg = cfg.train.clone();
    train_cfg.seeds = vec![cfg.seed];
    let mut model: Option<TkgModel> = None;
    let mut refits = Vec::new();
    let mut schedule = PortfolioSchedule::default();
    for (i, &d) in dates.iter().enumerate() {
        let window = trailing_window(kg, d, cfg.window_months);
        if i % cfg.refit_every == 0 {
            if window.num_buckets() < 2 {
                return Err(TkgError::InsufficientHistory(format!(
                    "refit on {d} needs at least two buckets of facts in the preceding {} months, found {}",
                    cfg.window_months,
                    window.num_buckets()
                )));
            }
            model = Some(train(&window, &train_cfg, cfg.seed)?.model);
            refits.push(d);
        }
        let m = model.as_ref().expect("first date always refits");
        let state = match window.num_buckets() {
            0 => m.initial_state(),
            n => state_through(m, &window, n - 1)?,
        };
        let scores = theme_scores(m, &state, cfg.theme, cfg.relation, &universe)?;
        let weights = select_and_weight(&scores.universe, scores.mean_all)?;
        schedule.rebalances.push(Rebalance {
            date: d,
            weights: weights
                .into_iter()
                .map(|(e, w)| (tickers[&e].clone(), w))
                .collect(),
        });
    }
    Ok((schedule, refits))
}

/// [`walk_forward_schedule`] followed by [`run_backtest`] over the priced period.
pub fn walk_forward(
    kg: &TemporalKG,
    cfg: &WalkForwardConfig,
    prices: &PriceTable,
    tickers: &BTreeMap<usize, String>,
) -> Result<WalkForwardResult> {
    let (schedule, refit_dates) = walk_forward_schedule(kg, cfg, &prices.calendar(), tickers)?;
    let report = run_backtest(&schedule, &prices.between(cfg.from, cfg.to))?;
    Ok(WalkForwardResult {
        schedule,
        report,
        refit_dates,
    })
}

/// Equal weights over `tickers` on every date of `dates`.
pub fn equal_weight_schedule(dates: &[NaiveDate], tickers: &[String]) -> PortfolioSchedule {
    let w = 1.0 / tickers.len() as f64;
    PortfolioSchedule {
        rebalances: dates
            .iter()
            .map(|&date| Rebalance {
                date,
                weights: tickers.iter().map(|t| (t.clone(), w)).collect(),
            })
            .collect(),
    }
}
