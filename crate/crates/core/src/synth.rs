//! Synthetic temporal graphs with planted, type-conditioned motifs.

use std::collections::BTreeMap;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::backtest::PriceTable;
use crate::data::{date_to_raw, Fact, Interner, Quadruple, Split, TemporalKG, TimeKind, Vocab};
use crate::error::{Result, TkgError};
use crate::rng::{stream, streams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedConfig {
    pub entities: usize,
    pub relations: usize,
    pub types: usize,
    pub buckets: usize,
    pub facts_per_bucket: usize,
    pub valid_buckets: usize,
    pub test_buckets: usize,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            entities: 50,
            relations: 4,
            types: 3,
            buckets: 40,
            facts_per_bucket: 30,
            valid_buckets: 5,
            test_buckets: 5,
        }
    }
}

/// Entity type used by the planted graph: `e mod types`.
pub fn planted_type(e: usize, types: usize) -> usize {
    e % types
}

/// The deterministic object of `(s, r)`: an entity of type
/// `(type(s) + r + 1) mod types`, chosen by a fixed hash of `s` and `r`.
pub fn planted_object(s: usize, r: usize, cfg: &PlantedConfig) -> usize {
    let target = (planted_type(s, cfg.types) + r + 1) % cfg.types;
    let members: Vec<usize> = (0..cfg.entities)
        .filter(|&e| planted_type(e, cfg.types) == target)
        .collect();
    members[(s * (2 * r + 3) + 7 * r) % members.len()]
}

/// Each bucket holds `facts_per_bucket` facts `(s, r, planted_object(s, r))`
/// with `s` and `r` drawn uniformly. The last buckets form the validation
/// and test splits.
pub fn planted_dkg(cfg: &PlantedConfig, seed: u64) -> Result<TemporalKG> {
    if cfg.types == 0 || cfg.entities < cfg.types || cfg.relations == 0 {
        return Err(TkgError::InvalidArgument(
            "planted graph needs entities of every type and a relation".into(),
        ));
    }
    if cfg.valid_buckets + cfg.test_buckets + 2 > cfg.buckets {
        return Err(TkgError::InvalidArgument(
            "not enough buckets left for training".into(),
        ));
    }
    let mut rng = stream(seed, streams::SYNTHETIC);
    let train_end = cfg.buckets - cfg.valid_buckets - cfg.test_buckets;
    let mut facts = Vec::with_capacity(cfg.buckets * cfg.facts_per_bucket);
    for t in 0..cfg.buckets {
        let split = if t < train_end {
            Split::Train
        } else if t < train_end + cfg.valid_buckets {
            Split::Valid
        } else {
            Split::Test
        };
        for _ in 0..cfg.facts_per_bucket {
            let s = rng.random_range(0..cfg.entities);
            let r = rng.random_range(0..cfg.relations);
            facts.push(Fact {
                quad: Quadruple::new(s, r, planted_object(s, r, cfg), t),
                raw: t as i64,
                split,
            });
        }
    }
    let vocab = Vocab {
        entities: Interner::from_names((0..cfg.entities).map(|i| format!("e{i}"))),
        relations: Interner::from_names((0..cfg.relations).map(|i| format!("r{i}"))),
        entity_types: Interner::from_names((0..cfg.types).map(|i| format!("T{i}"))),
        tau: (0..cfg.entities)
            .map(|e| planted_type(e, cfg.types))
            .collect(),
    };
    TemporalKG::from_facts(vocab, facts, TimeKind::Integer)
}

/// A dated news feed and price history where one theme repeatedly impacts a
/// few stocks whose prices drift upwards.
#[derive(Debug, Clone)]
pub struct PlantedMarket {
    pub kg: TemporalKG,
    pub prices: PriceTable,
    /// Entity id to ticker for every stock.
    pub tickers: BTreeMap<usize, String>,
    pub theme: usize,
    pub relation: usize,
    pub linked: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketConfig {
    pub start: NaiveDate,
    pub days: i64,
    pub stocks: usize,
    pub linked: usize,
    pub fillers: usize,
    pub noise_facts: usize,
    pub linked_drift: f64,
    pub daily_vol: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            start: NaiveDate::from_ymd_opt(2020, 1, 6).expect("valid date"),
            days: 640,
            stocks: 8,
            linked: 2,
            fillers: 6,
            noise_facts: 6,
            linked_drift: 0.002,
            daily_vol: 0.01,
        }
    }
}

/// Weekly facts `(Theme, Impact, S_k)` for the linked stocks plus random
/// `Mention` facts between stocks and filler entities; weekday prices with
/// positive drift for linked stocks only.
pub fn planted_market(cfg: &MarketConfig, seed: u64) -> Result<PlantedMarket> {
    if cfg.linked == 0 || cfg.linked >= cfg.stocks || cfg.fillers == 0 || cfg.days < 14 {
        return Err(TkgError::InvalidArgument(
            "planted market needs linked and unlinked stocks, fillers and two weeks".into(),
        ));
    }
    let mut names = vec!["Theme".to_string()];
    names.extend((0..cfg.stocks).map(|k| format!("S{k}")));
    names.extend((0..cfg.fillers).map(|k| format!("X{k}")));
    let stock = |k: usize| 1 + k;
    let filler = |k: usize| 1 + cfg.stocks + k;
    let mut tau = vec![0];
    tau.extend(std::iter::repeat_n(1, cfg.stocks));
    tau.extend(std::iter::repeat_n(2, cfg.fillers));
    let vocab = Vocab {
        entities: Interner::from_names(names),
        relations: Interner::from_names(["Impact", "Mention"]),
        entity_types: Interner::from_names(["THEME", "COMPANY", "OTHER"]),
        tau,
    };
    let mut rng = stream(seed, streams::SYNTHETIC);
    let mut facts = Vec::new();
    let mut week = 0;
    while week * 7 < cfg.days {
        let date = cfg.start + Duration::days(week * 7);
        let raw = date_to_raw(date);
        let mut push = |s, r, o| {
            facts.push(Fact {
                quad: Quadruple::new(s, r, o, raw as usize),
                raw,
                split: Split::Train,
            })
        };
        for k in 0..cfg.linked {
            push(0, 0, stock(k));
        }
        for _ in 0..cfg.noise_facts {
            let (a, b) = (
                stock(rng.random_range(0..cfg.stocks)),
                filler(rng.random_range(0..cfg.fillers)),
            );
            if rng.random_bool(0.5) {
                push(a, 1, b);
            } else {
                push(b, 1, a);
            }
        }
        week += 1;
    }
    let kg = TemporalKG::from_facts(vocab, facts, TimeKind::Date)?;

    let mut price_rng = stream(seed, streams::PRICES);
    let noise =
        Normal::new(0.0, cfg.daily_vol).map_err(|e| TkgError::InvalidArgument(e.to_string()))?;
    let mut level = vec![100.0; cfg.stocks];
    let mut rows = Vec::new();
    for d in 0..cfg.days {
        let date = cfg.start + Duration::days(d);
        if matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
            continue;
        }
        for (k, p) in level.iter_mut().enumerate() {
            if d > 0 {
                let drift = if k < cfg.linked {
                    cfg.linked_drift
                } else {
                    0.0
                };
                *p *= (drift + noise.sample(&mut price_rng)).exp();
            }
            rows.push((date, format!("TK{k}"), *p));
        }
    }
    Ok(PlantedMarket {
        prices: PriceTable::from_rows(rows)?,
        tickers: (0..cfg.stocks)
            .map(|k| (stock(k), format!("TK{k}")))
            .collect(),
        theme: 0,
        relation: 0,
        linked: (0..cfg.linked).map(stock).collect(),
        kg,
    })
}
