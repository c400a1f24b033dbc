mod support;

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use kgt_core::backtest::{
    equal_weight_schedule, max_drawdown, month_end_dates, run_backtest, walk_forward,
    walk_forward_schedule, PortfolioSchedule, PriceTable, Rebalance, WalkForwardConfig,
};
use kgt_core::data::{date_to_raw, Fact, Quadruple, Split, TemporalKG};
use kgt_core::synth::{planted_market, MarketConfig};
use kgt_core::TkgError;
use rand::Rng;

fn table(start: NaiveDate, series: &[(&str, &[f64])]) -> PriceTable {
    let rows = series.iter().flat_map(|(t, ps)| {
        ps.iter()
            .enumerate()
            .map(move |(i, &p)| (start + Duration::days(i as i64), t.to_string(), p))
    });
    PriceTable::from_rows(rows).unwrap()
}

fn rebalance(date: NaiveDate, weights: &[(&str, f64)]) -> Rebalance {
    Rebalance {
        date,
        weights: weights.iter().map(|&(t, w)| (t.to_string(), w)).collect(),
    }
}

#[test]
fn two_asset_scenario_matches_hand_computation() {
    let d0 = support::ymd(2023, 5, 1);
    let prices = table(
        d0,
        &[
            ("A", &[10.0, 11.0, 12.0, 12.0, 9.0]),
            ("B", &[20.0, 20.0, 22.0, 24.0, 24.0]),
        ],
    );
    let schedule = PortfolioSchedule {
        rebalances: vec![
            rebalance(d0, &[("A", 0.5), ("B", 0.5)]),
            rebalance(d0 + Duration::days(2), &[("A", 0.25), ("B", 0.75)]),
        ],
    };
    let report = run_backtest(&schedule, &prices).unwrap();
    // 0.5 * p/10 + 0.5 * p/20 until day 2, then 1.15 split 1:3 at prices 12 and 22
    let w2 = 0.5 * 12.0 / 10.0 + 0.5 * 22.0 / 20.0;
    let expected = [
        1.0,
        0.5 * 11.0 / 10.0 + 0.5 * 20.0 / 20.0,
        w2,
        w2 * 0.25 * 12.0 / 12.0 + w2 * 0.75 * 24.0 / 22.0,
        w2 * 0.25 * 9.0 / 12.0 + w2 * 0.75 * 24.0 / 22.0,
    ];
    assert_eq!(report.wealth.len(), 5);
    for (p, e) in report.wealth.iter().zip(expected) {
        assert!(
            (p.wealth - e).abs() <= 1e-10,
            "{}: {} vs {e}",
            p.date,
            p.wealth
        );
    }
    assert_eq!(report.trading_days, 4);
}

#[test]
fn engine_matches_spreadsheet_oracle_on_random_paths() {
    let mut r = support::rng(8);
    for _ in 0..100 {
        let (days, k) = (r.random_range(2..40), r.random_range(1..5));
        let paths: Vec<Vec<f64>> = (0..days)
            .map(|_| (0..k).map(|_| r.random_range(5.0..50.0)).collect())
            .collect();
        let mut plan: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for t in 0..days {
            if t == 0 || r.random_bool(0.2) {
                let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0)).collect();
                let total: f64 = raw.iter().sum();
                plan.insert(t, raw.iter().map(|w| w / total).collect());
            }
        }
        let d0 = support::ymd(2022, 1, 3);
        let names: Vec<String> = (0..k).map(|i| format!("T{i}")).collect();
        let rows = (0..days).flat_map(|t| {
            let names = &names;
            let paths = &paths;
            (0..k).map(move |i| (d0 + Duration::days(t as i64), names[i].clone(), paths[t][i]))
        });
        let prices = PriceTable::from_rows(rows).unwrap();
        let schedule = PortfolioSchedule {
            rebalances: plan
                .iter()
                .map(|(&t, w)| Rebalance {
                    date: d0 + Duration::days(t as i64),
                    weights: names.iter().cloned().zip(w.iter().copied()).collect(),
                })
                .collect(),
        };
        let report = run_backtest(&schedule, &prices).unwrap();
        let oracle = support::spreadsheet_wealth(&paths, &plan);
        assert_eq!(report.wealth.len(), oracle.len());
        for (p, e) in report.wealth.iter().zip(&oracle) {
            assert!((p.wealth - e).abs() <= 1e-10 * e.max(1.0));
        }
    }
}

#[test]
fn drawdown_and_statistics_examples() {
    assert_eq!(max_drawdown(&[100.0, 120.0, 90.0, 110.0]), -0.25);
    assert_eq!(max_drawdown(&[1.0, 2.0, 3.0]), 0.0);

    let d0 = support::ymd(2023, 1, 2);
    let flat = table(d0, &[("C", &[5.0; 6])]);
    let report = run_backtest(
        &PortfolioSchedule {
            rebalances: vec![rebalance(d0, &[("C", 1.0)])],
        },
        &flat,
    )
    .unwrap();
    assert_eq!(report.annualized_return, 0.0);
    assert_eq!(report.sharpe, None);

    let missing = PortfolioSchedule {
        rebalances: vec![rebalance(d0, &[("C", 0.5), ("D", 0.5)])],
    };
    assert!(matches!(
        run_backtest(&missing, &flat),
        Err(TkgError::MissingPrice { .. })
    ));
}

fn small_walk_forward(
    m: &kgt_core::synth::PlantedMarket,
    from: NaiveDate,
    to: NaiveDate,
) -> WalkForwardConfig {
    WalkForwardConfig {
        train: support::quick_train(8, 2, 1, 2, 1e-2),
        seed: 0,
        theme: m.theme,
        relation: m.relation,
        refit_every: 3,
        window_months: 36,
        from,
        to,
    }
}

#[test]
fn eighteen_months_give_eighteen_rebalances_and_six_refits() {
    let m = planted_market(&MarketConfig::default(), 0).unwrap();
    let cfg = small_walk_forward(&m, support::ymd(2020, 2, 1), support::ymd(2021, 7, 31));
    let (schedule, refits) =
        walk_forward_schedule(&m.kg, &cfg, &m.prices.calendar(), &m.tickers).unwrap();
    assert_eq!(schedule.rebalances.len(), 18);
    assert_eq!(refits.len(), 6);
    let dates: Vec<NaiveDate> = schedule.rebalances.iter().map(|r| r.date).collect();
    assert_eq!(
        dates,
        month_end_dates(&m.prices.calendar(), cfg.from, cfg.to)
    );
    for (i, r) in refits.iter().enumerate() {
        assert_eq!(*r, dates[3 * i]);
    }
    for r in &schedule.rebalances {
        assert!((r.weights.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn refit_without_history_is_rejected() {
    let m = planted_market(&MarketConfig::default(), 0).unwrap();
    let cfg = small_walk_forward(&m, support::ymd(2020, 1, 1), support::ymd(2020, 3, 31));
    let early = PriceTable::from_rows(vec![(support::ymd(2020, 1, 7), "TK0", 1.0)]).unwrap();
    let out = walk_forward_schedule(&m.kg, &cfg, &early.calendar(), &m.tickers);
    assert!(matches!(out, Err(TkgError::InsufficientHistory(_))));
}

#[test]
fn future_prices_and_facts_do_not_move_past_weights() {
    let market = MarketConfig {
        days: 300,
        ..MarketConfig::default()
    };
    let m = planted_market(&market, 1).unwrap();
    let (from, to) = (support::ymd(2020, 2, 1), support::ymd(2020, 9, 30));
    let cfg = small_walk_forward(&m, from, to);
    let base = walk_forward(&m.kg, &cfg, &m.prices, &m.tickers).unwrap();
    let dates: Vec<NaiveDate> = base.schedule.rebalances.iter().map(|r| r.date).collect();
    let mut r = support::rng(5);
    for trial in 0..50 {
        let cut = dates[r.random_range(0..dates.len())];
        let mut rows = Vec::new();
        for day in m.prices.calendar() {
            for t in m.prices.tickers() {
                let p = m.prices.price_on(t, day).unwrap();
                let p = if day > cut {
                    p * r.random_range(0.2..5.0)
                } else {
                    p
                };
                rows.push((day, t.to_string(), p));
            }
        }
        let mut kg = m.kg.clone();
        if trial % 5 == 0 {
            let mut facts: Vec<Fact> = kg.all_facts().cloned().collect();
            for _ in 0..20 {
                let raw = date_to_raw(cut) + r.random_range(1..120);
                facts.push(Fact {
                    quad: Quadruple::new(m.theme, m.relation, r.random_range(1..9), raw as usize),
                    raw,
                    split: Split::Train,
                });
            }
            kg = TemporalKG::from_facts(kg.vocab.clone(), facts, kg.time_kind).unwrap();
        }
        let shaken =
            walk_forward(&kg, &cfg, &PriceTable::from_rows(rows).unwrap(), &m.tickers).unwrap();
        for (a, b) in base
            .schedule
            .rebalances
            .iter()
            .zip(&shaken.schedule.rebalances)
        {
            if a.date <= cut {
                assert_eq!(
                    a, b,
                    "trial {trial}: weights on {} moved after perturbing beyond {cut}",
                    a.date
                );
            }
        }
    }
}

#[test]
fn planted_theme_beats_equal_weight() {
    let mut strategy = Vec::new();
    let mut benchmark = Vec::new();
    for seed in 0..3 {
        let m = planted_market(&MarketConfig::default(), seed).unwrap();
        let start = MarketConfig::default().start;
        let from = start.checked_add_months(chrono::Months::new(3)).unwrap();
        let to = *m.prices.calendar().last().unwrap();
        let cfg = WalkForwardConfig {
            train: support::quick_train(16, 2, 1, 8, 1e-2),
            seed,
            ..small_walk_forward(&m, from, to)
        };
        let result = walk_forward(&m.kg, &cfg, &m.prices, &m.tickers).unwrap();
        let dates: Vec<NaiveDate> = result.schedule.rebalances.iter().map(|r| r.date).collect();
        let tickers: Vec<String> = m.tickers.values().cloned().collect();
        let ew = run_backtest(
            &equal_weight_schedule(&dates, &tickers),
            &m.prices.between(from, to),
        )
        .unwrap();
        strategy.push(result.report.annualized_return);
        benchmark.push(ew.annualized_return);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let (s, b) = (median(&mut strategy), median(&mut benchmark));
    assert!(s > b, "strategy {s} vs equal weight {b}");
}
