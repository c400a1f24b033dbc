//! Flat `key = value` run configuration checked against a typed registry.
//!
//! Values resolve in increasing precedence: registry defaults, the file
//! given by `--config`, then command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use kgt_core::analytics::Measure;
use kgt_core::data::{DataFormat, Split};

/// Bad flags, unknown keys or ill-typed values. Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Text,
    Path,
    Date,
    Seeds,
    Choice(&'static [&'static str]),
}

impl Kind {
    fn check(self, value: &str) -> Result<(), String> {
        let ok = match self {
            Kind::Int => value.parse::<usize>().is_ok(),
            Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
            Kind::Bool => matches!(value, "true" | "false"),
            Kind::Text | Kind::Path => true,
            Kind::Date => NaiveDate::parse_from_str(value, "%Y-%m-%d").is_ok(),
            Kind::Seeds => parse_seeds(value).is_some(),
            Kind::Choice(options) => options.contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("expected {}, found '{value}'", self.describe()))
        }
    }

    fn describe(self) -> String {
        match self {
            Kind::Int => "a non-negative integer".into(),
            Kind::Float => "a finite number".into(),
            Kind::Bool => "true or false".into(),
            Kind::Text => "text".into(),
            Kind::Path => "a path".into(),
            Kind::Date => "a YYYY-MM-DD date".into(),
            Kind::Seeds => "a comma-separated list of integers".into(),
            Kind::Choice(options) => format!("one of {}", options.join(", ")),
        }
    }
}

fn parse_seeds(value: &str) -> Option<Vec<u64>> {
    value
        .split(',')
        .map(|s| s.trim().parse::<u64>().ok())
        .collect::<Option<Vec<_>>>()
        .filter(|v| !v.is_empty())
}

pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(
    name: &'static str,
    kind: Kind,
    default: Option<&'static str>,
    help: &'static str,
) -> Key {
    Key {
        name,
        kind,
        default,
        help,
    }
}

const FORMATS: &[&str] = &["auto", "quadruple", "quintuple"];
const SPLITS: &[&str] = &["train", "valid", "test"];
const MEASURES: &[&str] = &["degree", "betweenness", "eigenvector", "pagerank"];

#[rustfmt::skip]
pub const REGISTRY: &[Key] = &[
    key("train", Kind::Path, None, "training facts file"),
    key("valid", Kind::Path, None, "validation facts file"),
    key("test", Kind::Path, None, "test facts file"),
    key("entity_types", Kind::Path, None, "entity<TAB>type file for quadruple data"),
    key("format", Kind::Choice(FORMATS), Some("auto"), "fact file layout"),
    key("bucket_width", Kind::Int, Some("1"), "timestamps merged per bucket"),
    key("dim", Kind::Int, Some("200"), "embedding width"),
    key("heads", Kind::Int, Some("4"), "attention heads per layer"),
    key("layers", Kind::Int, Some("2"), "graph layers per stack"),
    key("mixture_components", Kind::Int, Some("3"), "log-normal mixture size"),
    key("mlp_depth", Kind::Int, Some("1"), "hidden layers in event heads"),
    key("slope", Kind::Float, Some("0.01"), "LeakyReLU negative slope"),
    key("dropout", Kind::Float, Some("0"), "dropout rate during training"),
    key("node_types", Kind::Bool, Some("true"), "type-specific projections"),
    key("sigma_floor", Kind::Float, Some("0.01"), "lower bound on mixture scales"),
    key("learning_rate", Kind::Float, Some("0.0005"), "AdamW step size"),
    key("weight_decay", Kind::Float, Some("0.01"), "AdamW decoupled decay"),
    key("max_epochs", Kind::Int, Some("100"), "epoch limit"),
    key("patience", Kind::Int, Some("10"), "epochs without validation gain before stopping"),
    key("tbptt_window", Kind::Int, Some("8"), "buckets per truncated backpropagation window"),
    key("seeds", Kind::Seeds, Some("0,1,2"), "training seeds"),
    key("lambda1", Kind::Float, Some("0.1"), "weight of the time loss"),
    key("lambda2", Kind::Float, Some("1"), "weight of the subject loss"),
    key("out_dir", Kind::Path, Some("runs"), "directory for checkpoints and curves"),
    key("checkpoint", Kind::Path, None, "model checkpoint to load"),
    key("state_out", Kind::Path, None, "write the final embedding state here"),
    key("split", Kind::Choice(SPLITS), Some("test"), "split to evaluate"),
    key("source", Kind::Text, None, "query subject entity"),
    key("relation", Kind::Text, None, "query relation"),
    key("topk", Kind::Int, Some("10"), "predictions to report"),
    key("entity", Kind::Text, None, "entity whose centrality is tracked"),
    key("measure", Kind::Choice(MEASURES), Some("pagerank"), "centrality measure"),
    key("from", Kind::Date, None, "first date of the output period"),
    key("to", Kind::Date, None, "last date of the output period"),
    key("window_days", Kind::Int, Some("30"), "snapshot window in days"),
    key("zscore_days", Kind::Int, Some("365"), "rolling z-score window in days"),
    key("damping", Kind::Float, Some("0.85"), "PageRank damping"),
    key("theme", Kind::Text, None, "theme entity"),
    key("prices", Kind::Path, None, "date,ticker,adj_close price file"),
    key("map", Kind::Path, None, "entity<TAB>ticker universe file"),
    key("refit_every", Kind::Int, Some("3"), "rebalances between model refits"),
    key("window_months", Kind::Int, Some("36"), "trailing training window in months"),
    key("wealth_csv", Kind::Path, None, "wealth curve output [default: <out_dir>/wealth.csv]"),
    key("output", Kind::Path, None, "write the main result here instead of stdout"),
];

pub fn lookup(name: &str) -> Option<&'static Key> {
    REGISTRY.iter().find(|k| k.name == name)
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Resolved settings; every stored value has passed its type check.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        let values = REGISTRY
            .iter()
            .filter_map(|k| k.default.map(|d| (k.name, d.to_string())))
            .collect();
        RunConfig { values }
    }

    pub fn set(&mut self, name: &str, value: &str) -> anyhow::Result<()> {
        let key = lookup(name).ok_or_else(|| usage(format!("unknown config key '{name}'")))?;
        key.kind
            .check(value)
            .map_err(|e| usage(format!("config key '{name}': {e}")))?;
        self.values.insert(key.name, value.to_string());
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> anyhow::Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!(
                    "{}:{}: expected 'key = value'",
                    origin.display(),
                    i + 1
                )));
            };
            self.set(k.trim(), v.trim())
                .map_err(|e| usage(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        debug_assert!(lookup(name).is_some(), "unregistered key {name}");
        self.values.get(name).map(String::as_str)
    }

    pub fn require(&self, name: &str) -> anyhow::Result<&str> {
        self.get(name)
            .ok_or_else(|| usage(format!("missing required setting --{}", flag_name(name))))
    }

    pub fn usize(&self, name: &str) -> anyhow::Result<usize> {
        Ok(self.require(name)?.parse()?)
    }

    pub fn f64(&self, name: &str) -> anyhow::Result<f64> {
        Ok(self.require(name)?.parse()?)
    }

    pub fn bool(&self, name: &str) -> anyhow::Result<bool> {
        Ok(self.require(name)? == "true")
    }

    pub fn path(&self, name: &str) -> anyhow::Result<PathBuf> {
        self.require(name).map(PathBuf::from)
    }

    pub fn opt_path(&self, name: &str) -> Option<PathBuf> {
        self.get(name).map(PathBuf::from)
    }

    pub fn date(&self, name: &str) -> anyhow::Result<NaiveDate> {
        Ok(NaiveDate::parse_from_str(self.require(name)?, "%Y-%m-%d")?)
    }

    pub fn opt_date(&self, name: &str) -> anyhow::Result<Option<NaiveDate>> {
        self.get(name).map(|_| self.date(name)).transpose()
    }

    pub fn seeds(&self) -> anyhow::Result<Vec<u64>> {
        parse_seeds(self.require("seeds")?).ok_or_else(|| usage("malformed seeds"))
    }

    pub fn format(&self) -> anyhow::Result<DataFormat> {
        Ok(match self.require("format")? {
            "quadruple" => DataFormat::Quadruple,
            "quintuple" => DataFormat::Quintuple,
            _ => DataFormat::Auto,
        })
    }

    pub fn split(&self) -> anyhow::Result<Split> {
        Ok(self.require("split")?.parse()?)
    }

    pub fn measure(&self) -> anyhow::Result<Measure> {
        Ok(self.require("measure")?.parse()?)
    }
}
