//! Temporal knowledge-graph datasets: interning, ingestion and snapshots.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use log::warn;
use serde::Serialize;

use crate::error::{Result, TkgError};

/// Bidirectional name <-> dense id map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let mut it = Interner::new();
        for n in names {
            it.intern(&n.into());
        }
        it
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Up to `k` known names closest to `name` (case-insensitive edit distance).
    pub fn nearest(&self, name: &str, k: usize) -> Vec<String> {
        let target = name.to_lowercase();
        let mut scored: Vec<(usize, &String)> = self
            .names
            .iter()
            .map(|n| (edit_distance(&target, &n.to_lowercase()), n))
            .collect();
        scored.sort();
        scored.into_iter().take(k).map(|(_, n)| n.clone()).collect()
    }

    /// Id for `name`, or a lookup error listing near misses.
    pub fn lookup(&self, kind: &'static str, name: &str) -> Result<usize> {
        self.get(name).ok_or_else(|| TkgError::Lookup {
            kind,
            name: name.to_string(),
            suggestions: self.nearest(name, 3),
        })
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Entity, relation and entity-type vocabularies plus the type map `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub entities: Interner,
    pub relations: Interner,
    pub entity_types: Interner,
    pub tau: Vec<usize>,
}

impl Vocab {
    /// Every entity is its own type.
    pub fn with_identity_types(entities: Interner, relations: Interner) -> Self {
        let tau = (0..entities.len()).collect();
        Vocab {
            entity_types: entities.clone(),
            entities,
            relations,
            tau,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn type_of(&self, entity: usize) -> usize {
        self.tau[entity]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quadruple {
    pub s: usize,
    pub r: usize,
    pub o: usize,
    pub t: usize,
}

impl Quadruple {
    pub fn new(s: usize, r: usize, o: usize, t: usize) -> Self {
        Quadruple { s, r, o, t }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = TkgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(TkgError::InvalidArgument(format!(
                "unknown split '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fact {
    pub quad: Quadruple,
    /// Raw timestamp: an integer, or days since 0001-01-01 for dated data.
    pub raw: i64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub t: usize,
    pub raw_start: i64,
    pub raw_end: i64,
    pub facts: Vec<Fact>,
}

impl Bucket {
    pub fn quads(&self, splits: &[Split]) -> Vec<Quadruple> {
        self.facts
            .iter()
            .filter(|f| splits.contains(&f.split))
            .map(|f| f.quad)
            .collect()
    }

    pub fn has(&self, split: Split) -> bool {
        self.facts.iter().any(|f| f.split == split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeKind {
    Integer,
    Date,
}

/// Days since 0001-01-01 (day 1) to a calendar date.
pub fn raw_to_date(raw: i64) -> NaiveDate {
    NaiveDate::from_num_days_from_ce_opt(raw as i32).expect("raw day count within chrono range")
}

pub fn date_to_raw(date: NaiveDate) -> i64 {
    date.num_days_from_ce() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub entities: usize,
    pub relations: usize,
    pub types: usize,
}

/// A dynamic knowledge graph split into disjoint, time-ordered buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalKG {
    pub vocab: Vocab,
    pub buckets: Vec<Bucket>,
    pub time_kind: TimeKind,
}

/// One snapshot: the facts of a single bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: usize,
    pub facts: Vec<Quadruple>,
}

impl TemporalKG {
    /// Builds buckets from facts whose `quad.t` is already a bucket index.
    ///
    /// Bucket indices are compacted to `0..T` preserving order, so empty gaps vanish.
    pub fn from_facts(vocab: Vocab, mut facts: Vec<Fact>, time_kind: TimeKind) -> Result<Self> {
        for f in &facts {
            let q = f.quad;
            if q.s >= vocab.num_entities()
                || q.o >= vocab.num_entities()
                || q.r >= vocab.num_relations()
            {
                return Err(TkgError::Validation(format!(
                    "fact {q:?} outside vocabulary bounds"
                )));
            }
        }
        facts.sort_by_key(|f| f.quad.t);
        let mut buckets: Vec<Bucket> = Vec::new();
        let mut last_key = None;
        for mut f in facts {
            if last_key != Some(f.quad.t) {
                last_key = Some(f.quad.t);
                buckets.push(Bucket {
                    t: buckets.len(),
                    raw_start: f.raw,
                    raw_end: f.raw,
                    facts: Vec::new(),
                });
            }
            let b = buckets.last_mut().expect("pushed above");
            f.quad.t = b.t;
            b.raw_start = b.raw_start.min(f.raw);
            b.raw_end = b.raw_end.max(f.raw);
            b.facts.push(f);
        }
        Ok(TemporalKG {
            vocab,
            buckets,
            time_kind,
        })
    }

    pub fn num_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn count(&self, split: Split) -> usize {
        self.buckets
            .iter()
            .map(|b| b.facts.iter().filter(|f| f.split == split).count())
            .sum()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            train: self.count(Split::Train),
            valid: self.count(Split::Valid),
            test: self.count(Split::Test),
            entities: self.vocab.num_entities(),
            relations: self.vocab.num_relations(),
            types: self.vocab.num_types(),
        }
    }

    /// First and last bucket holding facts of `split`.
    pub fn split_range(&self, split: Split) -> Option<RangeInclusive<usize>> {
        let mut it = self.buckets.iter().filter(|b| b.has(split)).map(|b| b.t);
        let first = it.next()?;
        let last = it.next_back().unwrap_or(first);
        Some(first..=last)
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &Fact> {
        self.buckets.iter().flat_map(|b| b.facts.iter())
    }

    /// Per-bucket fact lists for buckets in `range`, restricted to `splits`.
    ///
    /// Buckets with no matching facts are left out.
    pub fn slice_snapshots(
        &self,
        range: RangeInclusive<usize>,
        splits: &[Split],
    ) -> Result<Vec<Snapshot>> {
        if range.start() > range.end() {
            return Err(TkgError::InvalidArgument(format!(
                "inverted bucket range {}..={}",
                range.start(),
                range.end()
            )));
        }
        Ok(self
            .buckets
            .iter()
            .filter(|b| range.contains(&b.t))
            .map(|b| Snapshot {
                t: b.t,
                facts: b.quads(splits),
            })
            .filter(|s| !s.facts.is_empty())
            .collect())
    }

    /// A new graph over the same vocabulary holding the buckets selected by `keep`,
    /// re-indexed from zero, with every fact relabelled as `Train`.
    pub fn restrict(&self, keep: impl Fn(&Bucket) -> bool) -> TemporalKG {
        let buckets = self
            .buckets
            .iter()
            .filter(|b| keep(b))
            .enumerate()
            .map(|(t, b)| Bucket {
                t,
                raw_start: b.raw_start,
                raw_end: b.raw_end,
                facts: b
                    .facts
                    .iter()
                    .map(|f| Fact {
                        quad: Quadruple { t, ..f.quad },
                        raw: f.raw,
                        split: Split::Train,
                    })
                    .collect(),
            })
            .collect();
        TemporalKG {
            vocab: self.vocab.clone(),
            buckets,
            time_kind: self.time_kind,
        }
    }
}

/// `{ s : (s, r, o) in facts }`.
pub fn neighborhood(facts: &[Quadruple], o: usize, r: usize) -> BTreeSet<usize> {
    facts
        .iter()
        .filter(|q| q.o == o && q.r == r)
        .map(|q| q.s)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataFormat {
    /// Quintuples when lines carry at least six fields, quadruples otherwise.
    #[default]
    Auto,
    /// `s, r, o, t` (extra trailing columns ignored).
    Quadruple,
    /// `s, s_type, r, o, o_type, t`.
    Quintuple,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub format: DataFormat,
    pub entity_types: Option<PathBuf>,
    /// Merge raw timestamps into buckets of this width (days for dated data).
    pub bucket_width: Option<i64>,
}

struct RawRecord {
    s: String,
    s_type: Option<String>,
    r: String,
    o: String,
    o_type: Option<String>,
    time: String,
    split: Split,
    path: PathBuf,
    line: usize,
}

fn read_records(
    path: &Path,
    split: Split,
    format: DataFormat,
    out: &mut Vec<RawRecord>,
) -> Result<()> {
    let file = File::open(path).map_err(|e| TkgError::io(path, e))?;
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TkgError::io(path, e))?;
        let line_no = k + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        let quintuple = match format {
            DataFormat::Quintuple => true,
            DataFormat::Quadruple => false,
            DataFormat::Auto => fields.len() >= 6,
        };
        let need = if quintuple { 6 } else { 4 };
        if fields.len() < need {
            return Err(TkgError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!(
                    "expected at least {need} tab-separated fields, found {}",
                    fields.len()
                ),
            });
        }
        let rec = if quintuple {
            RawRecord {
                s: fields[0].into(),
                s_type: Some(fields[1].into()),
                r: fields[2].into(),
                o: fields[3].into(),
                o_type: Some(fields[4].into()),
                time: fields[5].into(),
                split,
                path: path.to_path_buf(),
                line: line_no,
            }
        } else {
            RawRecord {
                s: fields[0].into(),
                s_type: None,
                r: fields[1].into(),
                o: fields[2].into(),
                o_type: None,
                time: fields[3].into(),
                split,
                path: path.to_path_buf(),
                line: line_no,
            }
        };
        out.push(rec);
    }
    Ok(())
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let head = s.get(..10)?;
    NaiveDate::parse_from_str(head, "%Y-%m-%d").ok()
}

fn parse_err(rec: &RawRecord, message: String) -> TkgError {
    TkgError::Parse {
        path: rec.path.clone(),
        line: rec.line,
        message,
    }
}

/// Loads train/valid/test files into one interned graph.
///
/// Identifiers are read as pre-assigned integer ids when every field of the
/// first 100 records is an integer, otherwise they are interned as names in
/// file order (train, valid, test). Duplicated facts are kept.
pub fn load_dataset(
    train: &Path,
    valid: &Path,
    test: &Path,
    options: &LoadOptions,
) -> Result<TemporalKG> {
    let mut records = Vec::new();
    read_records(train, Split::Train, options.format, &mut records)?;
    read_records(valid, Split::Valid, options.format, &mut records)?;
    read_records(test, Split::Test, options.format, &mut records)?;

    let numeric_ids = !records.is_empty()
        && records.iter().take(100).all(|r| {
            [&r.s, &r.r, &r.o, &r.time]
                .iter()
                .all(|f| f.parse::<i64>().is_ok())
        });

    let (entities, relations) = if numeric_ids {
        let parse_id = |rec: &RawRecord, f: &str| {
            f.parse::<usize>().map_err(|_| {
                parse_err(
                    rec,
                    format!("expected a non-negative integer id, found '{f}'"),
                )
            })
        };
        let (mut max_e, mut max_r) = (None::<usize>, None::<usize>);
        for rec in &records {
            let s = parse_id(rec, &rec.s)?;
            let o = parse_id(rec, &rec.o)?;
            let r = parse_id(rec, &rec.r)?;
            max_e = Some(max_e.map_or(s.max(o), |m| m.max(s).max(o)));
            max_r = Some(max_r.map_or(r, |m| m.max(r)));
        }
        let ne = max_e.map_or(0, |m| m + 1);
        let nr = max_r.map_or(0, |m| m + 1);
        (
            Interner::from_names((0..ne).map(|i| i.to_string())),
            Interner::from_names((0..nr).map(|i| i.to_string())),
        )
    } else {
        let mut e = Interner::new();
        let mut r = Interner::new();
        for rec in &records {
            e.intern(&rec.s);
            r.intern(&rec.r);
            e.intern(&rec.o);
        }
        (e, r)
    };

    // Time keys.
    let all_int = records.iter().all(|r| r.time.parse::<i64>().is_ok());
    let time_kind = if all_int {
        TimeKind::Integer
    } else {
        TimeKind::Date
    };
    let mut raws = Vec::with_capacity(records.len());
    for rec in &records {
        let raw = match time_kind {
            TimeKind::Integer => rec.time.parse::<i64>().expect("checked above"),
            TimeKind::Date => match parse_date(&rec.time) {
                Some(d) => date_to_raw(d),
                None => {
                    return Err(parse_err(
                        rec,
                        format!(
                            "timestamp '{}' is neither an integer nor a YYYY-MM-DD date",
                            rec.time
                        ),
                    ))
                }
            },
        };
        raws.push(raw);
    }
    let width = options.bucket_width.unwrap_or(1);
    if width < 1 {
        return Err(TkgError::InvalidArgument(format!(
            "bucket width must be >= 1, got {width}"
        )));
    }
    let min_raw = raws.iter().copied().min().unwrap_or(0);
    let key = |raw: i64| (raw - min_raw).div_euclid(width);

    // Types.
    let quintuple_types = records.iter().any(|r| r.s_type.is_some());
    let vocab = if let Some(type_path) = &options.entity_types {
        let types = read_type_file(type_path, &entities)?;
        Vocab {
            entities,
            relations,
            entity_types: types.0,
            tau: types.1,
        }
    } else if quintuple_types {
        let mut type_names = Interner::new();
        let mut tau: Vec<Option<usize>> = vec![None; entities.len()];
        let mut conflicts = 0usize;
        for rec in &records {
            for (name, ty) in [(&rec.s, &rec.s_type), (&rec.o, &rec.o_type)] {
                let ty = type_names.intern(ty.as_deref().expect("quintuple record"));
                let e = entities.get(name).expect("interned above");
                match tau[e] {
                    None => tau[e] = Some(ty),
                    Some(prev) if prev != ty => conflicts += 1,
                    _ => {}
                }
            }
        }
        if conflicts > 0 {
            warn!("{conflicts} mentions disagree with an entity's first-seen type; first-seen type kept");
        }
        let untyped = tau.iter().filter(|t| t.is_none()).count();
        if untyped > 0 {
            return Err(TkgError::Validation(format!(
                "{untyped} entities never appear with a type"
            )));
        }
        Vocab {
            entities,
            relations,
            entity_types: type_names,
            tau: tau.into_iter().map(|t| t.expect("checked")).collect(),
        }
    } else {
        if !records.is_empty() {
            warn!("no entity-type information supplied; using the identity type map");
        }
        Vocab::with_identity_types(entities, relations)
    };

    let mut facts = Vec::with_capacity(records.len());
    for (rec, &raw) in records.iter().zip(&raws) {
        let (s, r, o) = if numeric_ids {
            (
                rec.s.parse().expect("validated"),
                rec.r.parse().expect("validated"),
                rec.o.parse().expect("validated"),
            )
        } else {
            (
                vocab.entities.get(&rec.s).expect("interned"),
                vocab.relations.get(&rec.r).expect("interned"),
                vocab.entities.get(&rec.o).expect("interned"),
            )
        };
        facts.push(Fact {
            quad: Quadruple::new(s, r, o, key(raw) as usize),
            raw,
            split: rec.split,
        });
    }
    TemporalKG::from_facts(vocab, facts, time_kind)
}

fn read_type_file(path: &Path, entities: &Interner) -> Result<(Interner, Vec<usize>)> {
    let file = File::open(path).map_err(|e| TkgError::io(path, e))?;
    let mut types = Interner::new();
    let mut tau: Vec<Option<usize>> = vec![None; entities.len()];
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TkgError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(TkgError::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                message: "expected 'entity<TAB>type'".into(),
            });
        }
        let e = entities.get(fields[0]).ok_or_else(|| {
            TkgError::Validation(format!(
                "{}:{}: type given for unknown entity '{}'",
                path.display(),
                k + 1,
                fields[0]
            ))
        })?;
        tau[e] = Some(types.intern(fields[1]));
    }
    let missing: Vec<&str> = tau
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_none())
        .map(|(e, _)| entities.name(e))
        .take(5)
        .collect();
    if !missing.is_empty() {
        return Err(TkgError::Validation(format!(
            "entity type file {} lacks entries for e.g. {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok((
        types,
        tau.into_iter().map(|t| t.expect("checked")).collect(),
    ))
}
