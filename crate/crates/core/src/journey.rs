//! Touchpoints, paths, channel aggregates and attribution records, plus
//! their JSONL / CSV file formats.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Day index since the epoch (UTC).
pub fn day_index(ts: i64) -> i64 {
    ts.div_euclid(SECONDS_PER_DAY)
}

/// Day of week with Sunday = 0; 1970-01-01 was a Thursday.
pub fn day_of_week(ts: i64) -> usize {
    (day_index(ts) + 4).rem_euclid(7) as usize
}

/// Marketing channel, identified by an upper-case name such as `EMAIL`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Channel(String);

impl Channel {
    pub fn new(name: &str) -> Self {
        Channel(name.trim().to_ascii_uppercase())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Declared in lexicographic order of the names so the derived `Ord`
/// matches string ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Click,
    Impression,
    Open,
    Send,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Click, Action::Impression, Action::Open, Action::Send];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Click => "CLICK",
            Action::Impression => "IMPRESSION",
            Action::Open => "OPEN",
            Action::Send => "SEND",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A (channel, action) pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TouchKey {
    pub channel: Channel,
    pub action: Action,
}

impl TouchKey {
    pub fn new(channel: Channel, action: Action) -> Self {
        Self { channel, action }
    }
}

impl fmt::Display for TouchKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.channel, self.action)
    }
}

/// A touch key with its vocabulary index (1..=K; 0 is padding).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TouchpointKind {
    pub key: TouchKey,
    pub vocab_index: usize,
}

/// Bijection between touch keys and indices `1..=K`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    keys: Vec<(Channel, Action)>,
}

impl Vocab {
    /// Assigns indices in lexicographic (channel, action) order.
    pub fn build(pairs: &[TouchKey]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("vocabulary needs at least one pair".into()));
        }
        let mut seen = BTreeSet::new();
        for p in pairs {
            if !seen.insert(p.clone()) {
                return Err(Error::InvalidInput(format!("duplicate vocabulary pair {p}")));
            }
        }
        Ok(Self {
            keys: seen.into_iter().map(|k| (k.channel, k.action)).collect(),
        })
    }

    /// Vocabulary of every distinct key occurring in `paths`.
    pub fn from_paths(paths: &[Path]) -> Result<Self> {
        let keys: BTreeSet<TouchKey> = paths
            .iter()
            .flat_map(|p| p.touchpoints.iter().map(Touchpoint::key))
            .collect();
        Self::build(&keys.into_iter().collect::<Vec<_>>())
    }

    /// K, the number of assigned indices.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index(&self, key: &TouchKey) -> Option<usize> {
        self.keys
            .binary_search_by(|(c, a)| (c, a).cmp(&(&key.channel, &key.action)))
            .ok()
            .map(|i| i + 1)
    }

    pub fn kind(&self, key: &TouchKey) -> Option<TouchpointKind> {
        self.index(key).map(|vocab_index| TouchpointKind {
            key: key.clone(),
            vocab_index,
        })
    }

    pub fn kinds(&self) -> impl Iterator<Item = TouchpointKind> + '_ {
        self.keys.iter().enumerate().map(|(i, (c, a))| TouchpointKind {
            key: TouchKey::new(c.clone(), *a),
            vocab_index: i + 1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Touchpoint {
    pub id: u64,
    pub channel: Channel,
    pub action: Action,
    pub ts: i64,
    pub campaign_id: u32,
    pub campaign_emb: Vec<f64>,
    #[serde(default)]
    pub imputed: bool,
    #[serde(default)]
    pub linkage: Vec<u64>,
}

impl Touchpoint {
    pub fn key(&self) -> TouchKey {
        TouchKey::new(self.channel.clone(), self.action)
    }

    pub fn day(&self) -> i64 {
        day_index(self.ts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub path_id: u64,
    pub member_id: u64,
    pub member_emb: Vec<f64>,
    pub company_emb: Vec<f64>,
    pub converted: bool,
    pub anchor_time: i64,
    pub touchpoints: Vec<Touchpoint>,
}

/// Optional bounds checked on top of the always-on path invariants.
#[derive(Clone, Copy, Debug, Default)]
pub struct PathLimits {
    pub max_len: Option<usize>,
    pub campaign_dim: Option<usize>,
    pub member_dim: Option<usize>,
    pub company_dim: Option<usize>,
}

impl Path {
    pub fn len(&self) -> usize {
        self.touchpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.touchpoints.is_empty()
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::PathInvariant {
            path_id: self.path_id,
            msg: msg.into(),
        }
    }

    pub fn validate(&self, limits: &PathLimits) -> Result<()> {
        if self.touchpoints.windows(2).any(|w| w[0].ts > w[1].ts) {
            return Err(self.fail("touchpoints out of time order"));
        }
        if let Some(t) = self.touchpoints.iter().find(|t| t.ts > self.anchor_time) {
            return Err(self.fail(format!("touchpoint {} after anchor time", t.id)));
        }
        if let Some(n) = limits.max_len {
            if self.len() > n {
                return Err(self.fail(format!("length {} exceeds limit {n}", self.len())));
            }
        }
        let check_dim = |what: &str, len: usize, want: Option<usize>| match want {
            Some(d) if d != len => Err(self.fail(format!("{what} has length {len}, expected {d}"))),
            _ => Ok(()),
        };
        check_dim("member_emb", self.member_emb.len(), limits.member_dim)?;
        check_dim("company_emb", self.company_emb.len(), limits.company_dim)?;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.member_emb) || !finite(&self.company_emb) {
            return Err(self.fail("non-finite entity embedding"));
        }
        for t in &self.touchpoints {
            check_dim("campaign_emb", t.campaign_emb.len(), limits.campaign_dim)?;
            if !finite(&t.campaign_emb) {
                return Err(self.fail(format!("touchpoint {} has non-finite campaign_emb", t.id)));
            }
            let mut ids = BTreeSet::new();
            for &l in &t.linkage {
                if l == t.id {
                    return Err(self.fail(format!("touchpoint {} links to itself", t.id)));
                }
                if !ids.insert(l) {
                    return Err(self.fail(format!("touchpoint {} has duplicate linkage id {l}", t.id)));
                }
            }
        }
        Ok(())
    }

    /// Largest touchpoint id on the path, counting linkage ids.
    pub fn max_touch_id(&self) -> Option<u64> {
        self.touchpoints
            .iter()
            .flat_map(|t| std::iter::once(t.id).chain(t.linkage.iter().copied()))
            .max()
    }
}

/// Reads one path per line. Lines must satisfy the path invariants.
pub fn read_paths(file: &FsPath) -> Result<Vec<Path>> {
    let f = File::open(file).map_err(|e| Error::io(file, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let path = parse_path_line(&line, i + 1)?;
        path.validate(&PathLimits::default())?;
        out.push(path);
    }
    Ok(out)
}

pub(crate) fn parse_path_line(line: &str, lineno: usize) -> Result<Path> {
    let mut de = serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            Error::Malformed {
                line: lineno,
                msg: inner.to_string(),
            }
        } else {
            Error::Schema {
                line: lineno,
                field,
                msg: inner.to_string(),
            }
        }
    })
}

/// Writes one path per line after validating every path first.
pub fn write_paths(paths: &[Path], file: &FsPath, limits: &PathLimits) -> Result<()> {
    for p in paths {
        p.validate(limits)?;
    }
    write_jsonl(paths, file)
}

pub fn write_jsonl<T: Serialize>(items: &[T], file: &FsPath) -> Result<()> {
    let f = File::create(file).map_err(|e| Error::io(file, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(file, e))?;
    }
    w.flush().map_err(|e| Error::io(file, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(file: &FsPath) -> Result<Vec<T>> {
    let f = File::open(file).map_err(|e| Error::io(file, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut de = serde_json::Deserializer::from_str(&line);
        let item = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Schema {
            line: i + 1,
            field: e.path().to_string(),
            msg: e.into_inner().to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// External counts for one (channel, day) cell.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExternalCell {
    pub i_ext: f64,
    pub c_ext: f64,
}

/// Owned-channel impression and click totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OwnedStats {
    pub i_own_total: f64,
    pub c_own_total: f64,
    pub i_own_clickers: f64,
    pub c_own_clickers: f64,
}

impl OwnedStats {
    /// Totals over owned channels: impressions and clicks of everyone, and
    /// impressions and clicks of members who clicked at least once.
    pub fn from_paths(paths: &[Path], owned: &BTreeSet<Channel>) -> Self {
        let mut s = OwnedStats::default();
        for p in paths {
            let (mut imps, mut clicks) = (0.0, 0.0);
            for t in p.touchpoints.iter().filter(|t| owned.contains(&t.channel) && !t.imputed) {
                match t.action {
                    Action::Impression => imps += 1.0,
                    Action::Click => clicks += 1.0,
                    _ => {}
                }
            }
            s.i_own_total += imps;
            s.c_own_total += clicks;
            if clicks > 0.0 {
                s.i_own_clickers += imps;
                s.c_own_clickers += clicks;
            }
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChannelAggregates {
    pub cells: BTreeMap<(Channel, i64), ExternalCell>,
    pub owned: OwnedStats,
}

#[derive(Serialize, Deserialize)]
struct AggRow {
    channel: Channel,
    day: i64,
    i_ext: f64,
    c_ext: f64,
}

impl ChannelAggregates {
    pub fn validate(&self) -> Result<()> {
        for ((c, d), cell) in &self.cells {
            if cell.i_ext < 0.0 || cell.c_ext < 0.0 || !cell.i_ext.is_finite() || !cell.c_ext.is_finite() {
                return Err(Error::InvalidInput(format!("negative count in cell ({c}, {d})")));
            }
            if cell.c_ext > cell.i_ext {
                return Err(Error::InvalidInput(format!("clicks exceed impressions in cell ({c}, {d})")));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> BTreeSet<Channel> {
        self.cells.keys().map(|(c, _)| c.clone()).collect()
    }

    pub fn write_csv(&self, file: &FsPath) -> Result<()> {
        self.validate()?;
        let mut w = csv::Writer::from_path(file)?;
        for ((channel, day), cell) in &self.cells {
            w.serialize(AggRow {
                channel: channel.clone(),
                day: *day,
                i_ext: cell.i_ext,
                c_ext: cell.c_ext,
            })?;
        }
        w.flush().map_err(|e| Error::io(file, e))
    }

    /// Reads external cells; owned totals are left at zero.
    pub fn read_csv(file: &FsPath) -> Result<Self> {
        let mut r = csv::Reader::from_path(file)?;
        let mut cells = BTreeMap::new();
        for row in r.deserialize() {
            let row: AggRow = row?;
            cells.insert(
                (row.channel, row.day),
                ExternalCell {
                    i_ext: row.i_ext,
                    c_ext: row.c_ext,
                },
            );
        }
        let agg = Self {
            cells,
            owned: OwnedStats::default(),
        };
        agg.validate()?;
        Ok(agg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Attention,
    Incremental,
    LastTouch,
    GroundTruth,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attention" => Some(Method::Attention),
            "incremental" => Some(Method::Incremental),
            "last_touch" => Some(Method::LastTouch),
            "ground_truth" => Some(Method::GroundTruth),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub path_id: u64,
    pub method: Method,
    pub credits: Vec<f64>,
}

impl AttributionResult {
    pub fn validate(&self) -> Result<()> {
        if self.credits.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::PathInvariant {
                path_id: self.path_id,
                msg: "negative or non-finite credit".into(),
            });
        }
        if !self.credits.is_empty() {
            let s: f64 = self.credits.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::PathInvariant {
                    path_id: self.path_id,
                    msg: format!("credits sum to {s}"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(c: &str, a: Action) -> TouchKey {
        TouchKey::new(Channel::new(c), a)
    }

    #[test]
    fn vocab_singleton() {
        let v = Vocab::build(&[key("EMAIL", Action::Open)]).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.index(&key("EMAIL", Action::Open)), Some(1));
    }

    #[test]
    fn vocab_sorted_order() {
        let v = Vocab::build(&[
            key("EMAIL", Action::Open),
            key("AD", Action::Impression),
            key("AD", Action::Click),
        ])
        .unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.index(&key("AD", Action::Click)), Some(1));
        assert_eq!(v.index(&key("AD", Action::Impression)), Some(2));
        assert_eq!(v.index(&key("EMAIL", Action::Open)), Some(3));
        assert_eq!(v.index(&key("EMAIL", Action::Send)), None);
        assert!(v.kinds().all(|k| k.vocab_index >= 1));
    }

    #[test]
    fn vocab_rejects_duplicates() {
        assert!(Vocab::build(&[key("AD", Action::Click), key("AD", Action::Click)]).is_err());
    }

    #[test]
    fn epoch_was_thursday() {
        assert_eq!(day_of_week(0), 4);
        assert_eq!(day_of_week(3 * SECONDS_PER_DAY), 0);
        assert_eq!(day_index(-1), -1);
    }

    #[test]
    fn credits_must_sum_to_one() {
        let ok = AttributionResult {
            path_id: 1,
            method: Method::LastTouch,
            credits: vec![0.0, 1.0],
        };
        assert!(ok.validate().is_ok());
        let bad = AttributionResult {
            credits: vec![0.5, 0.4],
            ..ok.clone()
        };
        assert!(bad.validate().is_err());
        let neg = AttributionResult {
            credits: vec![-0.1, 1.1],
            ..ok
        };
        assert!(neg.validate().is_err());
    }
}
