//! Dataset ingestion and the canonical interchange format.
//!
//! Canonical TSV is one `user<TAB>item<TAB>timestamp` line per interaction,
//! sorted by timestamp. Lines starting with `#` are comments; a
//! `# users=N items=M` comment fixes the id universes when present.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Interaction, InteractionLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// `user::item::rating::timestamp`
    MovielensDat,
    /// `item,user,rating,timestamp`
    AmazonCsv,
    /// `user<TAB>item<TAB>timestamp`
    CanonicalTsv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens_dat" | "movielens" => Ok(Format::MovielensDat),
            "amazon_csv" | "amazon" => Ok(Format::AmazonCsv),
            "canonical_tsv" | "tsv" => Ok(Format::CanonicalTsv),
            other => Err(Error::invalid(format!("unknown format {other:?}"))),
        }
    }
}

/// Original ids indexed by compact id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdRemap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

struct RawRecord<'a> {
    user: &'a str,
    item: &'a str,
    timestamp: i64,
}

fn split_line<'a>(line: &'a str, format: Format, lineno: usize) -> Result<RawRecord<'a>> {
    let bad = |message: String| Error::Parse { line: lineno, message };
    let fields: Vec<&str> = match format {
        Format::MovielensDat => line.split("::").collect(),
        Format::AmazonCsv => line.split(',').collect(),
        Format::CanonicalTsv => line.split('\t').collect(),
    };
    let expected = if format == Format::CanonicalTsv { 3 } else { 4 };
    if fields.len() != expected {
        return Err(bad(format!("expected {expected} fields, found {}", fields.len())));
    }
    let (user, item, ts) = match format {
        Format::MovielensDat => (fields[0], fields[1], fields[3]),
        Format::AmazonCsv => (fields[1], fields[0], fields[3]),
        Format::CanonicalTsv => (fields[0], fields[1], fields[2]),
    };
    let (user, item, ts) = (user.trim(), item.trim(), ts.trim());
    if user.is_empty() || item.is_empty() {
        return Err(bad("empty id".into()));
    }
    // Amazon dumps sometimes carry fractional epoch seconds.
    let timestamp = ts
        .parse::<i64>()
        .or_else(|_| ts.parse::<f64>().map(|f| f as i64))
        .map_err(|_| bad(format!("bad timestamp {ts:?}")))?;
    if timestamp < 0 {
        return Err(bad(format!("negative timestamp {timestamp}")));
    }
    Ok(RawRecord { user, item, timestamp })
}

/// Sorted unique ids: numerically when every id is an integer, else lexicographically.
fn ordered_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut ids: Vec<&str> = ids.collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.iter().all(|s| s.parse::<u64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<u64>().unwrap());
    }
    ids.into_iter().map(str::to_owned).collect()
}

/// Parses raw text into a compacted log. Ratings are dropped.
pub fn parse(text: &str, format: Format) -> Result<(InteractionLog, IdRemap)> {
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        raw.push(split_line(trimmed, format, i + 1)?);
    }
    if raw.is_empty() {
        return Err(Error::NoInteractions);
    }
    let users = ordered_ids(raw.iter().map(|r| r.user));
    let items = ordered_ids(raw.iter().map(|r| r.item));
    let user_index: HashMap<&str, usize> = users.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let item_index: HashMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let records = raw
        .iter()
        .map(|r| Interaction::new(user_index[r.user], item_index[r.item], r.timestamp))
        .collect();
    let log = InteractionLog::new(records, users.len(), items.len())?;
    Ok((log, IdRemap { users, items }))
}

pub fn ingest(path: impl AsRef<Path>, format: Format) -> Result<(InteractionLog, IdRemap)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, format)
}

pub fn canonical_string(log: &InteractionLog, comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    let _ = writeln!(out, "# users={} items={}", log.user_count(), log.item_count());
    for r in log.records() {
        let _ = writeln!(out, "{}\t{}\t{}", r.user, r.item, r.timestamp);
    }
    out
}

pub fn write_canonical(path: impl AsRef<Path>, log: &InteractionLog, comments: &[String]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, canonical_string(log, comments)).map_err(|e| Error::io(path, e))
}

fn parse_universe(comment: &str) -> Option<(usize, usize)> {
    let mut users = None;
    let mut items = None;
    for tok in comment.split_whitespace() {
        if let Some(v) = tok.strip_prefix("users=") {
            users = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("items=") {
            items = v.parse().ok();
        }
    }
    Some((users?, items?))
}

/// Parses canonical TSV keeping ids as they are (no compaction).
pub fn parse_canonical(text: &str) -> Result<InteractionLog> {
    let mut universe = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some(u) = parse_universe(comment) {
                universe = Some(u);
            }
            continue;
        }
        let raw = split_line(trimmed, Format::CanonicalTsv, i + 1)?;
        let id = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("non-integer id {s:?}"),
            })
        };
        records.push(Interaction::new(id(raw.user)?, id(raw.item)?, raw.timestamp));
    }
    let (users, items) = universe.unwrap_or_else(|| {
        (
            records.iter().map(|r| r.user + 1).max().unwrap_or(0),
            records.iter().map(|r| r.item + 1).max().unwrap_or(0),
        )
    });
    InteractionLog::new(records, users, items)
}

pub fn read_canonical(path: impl AsRef<Path>) -> Result<InteractionLog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_canonical(&text)
}

/// Writes `original_id<TAB>compact_id` lines.
pub fn write_remap(path: impl AsRef<Path>, originals: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (compact, original) in originals.iter().enumerate() {
        let _ = writeln!(out, "{original}\t{compact}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_remap(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (orig, compact) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected original<TAB>compact".into(),
        })?;
        let compact: usize = compact.trim().parse().map_err(|_| Error::Parse {
            line: i + 1,
            message: format!("bad compact id {compact:?}"),
        })?;
        pairs.push((compact, orig.to_owned()));
    }
    pairs.sort();
    if pairs.iter().enumerate().any(|(i, (c, _))| *c != i) {
        return Err(Error::invalid("remap table is not a dense 0-based index"));
    }
    Ok(pairs.into_iter().map(|(_, o)| o).collect())
}
