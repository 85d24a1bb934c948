//! Behavior-log parsing and assembly of the unified training input.
//!
//! Graph learning and CTR prediction consume exactly the same
//! [`TrainingSample`]: a target item, the query under which it was shown, and
//! the user's click and query history before that moment.
//!
//! Two text formats live here:
//!
//! * the behavior log, one event per line:
//!   `user_id \t C|Q \t entity_id \t timestamp \t cat1,cat2,...`
//! * labeled samples, one impression per line:
//!   `user_id \t label \t target \t query \t clicks \t queries \t seeds \t other`
//!   where every event is written as `entity_id:timestamp:cat1,cat2`, lists of
//!   events are space separated, `other` is comma-separated decimals and an
//!   empty list is written as `-`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Kind of a behavior event. The derived order is the tie-break order used
/// when two events of one user share a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Click,
    Query,
}

impl EventKind {
    pub fn code(self) -> char {
        match self {
            EventKind::Click => 'C',
            EventKind::Query => 'Q',
        }
    }

    fn from_code(s: &str) -> Option<Self> {
        match s {
            "C" => Some(EventKind::Click),
            "Q" => Some(EventKind::Query),
            _ => None,
        }
    }
}

/// A nonempty, sorted, duplicate-free set of category ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CategorySet(Vec<u32>);

impl CategorySet {
    /// Returns `None` for an empty input.
    pub fn new(mut cats: Vec<u32>) -> Option<Self> {
        if cats.is_empty() {
            return None;
        }
        cats.sort_unstable();
        cats.dedup();
        Some(CategorySet(cats))
    }

    pub fn single(cat: u32) -> Self {
        CategorySet(vec![cat])
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn contains(&self, cat: u32) -> bool {
        self.0.binary_search(&cat).is_ok()
    }

    /// Merge-walk intersection test over the two sorted lists.
    pub fn intersects(&self, other: &CategorySet) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }

    fn parse(s: &str) -> Option<Self> {
        let cats = s
            .split(',')
            .map(|c| c.trim().parse::<u32>().ok())
            .collect::<Option<Vec<_>>>()?;
        CategorySet::new(cats)
    }
}

impl fmt::Display for CategorySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// One click or query issued by a user.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BehaviorEvent {
    pub kind: EventKind,
    pub entity_id: u64,
    /// Seconds since epoch.
    pub timestamp: u64,
    pub categories: CategorySet,
}

impl BehaviorEvent {
    pub fn click(entity_id: u64, timestamp: u64, categories: CategorySet) -> Self {
        BehaviorEvent {
            kind: EventKind::Click,
            entity_id,
            timestamp,
            categories,
        }
    }

    pub fn query(entity_id: u64, timestamp: u64, categories: CategorySet) -> Self {
        BehaviorEvent {
            kind: EventKind::Query,
            entity_id,
            timestamp,
            categories,
        }
    }

    fn sort_key(&self) -> (u64, EventKind, u64) {
        (self.timestamp, self.kind, self.entity_id)
    }
}

/// All events of one user, ascending by `(timestamp, kind, entity_id)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorSequence {
    pub user_id: u64,
    pub events: Vec<BehaviorEvent>,
}

impl BehaviorSequence {
    /// Builds a sequence, sorting the events into canonical order.
    pub fn new(user_id: u64, mut events: Vec<BehaviorEvent>) -> Self {
        events.sort_by_key(BehaviorEvent::sort_key);
        BehaviorSequence { user_id, events }
    }
}

/// One impression: the shared input of graph learning and CTR prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub user_id: u64,
    pub target_item: BehaviorEvent,
    pub current_query: BehaviorEvent,
    pub click_seq: Vec<BehaviorEvent>,
    pub query_seq: Vec<BehaviorEvent>,
    pub seeds_seq: Vec<BehaviorEvent>,
    pub other_features: Vec<f64>,
    pub label: u8,
}

impl TrainingSample {
    /// Checks the structural invariants of a sample.
    pub fn validate(&self) -> Result<()> {
        if self.target_item.kind != EventKind::Click {
            return Err(Error::Contract("target must be a click event".into()));
        }
        if self.current_query.kind != EventKind::Query {
            return Err(Error::Contract("current query must be a query event".into()));
        }
        if self.label > 1 {
            return Err(Error::Contract(format!("label {} is not 0 or 1", self.label)));
        }
        let t = self.target_item.timestamp;
        let seqs = [&self.click_seq, &self.query_seq, &self.seeds_seq];
        if seqs.iter().flat_map(|s| s.iter()).any(|e| e.timestamp >= t) {
            return Err(Error::Contract("history event does not precede the target".into()));
        }
        if self.click_seq.iter().any(|e| e.kind != EventKind::Click)
            || self.seeds_seq.iter().any(|e| e.kind != EventKind::Click)
            || self.query_seq.iter().any(|e| e.kind != EventKind::Query)
        {
            return Err(Error::Contract("sequence holds an event of the wrong kind".into()));
        }
        Ok(())
    }
}

/// Truncation limits and query-sequence policy used when assembling samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLimits {
    pub l_click: usize,
    pub l_query: usize,
    /// Keep the current query inside the query sequence.
    pub include_current_query: bool,
}

impl Default for SeqLimits {
    fn default() -> Self {
        SeqLimits {
            l_click: 100,
            l_query: 100,
            include_current_query: false,
        }
    }
}

/// Result of [`parse_log`].
#[derive(Debug, Clone, Default)]
pub struct ParsedLog {
    /// One sequence per user, ascending by user id.
    pub sequences: Vec<BehaviorSequence>,
    pub malformed: usize,
    pub lines: usize,
}

/// Parses a behavior log from disk.
pub fn parse_log(path: &Path) -> Result<ParsedLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_log_reader(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses a behavior log. Blank lines are ignored; malformed lines are
/// counted and skipped unless they exceed 10% of all nonblank lines.
pub fn parse_log_reader<R: BufRead>(reader: R) -> Result<ParsedLog> {
    let mut by_user: BTreeMap<u64, Vec<BehaviorEvent>> = BTreeMap::new();
    let mut malformed = 0;
    let mut lines = 0;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<log>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse_log_line(&line) {
            Some((user, event)) => by_user.entry(user).or_default().push(event),
            None => malformed += 1,
        }
    }
    if malformed * 10 > lines {
        return Err(Error::TooManyMalformed {
            malformed,
            total: lines,
        });
    }
    let sequences = by_user
        .into_iter()
        .map(|(user_id, events)| BehaviorSequence::new(user_id, events))
        .collect();
    Ok(ParsedLog {
        sequences,
        malformed,
        lines,
    })
}

fn parse_log_line(line: &str) -> Option<(u64, BehaviorEvent)> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return None;
    }
    let user = fields[0].trim().parse().ok()?;
    let kind = EventKind::from_code(fields[1].trim())?;
    let entity_id = fields[2].trim().parse().ok()?;
    let timestamp = fields[3].trim().parse().ok()?;
    let categories = CategorySet::parse(fields[4])?;
    Some((
        user,
        BehaviorEvent {
            kind,
            entity_id,
            timestamp,
            categories,
        },
    ))
}

/// Writes sequences in the behavior-log line format.
pub fn write_log<W: Write>(mut out: W, sequences: &[BehaviorSequence]) -> std::io::Result<()> {
    for seq in sequences {
        for e in &seq.events {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                seq.user_id,
                e.kind.code(),
                e.entity_id,
                e.timestamp,
                e.categories
            )?;
        }
    }
    out.flush()
}

pub fn write_log_file(path: &Path, sequences: &[BehaviorSequence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_log(BufWriter::new(file), sequences).map_err(|e| Error::io(path, e))
}

/// Partitions events into clicks and queries, keeping the most recent
/// `l_click` / `l_query` of each.
pub fn split_sequences(
    events: &[BehaviorEvent],
    l_click: usize,
    l_query: usize,
) -> (Vec<BehaviorEvent>, Vec<BehaviorEvent>) {
    let (clicks, queries): (Vec<_>, Vec<_>) = events
        .iter()
        .cloned()
        .partition(|e| e.kind == EventKind::Click);
    (keep_recent(clicks, l_click), keep_recent(queries, l_query))
}

fn keep_recent(mut v: Vec<BehaviorEvent>, limit: usize) -> Vec<BehaviorEvent> {
    if v.len() > limit {
        v.drain(..v.len() - limit);
    }
    v
}

/// Clicks whose categories intersect the current query's, order preserved.
pub fn derive_seeds_seq(
    click_seq: &[BehaviorEvent],
    current_query: &BehaviorEvent,
) -> Vec<BehaviorEvent> {
    click_seq
        .iter()
        .filter(|c| c.categories.intersects(&current_query.categories))
        .cloned()
        .collect()
}

/// Builds a sample from the events strictly preceding `target`.
///
/// The current query is the most recent query in `history`. Returns `None`
/// when the history holds no query.
pub fn assemble_sample(
    user_id: u64,
    history: &[BehaviorEvent],
    target: BehaviorEvent,
    label: u8,
    other_features: Vec<f64>,
    limits: SeqLimits,
) -> Option<TrainingSample> {
    let q_pos = history.iter().rposition(|e| e.kind == EventKind::Query)?;
    let current_query = history[q_pos].clone();
    let visible: Vec<BehaviorEvent> = if limits.include_current_query {
        history.to_vec()
    } else {
        history
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != q_pos)
            .map(|(_, e)| e.clone())
            .collect()
    };
    let (click_seq, query_seq) = split_sequences(&visible, limits.l_click, limits.l_query);
    let seeds_seq = derive_seeds_seq(&click_seq, &current_query);
    Some(TrainingSample {
        user_id,
        target_item: target,
        current_query,
        click_seq,
        query_seq,
        seeds_seq,
        other_features,
        label,
    })
}

/// Re-applies truncation limits to an already assembled sample.
pub fn truncate_sample(sample: &mut TrainingSample, l_click: usize, l_query: usize) {
    let clicks = std::mem::take(&mut sample.click_seq);
    sample.click_seq = keep_recent(clicks, l_click);
    let queries = std::mem::take(&mut sample.query_seq);
    sample.query_seq = keep_recent(queries, l_query);
    sample.seeds_seq = derive_seeds_seq(&sample.click_seq, &sample.current_query);
}

// ---------------------------------------------------------------------------
// Labeled-sample records

fn fmt_event(e: &BehaviorEvent) -> String {
    format!("{}:{}:{}", e.entity_id, e.timestamp, e.categories)
}

fn fmt_events(events: &[BehaviorEvent]) -> String {
    if events.is_empty() {
        return "-".to_string();
    }
    events.iter().map(fmt_event).collect::<Vec<_>>().join(" ")
}

fn parse_event(tok: &str, kind: EventKind) -> Option<BehaviorEvent> {
    let mut parts = tok.splitn(3, ':');
    let entity_id = parts.next()?.parse().ok()?;
    let timestamp = parts.next()?.parse().ok()?;
    let categories = CategorySet::parse(parts.next()?)?;
    Some(BehaviorEvent {
        kind,
        entity_id,
        timestamp,
        categories,
    })
}

fn parse_events(field: &str, kind: EventKind) -> Option<Vec<BehaviorEvent>> {
    if field == "-" {
        return Some(Vec::new());
    }
    field
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| parse_event(t, kind))
        .collect()
}

/// Formats one sample as a labeled-sample line (no trailing newline).
pub fn format_sample(s: &TrainingSample) -> String {
    let other = if s.other_features.is_empty() {
        "-".to_string()
    } else {
        s.other_features
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        s.user_id,
        s.label,
        fmt_event(&s.target_item),
        fmt_event(&s.current_query),
        fmt_events(&s.click_seq),
        fmt_events(&s.query_seq),
        fmt_events(&s.seeds_seq),
        other
    )
}

/// Parses one labeled-sample line.
pub fn parse_sample(line: &str) -> Option<TrainingSample> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 8 {
        return None;
    }
    let other_features = if f[7] == "-" {
        Vec::new()
    } else {
        f[7].split(',')
            .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<_>>>()?
    };
    let sample = TrainingSample {
        user_id: f[0].parse().ok()?,
        label: f[1].parse().ok()?,
        target_item: parse_event(f[2], EventKind::Click)?,
        current_query: parse_event(f[3], EventKind::Query)?,
        click_seq: parse_events(f[4], EventKind::Click)?,
        query_seq: parse_events(f[5], EventKind::Query)?,
        seeds_seq: parse_events(f[6], EventKind::Click)?,
        other_features,
    };
    sample.validate().ok()?;
    Some(sample)
}

pub fn write_samples<W: Write>(mut out: W, samples: &[TrainingSample]) -> std::io::Result<()> {
    for s in samples {
        writeln!(out, "{}", format_sample(s))?;
    }
    out.flush()
}

pub fn write_samples_file(path: &Path, samples: &[TrainingSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_samples(BufWriter::new(file), samples).map_err(|e| Error::io(path, e))
}

/// Reads a labeled-sample file. Any malformed record is a hard error.
pub fn read_samples_file(path: &Path) -> Result<Vec<TrainingSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_sample(&line).ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "malformed labeled sample".into(),
        })?;
        out.push(sample);
    }
    Ok(out)
}
