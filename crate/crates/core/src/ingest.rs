//! Parsing of the two clickstream formats into labelled sessions, plus
//! deterministic train/validation/test splitting.
//!
//! RecSys-style input is two headerless CSV files (clicks and buys). Retail
//! Rocket-style input is a single event log keyed by visitor, which is cut into
//! sessions with an inactivity gap.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default inactivity gap used to cut Retail Rocket visitor streams into sessions.
pub const DEFAULT_SESSION_GAP_SECS: i64 = 30 * 60;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub session_id: u64,
    /// UTC epoch milliseconds.
    pub timestamp_ms: i64,
    pub item_id: u64,
    pub category: String,
}

impl ClickEvent {
    pub fn epoch_seconds(&self) -> i64 {
        self.timestamp_ms.div_euclid(1000)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuyEvent {
    pub session_id: u64,
    pub timestamp_ms: i64,
    pub item_id: u64,
    /// Minor currency units; `None` when the source did not provide it.
    pub price: Option<i64>,
    pub quantity: Option<i64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Clicker,
    Buyer,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Clicker => 0.0,
            Label::Buyer => 1.0,
        }
    }

    pub fn is_buyer(self) -> bool {
        self == Label::Buyer
    }
}

/// Click events of one session in chronological order.
///
/// Purchases define the label and feed item price statistics; they are never
/// part of the model input sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: u64,
    pub events: Vec<ClickEvent>,
    pub label: Label,
    #[serde(default)]
    pub purchases: Vec<BuyEvent>,
}

/// A rejected input line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

/// Rejected lines of one input file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RejectLog {
    pub file: String,
    pub entries: Vec<Reject>,
    pub lines_seen: usize,
}

impl RejectLog {
    pub fn new(file: impl Into<String>) -> Self {
        RejectLog {
            file: file.into(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, line: usize, reason: impl Into<String>) {
        self.entries.push(Reject {
            line,
            reason: reason.into(),
        });
    }

    /// One `<file>:<line>:<reason>` line per reject.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|r| format!("{}:{}:{}\n", self.file, r.line, r.reason))
            .collect()
    }

    /// Fails when more than 1% of the lines were rejected. The limit is
    /// rounded up, so a single bad line in a small file is tolerated.
    fn check(&self) -> Result<()> {
        let limit = self.lines_seen.div_ceil(100);
        if self.entries.len() > limit {
            let first = self
                .entries
                .first()
                .map(|r| format!("line {}: {}", r.line, r.reason))
                .unwrap_or_default();
            return Err(Error::TooManyRejects {
                file: self.file.clone(),
                rejected: self.entries.len(),
                lines: self.lines_seen,
                limit,
                first,
            });
        }
        Ok(())
    }
}

pub fn parse_iso_timestamp_ms(raw: &str) -> std::result::Result<i64, String> {
    DateTime::parse_from_rfc3339(raw)
        .map(|dt| dt.timestamp_millis())
        .map_err(|e| format!("bad timestamp {raw:?}: {e}"))
}

/// Formats epoch milliseconds the way the click logs write them,
/// e.g. `2014-04-07T10:51:09.277Z`.
pub fn format_iso_timestamp_ms(ms: i64) -> String {
    match DateTime::from_timestamp_millis(ms) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string(),
        None => ms.to_string(),
    }
}

fn parse_field<T: FromStr>(raw: &str, what: &str) -> std::result::Result<T, String> {
    raw.trim()
        .parse::<T>()
        .map_err(|_| format!("bad {what} {raw:?}"))
}

fn positive_ts(ts: i64) -> std::result::Result<i64, String> {
    if ts > 0 {
        Ok(ts)
    } else {
        Err(format!("non-positive timestamp {ts}"))
    }
}

fn for_each_line<R: BufRead>(
    source: R,
    log: &mut RejectLog,
    mut f: impl FnMut(usize, &str) -> std::result::Result<(), String>,
) -> Result<()> {
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        log.lines_seen += 1;
        if let Err(reason) = f(i + 1, line) {
            log.push(i + 1, reason);
        }
    }
    log.check()
}

fn parse_click_line(line: &str) -> std::result::Result<ClickEvent, String> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 4 {
        return Err(format!("expected 4 fields, found {}", cols.len()));
    }
    let category = cols[3].trim();
    if category.is_empty() {
        return Err("empty category".into());
    }
    if cols[2].trim().is_empty() {
        return Err("empty item id".into());
    }
    Ok(ClickEvent {
        session_id: parse_field(cols[0], "session id")?,
        timestamp_ms: positive_ts(parse_iso_timestamp_ms(cols[1].trim())?)?,
        item_id: parse_field(cols[2], "item id")?,
        category: category.to_string(),
    })
}

/// Zero in the price or quantity column means "not provided".
fn absent_if_zero(v: i64) -> Option<i64> {
    (v != 0).then_some(v)
}

fn parse_buy_line(line: &str) -> std::result::Result<BuyEvent, String> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 5 {
        return Err(format!("expected 5 fields, found {}", cols.len()));
    }
    let price: i64 = parse_field(cols[3], "price")?;
    let quantity: i64 = parse_field(cols[4], "quantity")?;
    if quantity < 0 || price < 0 {
        return Err("negative price or quantity".into());
    }
    Ok(BuyEvent {
        session_id: parse_field(cols[0], "session id")?,
        timestamp_ms: positive_ts(parse_iso_timestamp_ms(cols[1].trim())?)?,
        item_id: parse_field(cols[2], "item id")?,
        price: absent_if_zero(price),
        quantity: absent_if_zero(quantity),
    })
}

/// Parses a RecSys clicks file (`SessionID,Timestamp,ItemID,Category`, no header).
pub fn parse_recsys_clicks<R: BufRead>(source: R, log: &mut RejectLog) -> Result<Vec<ClickEvent>> {
    let mut out = Vec::new();
    for_each_line(source, log, |_, line| {
        out.push(parse_click_line(line)?);
        Ok(())
    })?;
    Ok(out)
}

/// Parses a RecSys buys file (`SessionID,Timestamp,ItemID,Price,Quantity`, no header).
pub fn parse_recsys_buys<R: BufRead>(source: R, log: &mut RejectLog) -> Result<Vec<BuyEvent>> {
    let mut out = Vec::new();
    for_each_line(source, log, |_, line| {
        out.push(parse_buy_line(line)?);
        Ok(())
    })?;
    Ok(out)
}

pub const RETAILROCKET_HEADER: &str = "timestamp,visitorid,event,itemid,transactionid";

/// Category token used for Retail Rocket events, which carry no category.
pub const NO_CATEGORY: &str = "NA";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RrKind {
    View,
    Transaction,
}

/// Parses a Retail Rocket event log.
///
/// `view` rows become clicks and `transaction` rows buys (price unknown);
/// `addtocart` rows are dropped. Each visitor's stream is cut into sessions
/// wherever two consecutive events are more than `gap_secs` apart, and the
/// sessions are numbered from 1 in (visitor, time) order.
pub fn parse_retailrocket<R: BufRead>(
    source: R,
    gap_secs: i64,
    log: &mut RejectLog,
) -> Result<(Vec<ClickEvent>, Vec<BuyEvent>)> {
    // visitor -> (timestamp, file order, kind, item)
    let mut by_visitor: BTreeMap<u64, Vec<(i64, usize, RrKind, u64)>> = BTreeMap::new();
    let mut order = 0usize;
    for_each_line(source, log, |lineno, line| {
        if lineno == 1 && line.trim() == RETAILROCKET_HEADER {
            return Ok(());
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(format!("expected 5 fields, found {}", cols.len()));
        }
        let ts = positive_ts(parse_field(cols[0], "timestamp")?)?;
        let visitor: u64 = parse_field(cols[1], "visitor id")?;
        let item: u64 = parse_field(cols[3], "item id")?;
        let kind = match cols[2].trim() {
            "view" => RrKind::View,
            "transaction" => RrKind::Transaction,
            "addtocart" => return Ok(()),
            other => return Err(format!("unknown event {other:?}")),
        };
        by_visitor.entry(visitor).or_default().push((ts, order, kind, item));
        order += 1;
        Ok(())
    })?;
    let gap_ms = gap_secs.saturating_mul(1000);
    let mut clicks = Vec::new();
    let mut buys = Vec::new();
    let mut next_session = 0u64;
    for (_, mut events) in by_visitor {
        events.sort_by_key(|&(ts, ord, _, _)| (ts, ord));
        let mut last_ts: Option<i64> = None;
        for (ts, _, kind, item) in events {
            if last_ts.is_none_or(|prev| ts - prev > gap_ms) {
                next_session += 1;
            }
            last_ts = Some(ts);
            match kind {
                RrKind::View => clicks.push(ClickEvent {
                    session_id: next_session,
                    timestamp_ms: ts,
                    item_id: item,
                    category: NO_CATEGORY.to_string(),
                }),
                RrKind::Transaction => buys.push(BuyEvent {
                    session_id: next_session,
                    timestamp_ms: ts,
                    item_id: item,
                    price: None,
                    quantity: None,
                }),
            }
        }
    }
    Ok((clicks, buys))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AssemblyStats {
    pub sessions: usize,
    pub buyers: usize,
    pub clicks: usize,
    /// Buys whose session id has no clicks.
    pub orphan_buys: usize,
}

/// Groups clicks into sessions ordered by session id. Events within a session
/// are stably sorted by time, so equal timestamps keep input order.
pub fn assemble_sessions(clicks: Vec<ClickEvent>, buys: Vec<BuyEvent>) -> (Vec<Session>, AssemblyStats) {
    let mut stats = AssemblyStats {
        clicks: clicks.len(),
        ..Default::default()
    };
    let mut grouped: BTreeMap<u64, Vec<ClickEvent>> = BTreeMap::new();
    for c in clicks {
        grouped.entry(c.session_id).or_default().push(c);
    }
    let mut purchases: HashMap<u64, Vec<BuyEvent>> = HashMap::new();
    for b in buys {
        if grouped.contains_key(&b.session_id) {
            purchases.entry(b.session_id).or_default().push(b);
        } else {
            stats.orphan_buys += 1;
        }
    }
    let sessions: Vec<Session> = grouped
        .into_iter()
        .map(|(session_id, mut events)| {
            events.sort_by_key(|e| e.timestamp_ms);
            let mut bought = purchases.remove(&session_id).unwrap_or_default();
            bought.sort_by_key(|b| b.timestamp_ms);
            let label = if bought.is_empty() {
                Label::Clicker
            } else {
                Label::Buyer
            };
            Session {
                session_id,
                events,
                label,
                purchases: bought,
            }
        })
        .collect();
    stats.sessions = sessions.len();
    stats.buyers = sessions.iter().filter(|s| s.label.is_buyer()).count();
    (sessions, stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, valid: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train,
            valid,
            test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for f in [self.train, self.valid, self.test] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("split fraction {f} outside [0, 1]")));
            }
        }
        let sum = self.train + self.valid + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Parses `90/10/0` (percentages or fractions) with the given seed.
    /// Two parts are read as train/valid.
    pub fn parse(raw: &str, seed: u64) -> Result<Self> {
        let parts: Vec<f64> = raw
            .split('/')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad split {raw:?}")))?;
        let (a, b, c) = match parts.as_slice() {
            [a, b] => (*a, *b, 0.0),
            [a, b, c] => (*a, *b, *c),
            _ => return Err(Error::Config(format!("bad split {raw:?}"))),
        };
        let total = a + b + c;
        if total <= 0.0 {
            return Err(Error::Config(format!("bad split {raw:?}")));
        }
        SplitSpec::new(a / total, b / total, c / total, seed)
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{} seed={}", self.train, self.valid, self.test, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Valid,
    Test,
}

impl SplitPart {
    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Valid => "valid",
            SplitPart::Test => "test",
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Split membership as a pure function of `(session_id, seed)`.
pub fn assign_split(session_id: u64, spec: &SplitSpec) -> SplitPart {
    let h = splitmix64(session_id ^ splitmix64(spec.seed));
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    if u < spec.train {
        SplitPart::Train
    } else if u < spec.train + spec.valid {
        SplitPart::Valid
    } else if spec.test > 0.0 {
        SplitPart::Test
    } else if spec.valid > 0.0 {
        // only reachable through rounding at the top of the unit interval
        SplitPart::Valid
    } else {
        SplitPart::Train
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Session>,
    pub valid: Vec<Session>,
    pub test: Vec<Session>,
}

pub fn split_sessions(sessions: Vec<Session>, spec: &SplitSpec) -> Splits {
    let mut out = Splits::default();
    for s in sessions {
        match assign_split(s.session_id, spec) {
            SplitPart::Train => out.train.push(s),
            SplitPart::Valid => out.valid.push(s),
            SplitPart::Test => out.test.push(s),
        }
    }
    out
}
