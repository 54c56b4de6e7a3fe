//! ROC/AUC and the analysis cuts: by session length, dwell-unrolled
//! sessions, price buckets, and comparison against an external score file.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;

/// Sessions of at least this many (original) events share one bucket.
pub const DEFAULT_LENGTH_CAP: usize = 20;
/// High-price bucket: some clicked item priced strictly above this.
pub const HIGH_PRICE: i64 = 10_000;
/// Low-price bucket: every priced item at or below this.
pub const LOW_PRICE: i64 = 750;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSession {
    pub session_id: u64,
    pub score: f64,
    pub label: Label,
    pub original_len: usize,
    pub unrolled_len: usize,
    pub max_price: Option<i64>,
}

fn split_labels(scored: &[&ScoredSession]) -> (Vec<f64>, Vec<bool>) {
    scored.iter().map(|s| (s.score, s.label.is_buyer())).unzip()
}

/// Rank-sum (Mann-Whitney) AUC with midranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc inputs", scores.len().to_string(), labels.len().to_string()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::format("scores", format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined(format!("{pos} positives and {neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// One point per distinct score threshold, from (0,0) to (1,1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    auc(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&next| scores[next] != scores[i]);
        if last_of_tie {
            points.push(RocPoint {
                fpr: fp as f64 / neg,
                tpr: tp as f64 / pos,
            });
        }
    }
    Ok(points)
}

/// Trapezoidal area under a ROC point list.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// AUC of a subset, or `None` when only one class is present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetAuc {
    pub count: usize,
    pub buyers: usize,
    pub auc: Option<f64>,
}

impl SubsetAuc {
    pub fn of(scored: &[&ScoredSession]) -> Result<Self> {
        let (scores, labels) = split_labels(scored);
        let auc = match auc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(Error::AucUndefined(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(SubsetAuc {
            count: scored.len(),
            buyers: labels.iter().filter(|&&l| l).count(),
            auc,
        })
    }

    fn fmt_auc(&self) -> String {
        self.auc.map_or_else(|| "undefined".into(), |a| format!("{a:.6}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    /// Original session length; for the tail bucket, its lower bound.
    pub length: usize,
    pub tail: bool,
    #[serde(flatten)]
    pub stats: SubsetAuc,
}

/// Groups by original (pre-unroll) length, pooling lengths `>= cap`.
pub fn auc_by_session_length(scored: &[ScoredSession], cap: usize) -> Result<Vec<LengthBucket>> {
    let cap = cap.max(1);
    let mut groups: BTreeMap<usize, Vec<&ScoredSession>> = BTreeMap::new();
    for s in scored {
        groups.entry(s.original_len.min(cap)).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(length, members)| {
            Ok(LengthBucket {
                length,
                tail: length == cap,
                stats: SubsetAuc::of(&members)?,
            })
        })
        .collect()
}

/// Sessions in which some event was replayed more than once.
pub fn dwelltime_subset(scored: &[ScoredSession]) -> Vec<&ScoredSession> {
    scored.iter().filter(|s| s.unrolled_len > s.original_len).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceBuckets {
    pub high: SubsetAuc,
    pub low: SubsetAuc,
}

pub fn in_high_bucket(s: &ScoredSession) -> bool {
    s.max_price.is_some_and(|p| p > HIGH_PRICE)
}

pub fn in_low_bucket(s: &ScoredSession) -> bool {
    s.max_price.is_some_and(|p| p <= LOW_PRICE)
}

/// Sessions without any price information belong to neither bucket.
pub fn price_buckets(scored: &[ScoredSession]) -> Result<PriceBuckets> {
    let high: Vec<&ScoredSession> = scored.iter().filter(|s| in_high_bucket(s)).collect();
    let low: Vec<&ScoredSession> = scored.iter().filter(|s| in_low_bucket(s)).collect();
    Ok(PriceBuckets {
        high: SubsetAuc::of(&high)?,
        low: SubsetAuc::of(&low)?,
    })
}

pub const PREDICTIONS_HEADER: &str = "session_id,score";

/// Reads `session_id,score` lines (header required).
pub fn read_predictions<R: BufRead>(r: R) -> Result<HashMap<u64, f64>> {
    let mut lines = r.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == PREDICTIONS_HEADER => {}
        _ => return Err(Error::format("predictions", format!("expected header `{PREDICTIONS_HEADER}`"))),
    }
    let mut out = HashMap::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format("predictions", format!("line {}: `{line}`", n + 2));
        let (id, score) = line.split_once(',').ok_or_else(bad)?;
        let id: u64 = id.trim().parse().map_err(|_| bad())?;
        let score: f64 = score.trim().parse().map_err(|_| bad())?;
        if !score.is_finite() {
            return Err(bad());
        }
        out.insert(id, score);
    }
    Ok(out)
}

pub fn write_predictions<W: Write>(mut w: W, scored: &[ScoredSession]) -> std::io::Result<()> {
    writeln!(w, "{PREDICTIONS_HEADER}")?;
    for s in scored {
        writeln!(w, "{},{}", s.session_id, s.score)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub intersection: usize,
    pub only_ours: usize,
    pub only_theirs: usize,
    pub ours: SubsetAuc,
    pub theirs: SubsetAuc,
}

/// Both models' AUCs over the sessions scored by both.
pub fn compare_predictions(ours: &[ScoredSession], theirs: &HashMap<u64, f64>) -> Result<Comparison> {
    let shared: Vec<&ScoredSession> = ours.iter().filter(|s| theirs.contains_key(&s.session_id)).collect();
    if shared.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let rescored: Vec<ScoredSession> = shared
        .iter()
        .map(|s| ScoredSession {
            score: theirs[&s.session_id],
            ..(*s).clone()
        })
        .collect();
    let rescored: Vec<&ScoredSession> = rescored.iter().collect();
    Ok(Comparison {
        intersection: shared.len(),
        only_ours: ours.len() - shared.len(),
        only_theirs: theirs.len() - shared.len(),
        ours: SubsetAuc::of(&shared)?,
        theirs: SubsetAuc::of(&rescored)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sessions: usize,
    pub buyers: usize,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
    pub by_length: Vec<LengthBucket>,
    pub dwelltime: SubsetAuc,
    pub price: PriceBuckets,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub comparison: Option<Comparison>,
}

impl EvalReport {
    /// Fails with [`Error::AucUndefined`] if the whole set has one class.
    pub fn build(scored: &[ScoredSession], length_cap: usize) -> Result<Self> {
        let all: Vec<&ScoredSession> = scored.iter().collect();
        let (scores, labels) = split_labels(&all);
        Ok(EvalReport {
            sessions: scored.len(),
            buyers: labels.iter().filter(|&&l| l).count(),
            auc: auc(&scores, &labels)?,
            roc: roc_curve(&scores, &labels)?,
            by_length: auc_by_session_length(scored, length_cap)?,
            dwelltime: SubsetAuc::of(&dwelltime_subset(scored))?,
            price: price_buckets(scored)?,
            comparison: None,
        })
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "sessions {}  buyers {}", self.sessions, self.buyers);
        let _ = writeln!(out, "overall AUC {:.6}", self.auc);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>8}  {:>8}  {:>7}  {:>9}", "length", "sessions", "buyers", "auc");
        for b in &self.by_length {
            let label = if b.tail { format!("{}+", b.length) } else { b.length.to_string() };
            let _ = writeln!(out, "{:>8}  {:>8}  {:>7}  {:>9}", label, b.stats.count, b.stats.buyers, b.stats.fmt_auc());
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<18}  {:>8}  {:>7}  {:>9}", "subset", "sessions", "buyers", "auc");
        for (name, s) in [
            ("dwelltime > 1", &self.dwelltime),
            ("price > 10000", &self.price.high),
            ("price <= 750", &self.price.low),
        ] {
            let _ = writeln!(out, "{:<18}  {:>8}  {:>7}  {:>9}", name, s.count, s.buyers, s.fmt_auc());
        }
        if let Some(c) = &self.comparison {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "comparison on {} shared sessions ({} only ours, {} only theirs)",
                c.intersection, c.only_ours, c.only_theirs
            );
            let _ = writeln!(out, "{:<18}  {:>9}", "model", "auc");
            let _ = writeln!(out, "{:<18}  {:>9}", "ours", c.ours.fmt_auc());
            let _ = writeln!(out, "{:<18}  {:>9}", "theirs", c.theirs.fmt_auc());
        }
        out
    }

    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for p in &self.roc {
            let _ = writeln!(out, "{},{}", p.fpr, p.tpr);
        }
        out
    }
}
