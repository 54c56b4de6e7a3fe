//! Turns sessions into model input: dwell-time unrolling, reversal, index
//! encoding and padded batches.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ClickEvent, Label, Session};
use crate::vocab::{FieldLayout, ItemCatalog, Vocabularies};

pub const DEFAULT_UNROLL_THRESHOLD_SECS: f64 = 150.0;
pub const DEFAULT_MAX_LEN: usize = 500;

/// Padding index. Never looked up and never receives gradient.
pub const PAD: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    /// `None` disables unrolling.
    pub unroll_threshold_secs: Option<f64>,
    pub reverse: bool,
    pub max_len: usize,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            unroll_threshold_secs: Some(DEFAULT_UNROLL_THRESHOLD_SECS),
            reverse: true,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct UnrollStats {
    /// Consecutive events whose timestamps go backwards.
    pub negative_dwells: usize,
}

/// Copies of an event followed by `dwell_ms` of inactivity: `max(1, ceil(dwell / threshold))`.
pub fn repeat_count(dwell_ms: i64, threshold_ms: i64) -> usize {
    if dwell_ms <= 0 {
        1
    } else {
        ((dwell_ms + threshold_ms - 1) / threshold_ms).max(1) as usize
    }
}

fn threshold_ms(threshold_secs: f64) -> Result<i64> {
    if !(threshold_secs > 0.0) || !threshold_secs.is_finite() {
        return Err(Error::Config(format!("unroll threshold must be positive, got {threshold_secs}")));
    }
    Ok(((threshold_secs * 1000.0).round() as i64).max(1))
}

/// Repeats each event in proportion to the time until the next one. The last
/// event has no successor and appears once. Order is preserved.
pub fn unroll(events: &[ClickEvent], threshold_secs: f64) -> Result<(Vec<ClickEvent>, UnrollStats)> {
    let th = threshold_ms(threshold_secs)?;
    let mut stats = UnrollStats::default();
    let mut out = Vec::with_capacity(events.len());
    for (k, e) in events.iter().enumerate() {
        let copies = match events.get(k + 1) {
            Some(next) => {
                let dwell = next.timestamp_ms - e.timestamp_ms;
                if dwell < 0 {
                    stats.negative_dwells += 1;
                }
                repeat_count(dwell, th)
            }
            None => 1,
        };
        out.extend(std::iter::repeat_n(e, copies).cloned());
    }
    Ok((out, stats))
}

pub fn reverse<T: Clone>(seq: &[T]) -> Vec<T> {
    seq.iter().rev().cloned().collect()
}

/// Per-field vocabulary indices of one event, in layout order.
pub type IndexedEvent = Vec<u32>;

/// A session ready for batching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedSession {
    pub session_id: u64,
    pub label: Label,
    pub events: Vec<IndexedEvent>,
    pub original_len: usize,
    pub unrolled_len: usize,
    /// Highest catalog price among the clicked items.
    pub max_price: Option<i64>,
}

/// Encodes sessions against fixed vocabularies and transform settings.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub vocabs: Vocabularies,
    pub catalog: ItemCatalog,
    pub layout: FieldLayout,
    pub transform: TransformConfig,
}

impl Encoder {
    pub fn new(vocabs: Vocabularies, catalog: ItemCatalog, layout: FieldLayout, transform: TransformConfig) -> Result<Self> {
        layout.validate()?;
        if transform.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if let Some(t) = transform.unroll_threshold_secs {
            threshold_ms(t)?;
        }
        Ok(Encoder {
            vocabs,
            catalog,
            layout,
            transform,
        })
    }

    pub fn index_event(&self, e: &ClickEvent) -> IndexedEvent {
        self.layout
            .fields
            .iter()
            .map(|&(f, _)| self.vocabs.index(f, e, &self.catalog))
            .collect()
    }

    /// Unroll, cap (dropping the oldest events), reverse, then index.
    pub fn encode(&self, s: &Session) -> Result<(EncodedSession, UnrollStats)> {
        if s.events.is_empty() {
            return Err(Error::Config(format!("session {} has no events", s.session_id)));
        }
        let (mut seq, stats) = match self.transform.unroll_threshold_secs {
            Some(t) => unroll(&s.events, t)?,
            None => (s.events.clone(), UnrollStats::default()),
        };
        let unrolled_len = seq.len();
        if seq.len() > self.transform.max_len {
            seq.drain(..seq.len() - self.transform.max_len);
        }
        if self.transform.reverse {
            seq.reverse();
        }
        let max_price = s
            .events
            .iter()
            .filter_map(|e| self.catalog.get(e.item_id).price)
            .max();
        Ok((
            EncodedSession {
                session_id: s.session_id,
                label: s.label,
                events: seq.iter().map(|e| self.index_event(e)).collect(),
                original_len: s.events.len(),
                unrolled_len,
                max_price,
            },
            stats,
        ))
    }

    pub fn encode_all(&self, sessions: &[Session]) -> Result<(Vec<EncodedSession>, UnrollStats)> {
        let mut total = UnrollStats::default();
        let mut out = Vec::with_capacity(sessions.len());
        for s in sessions {
            let (e, st) = self.encode(s)?;
            total.negative_dwells += st.negative_dwells;
            out.push(e);
        }
        Ok((out, total))
    }
}

/// Events after unrolling divided by events before.
pub fn unroll_growth(sessions: &[EncodedSession]) -> f64 {
    let before: usize = sessions.iter().map(|s| s.original_len).sum();
    let after: usize = sessions.iter().map(|s| s.unrolled_len).sum();
    if before == 0 {
        1.0
    } else {
        after as f64 / before as f64
    }
}

/// Padded block of sequences. Index tensors are `B x T_max x fields`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub session_ids: Vec<u64>,
    pub indices: Array3<u32>,
    pub lengths: Vec<usize>,
    pub labels: Vec<Label>,
    pub mask: Array2<bool>,
}

impl Batch {
    pub fn from_sessions(sessions: &[&EncodedSession]) -> Result<Self> {
        let fields = sessions
            .first()
            .and_then(|s| s.events.first())
            .map(|e| e.len())
            .ok_or_else(|| Error::Config("cannot batch zero sessions or empty sessions".into()))?;
        let t_max = sessions.iter().map(|s| s.events.len()).max().unwrap_or(0);
        let b = sessions.len();
        let mut indices = Array3::from_elem((b, t_max, fields), PAD);
        let mut mask = Array2::from_elem((b, t_max), false);
        for (i, s) in sessions.iter().enumerate() {
            if s.events.is_empty() {
                return Err(Error::Config(format!("session {} has no events", s.session_id)));
            }
            for (t, ev) in s.events.iter().enumerate() {
                if ev.len() != fields {
                    return Err(Error::shape("batched event", format!("{fields} fields"), format!("{}", ev.len())));
                }
                for (f, &ix) in ev.iter().enumerate() {
                    indices[[i, t, f]] = ix;
                }
                mask[[i, t]] = true;
            }
        }
        Ok(Batch {
            session_ids: sessions.iter().map(|s| s.session_id).collect(),
            indices,
            lengths: sessions.iter().map(|s| s.events.len()).collect(),
            labels: sessions.iter().map(|s| s.label).collect(),
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.indices.shape()[1]
    }

    pub fn num_fields(&self) -> usize {
        self.indices.shape()[2]
    }

    /// The rows in `range` as their own batch, trimmed to their longest sequence.
    pub fn rows(&self, range: std::ops::Range<usize>) -> Batch {
        let t = self.lengths[range.clone()].iter().copied().max().unwrap_or(0);
        Batch {
            session_ids: self.session_ids[range.clone()].to_vec(),
            indices: self.indices.slice(ndarray::s![range.clone(), ..t, ..]).to_owned(),
            lengths: self.lengths[range.clone()].to_vec(),
            labels: self.labels[range.clone()].to_vec(),
            mask: self.mask.slice(ndarray::s![range, ..t]).to_owned(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchOptions {
    /// Sort by length inside windows of `window * batch_size` shuffled
    /// sessions before cutting batches. Off by default.
    pub length_bucket_window: Option<usize>,
}

/// Shuffled batches for one epoch, deterministic in `(sessions, batch_size, seed, epoch)`.
pub fn batchify(sessions: &[EncodedSession], batch_size: usize, seed: u64, epoch: u64, opts: BatchOptions) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    if let Some(w) = opts.length_bucket_window {
        for chunk in order.chunks_mut(w.max(1) * batch_size) {
            chunk.sort_by_key(|&i| sessions[i].events.len());
        }
    }
    order
        .chunks(batch_size)
        .map(|c| Batch::from_sessions(&c.iter().map(|&i| &sessions[i]).collect::<Vec<_>>()))
        .collect()
}

/// Batches in corpus order, for inference.
pub fn batches_in_order(sessions: &[EncodedSession], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    sessions
        .chunks(batch_size)
        .map(|c| Batch::from_sessions(&c.iter().collect::<Vec<_>>()))
        .collect()
}
