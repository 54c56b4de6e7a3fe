//! Synthetic clickstreams with a planted, tunable purchase signal, written
//! in the same CSV layouts as the real click and buy logs.
//!
//! Buyers pick items from a small "hot" set with probability
//! `signal_strength` and linger longer between clicks; clickers pick items
//! uniformly. At strength 0 the two classes are generated identically.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{format_iso_timestamp_ms, BuyEvent, ClickEvent, Label};

/// 2014-04-01T00:00:00Z.
const START_MS: i64 = 1_396_310_400_000;
const SPAN_MS: i64 = 180 * 24 * 3600 * 1000;
const MAX_LENGTH: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sessions: usize,
    pub buyer_fraction: f64,
    pub n_items: usize,
    pub n_categories: usize,
    /// Share of items (and of categories) that are hot.
    pub hot_fraction: f64,
    /// Mean of the geometric session-length distribution (support >= 1).
    pub mean_length: f64,
    /// Lengths are at least this.
    pub min_length: usize,
    /// Median seconds between clicks.
    pub dwell_median_secs: f64,
    /// Standard deviation of log dwell.
    pub dwell_sigma: f64,
    /// Buyer dwell is scaled by `1 + dwell_boost * signal_strength`.
    pub dwell_boost: f64,
    pub signal_strength: f64,
    /// Plant the signal in the first click only.
    pub signal_first_only: bool,
    /// Share of buy events that carry a price.
    pub priced_fraction: f64,
    pub seed: u64,
    /// Seeds the item universe (categories, prices, hot set); corpora with
    /// the same catalog seed share items.
    pub catalog_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sessions: 5000,
            buyer_fraction: 0.055,
            n_items: 1000,
            n_categories: 40,
            hot_fraction: 0.05,
            mean_length: 3.0,
            min_length: 1,
            dwell_median_secs: 40.0,
            dwell_sigma: 1.0,
            dwell_boost: 2.0,
            signal_strength: 1.0,
            signal_first_only: false,
            priced_fraction: 0.3,
            seed: 1,
            catalog_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("buyer_fraction", self.buyer_fraction)?;
        unit("signal_strength", self.signal_strength)?;
        unit("priced_fraction", self.priced_fraction)?;
        unit("hot_fraction", self.hot_fraction)?;
        if self.n_sessions == 0 || self.n_items < 2 || self.n_categories < 2 {
            return Err(Error::Config("need at least 1 session, 2 items and 2 categories".into()));
        }
        if !(self.mean_length >= 1.0) || self.min_length == 0 || self.min_length > MAX_LENGTH {
            return Err(Error::Config("mean_length must be >= 1 and min_length in 1..=200".into()));
        }
        if !(self.dwell_median_secs > 0.0) || !(self.dwell_sigma >= 0.0) || !(self.dwell_boost >= 0.0) {
            return Err(Error::Config("dwell parameters must be positive".into()));
        }
        Ok(())
    }

    fn hot_items(&self) -> usize {
        ((self.n_items as f64 * self.hot_fraction).round() as usize).clamp(1, self.n_items - 1)
    }

    fn hot_categories(&self) -> usize {
        ((self.n_categories as f64 * self.hot_fraction).round() as usize).clamp(1, self.n_categories - 1)
    }
}

/// Fixed item properties shared by corpora with the same catalog seed.
#[derive(Clone, Debug)]
struct Universe {
    /// Item ids, hot items first.
    items: Vec<u64>,
    hot: usize,
    category: Vec<String>,
    price: Vec<i64>,
}

impl Universe {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.catalog_seed ^ 0x5EED_CA7A_1060);
        let hot = cfg.hot_items();
        let hot_cats = cfg.hot_categories();
        let mut ids: Vec<u64> = (0..cfg.n_items as u64).map(|i| 214_500_000 + i * 7).collect();
        ids.shuffle(&mut rng);
        let price_dist = LogNormal::new(2000f64.ln(), 1.2).expect("valid lognormal");
        let category = (0..cfg.n_items)
            .map(|i| {
                let c = if i < hot {
                    rng.random_range(0..hot_cats)
                } else {
                    rng.random_range(hot_cats..cfg.n_categories)
                };
                (c + 1).to_string()
            })
            .collect();
        let price = (0..cfg.n_items)
            .map(|_| (price_dist.sample(&mut rng).round() as i64).clamp(50, 200_000))
            .collect();
        Universe {
            items: ids,
            hot,
            category,
            price,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub sessions: usize,
    pub buyers: usize,
    pub buyer_fraction: f64,
    pub clicks: usize,
    pub buys: usize,
    pub median_length: usize,
    pub mean_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub config: SynthConfig,
    pub length_distribution: String,
    pub dwell_distribution: String,
    pub hot_items: usize,
    pub hot_categories: usize,
    pub stats: SynthStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub clicks: Vec<ClickEvent>,
    pub buys: Vec<BuyEvent>,
    pub labels: Vec<(u64, Label)>,
    pub metadata: SynthMetadata,
}

/// Generates a corpus; identical configs give identical corpora.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let uni = Universe::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_sessions;
    let n_buyers = (n as f64 * cfg.buyer_fraction).round() as usize;
    let mut is_buyer: Vec<bool> = (0..n).map(|i| i < n_buyers).collect();
    is_buyer.shuffle(&mut rng);

    let length = Geometric::new(1.0 / cfg.mean_length).expect("p in (0, 1]");
    let dwell = LogNormal::new((cfg.dwell_median_secs * 1000.0).ln(), cfg.dwell_sigma).expect("valid lognormal");
    let boost = 1.0 + cfg.dwell_boost * cfg.signal_strength;

    let mut clicks = Vec::new();
    let mut buys = Vec::new();
    let mut labels = Vec::with_capacity(n);
    let mut lengths = Vec::with_capacity(n);
    for (k, &buyer) in is_buyer.iter().enumerate() {
        let sid = k as u64 + 1;
        let len = ((1 + length.sample(&mut rng)) as usize).clamp(cfg.min_length, MAX_LENGTH);
        lengths.push(len);
        let mut ts = START_MS + rng.random_range(0..SPAN_MS);
        let mut clicked = Vec::with_capacity(len);
        for pos in 0..len {
            let planted = buyer && (pos == 0 || !cfg.signal_first_only) && rng.random::<f64>() < cfg.signal_strength;
            let idx = if planted {
                rng.random_range(0..uni.hot)
            } else {
                rng.random_range(0..uni.items.len())
            };
            clicked.push(idx);
            clicks.push(ClickEvent {
                session_id: sid,
                timestamp_ms: ts,
                item_id: uni.items[idx],
                category: uni.category[idx].clone(),
            });
            let mut gap = dwell.sample(&mut rng);
            if buyer && !cfg.signal_first_only {
                gap *= boost;
            }
            ts += (gap.round() as i64).max(1);
        }
        if buyer {
            let n_buys = rng.random_range(1..=2usize.min(len));
            for _ in 0..n_buys {
                let idx = clicked[rng.random_range(0..clicked.len())];
                let priced = rng.random::<f64>() < cfg.priced_fraction;
                ts += rng.random_range(1_000..60_000);
                buys.push(BuyEvent {
                    session_id: sid,
                    timestamp_ms: ts,
                    item_id: uni.items[idx],
                    price: priced.then_some(uni.price[idx]),
                    quantity: priced.then(|| rng.random_range(1..=3)),
                });
            }
        }
        labels.push((sid, if buyer { Label::Buyer } else { Label::Clicker }));
    }
    let mut sorted = lengths.clone();
    sorted.sort_unstable();
    let stats = SynthStats {
        sessions: n,
        buyers: n_buyers,
        buyer_fraction: n_buyers as f64 / n as f64,
        clicks: clicks.len(),
        buys: buys.len(),
        median_length: sorted[(n - 1) / 2],
        mean_length: lengths.iter().sum::<usize>() as f64 / n as f64,
    };
    Ok(SynthCorpus {
        clicks,
        buys,
        labels,
        metadata: SynthMetadata {
            config: cfg.clone(),
            length_distribution: format!(
                "1 + geometric(p = {:.4}), clamped to [{}, {MAX_LENGTH}]",
                1.0 / cfg.mean_length,
                cfg.min_length
            ),
            dwell_distribution: format!(
                "lognormal(median {} s, sigma {}), buyers x{:.2}",
                cfg.dwell_median_secs,
                cfg.dwell_sigma,
                if cfg.signal_first_only { 1.0 } else { boost }
            ),
            hot_items: uni.hot,
            hot_categories: cfg.hot_categories(),
            stats,
        },
    })
}

pub const CLICKS_FILE: &str = "clicks.dat";
pub const BUYS_FILE: &str = "buys.dat";
pub const LABELS_FILE: &str = "labels.csv";
pub const METADATA_FILE: &str = "metadata.json";

impl SynthCorpus {
    pub fn clicks_csv(&self) -> String {
        let mut out = String::with_capacity(self.clicks.len() * 48);
        for c in &self.clicks {
            out += &format!(
                "{},{},{},{}\n",
                c.session_id,
                format_iso_timestamp_ms(c.timestamp_ms),
                c.item_id,
                c.category
            );
        }
        out
    }

    /// Unpriced buys are written with price and quantity 0.
    pub fn buys_csv(&self) -> String {
        let mut out = String::new();
        for b in &self.buys {
            out += &format!(
                "{},{},{},{},{}\n",
                b.session_id,
                format_iso_timestamp_ms(b.timestamp_ms),
                b.item_id,
                b.price.unwrap_or(0),
                b.quantity.unwrap_or(0)
            );
        }
        out
    }

    pub fn labels_csv(&self) -> String {
        let mut out = String::from("session_id,label\n");
        for (id, l) in &self.labels {
            out += &format!("{id},{}\n", u8::from(l.is_buyer()));
        }
        out
    }

    /// Writes the click log, buy log, label sidecar and metadata into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::to_string_pretty(&self.metadata)? + "\n";
        for (name, body) in [
            (CLICKS_FILE, self.clicks_csv()),
            (BUYS_FILE, self.buys_csv()),
            (LABELS_FILE, self.labels_csv()),
            (METADATA_FILE, meta),
        ] {
            let path = dir.join(name);
            fs::File::create(&path)
                .and_then(|mut f| f.write_all(body.as_bytes()))
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
