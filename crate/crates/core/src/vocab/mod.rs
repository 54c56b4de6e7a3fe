//! Per-field vocabularies, timestamp quantization and per-item price statistics.
//!
//! Every field value seen in training gets an index starting at 1, in order of
//! first appearance. Index 0 is reserved for values never seen in training.

mod embedding;

pub use embedding::{embed_event, EmbeddingTable, FieldLayout, FieldSet};

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{ClickEvent, Session};

/// Index of values never seen in training.
pub const UNKNOWN: u32 = 0;

/// Token standing for a missing price or quantity.
pub const ABSENT_TOKEN: &str = "<absent>";

/// Width of a timestamp bin in seconds (4 hours).
pub const TIME_BIN_SECS: i64 = 4 * 60 * 60;

pub const VARIANCE_BUCKETS: u8 = 10;

const VOCAB_MAGIC: &str = "# intentr vocabulary v1";

pub fn quantize_timestamp(epoch_secs: i64) -> i64 {
    epoch_secs.div_euclid(TIME_BIN_SECS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Item,
    Category,
    TimeBin,
    Price,
    Quantity,
    PriceVariance,
}

impl Field {
    pub const ALL: [Field; 6] = [
        Field::Item,
        Field::Category,
        Field::TimeBin,
        Field::Price,
        Field::Quantity,
        Field::PriceVariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Item => "item",
            Field::Category => "category",
            Field::TimeBin => "time_bin",
            Field::Price => "price",
            Field::Quantity => "quantity",
            Field::PriceVariance => "price_variance",
        }
    }

    fn has_absent_token(self) -> bool {
        matches!(self, Field::Price | Field::Quantity)
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Field::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::format("field name", s))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    field: Field,
    values: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(field: Field) -> Self {
        let mut v = Vocabulary {
            field,
            values: Vec::new(),
            index: HashMap::new(),
        };
        if field.has_absent_token() {
            v.insert(ABSENT_TOKEN);
        }
        v
    }

    /// Builds a vocabulary in first-appearance order. Price and quantity
    /// vocabularies always start with the absent token.
    pub fn build<I, S>(field: Field, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary::new(field);
        for value in values {
            v.insert(value.as_ref());
        }
        v
    }

    pub fn insert(&mut self, value: &str) -> u32 {
        if let Some(&i) = self.index.get(value) {
            return i;
        }
        self.values.push(value.to_string());
        let i = self.values.len() as u32;
        self.index.insert(value.to_string(), i);
        i
    }

    pub fn field(&self) -> Field {
        self.field
    }

    /// Number of known values (excludes the unknown slot).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows needed in an embedding table: one per value plus the unknown row.
    pub fn rows(&self) -> usize {
        self.values.len() + 1
    }

    pub fn lookup(&self, value: &str) -> u32 {
        self.index.get(value).copied().unwrap_or(UNKNOWN)
    }

    pub fn absent_index(&self) -> Option<u32> {
        self.field.has_absent_token().then(|| self.lookup(ABSENT_TOKEN))
    }

    pub fn value(&self, index: u32) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.values.get(i as usize))
            .map(String::as_str)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{VOCAB_MAGIC}")?;
        writeln!(w, "{}", self.field.name())?;
        writeln!(w, "{}", self.values.len())?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(w, "{v}\t{}", i + 1)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let bad = |detail: String| Error::format("vocabulary file", detail);
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file".into()))?
                .map_err(Error::from)
        };
        let magic = next()?;
        if magic != VOCAB_MAGIC {
            return Err(bad(format!("unsupported header {magic:?}")));
        }
        let field: Field = next()?.parse()?;
        let count: usize = next()?
            .parse()
            .map_err(|_| bad("bad value count".into()))?;
        let mut v = Vocabulary {
            field,
            values: Vec::with_capacity(count),
            index: HashMap::with_capacity(count),
        };
        for expected in 1..=count {
            let line = next()?;
            let (value, idx) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad(format!("missing tab in {line:?}")))?;
            let idx: usize = idx.parse().map_err(|_| bad(format!("bad index in {line:?}")))?;
            if idx != expected {
                return Err(bad(format!("index {idx} out of sequence, expected {expected}")));
            }
            v.insert(value);
        }
        if v.values.len() != count {
            return Err(bad("duplicate values".into()));
        }
        Ok(v)
    }
}

/// Price facts for one item, derived from training purchases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemPriceInfo {
    pub price: Option<i64>,
    pub quantity: Option<i64>,
    pub variance_bucket: u8,
}

/// Item price lookup built from the purchases of training sessions.
///
/// The representative price and quantity of an item are the lower medians of
/// the values observed for it; items never bought with a price stay absent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCatalog {
    items: BTreeMap<u64, ItemPriceInfo>,
}

fn lower_median(values: &mut [i64]) -> Option<i64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    Some(values[(values.len() - 1) / 2])
}

impl ItemCatalog {
    pub fn build(sessions: &[Session]) -> Self {
        let mut prices: BTreeMap<u64, Vec<i64>> = BTreeMap::new();
        let mut quantities: BTreeMap<u64, Vec<i64>> = BTreeMap::new();
        for b in sessions.iter().flat_map(|s| &s.purchases) {
            if let Some(p) = b.price {
                prices.entry(b.item_id).or_default().push(p);
            }
            if let Some(q) = b.quantity {
                quantities.entry(b.item_id).or_default().push(q);
            }
        }
        let buckets = item_price_variance(sessions);
        let mut items = BTreeMap::new();
        let keys: std::collections::BTreeSet<u64> = prices.keys().chain(quantities.keys()).copied().collect();
        for item in &keys {
            items.insert(
                *item,
                ItemPriceInfo {
                    price: prices.get_mut(item).and_then(|v| lower_median(v)),
                    quantity: quantities.get_mut(item).and_then(|v| lower_median(v)),
                    variance_bucket: buckets.get(item).copied().unwrap_or(0),
                },
            );
        }
        ItemCatalog { items }
    }

    pub fn get(&self, item: u64) -> ItemPriceInfo {
        self.items.get(&item).copied().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "item\tprice\tquantity\tvariance_bucket")?;
        let opt = |v: Option<i64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (item, info) in &self.items {
            writeln!(
                w,
                "{item}\t{}\t{}\t{}",
                opt(info.price),
                opt(info.quantity),
                info.variance_bucket
            )?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let bad = |detail: String| Error::format("item catalog", detail);
        let mut items = BTreeMap::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(format!("line {}: expected 4 columns", i + 1)));
            }
            let opt = |s: &str| -> Result<Option<i64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(format!("line {}: bad number {s:?}", i + 1)))
                }
            };
            let item: u64 = cols[0].parse().map_err(|_| bad(format!("line {}: bad item", i + 1)))?;
            items.insert(
                item,
                ItemPriceInfo {
                    price: opt(cols[1])?,
                    quantity: opt(cols[2])?,
                    variance_bucket: cols[3].parse().map_err(|_| bad(format!("line {}: bad bucket", i + 1)))?,
                },
            );
        }
        Ok(ItemCatalog { items })
    }
}

/// Decile bucket (0..=9) of the population variance of each item's observed
/// prices. Items with fewer than two observed prices get bucket 0; tied
/// variances share a bucket.
pub fn item_price_variance(sessions: &[Session]) -> BTreeMap<u64, u8> {
    let mut prices: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for b in sessions.iter().flat_map(|s| &s.purchases) {
        if let Some(p) = b.price {
            prices.entry(b.item_id).or_default().push(p as f64);
        }
    }
    let mut out = BTreeMap::new();
    let mut ranked: Vec<(u64, f64)> = Vec::new();
    for (item, ps) in &prices {
        if ps.len() < 2 {
            out.insert(*item, 0);
            continue;
        }
        let n = ps.len() as f64;
        let mean = ps.iter().sum::<f64>() / n;
        let var = ps.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        ranked.push((*item, var));
    }
    let mut sorted: Vec<f64> = ranked.iter().map(|&(_, v)| v).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    for (item, var) in ranked {
        let smaller = sorted.partition_point(|&v| v < var);
        let bucket = (smaller * VARIANCE_BUCKETS as usize / n) as u8;
        out.insert(item, bucket.min(VARIANCE_BUCKETS - 1));
    }
    out
}

/// The raw token an event contributes to `field`.
pub fn field_token<'a>(field: Field, event: &'a ClickEvent, catalog: &ItemCatalog) -> Cow<'a, str> {
    let info = || catalog.get(event.item_id);
    let opt = |v: Option<i64>| match v {
        Some(x) => Cow::Owned(x.to_string()),
        None => Cow::Borrowed(ABSENT_TOKEN),
    };
    match field {
        Field::Item => Cow::Owned(event.item_id.to_string()),
        Field::Category => Cow::Borrowed(event.category.as_str()),
        Field::TimeBin => Cow::Owned(quantize_timestamp(event.epoch_seconds()).to_string()),
        Field::Price => opt(info().price),
        Field::Quantity => opt(info().quantity),
        Field::PriceVariance => Cow::Owned(info().variance_bucket.to_string()),
    }
}

/// One vocabulary per field, all built from the same training sessions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabularies {
    vocabs: Vec<Vocabulary>,
}

impl Vocabularies {
    pub fn build(sessions: &[Session], catalog: &ItemCatalog) -> Self {
        let mut vocabs: Vec<Vocabulary> = Field::ALL.into_iter().map(Vocabulary::new).collect();
        for event in sessions.iter().flat_map(|s| &s.events) {
            for v in vocabs.iter_mut() {
                v.insert(&field_token(v.field, event, catalog));
            }
        }
        Vocabularies { vocabs }
    }

    pub fn from_vec(vocabs: Vec<Vocabulary>) -> Result<Self> {
        for f in Field::ALL {
            if vocabs.iter().filter(|v| v.field == f).count() != 1 {
                return Err(Error::format("vocabularies", format!("need exactly one vocabulary for {f}")));
            }
        }
        let mut vocabs = vocabs;
        vocabs.sort_by_key(|v| v.field);
        Ok(Vocabularies { vocabs })
    }

    pub fn get(&self, field: Field) -> &Vocabulary {
        self.vocabs
            .iter()
            .find(|v| v.field == field)
            .expect("all fields are present")
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vocabulary> {
        self.vocabs.iter()
    }

    pub fn index(&self, field: Field, event: &ClickEvent, catalog: &ItemCatalog) -> u32 {
        self.get(field).lookup(&field_token(field, event, catalog))
    }
}
