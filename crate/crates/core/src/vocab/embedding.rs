use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Field, ItemCatalog, Vocabularies};
use crate::error::{Error, Result};
use crate::ingest::ClickEvent;
use crate::nn::Float;

/// Initial embedding weights are drawn from `U(-EMBEDDING_INIT, EMBEDDING_INIT)`.
pub const EMBEDDING_INIT: f64 = 0.075;

/// Which fields feed the model, in concatenation order, and how wide each is.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldLayout {
    pub fields: Vec<(Field, usize)>,
}

impl Default for FieldLayout {
    /// item 100, category/time/price/quantity 10 each: 140 wide.
    fn default() -> Self {
        FieldLayout {
            fields: vec![
                (Field::Item, 100),
                (Field::Category, 10),
                (Field::TimeBin, 10),
                (Field::Price, 10),
                (Field::Quantity, 10),
            ],
        }
    }
}

impl FieldLayout {
    pub fn with_price_variance(mut self, width: usize) -> Self {
        self.fields.retain(|(f, _)| *f != Field::PriceVariance);
        self.fields.push((Field::PriceVariance, width));
        self
    }

    /// Same five fields with custom widths (item, category, time, price, quantity).
    pub fn with_widths(widths: [usize; 5]) -> Self {
        FieldLayout {
            fields: Field::ALL[..5].iter().copied().zip(widths).collect(),
        }
    }

    pub fn uses(&self, field: Field) -> bool {
        self.fields.iter().any(|(f, _)| *f == field)
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Width of the concatenated event vector.
    pub fn total_width(&self) -> usize {
        self.fields.iter().map(|(_, w)| w).sum()
    }

    /// Column offset of every field inside the event vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.fields
            .iter()
            .scan(0, |acc, (_, w)| {
                let o = *acc;
                *acc += w;
                Some(o)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::Config("no input fields".into()));
        }
        for (i, (f, w)) in self.fields.iter().enumerate() {
            if *w == 0 {
                return Err(Error::Config(format!("field {f} has zero width")));
            }
            if self.fields[..i].iter().any(|(g, _)| g == f) {
                return Err(Error::Config(format!("field {f} listed twice")));
            }
        }
        Ok(())
    }
}

/// Trainable lookup table: one row per vocabulary index (row 0 = unknown).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    pub field: Field,
    pub weights: Array2<T>,
    pub trainable: bool,
}

impl<T: Float> EmbeddingTable<T> {
    pub fn zeros(field: Field, rows: usize, width: usize) -> Self {
        EmbeddingTable {
            field,
            weights: Array2::zeros((rows, width)),
            trainable: true,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(field: Field, rows: usize, width: usize, rng: &mut R) -> Self {
        let mut t = Self::zeros(field, rows, width);
        t.weights
            .mapv_inplace(|_| T::of(rng.random_range(-EMBEDDING_INIT..=EMBEDDING_INIT)));
        t
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn width(&self) -> usize {
        self.weights.ncols()
    }
}

/// The embedding tables of every active field, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSet<T> {
    pub tables: Vec<EmbeddingTable<T>>,
}

impl<T: Float> FieldSet<T> {
    pub fn zeros(layout: &FieldLayout, vocabs: &Vocabularies) -> Self {
        FieldSet {
            tables: layout
                .fields
                .iter()
                .map(|&(f, w)| EmbeddingTable::zeros(f, vocabs.get(f).rows(), w))
                .collect(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(layout: &FieldLayout, rows: &[usize], rng: &mut R) -> Self {
        FieldSet {
            tables: layout
                .fields
                .iter()
                .zip(rows)
                .map(|(&(f, w), &r)| EmbeddingTable::uniform(f, r, w, rng))
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.tables.iter().map(|t| t.width()).sum()
    }

    /// Concatenates the looked-up rows, one index per table.
    pub fn embed(&self, indices: &[u32]) -> Array1<T> {
        let mut out = Vec::with_capacity(self.width());
        for (t, &i) in self.tables.iter().zip(indices) {
            out.extend(t.weights.row(i as usize).iter().copied());
        }
        Array1::from(out)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for t in &mut self.tables {
            t.trainable = trainable;
        }
    }
}

/// Embeds one click event: vocabulary lookup per field, then concatenation.
pub fn embed_event<T: Float>(fields: &FieldSet<T>, vocabs: &Vocabularies, catalog: &ItemCatalog, event: &ClickEvent) -> Array1<T> {
    let idx: Vec<u32> = fields
        .tables
        .iter()
        .map(|t| vocabs.index(t.field, event, catalog))
        .collect();
    fields.embed(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Label, Session};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn event(item: u64) -> ClickEvent {
        ClickEvent {
            session_id: 1,
            timestamp_ms: 1_396_867_869_277,
            item_id: item,
            category: "0".into(),
        }
    }

    fn vocabs() -> (Vocabularies, ItemCatalog) {
        let s = Session {
            session_id: 1,
            events: vec![event(10), event(11)],
            label: Label::Clicker,
            purchases: vec![],
        };
        let cat = ItemCatalog::default();
        (Vocabularies::build(std::slice::from_ref(&s), &cat), cat)
    }

    #[test]
    fn default_width_is_140() {
        let l = FieldLayout::default();
        assert_eq!(l.total_width(), 140);
        assert_eq!(l.offsets(), vec![0, 100, 110, 120, 130]);
        assert_eq!(l.clone().with_price_variance(10).total_width(), 150);
    }

    #[test]
    fn embed_widths_and_zero_tables() {
        let (v, cat) = vocabs();
        let zero = FieldSet::<f64>::zeros(&FieldLayout::default(), &v);
        let e = embed_event(&zero, &v, &cat, &event(10));
        assert_eq!(e.len(), 140);
        assert!(e.iter().all(|&x| x == 0.0));
        let with_var = FieldSet::<f64>::zeros(&FieldLayout::default().with_price_variance(10), &v);
        assert_eq!(embed_event(&with_var, &v, &cat, &event(10)).len(), 150);
    }

    #[test]
    fn item_change_is_local() {
        let (v, cat) = vocabs();
        let layout = FieldLayout::default();
        let rows: Vec<usize> = layout.fields.iter().map(|(f, _)| v.get(*f).rows()).collect();
        let fs = FieldSet::<f64>::uniform(&layout, &rows, &mut ChaCha8Rng::seed_from_u64(0));
        let a = embed_event(&fs, &v, &cat, &event(10));
        let b = embed_event(&fs, &v, &cat, &event(11));
        assert!((0..100).any(|i| a[i] != b[i]));
        assert!((100..140).all(|i| a[i] == b[i]));
    }

    #[test]
    fn init_bound() {
        let t = EmbeddingTable::<f64>::uniform(Field::Item, 500, 20, &mut ChaCha8Rng::seed_from_u64(4));
        assert!(t.weights.iter().all(|w| w.abs() <= EMBEDDING_INIT));
        assert!(t.weights.iter().any(|w| w.abs() > 0.07));
    }

    #[test]
    fn training_events_never_unknown() {
        let (v, cat) = vocabs();
        for f in Field::ALL {
            assert_ne!(v.index(f, &event(10), &cat), 0, "{f}");
        }
    }
}
