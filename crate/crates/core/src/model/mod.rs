//! The classifier: concatenated field embeddings feeding stacked recurrent
//! layers, a linear head over the top layer's final hidden state, and a
//! sigmoid.
//!
//! Layer `l+1` may start from layer `l`'s final state (`share_hidden_state`)
//! and may see the embedded input next to layer `l`'s outputs
//! (`skip_connections`, by concatenation).

mod checkpoint;
mod forward;
mod grads;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::Tape;
pub use grads::{Gradients, SparseRows};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Session;
use crate::nn::{CellKind, CellParams, Float};
use crate::transform::{Batch, Encoder};
use crate::vocab::{Field, FieldLayout, FieldSet, Vocabularies};

/// Initial forget-gate bias of LSTM cells.
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub skip_connections: bool,
    pub share_hidden_state: bool,
    pub tie_layer_weights: bool,
    pub embeddings_trainable: bool,
}

impl Default for ModelConfig {
    /// Three LSTM layers of 256 units with state sharing and skip connections.
    fn default() -> Self {
        ModelConfig {
            cell: CellKind::Lstm,
            num_layers: 3,
            hidden_size: 256,
            skip_connections: true,
            share_hidden_state: true,
            tie_layer_weights: false,
            embeddings_trainable: true,
        }
    }
}

impl ModelConfig {
    pub fn new(cell: CellKind, num_layers: usize, hidden_size: usize) -> Self {
        ModelConfig {
            cell,
            num_layers,
            hidden_size,
            ..Default::default()
        }
    }

    /// Input width of layer `l` (0-based) given the embedded event width.
    pub fn layer_input_width(&self, layer: usize, embed_width: usize) -> usize {
        match (layer, self.skip_connections) {
            (0, _) => embed_width,
            (_, true) => self.hidden_size + embed_width,
            (_, false) => self.hidden_size,
        }
    }

    /// Maps each layer to the parameter set it uses. Without tying every
    /// layer owns its weights; with tying, layers of equal input width share.
    pub fn layer_cells(&self, embed_width: usize) -> Result<Vec<usize>> {
        let widths: Vec<usize> = (0..self.num_layers)
            .map(|l| self.layer_input_width(l, embed_width))
            .collect();
        if !self.tie_layer_weights {
            return Ok((0..self.num_layers).collect());
        }
        let mut map = Vec::with_capacity(self.num_layers);
        let mut owners: Vec<usize> = Vec::new(); // input width per distinct cell
        for w in &widths {
            match owners.iter().position(|o| o == w) {
                Some(i) => map.push(i),
                None => {
                    owners.push(*w);
                    map.push(owners.len() - 1);
                }
            }
        }
        if self.num_layers > 1 && owners.len() == self.num_layers {
            return Err(Error::Config(format!(
                "tie_layer_weights needs layers of equal input width, got {widths:?}"
            )));
        }
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub embeddings: usize,
    pub cells: usize,
    pub head: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.embeddings + self.cells + self.head
    }
}

fn cell_param_count(kind: CellKind, input: usize, hidden: usize) -> usize {
    let g = kind.gates() * hidden;
    let biases = if kind == CellKind::Rnn { g } else { 2 * g };
    g * input + g * hidden + biases
}

/// Trainable parameter count without building the model. `vocab_rows[i]` is
/// the table height of `layout.fields[i]`.
pub fn count_params(config: &ModelConfig, layout: &FieldLayout, vocab_rows: &[usize]) -> Result<ParamCount> {
    config.validate()?;
    let e = layout.total_width();
    let map = config.layer_cells(e)?;
    let mut seen = Vec::new();
    let mut cells = 0;
    for (l, &c) in map.iter().enumerate() {
        if !seen.contains(&c) {
            seen.push(c);
            cells += cell_param_count(config.cell, config.layer_input_width(l, e), config.hidden_size);
        }
    }
    Ok(ParamCount {
        embeddings: layout.fields.iter().zip(vocab_rows).map(|((_, w), r)| w * r).sum(),
        cells,
        head: config.hidden_size + 1,
    })
}

/// How a parameter tensor may be updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    /// Row-sparse table `table` of the field set.
    Embedding { table: usize, width: usize },
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: FieldLayout,
    pub fields: FieldSet<T>,
    /// Distinct parameter sets; `layer_cells[l]` indexes into this.
    pub cells: Vec<CellParams<T>>,
    pub layer_cells: Vec<usize>,
    pub head_weight: Array1<T>,
    pub head_bias: Array1<T>,
}

impl<T: Float> Model<T> {
    /// All-zero model. `vocab_rows[i]` is the table height for `layout.fields[i]`.
    pub fn zeros(config: ModelConfig, layout: FieldLayout, vocab_rows: &[usize]) -> Result<Self> {
        config.validate()?;
        layout.validate()?;
        if vocab_rows.len() != layout.len() {
            return Err(Error::shape("vocabulary sizes", layout.len().to_string(), vocab_rows.len().to_string()));
        }
        let e = layout.total_width();
        let layer_cells = config.layer_cells(e)?;
        let mut cells: Vec<CellParams<T>> = Vec::new();
        for (l, &c) in layer_cells.iter().enumerate() {
            if c == cells.len() {
                cells.push(CellParams::zeros(config.cell, config.layer_input_width(l, e), config.hidden_size));
            }
        }
        let mut fields = FieldSet {
            tables: layout
                .fields
                .iter()
                .zip(vocab_rows)
                .map(|(&(f, w), &r)| crate::vocab::EmbeddingTable::zeros(f, r, w))
                .collect(),
        };
        fields.set_trainable(config.embeddings_trainable);
        Ok(Model {
            head_weight: Array1::zeros(config.hidden_size),
            head_bias: Array1::zeros(1),
            config,
            layout,
            fields,
            cells,
            layer_cells,
        })
    }

    /// Embeddings from `U(±0.075)`, recurrent and head weights from
    /// `U(±1/sqrt(H))`, head bias zero. LSTM forget gates start with
    /// `FORGET_BIAS` added to their input-side bias.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, layout: FieldLayout, vocab_rows: &[usize], rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(config, layout, vocab_rows)?;
        m.fields = FieldSet::uniform(&m.layout, vocab_rows, rng);
        m.fields.set_trainable(m.config.embeddings_trainable);
        let bound = 1.0 / (m.config.hidden_size as f64).sqrt();
        for c in m.cells.iter_mut() {
            *c = CellParams::uniform(c.kind, c.input_size(), c.hidden_size(), bound, rng);
            if c.kind == CellKind::Lstm {
                let rows = c.gate_rows(1);
                c.b_input.slice_mut(ndarray::s![rows]).mapv_inplace(|b| b + T::of(FORGET_BIAS));
            }
        }
        m.head_weight.mapv_inplace(|_| T::of(rng.random_range(-bound..=bound)));
        Ok(m)
    }

    pub fn seeded(config: ModelConfig, layout: FieldLayout, vocab_rows: &[usize], seed: u64) -> Result<Self> {
        Self::init(config, layout, vocab_rows, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Model sized for the given vocabularies.
    pub fn for_vocabs(config: ModelConfig, layout: FieldLayout, vocabs: &Vocabularies, seed: u64) -> Result<Self> {
        let rows: Vec<usize> = layout.fields.iter().map(|(f, _)| vocabs.get(*f).rows()).collect();
        Self::seeded(config, layout, &rows, seed)
    }

    pub fn zeros_like(&self) -> Self {
        let mut m = self.clone();
        for (_, _, t) in m.tensors_mut() {
            t.fill(T::zero());
        }
        m
    }

    pub fn vocab_rows(&self) -> Vec<usize> {
        self.fields.tables.iter().map(|t| t.rows()).collect()
    }

    pub fn embed_width(&self) -> usize {
        self.fields.width()
    }

    pub fn param_count(&self) -> ParamCount {
        ParamCount {
            embeddings: self.fields.tables.iter().map(|t| t.weights.len()).sum(),
            cells: self.cells.iter().map(|c| c.num_params()).sum(),
            head: self.head_weight.len() + 1,
        }
    }

    pub fn embeddings_trainable(&self) -> bool {
        self.fields.tables.iter().any(|t| t.trainable)
    }

    pub fn set_embeddings_trainable(&mut self, trainable: bool) {
        self.fields.set_trainable(trainable);
    }

    /// Every parameter tensor in a fixed order: embeddings, cells, head.
    pub fn tensors(&self) -> Vec<(String, TensorKind, &[T])> {
        let mut out = Vec::new();
        for (i, t) in self.fields.tables.iter().enumerate() {
            out.push((
                format!("embedding.{}", t.field),
                TensorKind::Embedding { table: i, width: t.width() },
                t.weights.as_slice().expect("standard layout"),
            ));
        }
        for (i, c) in self.cells.iter().enumerate() {
            for (name, s) in c.tensors() {
                out.push((format!("cell{i}.{name}"), TensorKind::Dense, s));
            }
        }
        out.push(("head.weight".into(), TensorKind::Dense, self.head_weight.as_slice().expect("standard layout")));
        out.push(("head.bias".into(), TensorKind::Dense, self.head_bias.as_slice().expect("standard layout")));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorKind, &mut [T])> {
        let mut out = Vec::new();
        for (i, t) in self.fields.tables.iter_mut().enumerate() {
            let width = t.width();
            out.push((
                format!("embedding.{}", t.field),
                TensorKind::Embedding { table: i, width },
                t.weights.as_slice_mut().expect("standard layout"),
            ));
        }
        for (i, c) in self.cells.iter_mut().enumerate() {
            for (name, s) in c.tensors_mut() {
                out.push((format!("cell{i}.{name}"), TensorKind::Dense, s));
            }
        }
        out.push(("head.weight".into(), TensorKind::Dense, self.head_weight.as_slice_mut().expect("standard layout")));
        out.push(("head.bias".into(), TensorKind::Dense, self.head_bias.as_slice_mut().expect("standard layout")));
        out
    }

    /// Buyer probabilities for every row of the batch.
    pub fn forward(&self, batch: &Batch) -> Result<Array1<T>> {
        Ok(self.forward_tape(batch)?.probabilities())
    }

    pub fn table_for(&self, field: Field) -> Option<&crate::vocab::EmbeddingTable<T>> {
        self.fields.tables.iter().find(|t| t.field == field)
    }

    /// Encodes one raw session (unroll, reverse, index) and scores it.
    pub fn predict_session(&self, session: &Session, encoder: &Encoder) -> Result<f64> {
        if encoder.layout != self.layout {
            return Err(Error::Config("encoder field layout differs from the model's".into()));
        }
        let (enc, _) = encoder.encode(session)?;
        let batch = Batch::from_sessions(&[&enc])?;
        Ok(self.forward(&batch)?[0].f64())
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        let conv = |a: &Array1<T>| a.mapv(|v| U::of(v.f64()));
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            fields: FieldSet {
                tables: self
                    .fields
                    .tables
                    .iter()
                    .map(|t| crate::vocab::EmbeddingTable {
                        field: t.field,
                        weights: t.weights.mapv(|v| U::of(v.f64())),
                        trainable: t.trainable,
                    })
                    .collect(),
            },
            cells: self
                .cells
                .iter()
                .map(|c| CellParams {
                    kind: c.kind,
                    w_input: c.w_input.mapv(|v| U::of(v.f64())),
                    w_hidden: c.w_hidden.mapv(|v| U::of(v.f64())),
                    b_input: conv(&c.b_input),
                    b_hidden: c.b_hidden.as_ref().map(conv),
                })
                .collect(),
            layer_cells: self.layer_cells.clone(),
            head_weight: conv(&self.head_weight),
            head_bias: conv(&self.head_bias),
        }
    }
}
