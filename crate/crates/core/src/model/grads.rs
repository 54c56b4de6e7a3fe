use ndarray::{Array1, Array2};

use super::Model;
use crate::nn::{CellParams, Float};

/// Gradient rows for the embedding rows a batch touched.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows<T> {
    /// Sorted, distinct row indices.
    pub rows: Vec<u32>,
    /// `rows.len() x width`.
    pub values: Array2<T>,
}

impl<T: Float> SparseRows<T> {
    pub fn empty(width: usize) -> Self {
        SparseRows {
            rows: Vec::new(),
            values: Array2::zeros((0, width)),
        }
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// Sum of two row sets.
    pub fn merged(&self, other: &SparseRows<T>) -> SparseRows<T> {
        let width = self.width();
        let mut rows = Vec::with_capacity(self.rows.len() + other.rows.len());
        let mut data: Vec<T> = Vec::with_capacity((self.rows.len() + other.rows.len()) * width);
        let (mut i, mut j) = (0, 0);
        while i < self.rows.len() || j < other.rows.len() {
            let a = self.rows.get(i).copied().unwrap_or(u32::MAX);
            let b = other.rows.get(j).copied().unwrap_or(u32::MAX);
            if a < b || j == other.rows.len() {
                rows.push(a);
                data.extend(self.values.row(i).iter());
                i += 1;
            } else if b < a || i == self.rows.len() {
                rows.push(b);
                data.extend(other.values.row(j).iter());
                j += 1;
            } else {
                rows.push(a);
                data.extend(self.values.row(i).iter().zip(other.values.row(j).iter()).map(|(x, y)| *x + *y));
                i += 1;
                j += 1;
            }
        }
        let n = rows.len();
        SparseRows {
            rows,
            values: Array2::from_shape_vec((n, width), data).expect("row-major data"),
        }
    }
}

/// Gradients of the mean batch loss. Dense for the recurrent layers and the
/// head; row-sparse for embeddings. Frozen tables carry no rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub embeddings: Vec<SparseRows<T>>,
    pub cells: Vec<CellParams<T>>,
    pub head_weight: Array1<T>,
    pub head_bias: Array1<T>,
}

impl<T: Float> Gradients<T> {
    pub fn zeros_for(model: &Model<T>) -> Self {
        Gradients {
            embeddings: model.fields.tables.iter().map(|t| SparseRows::empty(t.width())).collect(),
            cells: model.cells.iter().map(|c| c.zeros_like()).collect(),
            head_weight: Array1::zeros(model.head_weight.len()),
            head_bias: Array1::zeros(1),
        }
    }

    fn values(&self) -> impl Iterator<Item = (String, &[T])> {
        let emb = self.embeddings.iter().enumerate().map(|(i, e)| {
            (format!("embedding#{i}"), e.values.as_slice().expect("standard layout"))
        });
        let cells = self
            .cells
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.tensors().into_iter().map(move |(n, s)| (format!("cell{i}.{n}"), s)));
        emb.chain(cells).chain([
            ("head.weight".to_string(), self.head_weight.as_slice().expect("standard layout")),
            ("head.bias".to_string(), self.head_bias.as_slice().expect("standard layout")),
        ])
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.embeddings
            .iter_mut()
            .flat_map(|e| e.values.iter_mut())
            .chain(self.cells.iter_mut().flat_map(|c| {
                c.tensors_mut()
                    .into_iter()
                    .flat_map(|(_, s)| s.iter_mut())
            }))
            .chain(self.head_weight.iter_mut())
            .chain(self.head_bias.iter_mut())
    }

    pub fn global_norm(&self) -> f64 {
        self.values()
            .flat_map(|(_, s)| s.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    /// Name of the first gradient tensor holding a NaN or infinity.
    pub fn first_non_finite(&self, model: &Model<T>) -> Option<String> {
        self.values().find(|(_, s)| s.iter().any(|v| !v.is_finite())).map(|(name, _)| {
            match name.strip_prefix("embedding#").and_then(|i| i.parse::<usize>().ok()) {
                Some(i) => format!("embedding.{}", model.fields.tables[i].field),
                None => name,
            }
        })
    }

    /// `self += other`, in a fixed order.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.embeddings.iter_mut().zip(&other.embeddings) {
            if !b.rows.is_empty() {
                *a = a.merged(b);
            }
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            for ((_, x), (_, y)) in a.tensors_mut().into_iter().zip(b.tensors()) {
                x.iter_mut().zip(y).for_each(|(x, y)| *x += *y);
            }
        }
        self.head_weight += &other.head_weight;
        self.head_bias += &other.head_bias;
    }

    /// The gradient laid out like the model's parameters, zeros elsewhere.
    pub fn to_dense(&self, model: &Model<T>) -> Model<T> {
        let mut out = model.zeros_like();
        for (table, g) in out.fields.tables.iter_mut().zip(&self.embeddings) {
            for (k, &row) in g.rows.iter().enumerate() {
                table.weights.row_mut(row as usize).assign(&g.values.row(k));
            }
        }
        out.cells = self.cells.clone();
        out.head_weight = self.head_weight.clone();
        out.head_bias = self.head_bias.clone();
        out
    }
}
