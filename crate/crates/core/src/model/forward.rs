//! Batched forward pass with a recorded tape, and backpropagation through
//! time over that tape.
//!
//! Rows are processed longest-first so that the rows still running at step
//! `t` are always the prefix `0..active[t]`. Padded positions are never read.

use ndarray::{s, Array1, Array2, Axis};

use super::{Gradients, Model, SparseRows};
use crate::error::{Error, Result};
use crate::nn::{bce_with_logit, sigmoid, CellState, Float, StepCache};
use crate::transform::Batch;

struct StepRecord<T> {
    input: Array2<T>,
    h_prev: Array2<T>,
    c_prev: Option<Array2<T>>,
    cache: StepCache<T>,
}

struct LayerTape<T> {
    initial: CellState<T>,
    steps: Vec<StepRecord<T>>,
    last: CellState<T>,
}

/// Record of one forward pass over a batch, consumed by [`Tape::backward`].
pub struct Tape<T> {
    /// Sorted position -> batch row.
    order: Vec<usize>,
    /// Rows still running at each step.
    active: Vec<usize>,
    layers: Vec<LayerTape<T>>,
    logits: Array1<T>,
    labels: Vec<T>,
    consumed: bool,
}

fn unsort<T: Float>(sorted: &Array2<T>, order: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros(sorted.raw_dim());
    for (r, &row) in order.iter().enumerate() {
        out.row_mut(row).assign(&sorted.row(r));
    }
    out
}

impl<T: Float> Model<T> {
    fn gather_inputs(&self, batch: &Batch, order: &[usize], active: &[usize]) -> Result<Vec<Array2<T>>> {
        let offsets = self.layout.offsets();
        let e = self.embed_width();
        let mut inputs = Vec::with_capacity(active.len());
        for (t, &n) in active.iter().enumerate() {
            let mut x = Array2::zeros((n, e));
            for (r, &row) in order.iter().take(n).enumerate() {
                for (f, table) in self.fields.tables.iter().enumerate() {
                    let idx = batch.indices[[row, t, f]] as usize;
                    if idx >= table.rows() {
                        return Err(Error::shape(
                            "embedding lookup",
                            format!("{} index < {}", table.field, table.rows()),
                            idx.to_string(),
                        ));
                    }
                    x.slice_mut(s![r, offsets[f]..offsets[f] + table.width()])
                        .assign(&table.weights.row(idx));
                }
            }
            inputs.push(x);
        }
        Ok(inputs)
    }

    /// Runs the batch forward and records everything backward needs.
    pub fn forward_tape(&self, batch: &Batch) -> Result<Tape<T>> {
        if batch.num_fields() != self.fields.tables.len() {
            return Err(Error::shape(
                "batch fields",
                self.fields.tables.len().to_string(),
                batch.num_fields().to_string(),
            ));
        }
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if batch.lengths.contains(&0) {
            return Err(Error::Config("batch contains an empty sequence".into()));
        }
        let b = batch.len();
        let hs = self.config.hidden_size;
        let kind = self.config.cell;
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(batch.lengths[i]));
        let t_max = batch.lengths[order[0]];
        let active: Vec<usize> = (0..t_max)
            .map(|t| order.iter().take_while(|&&i| batch.lengths[i] > t).count())
            .collect();
        let inputs = self.gather_inputs(batch, &order, &active)?;

        let mut layers: Vec<LayerTape<T>> = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let cell = &self.cells[self.layer_cells[l]];
            let initial = match layers.last() {
                Some(below) if self.config.share_hidden_state => below.last.clone(),
                _ => CellState::zeros(kind, b, hs),
            };
            let mut state = initial.clone();
            let mut steps = Vec::with_capacity(t_max);
            for (t, &n) in active.iter().enumerate() {
                let input = match layers.last() {
                    None => inputs[t].clone(),
                    Some(below) if self.config.skip_connections => {
                        ndarray::concatenate(Axis(1), &[below.steps[t].cache.h.view(), inputs[t].view()])
                            .expect("row counts agree")
                    }
                    Some(below) => below.steps[t].cache.h.clone(),
                };
                let h_prev = state.h.slice(s![..n, ..]).to_owned();
                let c_prev = state.c.as_ref().map(|c| c.slice(s![..n, ..]).to_owned());
                let cache = cell.step(input.view(), h_prev.view(), c_prev.as_ref().map(|c| c.view()))?;
                state.h.slice_mut(s![..n, ..]).assign(&cache.h);
                if let (Some(c), Some(cn)) = (state.c.as_mut(), cache.c.as_ref()) {
                    c.slice_mut(s![..n, ..]).assign(cn);
                }
                steps.push(StepRecord {
                    input,
                    h_prev,
                    c_prev,
                    cache,
                });
            }
            layers.push(LayerTape {
                initial,
                steps,
                last: state,
            });
        }

        let top = &layers.last().expect("at least one layer").last.h;
        let sorted_logits = top.dot(&self.head_weight) + self.head_bias[0];
        let mut logits = Array1::zeros(b);
        for (r, &row) in order.iter().enumerate() {
            logits[row] = sorted_logits[r];
        }
        Ok(Tape {
            order,
            active,
            layers,
            logits,
            labels: batch.labels.iter().map(|l| T::of(l.as_f64())).collect(),
            consumed: false,
        })
    }
}

impl<T: Float> Tape<T> {
    pub fn logits(&self) -> &Array1<T> {
        &self.logits
    }

    pub fn probabilities(&self) -> Array1<T> {
        self.logits.mapv(sigmoid)
    }

    /// Mean binary cross entropy over the batch.
    pub fn loss(&self) -> T {
        let n = T::of(self.labels.len() as f64);
        self.logits
            .iter()
            .zip(&self.labels)
            .map(|(&z, &y)| bce_with_logit(z, y))
            .sum::<T>()
            / n
    }

    /// State layer `layer` started from, in batch row order.
    pub fn layer_initial_state(&self, layer: usize) -> CellState<T> {
        let st = &self.layers[layer].initial;
        CellState {
            h: unsort(&st.h, &self.order),
            c: st.c.as_ref().map(|c| unsort(c, &self.order)),
        }
    }

    /// State of layer `layer` at each row's last valid step, in batch row order.
    pub fn layer_final_state(&self, layer: usize) -> CellState<T> {
        let st = &self.layers[layer].last;
        CellState {
            h: unsort(&st.h, &self.order),
            c: st.c.as_ref().map(|c| unsort(c, &self.order)),
        }
    }

    /// Gradients of [`Tape::loss`] with respect to every parameter. A tape
    /// can be differentiated once.
    pub fn backward(&mut self, model: &Model<T>, batch: &Batch) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let hs = model.config.hidden_size;
        let b = self.order.len();
        let inv_b = T::one() / T::of(b as f64);
        let mut grads = Gradients::zeros_for(model);

        // d loss / d logit = (sigmoid(z) - y) / B, in sorted order
        let dz: Array1<T> = self
            .order
            .iter()
            .map(|&row| (sigmoid(self.logits[row]) - self.labels[row]) * inv_b)
            .collect();
        let top = &self.layers.last().expect("at least one layer").last.h;
        grads.head_weight = top.t().dot(&dz);
        grads.head_bias[0] = dz.sum();

        let mut d_h = Array2::zeros((b, hs));
        for r in 0..b {
            d_h.row_mut(r).assign(&(&model.head_weight * dz[r]));
        }
        let mut d_c: Option<Array2<T>> = model.config.cell.has_cell_state().then(|| Array2::zeros((b, hs)));

        let e = model.embed_width();
        let mut d_inputs: Vec<Array2<T>> = self.active.iter().map(|&n| Array2::zeros((n, e))).collect();
        // gradient flowing into layer l's per-step outputs from layer l+1
        let mut d_out: Option<Vec<Array2<T>>> = None;

        for l in (0..self.layers.len()).rev() {
            let ci = model.layer_cells[l];
            let cell = &model.cells[ci];
            let g = &mut grads.cells[ci];
            let layer = &self.layers[l];
            let mut d_below: Vec<Array2<T>> = Vec::with_capacity(self.active.len());
            for t in (0..self.active.len()).rev() {
                let n = self.active[t];
                let step = &layer.steps[t];
                let mut dh = d_h.slice(s![..n, ..]).to_owned();
                if let Some(out) = &d_out {
                    dh += &out[t];
                }
                let dc = d_c.as_ref().map(|c| c.slice(s![..n, ..]).to_owned());
                let (dx, dhp, dcp) = cell.step_backward(
                    g,
                    step.input.view(),
                    step.h_prev.view(),
                    step.c_prev.as_ref().map(|c| c.view()),
                    &step.cache,
                    dh.view(),
                    dc.as_ref().map(|c| c.view()),
                );
                d_h.slice_mut(s![..n, ..]).assign(&dhp);
                if let (Some(c), Some(dcp)) = (d_c.as_mut(), dcp) {
                    c.slice_mut(s![..n, ..]).assign(&dcp);
                }
                if l == 0 {
                    d_inputs[t] += &dx;
                } else if model.config.skip_connections {
                    d_below.push(dx.slice(s![.., ..hs]).to_owned());
                    d_inputs[t] += &dx.slice(s![.., hs..]);
                } else {
                    d_below.push(dx);
                }
            }
            d_below.reverse();
            d_out = Some(d_below);
            // d_h / d_c now hold gradients w.r.t. this layer's initial state,
            // which is the final state of the layer below when shared.
            if !model.config.share_hidden_state {
                d_h.fill(T::zero());
                if let Some(c) = d_c.as_mut() {
                    c.fill(T::zero());
                }
            }
        }

        let offsets = model.layout.offsets();
        for (f, table) in model.fields.tables.iter().enumerate() {
            if !table.trainable {
                continue;
            }
            let w = table.width();
            let mut rows: Vec<u32> = Vec::new();
            for (t, &n) in self.active.iter().enumerate() {
                rows.extend(self.order[..n].iter().map(|&row| batch.indices[[row, t, f]]));
            }
            rows.sort_unstable();
            rows.dedup();
            let mut values = Array2::zeros((rows.len(), w));
            for (t, dx) in d_inputs.iter().enumerate() {
                for (r, &row) in self.order.iter().take(self.active[t]).enumerate() {
                    let idx = batch.indices[[row, t, f]];
                    let slot = rows.binary_search(&idx).expect("collected above");
                    let mut dst = values.row_mut(slot);
                    dst += &dx.slice(s![r, offsets[f]..offsets[f] + w]);
                }
            }
            grads.embeddings[f] = SparseRows { rows, values };
        }
        self.layers.clear();
        Ok(grads)
    }
}
