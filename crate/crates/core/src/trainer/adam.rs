use crate::model::{Gradients, Model, TensorKind};
use crate::nn::Float;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter slice. `step` counts
/// from 1.
pub fn adam_update<T: Float>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], step: u64, lr: f64, cfg: AdamConfig) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let c1 = T::of(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(step as i32));
    let lr = T::of(lr);
    let eps = T::of(cfg.eps);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over a whole model. Embedding rows a batch did not touch keep both
/// their weights and their moment estimates; frozen tables are skipped.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Model<T>,
    v: Model<T>,
}

impl<T: Float> Adam<T> {
    pub fn new(model: &Model<T>, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let (step, cfg) = (self.step, self.config);
        let trainable: Vec<bool> = model.fields.tables.iter().map(|t| t.trainable).collect();
        let dense = dense_grads(grads);
        let mut dense = dense.into_iter();
        let params = model.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((_, kind, p), (_, _, m)), (_, _, v)) in params.into_iter().zip(ms).zip(vs) {
            match kind {
                TensorKind::Embedding { table, width } => {
                    if !trainable[table] {
                        continue;
                    }
                    let g = &grads.embeddings[table];
                    for (k, &row) in g.rows.iter().enumerate() {
                        let r = row as usize * width..(row as usize + 1) * width;
                        let gr = g.values.row(k);
                        adam_update(
                            &mut p[r.clone()],
                            gr.as_slice().expect("standard layout"),
                            &mut m[r.clone()],
                            &mut v[r],
                            step,
                            lr,
                            cfg,
                        );
                    }
                }
                TensorKind::Dense => {
                    let g = dense.next().expect("one gradient per dense tensor");
                    adam_update(p, g, m, v, step, lr, cfg);
                }
            }
        }
    }
}

fn dense_grads<T: Float>(g: &Gradients<T>) -> Vec<&[T]> {
    let mut out: Vec<&[T]> = Vec::new();
    for c in &g.cells {
        out.extend(c.tensors().into_iter().map(|(_, s)| s));
    }
    out.push(g.head_weight.as_slice().expect("standard layout"));
    out.push(g.head_bias.as_slice().expect("standard layout"));
    out
}
