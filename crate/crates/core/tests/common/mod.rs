//! Straight-line reference implementations used as test oracles. Nothing in
//! here shares code with the library's numerics beyond reading parameters.

#![allow(dead_code)]

use intentr::ingest::{assemble_sessions, Label, Session, SplitPart, SplitSpec, assign_split};
use intentr::model::Model;
use intentr::nn::{CellKind, CellParams};
use intentr::synth::{generate, SynthConfig};
use intentr::transform::{Batch, EncodedSession, Encoder, TransformConfig};
use intentr::vocab::{FieldLayout, ItemCatalog, Vocabularies};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `sum_k W[row][k] * v[k]` with W stored row-major in a flat slice.
fn dot_row(w: &[f64], cols: usize, row: usize, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..cols {
        acc += w[row * cols + k] * v[k];
    }
    acc
}

fn flat(p: &CellParams<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let bh = match &p.b_hidden {
        Some(b) => b.to_vec(),
        None => vec![0.0; p.b_input.len()],
    };
    (p.w_input.iter().copied().collect(), p.w_hidden.iter().copied().collect(), p.b_input.to_vec(), bh)
}

/// One LSTM step, gate blocks [input, forget, cell, output].
pub fn lstm_step(p: &CellParams<f64>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (wi, wh, bi, bh) = flat(p);
    let hs = h.len();
    let d = x.len();
    let pre = |gate: usize, j: usize| {
        let r = gate * hs + j;
        dot_row(&wi, d, r, x) + bi[r] + dot_row(&wh, hs, r, h) + bh[r]
    };
    let mut h2 = vec![0.0; hs];
    let mut c2 = vec![0.0; hs];
    for j in 0..hs {
        let i = sig(pre(0, j));
        let f = sig(pre(1, j));
        let g = pre(2, j).tanh();
        let o = sig(pre(3, j));
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

/// One GRU step, gate blocks [reset, update, new]; the reset gate scales
/// the hidden contribution to the candidate including its bias.
pub fn gru_step(p: &CellParams<f64>, x: &[f64], h: &[f64]) -> Vec<f64> {
    let (wi, wh, bi, bh) = flat(p);
    let hs = h.len();
    let d = x.len();
    let xin = |r: usize| dot_row(&wi, d, r, x) + bi[r];
    let hin = |r: usize| dot_row(&wh, hs, r, h) + bh[r];
    (0..hs)
        .map(|j| {
            let r = sig(xin(j) + hin(j));
            let z = sig(xin(hs + j) + hin(hs + j));
            let n = (xin(2 * hs + j) + r * hin(2 * hs + j)).tanh();
            (1.0 - z) * n + z * h[j]
        })
        .collect()
}

pub fn rnn_step(p: &CellParams<f64>, x: &[f64], h: &[f64]) -> Vec<f64> {
    let (wi, wh, bi, _) = flat(p);
    let hs = h.len();
    (0..hs)
        .map(|j| (dot_row(&wi, x.len(), j, x) + bi[j] + dot_row(&wh, hs, j, h)).tanh())
        .collect()
}

pub fn cell_step(p: &CellParams<f64>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match p.kind {
        CellKind::Lstm => lstm_step(p, x, h, c),
        CellKind::Gru => (gru_step(p, x, h), vec![]),
        CellKind::Rnn => (rnn_step(p, x, h), vec![]),
    }
}

/// Buyer probability of one session, computed event by event with no batching.
pub fn session_probability(m: &Model<f64>, events: &[Vec<u32>]) -> f64 {
    let hs = m.config.hidden_size;
    let xs: Vec<Vec<f64>> = events
        .iter()
        .map(|ev| {
            let mut v = Vec::new();
            for (t, &i) in m.fields.tables.iter().zip(ev) {
                v.extend(t.weights.row(i as usize).iter().copied());
            }
            v
        })
        .collect();
    let mut below: Option<Vec<Vec<f64>>> = None;
    let mut carried = (vec![0.0; hs], vec![0.0; hs]);
    for l in 0..m.config.num_layers {
        let p = &m.cells[m.layer_cells[l]];
        let (mut h, mut c) = if l > 0 && m.config.share_hidden_state {
            carried.clone()
        } else {
            (vec![0.0; hs], vec![0.0; hs])
        };
        let mut outs = Vec::new();
        for t in 0..xs.len() {
            let input: Vec<f64> = match &below {
                None => xs[t].clone(),
                Some(b) if m.config.skip_connections => b[t].iter().chain(&xs[t]).copied().collect(),
                Some(b) => b[t].clone(),
            };
            let (h2, c2) = cell_step(p, &input, &h, &c);
            h = h2;
            if !c2.is_empty() {
                c = c2;
            }
            outs.push(h.clone());
        }
        carried = (h, c);
        below = Some(outs);
    }
    let top = &carried.0;
    let z: f64 = top.iter().zip(m.head_weight.iter()).map(|(a, b)| a * b).sum::<f64>() + m.head_bias[0];
    sig(z)
}

/// Mean BCE over sessions using the oracle forward.
pub fn oracle_loss(m: &Model<f64>, sessions: &[EncodedSession]) -> f64 {
    sessions
        .iter()
        .map(|s| {
            let p = session_probability(m, &s.events);
            let y = s.label.as_f64();
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / sessions.len() as f64
}

/// Random encoded sessions with the given lengths and per-field vocabulary sizes.
pub fn random_sessions(lengths: &[usize], rows: &[usize], seed: u64) -> Vec<EncodedSession> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| EncodedSession {
            session_id: i as u64 + 1,
            label: if i % 2 == 0 { Label::Buyer } else { Label::Clicker },
            events: (0..len)
                .map(|_| rows.iter().map(|&r| rng.random_range(0..r as u32)).collect())
                .collect(),
            original_len: len,
            unrolled_len: len,
            max_price: None,
        })
        .collect()
}

pub fn batch_of(sessions: &[EncodedSession]) -> Batch {
    let refs: Vec<&EncodedSession> = sessions.iter().collect();
    Batch::from_sessions(&refs).unwrap()
}

/// AUC as the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

pub fn synth_sessions(cfg: &SynthConfig) -> Vec<Session> {
    let c = generate(cfg).unwrap();
    assemble_sessions(c.clicks, c.buys).0
}

/// Train/validation split, vocabularies and catalog from the training part,
/// and every part encoded.
pub struct Prepared {
    pub encoder: Encoder,
    pub train: Vec<EncodedSession>,
    pub valid: Vec<EncodedSession>,
}

pub fn prepare(sessions: Vec<Session>, valid_fraction: f64, layout: FieldLayout, transform: TransformConfig) -> Prepared {
    let spec = SplitSpec::new(1.0 - valid_fraction, valid_fraction, 0.0, 7).unwrap();
    let (train, valid): (Vec<Session>, Vec<Session>) =
        sessions.into_iter().partition(|s| assign_split(s.session_id, &spec) == SplitPart::Train);
    let catalog = ItemCatalog::build(&train);
    let vocabs = Vocabularies::build(&train, &catalog);
    let encoder = Encoder::new(vocabs, catalog, layout, transform).unwrap();
    Prepared {
        train: encoder.encode_all(&train).unwrap().0,
        valid: encoder.encode_all(&valid).unwrap().0,
        encoder,
    }
}
