use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, Float};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Rnn, CellKind::Gru, CellKind::Lstm];

    /// Number of stacked gate blocks in the weight matrices.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn has_cell_state(self) -> bool {
        self == CellKind::Lstm
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" | "vanilla" => Ok(CellKind::Rnn),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown cell type {other:?} (expected rnn, gru or lstm)"))),
        }
    }
}

// Gate block order inside the stacked LSTM matrices: input, forget, cell, output.
pub const LSTM_INPUT: usize = 0;
pub const LSTM_FORGET: usize = 1;
pub const LSTM_CELL: usize = 2;
pub const LSTM_OUTPUT: usize = 3;

// Gate block order for GRU: reset, update, new (candidate).
pub const GRU_RESET: usize = 0;
pub const GRU_UPDATE: usize = 1;
pub const GRU_NEW: usize = 2;

/// Weights of one recurrent layer, gate blocks stacked along the rows.
///
/// For an LSTM, rows `k*H..(k+1)*H` of `w_input` hold `W_ii`, `W_if`, `W_ig`,
/// `W_io` for `k` = 0..4, and `w_hidden` holds `W_hi`, `W_hf`, `W_hc`, `W_ho`.
/// Both bias vectors exist for LSTM and GRU even though only their sum
/// matters. The vanilla RNN has a single bias, kept in `b_input`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams<T> {
    pub kind: CellKind,
    pub w_input: Array2<T>,
    pub w_hidden: Array2<T>,
    pub b_input: Array1<T>,
    pub b_hidden: Option<Array1<T>>,
}

/// Hidden (and, for LSTM, cell) state of a block of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<T> {
    pub h: Array2<T>,
    pub c: Option<Array2<T>>,
}

impl<T: Float> CellState<T> {
    pub fn zeros(kind: CellKind, rows: usize, hidden: usize) -> Self {
        CellState {
            h: Array2::zeros((rows, hidden)),
            c: kind.has_cell_state().then(|| Array2::zeros((rows, hidden))),
        }
    }
}

/// Everything one forward step needs to keep for its backward step.
#[derive(Clone, Debug)]
pub struct StepCache<T> {
    /// Activated gates, `n x G*H`. For RNN this is the new hidden state.
    pub gates: Array2<T>,
    /// GRU only: `W_hn h + b_hn`, the hidden half of the candidate.
    pub hidden_candidate: Option<Array2<T>>,
    pub h: Array2<T>,
    pub c: Option<Array2<T>>,
}

fn add_row<T: Float>(m: &mut Array2<T>, row: &Array1<T>) {
    for mut r in m.rows_mut() {
        r += row;
    }
}

impl<T: Float> CellParams<T> {
    pub fn zeros(kind: CellKind, input_size: usize, hidden_size: usize) -> Self {
        let g = kind.gates() * hidden_size;
        CellParams {
            kind,
            w_input: Array2::zeros((g, input_size)),
            w_hidden: Array2::zeros((g, hidden_size)),
            b_input: Array1::zeros(g),
            b_hidden: (kind != CellKind::Rnn).then(|| Array1::zeros(g)),
        }
    }

    /// Every weight drawn from `U(-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(kind: CellKind, input_size: usize, hidden_size: usize, bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(kind, input_size, hidden_size);
        for v in p.values_mut() {
            *v = T::of(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kind, self.input_size(), self.hidden_size())
    }

    pub fn input_size(&self) -> usize {
        self.w_input.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.ncols()
    }

    /// Rows of gate block `gate` in the stacked matrices and biases.
    pub fn gate_rows(&self, gate: usize) -> Range<usize> {
        let h = self.hidden_size();
        gate * h..(gate + 1) * h
    }

    pub fn num_params(&self) -> usize {
        self.w_input.len() + self.w_hidden.len() + self.b_input.len() + self.b_hidden.as_ref().map_or(0, |b| b.len())
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out: Vec<(&'static str, &[T])> = vec![
            ("w_input", self.w_input.as_slice().expect("standard layout")),
            ("w_hidden", self.w_hidden.as_slice().expect("standard layout")),
            ("b_input", self.b_input.as_slice().expect("standard layout")),
        ];
        if let Some(b) = &self.b_hidden {
            out.push(("b_hidden", b.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out: Vec<(&'static str, &mut [T])> = vec![
            ("w_input", self.w_input.as_slice_mut().expect("standard layout")),
            ("w_hidden", self.w_hidden.as_slice_mut().expect("standard layout")),
            ("b_input", self.b_input.as_slice_mut().expect("standard layout")),
        ];
        if let Some(b) = &mut self.b_hidden {
            out.push(("b_hidden", b.as_slice_mut().expect("standard layout")));
        }
        out
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.w_input
            .iter_mut()
            .chain(self.w_hidden.iter_mut())
            .chain(self.b_input.iter_mut())
            .chain(self.b_hidden.iter_mut().flat_map(|b| b.iter_mut()))
    }

    fn check_inputs(&self, x: &ArrayView2<T>, h: &ArrayView2<T>, c: Option<&ArrayView2<T>>) -> Result<()> {
        let (d, hs) = (self.input_size(), self.hidden_size());
        if x.ncols() != d || h.ncols() != hs || x.nrows() != h.nrows() {
            return Err(Error::shape(
                "recurrent cell input",
                format!("x: [n, {d}], h: [n, {hs}]"),
                format!("x: {:?}, h: {:?}", x.shape(), h.shape()),
            ));
        }
        match (self.kind.has_cell_state(), c) {
            (true, Some(c)) if c.shape() == h.shape() => Ok(()),
            (true, c) => Err(Error::shape(
                "lstm cell state",
                format!("{:?}", h.shape()),
                format!("{:?}", c.map(|c| c.shape().to_vec())),
            )),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(Error::shape("cell state", "none", "present")),
        }
    }

    /// Advances `n` rows by one time step.
    pub fn step(&self, x: ArrayView2<T>, h: ArrayView2<T>, c: Option<ArrayView2<T>>) -> Result<StepCache<T>> {
        self.check_inputs(&x, &h, c.as_ref())?;
        let hs = self.hidden_size();
        let mut pre = x.dot(&self.w_input.t());
        add_row(&mut pre, &self.b_input);
        let mut hid = h.dot(&self.w_hidden.t());
        if let Some(b) = &self.b_hidden {
            add_row(&mut hid, b);
        }
        let n = x.nrows();
        match self.kind {
            CellKind::Rnn => {
                pre += &hid;
                pre.mapv_inplace(|v| v.tanh());
                Ok(StepCache {
                    h: pre.clone(),
                    gates: pre,
                    hidden_candidate: None,
                    c: None,
                })
            }
            CellKind::Lstm => {
                let c_prev = c.expect("checked");
                pre += &hid;
                let mut gates = pre;
                let mut c_new = Array2::zeros((n, hs));
                let mut h_new = Array2::zeros((n, hs));
                for r in 0..n {
                    let mut g = gates.row_mut(r);
                    for j in 0..hs {
                        let i = sigmoid(g[j]);
                        let f = sigmoid(g[hs + j]);
                        let cand = g[2 * hs + j].tanh();
                        let o = sigmoid(g[3 * hs + j]);
                        g[j] = i;
                        g[hs + j] = f;
                        g[2 * hs + j] = cand;
                        g[3 * hs + j] = o;
                        let cn = f * c_prev[[r, j]] + i * cand;
                        c_new[[r, j]] = cn;
                        h_new[[r, j]] = o * cn.tanh();
                    }
                }
                Ok(StepCache {
                    gates,
                    hidden_candidate: None,
                    h: h_new,
                    c: Some(c_new),
                })
            }
            CellKind::Gru => {
                let mut gates = pre;
                let hn = hid.slice(s![.., 2 * hs..]).to_owned();
                let mut h_new = Array2::zeros((n, hs));
                for r in 0..n {
                    let mut g = gates.row_mut(r);
                    for j in 0..hs {
                        let rg = sigmoid(g[j] + hid[[r, j]]);
                        let z = sigmoid(g[hs + j] + hid[[r, hs + j]]);
                        let cand = (g[2 * hs + j] + rg * hn[[r, j]]).tanh();
                        g[j] = rg;
                        g[hs + j] = z;
                        g[2 * hs + j] = cand;
                        h_new[[r, j]] = (T::one() - z) * cand + z * h[[r, j]];
                    }
                }
                Ok(StepCache {
                    gates,
                    hidden_candidate: Some(hn),
                    h: h_new,
                    c: None,
                })
            }
        }
    }

    /// Backward through one step. Accumulates parameter gradients into
    /// `grads` and returns `(dx, dh_prev, dc_prev)`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_backward(
        &self,
        grads: &mut CellParams<T>,
        x: ArrayView2<T>,
        h_prev: ArrayView2<T>,
        c_prev: Option<ArrayView2<T>>,
        cache: &StepCache<T>,
        dh: ArrayView2<T>,
        dc: Option<ArrayView2<T>>,
    ) -> (Array2<T>, Array2<T>, Option<Array2<T>>) {
        let hs = self.hidden_size();
        let n = x.nrows();
        let one = T::one();
        match self.kind {
            CellKind::Rnn => {
                let mut da = Array2::zeros((n, hs));
                ndarray::Zip::from(&mut da)
                    .and(&dh)
                    .and(&cache.h)
                    .for_each(|d, &g, &h| *d = g * (one - h * h));
                self.accumulate(grads, &da, &da, x, h_prev);
                let dx = da.dot(&self.w_input);
                let dhp = da.dot(&self.w_hidden);
                (dx, dhp, None)
            }
            CellKind::Lstm => {
                let c_prev = c_prev.expect("lstm step needs cell state");
                let c_new = cache.c.as_ref().expect("lstm cache has cell state");
                let mut da = Array2::zeros((n, 4 * hs));
                let mut dcp = Array2::zeros((n, hs));
                for r in 0..n {
                    let g = cache.gates.row(r);
                    for j in 0..hs {
                        let (i, f, cand, o) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
                        let tc = c_new[[r, j]].tanh();
                        let d_h = dh[[r, j]];
                        let d_o = d_h * tc;
                        let mut d_c = d_h * o * (one - tc * tc);
                        if let Some(dc) = &dc {
                            d_c += dc[[r, j]];
                        }
                        da[[r, j]] = d_c * cand * i * (one - i);
                        da[[r, hs + j]] = d_c * c_prev[[r, j]] * f * (one - f);
                        da[[r, 2 * hs + j]] = d_c * i * (one - cand * cand);
                        da[[r, 3 * hs + j]] = d_o * o * (one - o);
                        dcp[[r, j]] = d_c * f;
                    }
                }
                self.accumulate(grads, &da, &da, x, h_prev);
                let dx = da.dot(&self.w_input);
                let dhp = da.dot(&self.w_hidden);
                (dx, dhp, Some(dcp))
            }
            CellKind::Gru => {
                let hn = cache.hidden_candidate.as_ref().expect("gru cache has candidate");
                let mut dax = Array2::zeros((n, 3 * hs));
                let mut dah = Array2::zeros((n, 3 * hs));
                let mut dh_direct = Array2::zeros((n, hs));
                for r in 0..n {
                    let g = cache.gates.row(r);
                    for j in 0..hs {
                        let (rg, z, cand) = (g[j], g[hs + j], g[2 * hs + j]);
                        let d_h = dh[[r, j]];
                        let d_n = d_h * (one - z);
                        let d_z = d_h * (h_prev[[r, j]] - cand);
                        dh_direct[[r, j]] = d_h * z;
                        let d_an = d_n * (one - cand * cand);
                        let d_r = d_an * hn[[r, j]];
                        let d_ar = d_r * rg * (one - rg);
                        let d_az = d_z * z * (one - z);
                        dax[[r, j]] = d_ar;
                        dax[[r, hs + j]] = d_az;
                        dax[[r, 2 * hs + j]] = d_an;
                        dah[[r, j]] = d_ar;
                        dah[[r, hs + j]] = d_az;
                        dah[[r, 2 * hs + j]] = d_an * rg;
                    }
                }
                self.accumulate(grads, &dax, &dah, x, h_prev);
                let dx = dax.dot(&self.w_input);
                let mut dhp = dah.dot(&self.w_hidden);
                dhp += &dh_direct;
                (dx, dhp, None)
            }
        }
    }

    fn accumulate(&self, grads: &mut CellParams<T>, dax: &Array2<T>, dah: &Array2<T>, x: ArrayView2<T>, h_prev: ArrayView2<T>) {
        let one = T::one();
        general_mat_mul(one, &dax.t(), &x, one, &mut grads.w_input);
        general_mat_mul(one, &dah.t(), &h_prev, one, &mut grads.w_hidden);
        grads.b_input += &dax.sum_axis(Axis(0));
        if let Some(b) = &mut grads.b_hidden {
            *b += &dah.sum_axis(Axis(0));
        }
    }
}

/// Single-vector LSTM state.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T> {
    pub h: Array1<T>,
    pub c: Array1<T>,
}

impl<T: Float> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
        }
    }
}

fn expect_kind<T>(p: &CellParams<T>, kind: CellKind) -> Result<()> {
    if p.kind != kind {
        return Err(Error::Config(format!("expected {kind} parameters, got {}", p.kind)));
    }
    Ok(())
}

fn as_row<T: Float>(v: &Array1<T>) -> ArrayView2<'_, T> {
    v.view().insert_axis(Axis(0))
}

pub fn lstm_cell<T: Float>(x: &Array1<T>, prev: &LstmState<T>, p: &CellParams<T>) -> Result<LstmState<T>> {
    expect_kind(p, CellKind::Lstm)?;
    let out = p.step(as_row(x), as_row(&prev.h), Some(as_row(&prev.c)))?;
    Ok(LstmState {
        h: out.h.row(0).to_owned(),
        c: out.c.expect("lstm").row(0).to_owned(),
    })
}

pub fn gru_cell<T: Float>(x: &Array1<T>, h: &Array1<T>, p: &CellParams<T>) -> Result<Array1<T>> {
    expect_kind(p, CellKind::Gru)?;
    Ok(p.step(as_row(x), as_row(h), None)?.h.row(0).to_owned())
}

pub fn rnn_cell<T: Float>(x: &Array1<T>, h: &Array1<T>, p: &CellParams<T>) -> Result<Array1<T>> {
    expect_kind(p, CellKind::Rnn)?;
    Ok(p.step(as_row(x), as_row(h), None)?.h.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lstm_zero_params() {
        let p = CellParams::<f64>::zeros(CellKind::Lstm, 3, 2);
        let out = p
            .step(Array2::zeros((1, 3)).view(), Array2::zeros((1, 2)).view(), Some(Array2::zeros((1, 2)).view()))
            .unwrap();
        for j in 0..2 {
            assert_eq!(out.gates[[0, j]], 0.5);
            assert_eq!(out.gates[[0, 2 + j]], 0.5);
            assert_eq!(out.gates[[0, 4 + j]], 0.0);
            assert_eq!(out.gates[[0, 6 + j]], 0.5);
        }
        assert!(out.h.iter().all(|&v| v == 0.0));
        assert!(out.c.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_gates_keep_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = CellParams::<f64>::uniform(CellKind::Lstm, 3, 2, 0.1, &mut rng);
        let f = p.gate_rows(LSTM_FORGET);
        let i = p.gate_rows(LSTM_INPUT);
        p.b_input.slice_mut(s![f]).fill(60.0);
        p.b_input.slice_mut(s![i]).fill(-60.0);
        let prev = LstmState {
            h: array![0.3, -0.2],
            c: array![1.5, -0.7],
        };
        let next = lstm_cell(&array![0.1, 0.2, 0.3], &prev, &p).unwrap();
        for j in 0..2 {
            assert!((next.c[j] - prev.c[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_zero_params_and_identity_carry() {
        let p = CellParams::<f64>::zeros(CellKind::Gru, 2, 2);
        let h = array![0.4, -0.6];
        let out = gru_cell(&array![1.0, 2.0], &h, &p).unwrap();
        assert_eq!(out, &h * 0.5);

        let mut p = p;
        let z = p.gate_rows(GRU_UPDATE);
        p.b_input.slice_mut(s![z]).fill(80.0);
        let out = gru_cell(&array![1.0, 2.0], &h, &p).unwrap();
        for j in 0..2 {
            assert!((out[j] - h[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn rnn_range() {
        let p = CellParams::<f64>::zeros(CellKind::Rnn, 2, 3);
        assert!(rnn_cell(&array![0.0, 0.0], &Array1::zeros(3), &p).unwrap().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = CellParams::<f64>::uniform(CellKind::Rnn, 2, 3, 5.0, &mut rng);
        let out = rnn_cell(&array![10.0, -10.0], &array![1.0, 1.0, 1.0], &p).unwrap();
        assert!(out.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let p = CellParams::<f64>::zeros(CellKind::Rnn, 3, 2);
        let err = rnn_cell(&array![1.0, 2.0], &Array1::zeros(2), &p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[n, 3]") && msg.contains("[1, 2]"), "{msg}");
        let err = lstm_cell(&array![1.0, 2.0, 3.0], &LstmState::zeros(2), &p).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("LSTM".parse::<CellKind>().unwrap(), CellKind::Lstm);
        assert!("bogus".parse::<CellKind>().is_err());
    }
}
