//! Dense numerics for the classifier: recurrent cells with hand-written
//! backward passes, the sigmoid/BCE output, and a finite-difference checker.

mod cell;
pub mod gradcheck;

pub use cell::{
    gru_cell, lstm_cell, rnn_cell, CellKind, CellParams, CellState, LstmState, StepCache, GRU_NEW,
    GRU_RESET, GRU_UPDATE, LSTM_CELL, LSTM_FORGET, LSTM_INPUT, LSTM_OUTPUT,
};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, LinalgScalar, ScalarOperand};

/// Row-major dense matrix.
pub type Tensor2<T> = Array2<T>;

/// Scalar types the network can run in: `f32` for training, `f64` for checks.
pub trait Float:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Float for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Logistic sigmoid, branching on sign so `exp` never overflows.
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Probability clamp used by [`bce_loss`].
pub const BCE_EPS: f64 = 1e-12;

/// Binary cross entropy of a probability against a 0/1 target, with the
/// probability clamped to `[eps, 1 - eps]`.
pub fn bce_loss(prob: f64, target: f64) -> f64 {
    let p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Derivative of [`bce_loss`] with respect to the probability.
#[allow(clippy::manual_range_contains)] // NaN must fall through
pub fn bce_grad(prob: f64, target: f64) -> f64 {
    if prob < BCE_EPS || prob > 1.0 - BCE_EPS {
        return 0.0;
    }
    -target / prob + (1.0 - target) / (1.0 - prob)
}

/// BCE evaluated from the logit, `max(z,0) - z*y + ln(1 + e^-|z|)`. Equal to
/// `bce_loss(sigmoid(z), y)` away from the clamp, and finite in `f32`.
pub fn bce_with_logit<T: Float>(logit: T, target: T) -> T {
    let zero = T::zero();
    logit.max(zero) - logit * target + (-logit.abs()).exp().ln_1p()
}
