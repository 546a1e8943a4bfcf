//! Recurrent cell implementations: ELM and Branch-ELM, LSTM with optional
//! chrono initialization, LIF/ALIF, and a small two-layer spiking network.
//! Each cell provides the exact forward dynamics plus a hand-derived reverse
//! pass over a recorded tape.

pub mod elm;
pub mod lif;
pub mod lstm;
pub mod snn;

pub use elm::{BranchLayout, ElmCell, ElmConfig, ElmState, ElmVariant, TauInit, TauSpacing};
pub use lif::{AlifCell, LifCell, LifConfig};
pub use lstm::{LstmCell, LstmConfig};
pub use snn::{SnnCell, SnnConfig};

use crate::error::Result;
use crate::numerics::Rng;

/// One named block of trainable scalars in a cell's flat parameter layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub len: usize,
}

impl Section {
    pub fn new(name: &str, len: usize) -> Self {
        Section { name: name.to_string(), len }
    }
}

/// Rollout mode. Dropout masks are drawn only in `Train` mode; `Eval` is
/// deterministic.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut Rng },
}

/// How a cell's loss surface behaves, for gradient-check reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothness {
    /// All analytic derivatives (tanh/sigmoid only).
    Smooth,
    /// Contains ReLU kinks; finite differences need kink margin.
    PiecewiseSmooth,
    /// Contains hard thresholds; the backward pass uses a surrogate.
    NonDifferentiable,
}

/// A recurrent cell with exact forward dynamics and a hand-derived reverse
/// pass. Sequences are row-major `T x input_dim`, outputs `T x output_dim`.
pub trait Cell {
    type Tape;

    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Forward over a full sequence from the zero initial state. Returns the
    /// per-step outputs and a tape from which the reverse pass can run
    /// without recomputation. A zero-length sequence yields empty outputs and
    /// an empty tape (the loss stage rejects it).
    fn rollout(&self, xs: &[f64], dts: &[f64], mode: Mode) -> Result<(Vec<f64>, Self::Tape)>;

    /// Reverse pass. `out_grads` is `T x output_dim` of loss gradients on the
    /// outputs; the result is the flat gradient in `layout()` order.
    fn backward(&self, tape: &Self::Tape, out_grads: &[f64]) -> Result<Vec<f64>>;

    /// Named layout of the trainable parameters.
    fn layout(&self) -> Vec<Section>;

    fn trainable(&self) -> Vec<f64>;

    fn set_trainable(&mut self, flat: &[f64]) -> Result<()>;

    /// Exact count of trainable scalars.
    fn count_params(&self) -> usize {
        self.layout().iter().map(|s| s.len).sum()
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::Smooth
    }

    /// Smallest |pre-activation| distance to a ReLU kink seen on the tape;
    /// infinity for kink-free cells. Gradient checks use this to keep finite
    /// differences away from kinks.
    fn kink_margin(&self, _tape: &Self::Tape) -> f64 {
        f64::INFINITY
    }

    /// Cell-internal regularization term already included in the backward
    /// pass (e.g. spike L1 for the SNN). Added to the reported loss.
    fn reg_loss(&self, _tape: &Self::Tape) -> f64 {
        0.0
    }
}

pub(crate) fn check_flat_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(crate::error::Error::Shape(format!(
            "flat parameter vector length {got} != layout total {expected}"
        )));
    }
    Ok(())
}
