//! Expressive leaky memory (ELM) neuron toolkit: recurrent cells with exact
//! hand-derived backpropagation through time, synthetic task generators, and
//! a small deterministic training stack.

pub mod bptt;
pub mod cells;
pub mod error;
pub mod numerics;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
