//! Robust architecture search over a dense/convolution search space.
//!
//! The crate is organised around three co-evolving gene populations
//! (layers, blocks, models), a spectrum-based niching evolutionary
//! strategy, a computation-graph compiler with shape inference, a minimal
//! CPU training runtime, and a black-box differential-evolution attack
//! pipeline that feeds a persistent adversarial sample bank. Model fitness
//! is clean validation accuracy plus accuracy on the bank.

pub mod attacks;
pub mod dataset;
pub mod events;
pub mod fitness;
pub mod genome;
pub mod graph;
pub mod mutation;
pub mod niching;
pub mod nn;
