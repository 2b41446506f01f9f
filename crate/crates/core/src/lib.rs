//! Learning hybrid automata from traces of a dynamical system.
//!
//! The pipeline segments a velocity-like signal into intervals with a
//! penalized dynamic program, merges intervals that share dynamics into
//! modes, learns transition guards from boolean predicates, and assembles
//! the result into a [`automaton::HybridAutomaton`].

pub mod automaton;
pub mod generators;
pub mod guards;
pub mod models;
pub mod pipeline;
pub mod segmentation;
pub mod trace;

pub use automaton::{HybridAutomaton, Simulation};
pub use pipeline::{learn, LearnConfig, Learned};
pub use trace::Trace;
