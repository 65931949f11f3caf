//! Steerable multitrack music generation: MIDI preprocessing, per-track
//! tokenization with onset-restricted BPE, spatiotemporal control features,
//! a parallel-decoder transformer and objective fidelity metrics.

pub mod bpe;
pub mod cli;
pub mod features;
pub mod metrics;
pub mod neural;
pub mod score;
pub mod synth;
pub mod tokenizer;
