//! Multi-source neural machine translation from scratch.
//!
//! Two LSTM encoders (one per source language) feed a stacked LSTM decoder
//! through per-layer state combiners and, optionally, dual-source local-p
//! attention. Training is plain SGD with hand-written backpropagation through
//! time; decoding is beam search; evaluation is corpus BLEU and perplexity.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod combiner;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod recurrent;
pub mod synth;
pub mod trainer;

pub use error::{NmtError, Result};
