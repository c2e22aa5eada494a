//! Semantic auto-encoder for data-to-text generation.
//!
//! A seq2seq *semantic LM* verbalizes a set of triples; a frozen seq2seq
//! *semantic parser* reads the text back. Candidates are ranked by the
//! triple F1 of that reconstruction against the input, and "greedy
//! finetuning" nudges the LM at inference time through a straight-through
//! estimator so that its greedy output parses back to the input.

pub mod autodiff;
pub mod autoencoder;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod metrics;
pub mod seq2seq;
pub mod triples;
