//! Core library for a desk-scale code-switching (Mandarin/English) speech
//! model that performs joint recognition and speech translation.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`] — dense row-major tensors, a reverse-mode autodiff graph,
//!   a counter-based deterministic PRNG, and a finite-difference gradient
//!   checker.
//! * [`transformer`] — layer norm, multi-head self/cross attention,
//!   position-wise feed-forward nets, encoder/decoder blocks, and the
//!   stride-4 subsampling front end.
//! * [`moe`] — encoder blocks whose attention stream is shared by two
//!   task-specific feed-forward experts (recognition vs. translation).
//! * [`ctc`] — CTC loss via a differentiable forward DP, a brute-force
//!   enumeration oracle, greedy and prefix beam search decoding, and a
//!   checker for the alignment-factorization identity the architecture
//!   relies on.
//! * [`corpus`] — a synthetic bilingual corpus: toy vocabulary, bijective
//!   toy translation, monolingual masking, and deterministic featurization.
//! * [`model`] — model assembly for all supported variants, the joint
//!   loss, Adam with warmup/inverse-sqrt schedule, and training steps.
//! * [`decode`] — recognition/translation beam search on top of a trained
//!   model, an n-gram language model for shallow fusion, and n-best
//!   rescoring with the translation decoders.
//! * [`metrics`] — edit distance, mixed error rate with per-language
//!   attribution, BLEU, and TER.
//!
//! Everything here is `no_std`-compatible (requires `alloc`); file formats
//! and the command-line driver live in the companion `laest-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod corpus;
pub mod ctc;
pub mod decode;
mod error;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod transformer;

pub use error::{Error, Result};
