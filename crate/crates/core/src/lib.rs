//! Structured Gaussian processes for partial sequence labeling.
//!
//! Sequences whose tokens carry candidate label sets instead of single gold
//! labels are decomposed into unary and transition pieces, each given a
//! Gaussian-process latent variable. A variational posterior is fitted
//! jointly with per-candidate confidences, and test sequences are decoded
//! with a standard or a confidence-weighted Viterbi pass.
//!
//! ```no_run
//! use sgppsl::corpus::{featurize, parse_partial, FeaturizerConfig};
//! use sgppsl::inference::{train, TrainConfig};
//! use sgppsl::piecewise::decompose;
//! use sgppsl::predict::{Decoder, Predictor};
//!
//! let text = std::fs::read_to_string("train.tsv")?;
//! let corpus = featurize(&parse_partial(&text, None)?, &FeaturizerConfig::default())?;
//! let model = train(&corpus, &decompose(&corpus)?, &TrainConfig::default())?;
//! let feats: Vec<Vec<f64>> = corpus.sequences[0].tokens.iter().map(|t| t.features.clone()).collect();
//! let labels = Predictor::new(&model)?.decode(&feats, Decoder::Weighted, 5)?;
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod inference;
pub mod kernel;
pub mod model;
pub mod piecewise;
pub mod predict;
pub mod rng;

pub use error::{Error, Result};
