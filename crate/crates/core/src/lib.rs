//! Likelihood-guided response selection for instruction-tuning corpora.
//!
//! The pipeline pools responses to the same instruction from several
//! sources, scores each response under a target base model, and keeps the
//! response(s) the model finds most likely per token (lowest perplexity).
//! Baseline selectors, subset-KL analysis and a selection-cost model sit
//! alongside.

pub mod corpus;
pub mod costmodel;
pub mod hash;
pub mod io;
pub mod klanalysis;
pub mod pipeline;
pub mod report;
pub mod scoring;
pub mod selection;
