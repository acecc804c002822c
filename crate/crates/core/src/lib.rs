//! Prompt-based medical entity recognition over clinical text.
//!
//! The pipeline ingests an i2b2-style corpus ([`corpus`]), renders one prompt
//! per strategy ([`prompt`]), obtains completions through a cached
//! chat-completion gateway ([`gateway`]), parses entity lines
//! ([`response`]), aggregates several prompt runs by embedding clustering and
//! majority vote ([`ensemble`], [`embedding`]) and scores the result against
//! gold annotations ([`evaluation`]). [`pipeline`] strings the stages
//! together around on-disk run artifacts.

pub mod config;
pub mod corpus;
pub mod embedding;
pub mod ensemble;
pub mod evaluation;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod response;
pub mod transport;
