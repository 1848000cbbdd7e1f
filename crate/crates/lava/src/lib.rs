//! Non-autoregressive translation with look-around decoding and vocabulary
//! attention, built on a from-scratch f64 autodiff core.

pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nat;
pub mod teacher;
pub mod tensor;
pub mod training;

