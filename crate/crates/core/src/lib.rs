//! Short-term electricity load forecasting.
//!
//! The crate covers the whole comparison pipeline: hourly load ingest and
//! preprocessing ([`preprocess`]), a Box-Jenkins ARIMA baseline ([`arima`]),
//! LSTM / BiLSTM / encoder-only Transformer forecasters ([`models`]) built on
//! a small reverse-mode autodiff engine ([`tensor`]), the training loop
//! ([`training`]), evaluation and report artifacts ([`metrics`], [`report`]),
//! and an experiment runner ([`pipeline`]) driven by [`config`].

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod arima;
pub mod config;
pub mod error;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod synthetic;
pub mod tensor;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::{Graph, Mode, ParamStore, Parameter, Tensor, Var};
