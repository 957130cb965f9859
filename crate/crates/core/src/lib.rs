//! Coherent two-level temporal-hierarchy forecasting.
//!
//! The crate trains and evaluates models that forecast a daily series and its
//! weekly averages simultaneously, with the daily forecasts averaging exactly
//! to the weekly ones by construction. It bundles:
//!
//! - a small reverse-mode autodiff engine ([`autodiff`]),
//! - the binning algebra that enforces coherence ([`hierarchy`]),
//! - a time/feature-mixing MLP backbone ([`mixer`]),
//! - the encoder–decoder model and its monolithic counterpart ([`model`]),
//! - retail-sales data ingestion, features, and a synthetic generator
//!   ([`data`]),
//! - the evaluation suite, including hierarchy-weighted scaled errors
//!   ([`metrics`]),
//! - an Adam training loop with gradient clipping and grid search
//!   ([`train`]),
//! - the context-mean baseline ([`baseline`]) and batch evaluation/forecast
//!   output helpers ([`eval`], [`forecast`]).

pub mod autodiff;
pub mod hierarchy;
