//! Forecasting grouped functional time series of age-specific rates.
//!
//! Curves are smoothed, decomposed by functional principal components, forecast
//! through ARIMA models of the component scores, and reconciled across the
//! levels of an exposure-weighted grouping structure.

pub mod domain;
pub mod ingest;
pub mod arima;
pub mod smoothing;
pub mod fpca;
pub mod reconcile;
pub mod intervals;
pub mod depth;
pub mod simulate;
pub mod evaluate;
pub mod seeds;
