//! Multi-atlas functional-connectivity classification.
//!
//! The pipeline turns per-subject ROI time series into Pearson connectivity
//! features, keeps the top features by F-score, pre-trains a stacked sparse
//! denoising autoencoder, transfers its encoders into an MLP that fuses
//! demographics before the output layer, and combines one MLP per atlas with
//! accuracy-weighted soft voting. Evaluation is stratified k-fold
//! cross-validation with per-fold fitting of every learned component.

pub mod connectivity;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod feature_selection;
pub mod classifier;
pub mod nn;
pub mod roi_report;
pub mod seeds;
pub mod ssdae;

pub use error::{Error, Result};
