//! Graph-attention classification of functional brain connectomes.
//!
//! The pipeline runs ROI time series through Pearson connectivity into
//! thresholded per-subject graphs, trains a multi-head graph-attention
//! classifier (or a GCN baseline) with a from-scratch reverse-mode
//! autodiff engine, evaluates replicate runs, and explains predictions via
//! Kernel SHAP and attention aggregation.

pub mod autodiff;
pub mod cli;
pub mod connectome;
pub mod error;
pub mod eval;
pub mod explain;
pub mod ingest;
pub mod nn;
pub mod seeds;
pub mod train;
pub mod verify;
