//! Relational-temporal anomaly detection for multivariate service metrics.
//!
//! The pipeline learns two views of a sliding window of metrics:
//!
//! * a **relational embedding** — graph attention over metrics, sparsified
//!   into a binary correlation graph, run through graph convolutions with
//!   self-attention pooling and mean/max readouts;
//! * a **temporal embedding** — a GRU and a stack of dilated causal
//!   convolutions, average-pooled over time.
//!
//! The fused embedding feeds a label-conditional VAE whose normal-conditioned
//! reconstruction error is the anomaly score. Training uses positive-unlabeled
//! learning: fit on a small set of labeled-normal windows, pseudo-label the
//! rest by score, then continue training on everything. After detection,
//! culprit metrics are ranked by the change in attention between normal and
//! anomalous periods.
//!
//! See the `examples/` directory for runnable walkthroughs of each stage and
//! the `rta` binary for the file-based pipeline.

use blas_src as _;

pub mod autodiff;
pub mod detect;
pub mod error;
pub mod ingest;
pub mod localize;
pub mod relgraph;
pub mod lcvae;
pub mod model;
pub mod optim;
pub mod pulearn;
pub mod temporal;

pub use error::{Error, Result};
