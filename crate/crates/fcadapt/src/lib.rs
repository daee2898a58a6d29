//! Source-free cohort adaptation for ROI time-series classifiers.
//!
//! The toolkit ingests per-subject ROI time series (an `L x N` matrix of time
//! points by regions), turns them into sequences of sliding-window
//! connectivity graphs, and classifies subjects with a spatiotemporal graph
//! encoder. A model trained on a labeled source cohort can be adapted to an
//! unlabeled target cohort without ever touching the source data again: three
//! enrichment branches (window warping, receptive-field manipulation, window
//! slicing) are fine-tuned jointly under a mutual-consistency objective and
//! ensembled at inference time.
//!
//! Module map:
//! - [`data`]: cohort data model, manifest/matrix file I/O, synthetic cohorts
//! - [`enrichment`]: windowing, Fourier resampling, Pearson graphs
//! - [`encoder`]: GIN + attention encoder and its parameter set
//! - [`objectives`]: losses and parameter averaging
//! - [`pipelines`]: pretraining, source training, adaptation, inference
//! - [`evaluation`]: classification metrics and ROI importance
//! - [`config`] / [`cli`]: experiment configuration and the command surface

pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod enrichment;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod mat;
pub mod objectives;
pub mod pipelines;
pub mod tape;

pub use error::{Error, Result};
pub use mat::Mat;
