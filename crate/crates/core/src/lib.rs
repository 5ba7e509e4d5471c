//! Satellite-to-fungal-biodiversity modeling at desk scale.
//!
//! The pipeline runs from sparse multimodal satellite time series to
//! conservation triage maps:
//!
//! - [`tensorio`]: bit-exact binary tensor format, patch-bundle directory
//!   layout, and CSV table I/O.
//! - [`dpixel`]: the per-location observation time-series data model and the
//!   two-view temporal sampling augmentation.
//! - [`ssl`]: Barlow Twins objective with mix-up regularization over a toy
//!   deterministic encoder.
//! - [`richness`]: Chao1 rarefaction/extrapolation richness estimation and
//!   biome-level outlier filtering.
//! - [`features`]: feature-matrix assembly (embedding flattening, PCA
//!   reduction, Horn slope/aspect, one-hot land cover).
//! - [`model`]: from-scratch gradient-boosted and random-forest regression
//!   trees with histogram split finding and early stopping.
//! - [`eval`]: seeded cross-validation harness, metrics, ablations,
//!   importance aggregation, and sensitivity curves.
//! - [`trend`]: multi-year raster trend analysis and five-zone conservation
//!   triage.
//! - [`synth`]: deterministic synthetic data generators used by the CLI and
//!   the test suite.

pub mod dpixel;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod richness;
pub mod ssl;
pub mod stats;
pub mod synth;
pub mod tensorio;
pub mod trend;

pub use error::{Error, Result};

/// Version string for file formats written by this crate (tensor files and
/// serialized models embed it; `--version` prints it).
pub const FORMAT_VERSION: &str = "tsr1/mdl1";
