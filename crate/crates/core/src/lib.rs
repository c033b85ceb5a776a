//! Volumetric thalamus parcellation toolkit.
//!
//! Three segmentation paths share one voxel-grid data model:
//!
//! * [`fusion`]: similarity-weighted multi-atlas label fusion over pre-registered priors.
//! * [`fod`] + [`cluster`]: q-ball spherical-harmonic fitting followed by a joint
//!   spatial/spectral k-means with restart-aggregated seeding.
//! * [`icp`]: BOLD preprocessing, instantaneous-connectivity unfolding, group ICA,
//!   dual regression and hard parcellation.
//!
//! [`metrics`] holds the comparison machinery (Dice, VSI, probability atlases,
//! centroid maps, overlap regrouping, Hungarian matching, table emission) and
//! [`pipeline`] runs the full cross-method study on synthetic [`phantom`] cohorts.
//!
//! With the default `parallel` feature the voxelwise and per-restart loops run on
//! rayon; building with `--no-default-features` gives the sequential fallback with
//! bit-identical results.

pub mod cli;
pub mod cluster;
pub mod error;
pub mod fod;
pub mod fusion;
pub mod icp;
pub mod linalg;
pub mod metrics;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Affine, Geometry, LabelVolume, Mask, Volume};

/// Toolkit version string reported by `--version` and written to manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// On-disk format version of study outputs (manifest layout, CSV columns).
pub const FORMAT_VERSION: &str = "1";
