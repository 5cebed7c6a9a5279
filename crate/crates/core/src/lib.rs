//! Small 3D convolutional classifiers for volumetric images, explained with
//! layer-wise relevance propagation (epsilon rule) and gradient sensitivity.
//!
//! The crate is organized around the data that flows through an experiment:
//!
//! - [`volume`]: dense scalar volumes, binary masks, VVOL file I/O and
//!   the intensity/geometry primitives (scaling, resampling, augmentation).
//! - [`nn`]: the network itself, exact backpropagation, Adam, training with
//!   early stopping, and the VNET checkpoint format.
//! - [`explain`]: relevance heatmaps (LRP and sensitivity) and heatmap algebra.
//! - [`preprocess`]: dataset manifests, stratified splits and lesion filling.
//! - [`synth`]: deterministic brain-like phantoms with lesion and atrophy
//!   disease regimes and a labeled parcellation.
//! - [`eval`]: classification metrics, ROC/AUC, region tables and the
//!   lesion-load baseline.

pub mod error;
pub mod eval;
pub mod explain;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use eval::{ClassificationMetrics, RegionTable, RocCurve};
pub use explain::Heatmap;
pub use nn::{ArchConfig, LayerSpec, Network, TrainConfig, TrainHistory};
pub use preprocess::{DatasetManifest, FillParams, Split, Subject};
pub use synth::{Parcellation, PhantomParams, Regime};
pub use volume::{LabelVolume, Mask, Volume};
