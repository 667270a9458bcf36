//! Data-processing toolkit around a two-stage brain MRI segmentation model:
//! label-map preparation, domain-randomized training-data synthesis,
//! label/image resampling, fold ensembling, DSC/ASD evaluation, volumetry
//! and group statistics.

pub mod ensemble;
pub mod error;
pub mod grid;
pub mod kdtree;
pub mod labels;
pub mod metrics;
pub mod nifti;
pub mod pipeline;
pub mod resample;
pub mod stats;
pub mod synth;
pub mod volumetry;

pub use error::{Error, Result};
pub use grid::{DataKind, Geometry, Orientation, VoxelData, VoxelGrid};
pub use labels::{ExclusionSet, LabelConvention, LabelMap};
