//! Datasets on disk, run configuration and mesh export.

pub mod config;
pub mod dataset;
pub mod ply;

pub use config::{EvalConfig, Experiment, Manifest, RunConfig};
pub use dataset::{dataset_hash, load_dataset, read_cloud, write_cloud, write_dataset, Dataset, LoadOptions};
pub use ply::{export_surface, read_ply, write_ply, ExportSummary, PlyMesh};
