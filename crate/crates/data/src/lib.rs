//! Dataset ingestion, preprocessing, sparse sampling, and the
//! synthetic Manhattan-room generator that provides analytic ground
//! truth (depth, normals, plane classes) for desk-scale testing.

pub mod manifest;
pub mod normals;
pub mod preprocess;
pub mod sparse;
pub mod synth;

pub use manifest::{load_dataset, DatasetManifest, Split};
pub use normals::normals_from_depth;
pub use preprocess::{preprocess, CropMode};
pub use sparse::sample_sparse;
pub use synth::{synth_scene, BoxSpec, SynthSceneSpec};
