//! Domain types and shared conventions for the depth-completion
//! pipeline: depth maps with `0 = missing`, RGB in `[0,1]`, unit
//! normal maps, plane-class segmentation, camera intrinsics, and the
//! on-disk PNG formats (16-bit millimeter depth, 8-bit RGB and labels).

pub mod error;
pub mod io;
pub mod seed;
pub mod types;

pub use error::CoreError;
pub use types::{
    validity_mask, CameraIntrinsics, ConfidenceMap, DepthMap, FeatureMap, NormalMap, PlaneClass,
    PointCloud, RgbImage, SampleRecord, SegMask,
};
