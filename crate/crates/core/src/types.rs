//! Core value types shared by every module.
//!
//! All images are row-major with `(row, col)` = `(v, u)` indexing; the
//! pixel at image coordinates `(u, v)` lives at `data[[v, u, ..]]`.
//! Depth is metric meters with the convention that exactly `0.0` marks
//! a missing/invalid pixel.

use crate::error::{CoreError, Result};
use ndarray::prelude::*;

/// 3-channel color image with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct RgbImage {
    pub data: Array3<f64>, // (H, W, 3)
}

impl RgbImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "rgb image must be (H>=1, W>=1, 3), got ({h}, {w}, {c})"
            )));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(CoreError::InvalidParameter(
                "rgb values must lie in [0,1]".into(),
            ));
        }
        Ok(RgbImage { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }
}

/// Single-channel metric depth; `0.0` means missing.
#[derive(Clone, Debug)]
pub struct DepthMap {
    pub data: Array2<f64>, // (H, W)
}

impl DepthMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(CoreError::InvalidParameter(
                "depth values must be finite and non-negative".into(),
            ));
        }
        Ok(DepthMap { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_valid(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}

/// True exactly where the depth value is valid (strictly positive).
pub fn validity_mask(d: &DepthMap) -> Array2<bool> {
    d.data.mapv(|v| v > 0.0)
}

/// Per-pixel surface normals. A zero vector marks a pixel whose normal
/// is undefined (e.g. rejected by the plane-fit residual filter);
/// losses skip those pixels.
#[derive(Clone, Debug)]
pub struct NormalMap {
    pub data: Array3<f64>, // (H, W, 3)
}

impl NormalMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(CoreError::ShapeMismatch("normal map needs 3 channels".into()));
        }
        Ok(NormalMap { data })
    }

    /// Check unit length of all defined (nonzero) normals within `tol`.
    pub fn max_unit_norm_deviation(&self) -> f64 {
        let (h, w, _) = self.data.dim();
        let mut worst = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let n = [self.data[[i, j, 0]], self.data[[i, j, 1]], self.data[[i, j, 2]]];
                let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if norm == 0.0 {
                    continue;
                }
                worst = worst.max((norm - 1.0).abs());
            }
        }
        worst
    }
}

/// Semantic plane class of a segmentation label.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum PlaneClass {
    Floor,
    Ceiling,
    Wall,
    Other,
}

impl PlaneClass {
    pub fn name(self) -> &'static str {
        match self {
            PlaneClass::Floor => "floor",
            PlaneClass::Ceiling => "ceiling",
            PlaneClass::Wall => "wall",
            PlaneClass::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "floor" => Ok(PlaneClass::Floor),
            "ceiling" => Ok(PlaneClass::Ceiling),
            "wall" => Ok(PlaneClass::Wall),
            "other" => Ok(PlaneClass::Other),
            _ => Err(CoreError::InvalidParameter(format!("unknown plane class {s:?}"))),
        }
    }
}

/// Per-pixel integer labels plus the label -> plane-class table.
#[derive(Clone, Debug)]
pub struct SegMask {
    pub data: Array2<u8>, // (H, W)
    pub plane_classes: std::collections::BTreeMap<u8, PlaneClass>,
}

impl SegMask {
    pub fn new(
        data: Array2<u8>,
        plane_classes: std::collections::BTreeMap<u8, PlaneClass>,
    ) -> Result<Self> {
        for &l in data.iter() {
            if !plane_classes.contains_key(&l) {
                return Err(CoreError::InvalidParameter(format!(
                    "label {l} present in mask but missing from plane_classes"
                )));
            }
        }
        Ok(SegMask { data, plane_classes })
    }

    pub fn class_of(&self, label: u8) -> PlaneClass {
        *self.plane_classes.get(&label).unwrap_or(&PlaneClass::Other)
    }

    /// Boolean mask of pixels belonging to the given plane class.
    pub fn class_mask(&self, class: PlaneClass) -> Array2<bool> {
        self.data.mapv(|l| self.class_of(l) == class)
    }
}

/// Unbounded per-pixel confidence logits.
#[derive(Clone, Debug)]
pub struct ConfidenceMap {
    pub data: Array2<f64>, // (H, W)
}

impl ConfidenceMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "confidence logits must be finite".into(),
            ));
        }
        Ok(ConfidenceMap { data })
    }
}

/// Intermediate activation block, `(h, w, C)`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Array3<f64>, // (h, w, C)
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParameter("feature values must be finite".into()));
        }
        Ok(FeatureMap { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

/// Pinhole intrinsics (zero skew).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(CoreError::InvalidParameter(
                "focal lengths must be positive".into(),
            ));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Row-major 3x3 matrix K.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix(k: &[[f64; 3]; 3]) -> Result<Self> {
        Self::new(k[0][0], k[1][1], k[0][2], k[1][2])
    }

    /// K^-1 [u, v, 1]^T for pixel coordinates (u = column, v = row).
    pub fn unproject(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Pinhole projection of a camera-frame point to (u, v, depth).
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        (
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
            p[2],
        )
    }
}

/// 3-d points in meters, one row per point.
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub points: Array2<f64>, // (N, 3)
}

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.dim().1 != 3 {
            return Err(CoreError::ShapeMismatch("point cloud must be (N, 3)".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParameter("points must be finite".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One dataset sample; all image channels share (H, W).
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub id: String,
    pub rgb: RgbImage,
    pub raw_depth: DepthMap,
    pub gt_depth: Option<DepthMap>,
    pub seg: Option<SegMask>,
    pub intrinsics: CameraIntrinsics,
    pub gt_normals: Option<NormalMap>,
}

impl SampleRecord {
    /// Enforce that every channel shares the RGB image's size.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.rgb.height(), self.rgb.width());
        let check = |oh: usize, ow: usize, what: &str| {
            if oh != h || ow != w {
                Err(CoreError::ShapeMismatch(format!(
                    "sample {}: {what} is {oh}x{ow}, rgb is {h}x{w}",
                    self.id
                )))
            } else {
                Ok(())
            }
        };
        check(self.raw_depth.height(), self.raw_depth.width(), "raw_depth")?;
        if let Some(d) = &self.gt_depth {
            check(d.height(), d.width(), "gt_depth")?;
        }
        if let Some(s) = &self.seg {
            check(s.data.dim().0, s.data.dim().1, "seg")?;
        }
        if let Some(n) = &self.gt_normals {
            check(n.data.dim().0, n.data.dim().1, "gt_normals")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validity_mask_definition() {
        // All-positive -> all true.
        let d = DepthMap::new(Array2::from_elem((3, 4), 1.5)).unwrap();
        assert!(validity_mask(&d).iter().all(|&m| m));

        // All-zero -> all false.
        let d = DepthMap::new(Array2::zeros((3, 4))).unwrap();
        assert!(validity_mask(&d).iter().all(|&m| !m));

        // Single hole at (0,0).
        let mut a = Array2::from_elem((2, 2), 1.0);
        a[[0, 0]] = 0.0;
        let d = DepthMap::new(a).unwrap();
        let m = validity_mask(&d);
        assert!(!m[[0, 0]]);
        assert!(m[[0, 1]] && m[[1, 0]] && m[[1, 1]]);
    }

    #[test]
    fn depth_rejects_negatives() {
        assert!(DepthMap::new(Array2::from_elem((2, 2), -0.1)).is_err());
    }

    #[test]
    fn rgb_rejects_out_of_range() {
        assert!(RgbImage::new(Array3::from_elem((2, 2, 3), 1.2)).is_err());
        assert!(RgbImage::new(Array3::from_elem((2, 2, 3), 0.5)).is_ok());
    }

    #[test]
    fn intrinsics_unproject_project_roundtrip() {
        let k = CameraIntrinsics::new(100.0, 110.0, 50.0, 40.0).unwrap();
        let ray = k.unproject(62.0, 31.0);
        let d = 2.5;
        let p = [ray[0] * d, ray[1] * d, ray[2] * d];
        let (u, v, z) = k.project(p);
        assert!((u - 62.0).abs() < 1e-12);
        assert!((v - 31.0).abs() < 1e-12);
        assert!((z - d).abs() < 1e-12);
    }

    #[test]
    fn seg_mask_requires_complete_classes() {
        use std::collections::BTreeMap;
        let data = Array2::from_elem((2, 2), 7u8);
        let mut classes = BTreeMap::new();
        classes.insert(1u8, PlaneClass::Floor);
        assert!(SegMask::new(data.clone(), classes.clone()).is_err());
        classes.insert(7u8, PlaneClass::Wall);
        assert!(SegMask::new(data, classes).is_ok());
    }
}
