//! On-disk formats.
//!
//! Depth: 16-bit grayscale PNG in millimeters, 0 = missing.
//! RGB: 8-bit PNG. Segmentation: 8-bit grayscale PNG whose pixel value
//! is the label id, with a sidecar text file mapping `label class`.
//! Intrinsics: 9 whitespace-separated reals, row-major K.

use crate::error::{CoreError, Result};
use crate::types::{CameraIntrinsics, DepthMap, PlaneClass, RgbImage, SegMask};
use ndarray::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;

fn io_err(path: &Path, source: std::io::Error) -> CoreError {
    CoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> CoreError {
    CoreError::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let (h, w) = depth.data.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for ((i, j), &v) in depth.data.indexed_iter() {
        let mm = (v * 1000.0).round();
        if mm > u16::MAX as f64 {
            return Err(CoreError::InvalidParameter(format!(
                "depth {v} m exceeds 16-bit millimeter range"
            )));
        }
        buf.put_pixel(j as u32, i as u32, image::Luma([mm as u16]));
    }
    buf.save(path)
        .map_err(|e| malformed(path, format!("png encode: {e}")))
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let img = image::open(path).map_err(|e| malformed(path, format!("png decode: {e}")))?;
    let img16 = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => other.into_luma16(),
    };
    let (w, h) = img16.dimensions();
    let mut data = Array2::<f64>::zeros((h as usize, w as usize));
    for (j, i, p) in img16.enumerate_pixels() {
        data[[i as usize, j as usize]] = p.0[0] as f64 / 1000.0;
    }
    DepthMap::new(data)
}

pub fn write_rgb_png(path: &Path, rgb: &RgbImage) -> Result<()> {
    let (h, w, _) = rgb.data.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = image::Rgb([
                (rgb.data[[i, j, 0]] * 255.0).round() as u8,
                (rgb.data[[i, j, 1]] * 255.0).round() as u8,
                (rgb.data[[i, j, 2]] * 255.0).round() as u8,
            ]);
            buf.put_pixel(j as u32, i as u32, px);
        }
    }
    buf.save(path)
        .map_err(|e| malformed(path, format!("png encode: {e}")))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| malformed(path, format!("png decode: {e}")))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (j, i, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[i as usize, j as usize, c]] = p.0[c] as f64 / 255.0;
        }
    }
    RgbImage::new(data)
}

pub fn write_seg_png(path: &Path, seg: &SegMask) -> Result<()> {
    let (h, w) = seg.data.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for ((i, j), &l) in seg.data.indexed_iter() {
        buf.put_pixel(j as u32, i as u32, image::Luma([l]));
    }
    buf.save(path)
        .map_err(|e| malformed(path, format!("png encode: {e}")))
}

pub fn read_seg_png(path: &Path, classes: &BTreeMap<u8, PlaneClass>) -> Result<SegMask> {
    let img = image::open(path)
        .map_err(|e| malformed(path, format!("png decode: {e}")))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut data = Array2::<u8>::zeros((h as usize, w as usize));
    for (j, i, p) in img.enumerate_pixels() {
        data[[i as usize, j as usize]] = p.0[0];
    }
    SegMask::new(data, classes.clone())
        .map_err(|e| malformed(path, format!("label table: {e}")))
}

pub fn write_plane_classes(path: &Path, classes: &BTreeMap<u8, PlaneClass>) -> Result<()> {
    let mut s = String::new();
    for (label, class) in classes {
        s.push_str(&format!("{label} {}\n", class.name()));
    }
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_plane_classes(path: &Path) -> Result<BTreeMap<u8, PlaneClass>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(label), Some(class)) = (parts.next(), parts.next()) else {
            return Err(malformed(path, format!("line {}: expected 'label class'", ln + 1)));
        };
        let label: u8 = label
            .parse()
            .map_err(|_| malformed(path, format!("line {}: bad label {label:?}", ln + 1)))?;
        out.insert(label, PlaneClass::parse(class)?);
    }
    Ok(out)
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let m = k.matrix();
    let s = m
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(path, s + "\n").map_err(|e| io_err(path, e))
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| malformed(path, format!("bad number: {e}")))?;
    if vals.len() != 9 {
        return Err(malformed(path, format!("expected 9 values, got {}", vals.len())));
    }
    let m = [
        [vals[0], vals[1], vals[2]],
        [vals[3], vals[4], vals[5]],
        [vals[6], vals[7], vals[8]],
    ];
    CameraIntrinsics::from_matrix(&m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_roundtrip_within_millimeter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let mut a = Array2::<f64>::zeros((4, 5));
        a[[0, 0]] = 0.0;
        a[[1, 2]] = 1.2345;
        a[[2, 3]] = 9.9996;
        a[[3, 4]] = 65.535;
        let d = DepthMap::new(a.clone()).unwrap();
        write_depth_png(&p, &d).unwrap();
        let back = read_depth_png(&p).unwrap();
        for (idx, &v) in a.indexed_iter() {
            assert!(
                (back.data[idx] - v).abs() <= 0.001,
                "at {idx:?}: {v} vs {}",
                back.data[idx]
            );
        }
        // Valid/missing status preserved.
        assert_eq!(back.data[[0, 0]], 0.0);
    }

    #[test]
    fn intrinsics_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.txt");
        let k = CameraIntrinsics::new(123.5, 99.25, 31.75, 23.5).unwrap();
        write_intrinsics(&p, &k).unwrap();
        let back = read_intrinsics(&p).unwrap();
        assert_eq!(k, back);
    }

    #[test]
    fn plane_classes_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("classes.txt");
        let mut classes = BTreeMap::new();
        classes.insert(0u8, PlaneClass::Floor);
        classes.insert(1u8, PlaneClass::Ceiling);
        classes.insert(2u8, PlaneClass::Wall);
        classes.insert(9u8, PlaneClass::Other);
        write_plane_classes(&p, &classes).unwrap();
        assert_eq!(read_plane_classes(&p).unwrap(), classes);
    }
}
