//! Resize + crop with co-registered channels and intrinsics adjustment.
//!
//! RGB is resized bilinearly; depth, segmentation, and normals use
//! nearest-neighbor so hole boundaries are never interpolated across.

use ndarray::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdfc_core::error::{CoreError, Result};
use rdfc_core::{CameraIntrinsics, DepthMap, NormalMap, RgbImage, SampleRecord, SegMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Center,
    Random,
}

fn nearest_src(dst: usize, scale: f64) -> usize {
    // Pixel-area mapping: center of dst pixel back to src grid.
    (((dst as f64 + 0.5) * scale - 0.5).round().max(0.0)) as usize
}

fn resize_nearest_f64(src: &Array2<f64>, w: usize, h: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let (sy, sx) = (sh as f64 / h as f64, sw as f64 / w as f64);
    Array2::from_shape_fn((h, w), |(i, j)| {
        src[[nearest_src(i, sy).min(sh - 1), nearest_src(j, sx).min(sw - 1)]]
    })
}

fn resize_nearest_u8(src: &Array2<u8>, w: usize, h: usize) -> Array2<u8> {
    let (sh, sw) = src.dim();
    let (sy, sx) = (sh as f64 / h as f64, sw as f64 / w as f64);
    Array2::from_shape_fn((h, w), |(i, j)| {
        src[[nearest_src(i, sy).min(sh - 1), nearest_src(j, sx).min(sw - 1)]]
    })
}

fn resize_nearest_3(src: &Array3<f64>, w: usize, h: usize) -> Array3<f64> {
    let (sh, sw, c) = src.dim();
    let (sy, sx) = (sh as f64 / h as f64, sw as f64 / w as f64);
    Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        src[[nearest_src(i, sy).min(sh - 1), nearest_src(j, sx).min(sw - 1), k]]
    })
}

fn resize_bilinear_3(src: &Array3<f64>, w: usize, h: usize) -> Array3<f64> {
    let (sh, sw, c) = src.dim();
    let (sy, sx) = (sh as f64 / h as f64, sw as f64 / w as f64);
    let mut out = Array3::<f64>::zeros((h, w, c));
    for i in 0..h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, sh as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for j in 0..w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, sw as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            for k in 0..c {
                let v = src[[y0, x0, k]] * (1.0 - wy) * (1.0 - wx)
                    + src[[y0, x1, k]] * (1.0 - wy) * wx
                    + src[[y1, x0, k]] * wy * (1.0 - wx)
                    + src[[y1, x1, k]] * wy * wx;
                out[[i, j, k]] = v;
            }
        }
    }
    out
}

/// Resize then crop every channel identically; adjust intrinsics for
/// the scale and the crop offset. `resize`/`crop` are (W, H). The same
/// seed always yields the same random crop window.
pub fn preprocess(
    s: &SampleRecord,
    resize: (usize, usize),
    crop: (usize, usize),
    mode: CropMode,
    seed: u64,
) -> Result<SampleRecord> {
    let (rw, rh) = resize;
    let (cw, ch) = crop;
    if cw > rw || ch > rh {
        return Err(CoreError::InvalidParameter(format!(
            "crop {cw}x{ch} exceeds resize {rw}x{rh}"
        )));
    }
    let (h0, w0) = (s.rgb.height(), s.rgb.width());

    let (left, top) = match mode {
        CropMode::Center => ((rw - cw) / 2, (rh - ch) / 2),
        CropMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                rng.gen_range(0..=(rw - cw)),
                rng.gen_range(0..=(rh - ch)),
            )
        }
    };

    let crop2 = |a: Array2<f64>| a.slice(s![top..top + ch, left..left + cw]).to_owned();
    let crop2u = |a: Array2<u8>| a.slice(s![top..top + ch, left..left + cw]).to_owned();
    let crop3 = |a: Array3<f64>| a.slice(s![top..top + ch, left..left + cw, ..]).to_owned();

    let rgb = RgbImage::new(crop3(resize_bilinear_3(&s.rgb.data, rw, rh)))?;
    let raw_depth = DepthMap::new(crop2(resize_nearest_f64(&s.raw_depth.data, rw, rh)))?;
    let gt_depth = s
        .gt_depth
        .as_ref()
        .map(|d| DepthMap::new(crop2(resize_nearest_f64(&d.data, rw, rh))))
        .transpose()?;
    let seg = s
        .seg
        .as_ref()
        .map(|m| SegMask::new(crop2u(resize_nearest_u8(&m.data, rw, rh)), m.plane_classes.clone()))
        .transpose()?;
    let gt_normals = s
        .gt_normals
        .as_ref()
        .map(|n| NormalMap::new(crop3(resize_nearest_3(&n.data, rw, rh))))
        .transpose()?;

    let (sx, sy) = (rw as f64 / w0 as f64, rh as f64 / h0 as f64);
    let intrinsics = CameraIntrinsics::new(
        s.intrinsics.fx * sx,
        s.intrinsics.fy * sy,
        s.intrinsics.cx * sx - left as f64,
        s.intrinsics.cy * sy - top as f64,
    )?;

    let out = SampleRecord {
        id: s.id.clone(),
        rgb,
        raw_depth,
        gt_depth,
        seg,
        intrinsics,
        gt_normals,
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_scene_spec, synth_scene};

    #[test]
    fn identity_when_resize_equals_crop_equals_input() {
        let rec = synth_scene(&random_scene_spec(32, 24, 1), 1).unwrap();
        let out = preprocess(&rec, (32, 24), (32, 24), CropMode::Center, 0).unwrap();
        assert_eq!(out.raw_depth.data, rec.raw_depth.data);
        assert_eq!(out.seg.as_ref().unwrap().data, rec.seg.as_ref().unwrap().data);
        assert_eq!(out.intrinsics, rec.intrinsics);
        // Bilinear resize at identity scale samples pixel centers exactly.
        let diff = (&out.rgb.data - &rec.rgb.data)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn center_crop_shifts_principal_point() {
        let rec = synth_scene(&random_scene_spec(64, 48, 2), 2).unwrap();
        let out = preprocess(&rec, (32, 24), (30, 20), CropMode::Center, 0).unwrap();
        assert_eq!(out.rgb.height(), 20);
        assert_eq!(out.rgb.width(), 30);
        let sx = 0.5;
        let (left, top) = ((32 - 30) / 2, (24 - 20) / 2);
        assert!((out.intrinsics.fx - rec.intrinsics.fx * sx).abs() < 1e-12);
        assert!((out.intrinsics.cx - (rec.intrinsics.cx * sx - left as f64)).abs() < 1e-12);
        assert!((out.intrinsics.cy - (rec.intrinsics.cy * 0.5 - top as f64)).abs() < 1e-12);
    }

    #[test]
    fn random_crop_deterministic_per_seed() {
        let rec = synth_scene(&random_scene_spec(64, 48, 3), 3).unwrap();
        let a = preprocess(&rec, (48, 36), (40, 30), CropMode::Random, 77).unwrap();
        let b = preprocess(&rec, (48, 36), (40, 30), CropMode::Random, 77).unwrap();
        assert_eq!(a.raw_depth.data, b.raw_depth.data);
        assert_eq!(a.intrinsics, b.intrinsics);
    }

    #[test]
    fn crop_larger_than_resize_rejected() {
        let rec = synth_scene(&random_scene_spec(32, 24, 4), 4).unwrap();
        assert!(preprocess(&rec, (32, 24), (33, 24), CropMode::Center, 0).is_err());
    }

    #[test]
    fn channels_stay_coregistered() {
        let rec = synth_scene(&random_scene_spec(64, 48, 5), 5).unwrap();
        let out = preprocess(&rec, (64, 48), (50, 40), CropMode::Random, 9).unwrap();
        // Depth and seg must have been cropped with the same window:
        // nearest-resize at identity scale is the identity, so compare
        // against a window of the originals.
        let d = &out.raw_depth.data;
        let orig = &rec.raw_depth.data;
        let mut found = false;
        // Locate the window by matching the first row.
        for top in 0..=8usize {
            for left in 0..=14usize {
                if (0..50).all(|j| d[[0, j]] == orig[[top, left + j]]) {
                    found = true;
                    // Seg must match the same window.
                    let seg = &out.seg.as_ref().unwrap().data;
                    let oseg = &rec.seg.as_ref().unwrap().data;
                    for i in 0..40 {
                        for j in 0..50 {
                            assert_eq!(seg[[i, j]], oseg[[top + i, left + j]]);
                        }
                    }
                }
            }
        }
        assert!(found, "crop window not found");
    }
}
