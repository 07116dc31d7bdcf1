//! Synthetic Manhattan rooms with analytic ground truth.
//!
//! A scene is an axis-aligned room (optionally containing axis-aligned
//! boxes) viewed by a gravity-aligned pinhole camera (yaw + translation
//! only). Every pixel's depth, world-frame normal, and plane class come
//! from exact ray/box intersection, so they serve as oracles for the
//! losses and metrics.
//!
//! World frame: +z is up; the floor is z = 0, the ceiling z = room
//! height. Normals are reported in this gravity-aligned frame, so floor
//! pixels carry (0, 0, 1) and ceiling pixels (0, 0, -1).

use ndarray::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdfc_core::error::{CoreError, Result};
use rdfc_core::{
    CameraIntrinsics, DepthMap, NormalMap, PlaneClass, RgbImage, SampleRecord, SegMask,
};
use std::collections::BTreeMap;

pub const LABEL_FLOOR: u8 = 0;
pub const LABEL_CEILING: u8 = 1;
pub const LABEL_WALL: u8 = 2;
/// Non-reflective object boxes get labels starting here.
pub const LABEL_BOX_BASE: u8 = 3;
/// Reflective object boxes (candidates for semantic masking) get
/// labels starting here.
pub const LABEL_REFLECTIVE_BASE: u8 = 200;

#[derive(Clone, Debug)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Tags the box as a semantic-masking candidate (glass/mirror-like).
    pub reflective: bool,
}

#[derive(Clone, Debug)]
pub struct SynthSceneSpec {
    /// Room extents in meters; the room spans [0, dims] on each axis.
    pub room_dims: [f64; 3],
    /// Camera position inside the room.
    pub camera_pos: [f64; 3],
    /// Camera yaw in radians (0 looks along +x).
    pub camera_yaw: f64,
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub texture_seed: u64,
    pub boxes: Vec<BoxSpec>,
}

impl SynthSceneSpec {
    /// Camera rotation: columns are the camera x (right), y (down),
    /// z (forward) axes expressed in world coordinates.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let (s, c) = self.camera_yaw.sin_cos();
        // x_cam = (s, -c, 0), y_cam = (0, 0, -1), z_cam = (c, s, 0)
        [[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]]
    }

    pub fn cam_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.camera_pos[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.camera_pos[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.camera_pos[2],
        ]
    }

    pub fn rotate_dir(&self, d: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
        ]
    }

    /// World-frame direction to camera frame (R is orthonormal).
    pub fn world_dir_to_cam(&self, d: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.room_dims.iter().any(|&d| d <= 0.0) {
            return Err(CoreError::InvalidParameter("room dims must be positive".into()));
        }
        for a in 0..3 {
            if self.camera_pos[a] <= 0.0 || self.camera_pos[a] >= self.room_dims[a] {
                return Err(CoreError::InvalidParameter(format!(
                    "camera outside room on axis {a}: {} not in (0, {})",
                    self.camera_pos[a], self.room_dims[a]
                )));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if (0..3).any(|a| b.min[a] >= b.max[a]) {
                return Err(CoreError::InvalidParameter(format!("degenerate box {i}")));
            }
        }
        Ok(())
    }

    /// Distance from a world point to the nearest scene surface (room
    /// faces or object-box surfaces). Used as the back-projection oracle.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..3 {
            best = best.min((p[a]).abs());
            best = best.min((self.room_dims[a] - p[a]).abs());
        }
        for b in &self.boxes {
            best = best.min(box_surface_distance(p, b));
        }
        best
    }
}

fn box_surface_distance(p: [f64; 3], b: &BoxSpec) -> f64 {
    let mut outside = 0.0f64;
    let mut inside_min = f64::INFINITY;
    for a in 0..3 {
        let lo = b.min[a] - p[a];
        let hi = p[a] - b.max[a];
        let d = lo.max(hi);
        if d > 0.0 {
            outside += d * d;
        } else {
            inside_min = inside_min.min(-d);
        }
    }
    if outside > 0.0 {
        outside.sqrt()
    } else {
        inside_min
    }
}

struct Hit {
    t: f64,
    normal: [f64; 3],
    label: u8,
    face_color_id: usize,
}

fn room_exit(pos: [f64; 3], dir: [f64; 3], dims: [f64; 3]) -> Hit {
    let mut best_t = f64::INFINITY;
    let mut axis = 0usize;
    let mut high = false;
    for a in 0..3 {
        if dir[a] > 1e-12 {
            let t = (dims[a] - pos[a]) / dir[a];
            if t < best_t {
                best_t = t;
                axis = a;
                high = true;
            }
        } else if dir[a] < -1e-12 {
            let t = -pos[a] / dir[a];
            if t < best_t {
                best_t = t;
                axis = a;
                high = false;
            }
        }
    }
    let mut normal = [0.0; 3];
    normal[axis] = if high { -1.0 } else { 1.0 };
    let (label, color) = match (axis, high) {
        (2, false) => (LABEL_FLOOR, 0),
        (2, true) => (LABEL_CEILING, 1),
        (0, false) => (LABEL_WALL, 2),
        (0, true) => (LABEL_WALL, 3),
        (1, false) => (LABEL_WALL, 4),
        _ => (LABEL_WALL, 5),
    };
    Hit {
        t: best_t,
        normal,
        label,
        face_color_id: color,
    }
}

fn box_entry(pos: [f64; 3], dir: [f64; 3], b: &BoxSpec) -> Option<(f64, usize, bool)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut axis = 0;
    let mut from_low = false;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if pos[a] < b.min[a] || pos[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let t1 = (b.min[a] - pos[a]) / dir[a];
        let t2 = (b.max[a] - pos[a]) / dir[a];
        let (tn, tf, low) = if t1 < t2 {
            (t1, t2, dir[a] > 0.0)
        } else {
            (t2, t1, dir[a] > 0.0)
        };
        if tn > t_enter {
            t_enter = tn;
            axis = a;
            from_low = low;
        }
        t_exit = t_exit.min(tf);
    }
    if t_enter <= t_exit && t_enter > 1e-9 {
        Some((t_enter, axis, from_low))
    } else {
        None
    }
}

/// Generate a sample with analytic ground truth. `raw_depth` starts as
/// a copy of `gt_depth`; corrupting it is the pseudo-depth module's job.
pub fn synth_scene(spec: &SynthSceneSpec, seed: u64) -> Result<SampleRecord> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut depth = Array2::<f64>::zeros((h, w));
    let mut normals = Array3::<f64>::zeros((h, w, 3));
    let mut labels = Array2::<u8>::zeros((h, w));
    let mut rgb = Array3::<f64>::zeros((h, w, 3));

    let palette = color_palette(spec.texture_seed, 6 + spec.boxes.len());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rdfc_core::seed::derive(
        spec.texture_seed,
        &[seed, 0xC01],
    ));

    for v in 0..h {
        for u in 0..w {
            let dir_cam = spec.intrinsics.unproject(u as f64, v as f64);
            let dir_w = spec.rotate_dir(dir_cam);
            let mut hit = room_exit(spec.camera_pos, dir_w, spec.room_dims);
            for (bi, b) in spec.boxes.iter().enumerate() {
                if let Some((t, axis, from_low)) = box_entry(spec.camera_pos, dir_w, b) {
                    if t < hit.t {
                        let mut normal = [0.0; 3];
                        normal[axis] = if from_low { -1.0 } else { 1.0 };
                        let label = if b.reflective {
                            LABEL_REFLECTIVE_BASE + count_reflective(&spec.boxes[..bi]) as u8
                        } else {
                            LABEL_BOX_BASE + (bi - count_reflective(&spec.boxes[..bi])) as u8
                        };
                        hit = Hit {
                            t,
                            normal,
                            label,
                            face_color_id: 6 + bi,
                        };
                    }
                }
            }
            // dir_cam has z = 1, so the ray parameter equals z-depth.
            depth[[v, u]] = hit.t;
            for c in 0..3 {
                normals[[v, u, c]] = hit.normal[c];
            }
            labels[[v, u]] = hit.label;
            let base = palette[hit.face_color_id];
            for c in 0..3 {
                let n: f64 = noise_rng.gen_range(-0.02..0.02);
                rgb[[v, u, c]] = (base[c] + n).clamp(0.0, 1.0);
            }
        }
    }

    let mut classes = BTreeMap::new();
    classes.insert(LABEL_FLOOR, PlaneClass::Floor);
    classes.insert(LABEL_CEILING, PlaneClass::Ceiling);
    classes.insert(LABEL_WALL, PlaneClass::Wall);
    for &l in labels.iter() {
        if l >= LABEL_BOX_BASE {
            classes.insert(l, PlaneClass::Other);
        }
    }

    let gt = DepthMap::new(depth)?;
    let rec = SampleRecord {
        id: format!("synth-{seed:08x}"),
        rgb: RgbImage::new(rgb)?,
        raw_depth: gt.clone(),
        gt_depth: Some(gt),
        seg: Some(SegMask::new(labels, classes)?),
        intrinsics: spec.intrinsics,
        gt_normals: Some(NormalMap::new(normals)?),
    };
    rec.validate()?;
    Ok(rec)
}

fn count_reflective(boxes: &[BoxSpec]) -> usize {
    boxes.iter().filter(|b| b.reflective).count()
}

fn color_palette(seed: u64, n: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(rdfc_core::seed::derive(seed, &[0xA11E7]));
    (0..n)
        .map(|_| {
            [
                rng.gen_range(0.15..0.9),
                rng.gen_range(0.15..0.9),
                rng.gen_range(0.15..0.9),
            ]
        })
        .collect()
}

/// A randomized desk-scale scene: room, camera, and up to three boxes.
pub fn random_scene_spec(width: usize, height: usize, seed: u64) -> SynthSceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rdfc_core::seed::derive(seed, &[0x5CE_u64]));
    let dims = [
        rng.gen_range(3.5..6.0),
        rng.gen_range(3.5..6.0),
        rng.gen_range(2.4..3.2),
    ];
    let margin = 0.5;
    let pos = [
        rng.gen_range(margin..dims[0] - margin),
        rng.gen_range(margin..dims[1] - margin),
        rng.gen_range(1.0..1.8),
    ];
    let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
    let n_boxes = rng.gen_range(0..=3);
    let boxes = (0..n_boxes)
        .map(|_| {
            let cx = rng.gen_range(0.4..dims[0] - 0.4);
            let cy = rng.gen_range(0.4..dims[1] - 0.4);
            let sx = rng.gen_range(0.2..0.8);
            let sy = rng.gen_range(0.2..0.8);
            let sz = rng.gen_range(0.3..1.5);
            BoxSpec {
                min: [(cx - sx / 2.0).max(0.0), (cy - sy / 2.0).max(0.0), 0.0],
                max: [
                    (cx + sx / 2.0).min(dims[0]),
                    (cy + sy / 2.0).min(dims[1]),
                    sz.min(dims[2]),
                ],
                reflective: rng.gen_bool(0.5),
            }
        })
        .collect();
    let fx = 0.75 * width as f64;
    SynthSceneSpec {
        room_dims: dims,
        camera_pos: pos,
        camera_yaw: yaw,
        width,
        height,
        intrinsics: CameraIntrinsics::new(
            fx,
            fx,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
        )
        .unwrap(),
        texture_seed: rdfc_core::seed::derive(seed, &[0x7E_u64]),
        boxes,
    }
}
