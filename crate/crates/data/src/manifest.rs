//! Dataset directory layout:
//!
//! ```text
//! <root>/<split>/{rgb,raw_depth,gt_depth,seg}/<id>.png
//! <root>/intrinsics.txt       9 whitespace-separated reals, row-major K
//! <root>/plane_classes.txt    lines "label class_name"
//! ```
//!
//! `gt_depth` and `seg` directories are optional.

use rdfc_core::error::{CoreError, Result};
use rdfc_core::io;
use rdfc_core::{CameraIntrinsics, PlaneClass, SampleRecord};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(CoreError::InvalidParameter(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub raw_depth: PathBuf,
    pub gt_depth: Option<PathBuf>,
    pub seg: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub intrinsics: CameraIntrinsics,
    pub plane_classes: BTreeMap<u8, PlaneClass>,
}

/// Scan the layout, returning samples in deterministic (id-sorted)
/// order. Every file referenced by the manifest exists at return time.
pub fn load_dataset(root: &Path, split: Split) -> Result<DatasetManifest> {
    let split_dir = root.join(split.dir_name());
    let rgb_dir = split_dir.join("rgb");
    if !rgb_dir.is_dir() {
        return Err(CoreError::Io {
            path: rgb_dir,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing rgb directory"),
        });
    }
    let intrinsics = io::read_intrinsics(&root.join("intrinsics.txt"))?;
    let plane_classes = io::read_plane_classes(&root.join("plane_classes.txt"))?;

    let mut ids: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(&rgb_dir).map_err(|e| CoreError::Io {
        path: rgb_dir.clone(),
        source: e,
    })? {
        let entry = entry.map_err(|e| CoreError::Io {
            path: rgb_dir.clone(),
            source: e,
        })?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();

    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let rgb = rgb_dir.join(format!("{id}.png"));
        let raw = split_dir.join("raw_depth").join(format!("{id}.png"));
        if !raw.is_file() {
            return Err(CoreError::MalformedFile {
                path: raw,
                reason: format!("missing raw depth for sample {id}"),
            });
        }
        let gt = split_dir.join("gt_depth").join(format!("{id}.png"));
        let seg = split_dir.join("seg").join(format!("{id}.png"));
        entries.push(ManifestEntry {
            id,
            rgb,
            raw_depth: raw,
            gt_depth: gt.is_file().then_some(gt),
            seg: seg.is_file().then_some(seg),
        });
    }

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        entries,
        intrinsics,
        plane_classes,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load one sample from disk; shapes are validated and mismatches
    /// reported against the offending path.
    pub fn load_sample(&self, index: usize) -> Result<SampleRecord> {
        let e = &self.entries[index];
        let rgb = io::read_rgb_png(&e.rgb)?;
        let raw_depth = io::read_depth_png(&e.raw_depth)?;
        if (raw_depth.height(), raw_depth.width()) != (rgb.height(), rgb.width()) {
            return Err(CoreError::MalformedFile {
                path: e.raw_depth.clone(),
                reason: format!(
                    "depth size {}x{} does not match rgb {}x{}",
                    raw_depth.width(),
                    raw_depth.height(),
                    rgb.width(),
                    rgb.height()
                ),
            });
        }
        let gt_depth = match &e.gt_depth {
            Some(p) => {
                let d = io::read_depth_png(p)?;
                if (d.height(), d.width()) != (rgb.height(), rgb.width()) {
                    return Err(CoreError::MalformedFile {
                        path: p.clone(),
                        reason: "gt depth size mismatch".into(),
                    });
                }
                Some(d)
            }
            None => None,
        };
        let seg = match &e.seg {
            Some(p) => {
                let m = io::read_seg_png(p, &self.plane_classes)?;
                if m.data.dim() != (rgb.height(), rgb.width()) {
                    return Err(CoreError::MalformedFile {
                        path: p.clone(),
                        reason: "seg size mismatch".into(),
                    });
                }
                Some(m)
            }
            None => None,
        };
        let rec = SampleRecord {
            id: e.id.clone(),
            rgb,
            raw_depth,
            gt_depth,
            seg,
            intrinsics: self.intrinsics,
            gt_normals: None,
        };
        rec.validate()?;
        Ok(rec)
    }
}

/// Write a sample into the on-disk layout (used by the synth-data and
/// pseudo-gen tools).
pub fn write_sample(root: &Path, split: Split, rec: &SampleRecord) -> Result<()> {
    let split_dir = root.join(split.dir_name());
    for sub in ["rgb", "raw_depth", "gt_depth", "seg"] {
        std::fs::create_dir_all(split_dir.join(sub)).map_err(|e| CoreError::Io {
            path: split_dir.join(sub),
            source: e,
        })?;
    }
    let id = &rec.id;
    io::write_rgb_png(&split_dir.join("rgb").join(format!("{id}.png")), &rec.rgb)?;
    io::write_depth_png(
        &split_dir.join("raw_depth").join(format!("{id}.png")),
        &rec.raw_depth,
    )?;
    if let Some(gt) = &rec.gt_depth {
        io::write_depth_png(&split_dir.join("gt_depth").join(format!("{id}.png")), gt)?;
    }
    if let Some(seg) = &rec.seg {
        io::write_seg_png(&split_dir.join("seg").join(format!("{id}.png")), seg)?;
        io::write_plane_classes(&root.join("plane_classes.txt"), &seg.plane_classes)?;
    }
    io::write_intrinsics(&root.join("intrinsics.txt"), &rec.intrinsics)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_scene_spec, synth_scene};

    #[test]
    fn empty_dataset_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("train/rgb")).unwrap();
        rdfc_core::io::write_intrinsics(
            &root.join("intrinsics.txt"),
            &rdfc_core::CameraIntrinsics::new(10.0, 10.0, 5.0, 5.0).unwrap(),
        )
        .unwrap();
        std::fs::write(root.join("plane_classes.txt"), "0 floor\n").unwrap();
        let m = load_dataset(root, Split::Train).unwrap();
        assert_eq!(m.len(), 0);
    }

    #[test]
    fn three_samples_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for seed in 0..3u64 {
            let mut rec = synth_scene(&random_scene_spec(24, 16, seed), seed).unwrap();
            rec.id = format!("s{seed}");
            write_sample(root, Split::Train, &rec).unwrap();
        }
        let m = load_dataset(root, Split::Train).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries[0].id, "s0");
        let rec = m.load_sample(1).unwrap();
        assert_eq!(rec.id, "s1");
        assert_eq!(rec.rgb.width(), 24);
        assert!(rec.gt_depth.is_some());
        assert!(rec.seg.is_some());
    }

    #[test]
    fn size_mismatch_is_malformed_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mut rec = synth_scene(&random_scene_spec(24, 16, 1), 1).unwrap();
        rec.id = "bad".into();
        write_sample(root, Split::Train, &rec).unwrap();
        // Overwrite the depth with a wrong-size image.
        let small = rdfc_core::DepthMap::new(ndarray::Array2::from_elem((8, 8), 1.0)).unwrap();
        rdfc_core::io::write_depth_png(&root.join("train/raw_depth/bad.png"), &small).unwrap();
        let m = load_dataset(root, Split::Train).unwrap();
        let err = m.load_sample(0).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("bad.png"), "error should name the path: {msg}");
    }

    #[test]
    fn missing_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), Split::Test).is_err());
    }
}
