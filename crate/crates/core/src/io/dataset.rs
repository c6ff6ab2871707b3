use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{Camera, Image, Intrinsics};

/// World-to-camera pose as stored in a manifest. `rotation` is row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extrinsics {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Extrinsics {
    pub fn from_camera(cam: &Camera) -> Self {
        let r = cam.rotation;
        Self {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [cam.translation.x, cam.translation.y, cam.translation.z],
        }
    }

    pub fn camera(&self, intrinsics: Intrinsics) -> Result<Camera> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        Camera::new(intrinsics, r, Vector3::from(self.translation))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    /// Paths are relative to the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Extrinsics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub intrinsics: Intrinsics,
    /// Used by frames without their own camera.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Extrinsics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_extent: Option<f64>,
    #[serde(default)]
    pub background: [f64; 3],
    pub frames: Vec<FrameRecord>,
    /// Evaluation-only views; never trained on.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub heldout: Vec<FrameRecord>,
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub name: String,
    pub image: Image,
    /// One channel, exactly 0 or 1.
    pub mask: Image,
    pub time: f64,
    /// `time` mapped to `[0, 1]` over the training frames.
    pub t_norm: f64,
    pub camera: Camera,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub heldout: Vec<Frame>,
    pub intrinsics: Intrinsics,
    pub scene_extent: Option<f64>,
    pub background: [f64; 3],
    pub time_range: (f64, f64),
}

impl Dataset {
    pub fn normalize_time(&self, time: f64) -> f64 {
        let (a, b) = self.time_range;
        if b > a {
            ((time - a) / (b - a)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    /// Index of the training frame nearest in normalized time (earlier wins ties).
    pub fn nearest_frame(&self, t_norm: f64) -> usize {
        nearest_index(self.frames.iter().map(|f| f.t_norm), t_norm)
    }
}

pub(crate) fn nearest_index(times: impl Iterator<Item = f64>, t: f64) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, ft) in times.enumerate() {
        let d = (ft - t).abs();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn read_image(path: &Path, channels: usize) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Image::decode(&bytes, channels).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn load_frame(
    rec: &FrameRecord,
    base: &Path,
    m: &DatasetManifest,
    default_camera: &Extrinsics,
) -> Result<Frame> {
    let name = rec.image.display().to_string();
    let image = read_image(&base.join(&rec.image), 3)?;
    let mut mask = read_image(&base.join(&rec.mask), 1)?;
    let (w, h) = (m.intrinsics.width, m.intrinsics.height);
    if image.width != w || image.height != h {
        return Err(Error::FrameDimension {
            frame: name,
            message: format!("image is {}x{}, intrinsics say {w}x{h}", image.width, image.height),
        });
    }
    if mask.width != w || mask.height != h {
        return Err(Error::FrameDimension {
            frame: name,
            message: format!("mask is {}x{}, image is {w}x{h}", mask.width, mask.height),
        });
    }
    for v in &mut mask.data {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    if !rec.time.is_finite() {
        return Err(Error::NonMonotoneTime { frame: name, time: rec.time });
    }
    let camera = rec.camera.as_ref().unwrap_or(default_camera).camera(m.intrinsics)?;
    Ok(Frame {
        name,
        image,
        mask,
        time: rec.time,
        t_norm: 0.0,
        camera,
    })
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads the manifest and decodes every frame. Without any camera the
/// object is assumed centered at the origin, viewed down +z from
/// `3 × scene_extent` (extent defaults to 1).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let m = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if m.frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let default_camera = m.camera.unwrap_or(Extrinsics {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0, 0.0, 3.0 * m.scene_extent.unwrap_or(1.0)],
    });
    for pair in m.frames.windows(2) {
        if !(pair[1].time > pair[0].time) {
            return Err(Error::NonMonotoneTime {
                frame: pair[1].image.display().to_string(),
                time: pair[1].time,
            });
        }
    }
    let load_all = |recs: &[FrameRecord]| -> Result<Vec<Frame>> {
        let loaded: Vec<Result<Frame>> = recs
            .par_iter()
            .map(|r| load_frame(r, base, &m, &default_camera))
            .collect();
        loaded.into_iter().collect()
    };
    let mut frames = load_all(&m.frames)?;
    let mut heldout = load_all(&m.heldout)?;
    let time_range = (frames[0].time, frames[frames.len() - 1].time);
    let mut ds = Dataset {
        frames: Vec::new(),
        heldout: Vec::new(),
        intrinsics: m.intrinsics,
        scene_extent: m.scene_extent,
        background: m.background,
        time_range,
    };
    for f in frames.iter_mut().chain(heldout.iter_mut()) {
        f.t_norm = ds.normalize_time(f.time);
    }
    ds.frames = frames;
    ds.heldout = heldout;
    Ok(ds)
}
