//! Canonical cloud plus baked skinning weights for a client-side viewer.
//!
//! ```text
//! "BAGS"  u32 version  "VIEW"  u32 splats N  u32 bones B
//! f32 positions[N*3] rotations[N*4] scales[N*3] opacities[N] colors[N*3]
//!     bone_centers[B*3] bone_rotations[B*4] bone_radii[B*3] weights[N*B]
//! ```
//!
//! All little-endian. A JSON sidecar (`<bundle>.json`) carries metadata.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_file, write_atomic, MAGIC};
use crate::error::{Error, Result};
use crate::numeric::quat;
use crate::rig::skinning_weights;
use crate::trainer::Model;

pub const BUNDLE_VERSION: u32 = 1;
const KIND: [u8; 4] = *b"VIEW";
const HEADER: usize = 20;

/// Flat float32 arrays, row-major, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewerBundle {
    pub splats: usize,
    pub bones: usize,
    pub positions: Vec<f32>,
    /// Unit `[w, x, y, z]`.
    pub rotations: Vec<f32>,
    /// Standard deviations along the local axes.
    pub scales: Vec<f32>,
    pub opacities: Vec<f32>,
    pub colors: Vec<f32>,
    pub bone_centers: Vec<f32>,
    /// Unit `[w, x, y, z]` of `M_b`.
    pub bone_rotations: Vec<f32>,
    /// `D_b^{-1/2}`: one standard deviation of the bone ellipsoid per axis.
    pub bone_radii: Vec<f32>,
    /// Per-splat canonical skinning weights, `N × B`.
    pub weights: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMetadata {
    pub format: String,
    pub version: u32,
    pub bundle: String,
    pub splat_count: usize,
    pub bone_count: usize,
    pub extent: f64,
    pub background: [f64; 3],
    /// Normalized times of the training frames.
    pub frame_times: Vec<f64>,
}

fn f32s(v: impl IntoIterator<Item = f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

impl ViewerBundle {
    pub fn from_model(model: &Model) -> Result<Self> {
        let canonical = model.rig.canonical_pose()?;
        let gs = model.cloud.gaussians();
        let weights: Vec<Vec<f64>> = gs.par_iter().map(|g| skinning_weights(&g.position, &canonical)).collect();
        Ok(Self {
            splats: gs.len(),
            bones: canonical.len(),
            positions: f32s(gs.iter().flat_map(|g| g.position.iter().copied().collect::<Vec<_>>())),
            rotations: f32s(gs.iter().flat_map(|g| quat::normalize(&g.rotation))),
            scales: f32s(gs.iter().flat_map(|g| g.scale().iter().copied().collect::<Vec<_>>())),
            opacities: f32s(gs.iter().map(|g| g.opacity())),
            colors: f32s(gs.iter().flat_map(|g| g.color)),
            bone_centers: f32s(canonical.centers.iter().flat_map(|c| [c.x, c.y, c.z])),
            bone_rotations: f32s(canonical.quats.iter().flat_map(quat::normalize)),
            bone_radii: f32s(canonical.precisions.iter().flat_map(|d| [d.x, d.y, d.z]).map(|d| d.powf(-0.5))),
            weights: f32s(weights.into_iter().flatten()),
        })
    }

    fn arrays(&self) -> [(&'static str, &Vec<f32>, usize); 9] {
        let (n, b) = (self.splats, self.bones);
        [
            ("positions", &self.positions, n * 3),
            ("rotations", &self.rotations, n * 4),
            ("scales", &self.scales, n * 3),
            ("opacities", &self.opacities, n),
            ("colors", &self.colors, n * 3),
            ("bone_centers", &self.bone_centers, b * 3),
            ("bone_rotations", &self.bone_rotations, b * 4),
            ("bone_radii", &self.bone_radii, b * 3),
            ("weights", &self.weights, n * b),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let to_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} {v} does not fit the bundle header")))
        };
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&KIND);
        out.extend_from_slice(&to_u32(self.splats, "splat count")?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.bones, "bone count")?.to_le_bytes());
        for (name, v, len) in self.arrays() {
            if v.len() != len {
                return Err(Error::Dimension(format!("{name}: {} floats, expected {len}", v.len())));
            }
            out.extend(v.iter().flat_map(|x| x.to_le_bytes()));
        }
        Ok(out)
    }

    /// Reference parser.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || bytes[..4] != MAGIC {
            return Err(Error::Format("not a BAGS file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != BUNDLE_VERSION {
            return Err(Error::Version {
                found: version,
                supported: BUNDLE_VERSION,
            });
        }
        if bytes.len() < HEADER {
            return Err(Error::Format("truncated bundle header".into()));
        }
        if bytes[8..12] != KIND {
            return Err(Error::Format("BAGS file is not a viewer bundle".into()));
        }
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let b = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let floats = (n as u128) * (14 + b as u128) + 10 * b as u128;
        if (bytes.len() - HEADER) as u128 != floats * 4 {
            return Err(Error::Format(format!(
                "bundle with {n} splats and {b} bones needs {} bytes, file has {}",
                HEADER as u128 + floats * 4,
                bytes.len()
            )));
        }
        let mut at = HEADER;
        let mut take = |len: usize| {
            let v: Vec<f32> = bytes[at..at + 4 * len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at += 4 * len;
            v
        };
        Ok(Self {
            splats: n,
            bones: b,
            positions: take(n * 3),
            rotations: take(n * 4),
            scales: take(n * 3),
            opacities: take(n),
            colors: take(n * 3),
            bone_centers: take(b * 3),
            bone_rotations: take(b * 4),
            bone_radii: take(b * 3),
            weights: take(n * b),
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_bundle(bundle: &ViewerBundle, metadata: &BundleMetadata, path: &Path) -> Result<()> {
    write_atomic(path, &bundle.to_bytes()?)?;
    let json = serde_json::to_vec_pretty(metadata).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&sidecar_path(path), &json)
}

pub fn read_bundle(path: &Path) -> Result<ViewerBundle> {
    ViewerBundle::from_bytes(&read_file(path)?)
}

/// Writes the bundle and its sidecar; returns the metadata.
pub fn export_viewer_bundle(model: &Model, path: &Path) -> Result<BundleMetadata> {
    let bundle = ViewerBundle::from_model(model)?;
    let metadata = BundleMetadata {
        format: "bags-viewer-bundle".into(),
        version: BUNDLE_VERSION,
        bundle: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        splat_count: bundle.splats,
        bone_count: bundle.bones,
        extent: model.extent,
        background: model.background,
        frame_times: model.frame_times.clone(),
    };
    write_bundle(&bundle, &metadata, path)?;
    Ok(metadata)
}
