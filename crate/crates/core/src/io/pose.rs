//! Keyframed per-bone overrides for animation.
//!
//! Each override rotates a bone's canonical region about the canonical bone
//! center and then translates it: `x ↦ R (x - C) + C + T`. Bones a keyframe
//! does not list stay at identity. Between keyframes rotations are slerped
//! and translations interpolated linearly; outside them the nearest
//! keyframe holds.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::read_file;
use crate::error::{Error, Result};
use crate::numeric::quat::{self, Quat};
use crate::rig::{BoneDelta, BonePose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoneOverride {
    pub bone: usize,
    /// `[w, x, y, z]`, normalized on load.
    #[serde(default = "identity")]
    pub rotation: Quat,
    #[serde(default)]
    pub translation: [f64; 3],
}

fn identity() -> Quat {
    quat::IDENTITY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keyframe {
    pub frame: usize,
    pub bones: Vec<BoneOverride>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub bone_count: usize,
    /// Number of output frames.
    pub frames: usize,
    pub keyframes: Vec<Keyframe>,
}

impl PoseFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let p: PoseFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("pose file: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("pose file: {m}")));
        if self.bone_count == 0 || self.frames == 0 || self.keyframes.is_empty() {
            return bad("needs bones, frames and at least one keyframe".into());
        }
        for (i, k) in self.keyframes.iter().enumerate() {
            if i > 0 && k.frame <= self.keyframes[i - 1].frame {
                return bad(format!("keyframe {} is not after frame {}", k.frame, self.keyframes[i - 1].frame));
            }
            let mut seen = vec![false; self.bone_count];
            for o in &k.bones {
                if o.bone >= self.bone_count {
                    return bad(format!("bone {} of {}", o.bone, self.bone_count));
                }
                if std::mem::replace(&mut seen[o.bone], true) {
                    return bad(format!("bone {} listed twice at frame {}", o.bone, k.frame));
                }
                let n = quat::norm(&o.rotation);
                if !(n > 1e-12 && n.is_finite()) || o.translation.iter().any(|v| !v.is_finite()) {
                    return bad(format!("bad transform for bone {} at frame {}", o.bone, k.frame));
                }
            }
        }
        Ok(())
    }

    fn keyed(&self, k: &Keyframe) -> Vec<(Quat, Vector3<f64>)> {
        let mut v = vec![(quat::IDENTITY, Vector3::zeros()); self.bone_count];
        for o in &k.bones {
            v[o.bone] = (quat::normalize(&o.rotation), Vector3::from(o.translation));
        }
        v
    }

    /// Interpolated `(rotation, translation)` per bone at output `frame`.
    pub fn overrides_at(&self, frame: usize) -> Vec<(Quat, Vector3<f64>)> {
        let ks = &self.keyframes;
        let first = &ks[0];
        let last = &ks[ks.len() - 1];
        if frame <= first.frame {
            return self.keyed(first);
        }
        if frame >= last.frame {
            return self.keyed(last);
        }
        let i = ks.iter().position(|k| k.frame > frame).unwrap();
        let (a, b) = (&ks[i - 1], &ks[i]);
        let u = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
        self.keyed(a)
            .into_iter()
            .zip(self.keyed(b))
            .map(|((qa, ta), (qb, tb))| (quat::slerp(&qa, &qb, u), ta + (tb - ta) * u))
            .collect()
    }

    /// Bone transforms at output `frame` about the canonical bone centers.
    pub fn deltas_at(&self, frame: usize, canonical: &BonePose) -> Result<Vec<BoneDelta>> {
        if canonical.len() != self.bone_count {
            return Err(Error::Dimension(format!(
                "pose file has {} bones, model has {}",
                self.bone_count,
                canonical.len()
            )));
        }
        Ok(self
            .overrides_at(frame)
            .into_iter()
            .zip(&canonical.centers)
            .map(|((q, t), c)| {
                let r = quat::to_matrix(&q);
                BoneDelta {
                    rotation: r,
                    translation: c - r * c + t,
                }
            })
            .collect())
    }
}

pub fn read_pose_file(path: &Path) -> Result<PoseFile> {
    let bytes = read_file(path)?;
    PoseFile::from_json(&String::from_utf8_lossy(&bytes))
}
