use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::DensifyThresholds;
use crate::losses::LossWeights;
use crate::render::RenderSettings;
use crate::rig::BoneRigConfig;

/// Joint-stage frame schedule: the reference frame and `initial_radius`
/// neighbours on each side, then `frames_per_interval` more every
/// `interval` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub initial_radius: usize,
    pub frames_per_interval: usize,
    pub interval: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            initial_radius: 3,
            frames_per_interval: 2,
            interval: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub rig: f64,
    pub root: f64,
    /// Position and rig rates decay exponentially over the joint stage to
    /// this fraction of their initial value.
    pub joint_decay: f64,
    /// Rig rate ramps linearly from zero over this many joint iterations.
    pub rig_ramp: usize,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            rotation: 2.5e-3,
            log_scale: 2.5e-3,
            opacity: 5e-2,
            color: 1e-2,
            rig: 5e-4,
            root: 1e-4,
            joint_decay: 0.1,
            rig_ramp: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub interval: usize,
    /// First warm-up iteration at which densification may run.
    pub start: usize,
    /// No densification in the last `stop_before_end` warm-up iterations.
    pub stop_before_end: usize,
    pub max_splats: usize,
    pub grad_threshold: f64,
    pub percent_dense: f64,
    pub min_opacity: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        let t = DensifyThresholds::default();
        Self {
            enabled: true,
            interval: 100,
            start: 100,
            stop_before_end: 200,
            max_splats: 20_000,
            grad_threshold: t.grad_threshold,
            percent_dense: t.percent_dense,
            min_opacity: t.min_opacity,
        }
    }
}

/// Ranges for random score-distillation viewpoints around the object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdsCameraConfig {
    /// Distance from the centroid in multiples of the scene extent.
    pub radius: (f64, f64),
    pub elevation_deg: (f64, f64),
    /// Half-open `[start, end)`.
    pub azimuth_deg: (f64, f64),
}

impl Default for SdsCameraConfig {
    fn default() -> Self {
        Self {
            radius: (3.0, 3.5),
            elevation_deg: (-10.0, 45.0),
            azimuth_deg: (0.0, 360.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub splats: usize,
    /// Back-projected depths stay within this many extents of the origin's depth.
    pub depth_half_range: f64,
    /// Scene extent when the dataset gives none.
    pub fallback_extent: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            splats: 2000,
            depth_half_range: 0.25,
            fallback_extent: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_iterations: usize,
    pub joint_iterations: usize,
    pub weights: LossWeights,
    pub warmup_tau: (f64, f64),
    pub joint_tau: (f64, f64),
    pub curriculum: CurriculumConfig,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub sds_camera: SdsCameraConfig,
    pub init: InitConfig,
    pub rig: BoneRigConfig,
    pub render: RenderSettings,
    /// Defaults to the middle frame.
    pub reference_frame: Option<usize>,
    /// Evaluate every this many iterations (0: only at stage ends).
    pub eval_interval: usize,
    /// Checkpoint every this many iterations (0: only at the end).
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_iterations: 2000,
            joint_iterations: 8000,
            weights: LossWeights::default(),
            warmup_tau: (0.98, 0.02),
            joint_tau: (0.5, 0.02),
            curriculum: CurriculumConfig::default(),
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            sds_camera: SdsCameraConfig::default(),
            init: InitConfig::default(),
            rig: BoneRigConfig::default(),
            render: RenderSettings::default(),
            reference_frame: None,
            eval_interval: 0,
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joint_iterations == 0 {
            return Err(config_err("joint iteration count must be positive"));
        }
        for (name, (a, b)) in [("warmup_tau", self.warmup_tau), ("joint_tau", self.joint_tau)] {
            if !(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0) {
                return Err(config_err(format!("{name} endpoints must lie in (0, 1)")));
            }
            if b > a {
                return Err(config_err(format!("{name} must not increase")));
            }
        }
        let c = &self.curriculum;
        if c.interval == 0 {
            return Err(config_err("curriculum interval must be positive"));
        }
        self.weights.validate().map_err(|e| config_err(e.to_string()))?;
        self.rig.validate().map_err(|e| config_err(e.to_string()))?;
        let lr = &self.lr;
        if !(lr.joint_decay > 0.0 && lr.joint_decay <= 1.0) {
            return Err(config_err("joint_decay must lie in (0, 1]"));
        }
        for v in [lr.position, lr.rotation, lr.log_scale, lr.opacity, lr.color, lr.rig, lr.root] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err("learning rates must be finite and non-negative"));
            }
        }
        let s = &self.sds_camera;
        if !(s.radius.0 > 0.0 && s.radius.1 >= s.radius.0) {
            return Err(config_err("sds radius band must be positive and ordered"));
        }
        if !(s.elevation_deg.1 >= s.elevation_deg.0 && s.elevation_deg.0 > -90.0 && s.elevation_deg.1 < 90.0) {
            return Err(config_err("sds elevation band must be ordered and inside (-90, 90)"));
        }
        if s.azimuth_deg.1 < s.azimuth_deg.0 {
            return Err(config_err("sds azimuth band must be ordered"));
        }
        if self.init.splats == 0 || !(self.init.depth_half_range >= 0.0) || !(self.init.fallback_extent > 0.0) {
            return Err(config_err("init needs splats, a non-negative depth range and a positive extent"));
        }
        if self.densify.enabled && self.densify.interval == 0 {
            return Err(config_err("densify interval must be positive"));
        }
        Ok(())
    }
}
