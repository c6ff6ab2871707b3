use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{CurriculumConfig, SdsCameraConfig, TrainConfig};
use crate::render::{Camera, Intrinsics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Joint,
    Done,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Done => "done",
        }
    }
}

/// Linear τ from the stage's first to last endpoint; `iteration` is counted
/// within the stage and clamped to its length.
pub fn tau_schedule(config: &TrainConfig, stage: Stage, iteration: usize) -> f64 {
    let (ends, len) = match stage {
        Stage::Warmup => (config.warmup_tau, config.warmup_iterations),
        Stage::Joint | Stage::Done => (config.joint_tau, config.joint_iterations),
    };
    let f = if len > 1 {
        iteration.min(len - 1) as f64 / (len - 1) as f64
    } else {
        0.0
    };
    (1.0 - f) * ends.0 + f * ends.1
}

/// Active frame indices (sorted) at a joint-stage iteration.
pub fn curriculum_frames(
    c: &CurriculumConfig,
    frame_count: usize,
    reference: usize,
    iteration: usize,
) -> Vec<usize> {
    let steps = iteration / c.interval.max(1);
    let wanted = (2 * c.initial_radius + 1).saturating_add(steps.saturating_mul(c.frames_per_interval));
    let mut order: Vec<usize> = (0..frame_count).collect();
    // nearest first, earlier frame on ties
    order.sort_by_key(|&i| (i.abs_diff(reference), i));
    let mut active: Vec<usize> = order.into_iter().take(wanted.min(frame_count)).collect();
    active.sort_unstable();
    active
}

/// Look-at camera on a sphere around `center` with the dataset intrinsics.
pub fn sample_sds_camera<R: Rng + ?Sized>(
    rng: &mut R,
    config: &SdsCameraConfig,
    center: Vector3<f64>,
    extent: f64,
    intrinsics: Intrinsics,
) -> Camera {
    let uniform = |rng: &mut R, (a, b): (f64, f64)| if b > a { rng.gen_range(a..b) } else { a };
    let az = uniform(rng, config.azimuth_deg);
    let el = uniform(rng, config.elevation_deg);
    let r = uniform(rng, config.radius) * extent;
    Camera::orbit(center, r, az, el, intrinsics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tau_endpoints_and_midpoint() {
        let mut c = TrainConfig::default();
        assert_eq!(tau_schedule(&c, Stage::Warmup, 0), 0.98);
        assert_eq!(tau_schedule(&c, Stage::Warmup, c.warmup_iterations - 1), 0.02);
        assert_eq!(tau_schedule(&c, Stage::Joint, 0), 0.5);
        assert_eq!(tau_schedule(&c, Stage::Joint, c.joint_iterations - 1), 0.02);
        c.warmup_iterations = 3;
        assert_eq!(tau_schedule(&c, Stage::Warmup, 1), 0.5);
    }

    #[test]
    fn curriculum_windows() {
        let c = CurriculumConfig::default();
        assert_eq!(curriculum_frames(&c, 100, 10, 0), vec![7, 8, 9, 10, 11, 12, 13]);
        assert_eq!(curriculum_frames(&c, 100, 0, 0), vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(curriculum_frames(&c, 100, 10, 49).len(), 7);
        assert_eq!(curriculum_frames(&c, 100, 10, 50), vec![6, 7, 8, 9, 10, 11, 12, 13, 14]);
        assert_eq!(curriculum_frames(&c, 20, 10, 10_000), (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn curriculum_monotone_and_saturates() {
        let c = CurriculumConfig::default();
        let mut prev: Vec<usize> = Vec::new();
        for it in 0..2000 {
            let a = curriculum_frames(&c, 37, 30, it);
            assert!(prev.iter().all(|p| a.contains(p)));
            prev = a;
        }
        assert_eq!(prev.len(), 37);
    }

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 50.0,
            fy: 50.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        }
    }

    #[test]
    fn sds_camera_deterministic_and_degenerate_bands() {
        let cfg = SdsCameraConfig::default();
        let a = sample_sds_camera(&mut ChaCha8Rng::seed_from_u64(3), &cfg, Vector3::zeros(), 1.0, intr());
        let b = sample_sds_camera(&mut ChaCha8Rng::seed_from_u64(3), &cfg, Vector3::zeros(), 1.0, intr());
        assert_eq!(a, b);
        let fixed = SdsCameraConfig {
            radius: (2.0, 2.0),
            elevation_deg: (20.0, 20.0),
            azimuth_deg: (45.0, 45.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c0 = sample_sds_camera(&mut rng, &fixed, Vector3::new(1.0, 0.0, 0.0), 1.5, intr());
        for _ in 0..10 {
            assert_eq!(sample_sds_camera(&mut rng, &fixed, Vector3::new(1.0, 0.0, 0.0), 1.5, intr()), c0);
        }
        assert!(((c0.center() - Vector3::new(1.0, 0.0, 0.0)).norm() - 3.0).abs() < 1e-12);
        // the centroid projects to the principal point
        let p = c0.world_to_camera(&Vector3::new(1.0, 0.0, 0.0));
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
    }

    #[test]
    fn sds_azimuth_histogram_uniform() {
        let cfg = SdsCameraConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bins = 12;
        let n = 10_000;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let cam = sample_sds_camera(&mut rng, &cfg, Vector3::zeros(), 1.0, intr());
            let c = cam.center();
            let az = c.x.atan2(c.z).to_degrees().rem_euclid(360.0);
            counts[((az / 360.0 * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let p = 1.0 / bins as f64;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "bin count {c}, mean {mean}, sd {sd}");
        }
    }
}
