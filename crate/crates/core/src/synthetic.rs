//! Procedural two-bone arm: an upper arm fixed in place and a forearm with a
//! hand that bends about the elbow over time, seen by a slowly orbiting
//! camera. Used as a ground-truth scene for end-to-end training checks.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{logit, Gaussian, GaussianCloud};
use crate::io::{write_manifest, DatasetManifest, Extrinsics, FrameRecord};
use crate::losses::{GroundTruthFn, OracleProvider};
use crate::numeric::quat;
use crate::render::{cloud_splats, render_forward, Camera, Image, Intrinsics, RenderOutput, RenderSettings, WorldSplat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmConfig {
    pub splats: usize,
    pub frames: usize,
    pub size: usize,
    /// Elbow angle at the first and last frame, degrees.
    pub bend_deg: (f64, f64),
    /// Azimuth of the frame cameras at the first and last frame, degrees.
    pub orbit_deg: (f64, f64),
    pub elevation_deg: f64,
    pub distance: f64,
    pub fov_deg: f64,
    /// Azimuths of the held-out views, degrees.
    pub heldout_azimuth_deg: Vec<f64>,
    pub heldout_elevation_deg: f64,
    /// Normalized times of the held-out views.
    pub heldout_times: Vec<f64>,
    pub seed: u64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            splats: 2000,
            frames: 20,
            size: 128,
            bend_deg: (0.0, 80.0),
            orbit_deg: (-30.0, 30.0),
            elevation_deg: 10.0,
            distance: 2.2,
            fov_deg: 45.0,
            heldout_azimuth_deg: vec![100.0, 200.0, 280.0],
            heldout_elevation_deg: 25.0,
            heldout_times: vec![0.0, 0.5, 1.0],
            seed: 7,
        }
    }
}

const SHOULDER: f64 = -0.55;
const UPPER_RADIUS: f64 = 0.14;
const FOREARM_LENGTH: f64 = 0.5;
const FOREARM_RADIUS: f64 = 0.11;
const HAND_RADIUS: f64 = 0.14;

#[derive(Clone, Debug)]
pub struct ArmScene {
    pub config: ArmConfig,
    /// Straight-arm Gaussians.
    pub gaussians: Vec<Gaussian>,
    /// Whether each Gaussian moves with the forearm.
    pub on_forearm: Vec<bool>,
    pub settings: RenderSettings,
    pub background: [f64; 3],
}

fn shade(base: [f64; 3], normal: &Vector3<f64>) -> [f64; 3] {
    let light = Vector3::new(0.3, 0.8, 0.5).normalize();
    let k = 0.55 + 0.45 * normal.dot(&light).max(0.0);
    base.map(|c| (c * k).clamp(0.0, 1.0))
}

impl ArmScene {
    pub fn new(config: ArmConfig) -> Result<Self> {
        if config.splats == 0 || config.frames < 2 || config.size == 0 {
            return Err(Error::InvalidInput("arm scene needs splats, two frames and a size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // surface areas decide how many splats each part gets
        let upper_len = -SHOULDER;
        let areas = [
            2.0 * std::f64::consts::PI * UPPER_RADIUS * upper_len + 2.0 * std::f64::consts::PI * UPPER_RADIUS.powi(2),
            2.0 * std::f64::consts::PI * FOREARM_RADIUS * FOREARM_LENGTH,
            4.0 * std::f64::consts::PI * HAND_RADIUS.powi(2),
        ];
        let total: f64 = areas.iter().sum();
        let mut gaussians = Vec::with_capacity(config.splats);
        let mut on_forearm = Vec::with_capacity(config.splats);
        for _ in 0..config.splats {
            let pick = rng.gen::<f64>() * total;
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let (p, n, base, fore) = if pick < areas[0] {
                // capsule: cylinder plus a hemispherical shoulder cap
                let u = rng.gen_range(SHOULDER - UPPER_RADIUS..0.0);
                if u < SHOULDER {
                    let d = random_unit(&mut rng);
                    let d = Vector3::new(-d.x.abs(), d.y, d.z);
                    (Vector3::new(SHOULDER, 0.0, 0.0) + d * UPPER_RADIUS, d, [0.85, 0.45, 0.25], false)
                } else {
                    let n = Vector3::new(0.0, phi.cos(), phi.sin());
                    (Vector3::new(u, 0.0, 0.0) + n * UPPER_RADIUS, n, [0.85, 0.45, 0.25], false)
                }
            } else if pick < areas[0] + areas[1] {
                let u = rng.gen_range(0.0..FOREARM_LENGTH);
                let n = Vector3::new(0.0, phi.cos(), phi.sin());
                (Vector3::new(u, 0.0, 0.0) + n * FOREARM_RADIUS, n, [0.25, 0.5, 0.85], true)
            } else {
                let d = random_unit(&mut rng);
                (
                    Vector3::new(FOREARM_LENGTH + HAND_RADIUS * 0.8, 0.0, 0.0) + d * HAND_RADIUS,
                    d,
                    [0.9, 0.8, 0.3],
                    true,
                )
            };
            // variation along the arm so parts are not flat-colored
            let band = 0.06 * (p.x * 9.0).sin();
            let base = [base[0] + band, base[1] + band, base[2] - band];
            gaussians.push(Gaussian {
                position: p,
                rotation: quat::normalize(&[
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]),
                log_scale: Vector3::from_fn(|_, _| rng.gen_range(0.028f64..0.04).ln()),
                opacity_logit: logit(rng.gen_range(0.85..0.95)),
                color: shade(base, &n),
            });
            on_forearm.push(fore);
        }
        Ok(Self {
            config,
            gaussians,
            on_forearm,
            settings: RenderSettings::default(),
            background: [0.0; 3],
        })
    }

    /// Elbow angle in radians at normalized time `t`.
    pub fn angle(&self, t: f64) -> f64 {
        let (a, b) = self.config.bend_deg;
        (a + (b - a) * t.clamp(0.0, 1.0)).to_radians()
    }

    /// Forearm rotation about the elbow (the origin) at time `t`.
    pub fn forearm_rotation(&self, t: f64) -> Matrix3<f64> {
        quat::to_matrix(&quat::from_axis_angle([0.0, 0.0, 1.0], self.angle(t)))
    }

    pub fn cloud_at(&self, t: f64) -> GaussianCloud {
        let r = self.forearm_rotation(t);
        let qr = quat::from_matrix(&r);
        let gs: Vec<Gaussian> = self
            .gaussians
            .iter()
            .zip(&self.on_forearm)
            .map(|(g, &fore)| {
                if fore {
                    Gaussian {
                        position: r * g.position,
                        rotation: quat::normalize(&quat::mul(&qr, &g.rotation)),
                        ..*g
                    }
                } else {
                    *g
                }
            })
            .collect();
        GaussianCloud::from_gaussians(&gs)
    }

    pub fn splats_at(&self, t: f64) -> Vec<WorldSplat> {
        cloud_splats(&self.cloud_at(t))
    }

    pub fn render(&self, cam: &Camera, t: f64) -> RenderOutput {
        render_forward(&self.splats_at(t), cam, self.background, &self.settings)
    }

    fn orbit_camera(&self, azimuth_deg: f64, elevation_deg: f64) -> Camera {
        let size = self.config.size;
        let intr = Intrinsics::from_fov(self.config.fov_deg, size, size);
        Camera::orbit(Vector3::zeros(), self.config.distance, azimuth_deg, elevation_deg, intr)
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        i as f64 / (self.config.frames - 1) as f64
    }

    pub fn frame_camera(&self, i: usize) -> Camera {
        let (a, b) = self.config.orbit_deg;
        self.orbit_camera(a + (b - a) * self.frame_time(i), self.config.elevation_deg)
    }

    /// Held-out `(camera, normalized time)` pairs.
    pub fn heldout_views(&self) -> Vec<(Camera, f64)> {
        let mut out = Vec::new();
        for &t in &self.config.heldout_times {
            for &a in &self.config.heldout_azimuth_deg {
                out.push((self.orbit_camera(a, self.config.heldout_elevation_deg), t));
            }
        }
        out
    }

    /// Bounding-sphere radius of the straight arm.
    pub fn extent(&self) -> f64 {
        GaussianCloud::from_gaussians(&self.gaussians).extent()
    }

    pub fn ground_truth_fn(&self) -> GroundTruthFn {
        let scene = Arc::new(self.clone());
        Box::new(move |cam: &Camera, t: f64| Ok(scene.render(cam, t).color))
    }

    pub fn oracle(&self) -> OracleProvider {
        OracleProvider::new(self.ground_truth_fn())
    }

    /// Writes frames, masks, held-out views and `manifest.json` into `dir`
    /// and returns the manifest path. Masks are the rendered alpha at 0.5.
    pub fn write_dataset(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, img: &Image| -> Result<PathBuf> {
            let p = dir.join(name);
            std::fs::write(&p, img.to_png()?).map_err(|e| Error::io(&p, e))?;
            Ok(PathBuf::from(name))
        };
        let time_scale = (self.config.frames - 1) as f64;
        let record = |prefix: &str, i: usize, cam: &Camera, t: f64| -> Result<FrameRecord> {
            let out = self.render(cam, t);
            let mask = Image::from_data(
                out.alpha.width,
                out.alpha.height,
                1,
                out.alpha.data.iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect(),
            )?;
            Ok(FrameRecord {
                image: write(&format!("{prefix}_{i:03}.png"), &out.color)?,
                mask: write(&format!("{prefix}_{i:03}_mask.png"), &mask)?,
                time: t * time_scale,
                camera: Some(Extrinsics::from_camera(cam)),
            })
        };
        let frames = (0..self.config.frames)
            .map(|i| record("frame", i, &self.frame_camera(i), self.frame_time(i)))
            .collect::<Result<Vec<_>>>()?;
        let heldout = self
            .heldout_views()
            .iter()
            .enumerate()
            .map(|(i, (cam, t))| record("heldout", i, cam, *t))
            .collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest {
            intrinsics: self.frame_camera(0).intrinsics(),
            camera: None,
            scene_extent: Some(self.extent()),
            background: self.background,
            frames,
            heldout,
        };
        let path = dir.join("manifest.json");
        write_manifest(&path, &manifest)?;
        let scene_path = dir.join(SCENE_FILE);
        let json = serde_json::to_vec_pretty(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&scene_path, json).map_err(|e| Error::io(&scene_path, e))?;
        Ok(path)
    }

    /// The scene generated next to `manifest`, if it was generated here.
    pub fn for_manifest(manifest: &Path) -> Result<Option<Self>> {
        let path = manifest.parent().unwrap_or(Path::new(".")).join(SCENE_FILE);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let config: ArmConfig =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(Some(Self::new(config)?))
    }
}

/// Scene description written beside a generated manifest.
pub const SCENE_FILE: &str = "synthetic.json";

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}
