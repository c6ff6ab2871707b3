use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::io::nearest_index;
use crate::numeric::{quat, DenseArray};
use crate::render::{cloud_splats, render_forward, Camera, RenderOutput, RenderSettings, SplatGrads, WorldSplat};
use crate::rig::{warp_cloud, warp_cloud_with_deltas, BoneDelta, BoneRig};

/// A trained (or training) model: canonical cloud, bone rig and one rigid
/// root transform per training frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub rig: BoneRig,
    /// `F × 7` rows `[qw, qx, qy, qz, tx, ty, tz]`, applied after the warp.
    pub roots: DenseArray,
    /// Normalized time of each training frame.
    pub frame_times: Vec<f64>,
    pub extent: f64,
    pub background: [f64; 3],
    pub settings: RenderSettings,
}

pub fn identity_roots(frames: usize) -> DenseArray {
    let mut roots = DenseArray::zeros(&[frames, 7]);
    for f in 0..frames {
        roots.row_mut(f)[0] = 1.0;
    }
    roots
}

impl Model {
    pub fn root(&self, frame: usize) -> (Matrix3<f64>, Vector3<f64>) {
        let r = self.roots.row(frame);
        (quat::to_matrix(&[r[0], r[1], r[2], r[3]]), Vector3::new(r[4], r[5], r[6]))
    }

    /// Training frame whose root transform is used at time `t`.
    pub fn frame_for_time(&self, t: f64) -> usize {
        nearest_index(self.frame_times.iter().copied(), t)
    }

    /// Splats at normalized time `t`: canonical cloud warped by the rig and
    /// moved by the root transform of `frame`.
    pub fn splats(&self, t: f64, frame: usize) -> Result<Vec<WorldSplat>> {
        let canonical = self.rig.canonical_pose()?;
        let (target, _) = self.rig.pose_at_taped(t)?;
        let warp = warp_cloud(&self.cloud, &canonical, &target)?;
        let (r, tr) = self.root(frame);
        Ok(apply_root(&warp.splats, &r, &tr))
    }

    /// Warp Jacobians at time `t`.
    pub fn jacobians(&self, t: f64) -> Result<Vec<Matrix3<f64>>> {
        let canonical = self.rig.canonical_pose()?;
        let (target, _) = self.rig.pose_at_taped(t)?;
        Ok(warp_cloud(&self.cloud, &canonical, &target)?.jacobians)
    }

    /// Renders at time `t` (clamped to `[0, 1]` with a warning).
    pub fn render(&self, cam: &Camera, t: f64) -> Result<RenderOutput> {
        let tc = t.clamp(0.0, 1.0);
        if tc != t {
            log::warn!("time {t} outside the trained range; clamped to {tc}");
        }
        let splats = self.splats(tc, self.frame_for_time(tc))?;
        Ok(render_forward(&splats, cam, self.background, &self.settings))
    }

    /// The canonical cloud without warp, moved by the root transform of `frame`.
    pub fn canonical_splats(&self, frame: usize) -> Vec<WorldSplat> {
        let (r, t) = self.root(frame);
        apply_root(&cloud_splats(&self.cloud), &r, &t)
    }

    /// Canonical cloud warped by explicit bone transforms, with the root of `frame`.
    pub fn posed_splats(&self, deltas: &[BoneDelta], frame: usize) -> Result<Vec<WorldSplat>> {
        let canonical = self.rig.canonical_pose()?;
        if deltas.len() != canonical.len() {
            return Err(Error::Dimension(format!(
                "{} bone transforms for a {}-bone model",
                deltas.len(),
                canonical.len()
            )));
        }
        let (splats, _) = warp_cloud_with_deltas(&self.cloud, &canonical, deltas)?;
        let (r, t) = self.root(frame);
        Ok(apply_root(&splats, &r, &t))
    }

    pub fn check_finite(&self) -> Result<()> {
        self.cloud.check_finite()?;
        self.rig.check_finite()?;
        self.roots.check_finite("root transforms")
    }
}

pub fn apply_root(splats: &[WorldSplat], r: &Matrix3<f64>, t: &Vector3<f64>) -> Vec<WorldSplat> {
    splats
        .iter()
        .map(|s| {
            let cov = r * s.cov * r.transpose();
            WorldSplat {
                mean: r * s.mean + t,
                cov: (cov + cov.transpose()) * 0.5,
                ..*s
            }
        })
        .collect()
}

/// Adjoint of [`apply_root`]: returns gradients on the input splats and on
/// the root row `[q, t]`.
pub fn apply_root_backward(
    splats: &[WorldSplat],
    root_row: &[f64],
    d_out: &SplatGrads,
) -> (SplatGrads, [f64; 7]) {
    let q = [root_row[0], root_row[1], root_row[2], root_row[3]];
    let r = quat::to_matrix(&q);
    let rt = r.transpose();
    let mut d_in = d_out.clone();
    let mut d_r = Matrix3::zeros();
    let mut d_t = Vector3::zeros();
    for (i, s) in splats.iter().enumerate() {
        let dm = d_out.mean[i];
        let dc = d_out.cov[i];
        let dc_sym = (dc + dc.transpose()) * 0.5;
        d_in.mean[i] = rt * dm;
        d_in.cov[i] = rt * dc_sym * r;
        d_r += dm * s.mean.transpose() + 2.0 * dc_sym * r * s.cov;
        d_t += dm;
    }
    let dq = quat::to_matrix_backward(&q, &d_r);
    (d_in, [dq[0], dq[1], dq[2], dq[3], d_t.x, d_t.y, d_t.z])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render_backward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_splats(rng: &mut ChaCha8Rng, n: usize) -> Vec<WorldSplat> {
        (0..n)
            .map(|_| {
                let a = Matrix3::from_fn(|_, _| rng.gen_range(-0.2..0.2));
                WorldSplat {
                    mean: Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5)),
                    cov: a * a.transpose() + Matrix3::identity() * 0.01,
                    opacity: rng.gen_range(0.3..0.9),
                    color: [rng.gen(), rng.gen(), rng.gen()],
                }
            })
            .collect()
    }

    #[test]
    fn identity_root_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = random_splats(&mut rng, 5);
        let roots = identity_roots(1);
        let row = roots.row(0);
        let r = quat::to_matrix(&[row[0], row[1], row[2], row[3]]);
        assert_eq!(apply_root(&s, &r, &Vector3::zeros()), s);
    }

    #[test]
    fn root_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let splats = random_splats(&mut rng, 6);
        let cam = Camera::look_at(
            Vector3::new(0.2, 0.3, 3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            50.0,
            24,
            24,
        );
        let settings = RenderSettings::exact();
        let q = quat::normalize(&[1.0, 0.1, -0.2, 0.05]);
        let row = [q[0], q[1], q[2], q[3], 0.1, -0.05, 0.2];
        let weights: Vec<f64> = (0..24 * 24 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |row: &[f64]| {
            let r = quat::to_matrix(&[row[0], row[1], row[2], row[3]]);
            let out = render_forward(
                &apply_root(&splats, &r, &Vector3::new(row[4], row[5], row[6])),
                &cam,
                [0.0; 3],
                &settings,
            );
            out.color.data.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let r = quat::to_matrix(&q);
        let moved = apply_root(&splats, &r, &Vector3::new(row[4], row[5], row[6]));
        let out = render_forward(&moved, &cam, [0.0; 3], &settings);
        let d_color = crate::render::Image::from_data(24, 24, 3, weights.clone()).unwrap();
        let g = render_backward(&out, &moved, &d_color, &crate::render::Image::new(24, 24, 1)).unwrap();
        let (_, d_row) = apply_root_backward(&splats, &row, &g);
        let h = 1e-6;
        for k in 0..7 {
            let mut p = row;
            let mut m = row;
            p[k] += h;
            m[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let err = (fd - d_row[k]).abs() / fd.abs().max(d_row[k].abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: fd {fd} analytic {}", d_row[k]);
        }
    }
}
