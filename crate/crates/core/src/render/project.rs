use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{Camera, RenderSettings, WorldSplat};

/// A splat in screen space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedSplat {
    /// Pixel coordinates of the projected mean.
    pub mean2d: Vector2<f64>,
    /// 2D covariance including the low-pass floor.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    /// Half-width of the square support around `mean2d`.
    pub radius: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub index: usize,
    /// Camera-space mean and projection Jacobian, kept for the backward pass.
    pub cam_point: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
}

impl ProjectedSplat {
    /// Square support test shared by every renderer.
    #[inline]
    pub fn covers(&self, px: f64, py: f64) -> bool {
        (px - self.mean2d.x).abs() <= self.radius && (py - self.mean2d.y).abs() <= self.radius
    }

    /// `o · exp(−½ dᵀ conic d)` at pixel center `(px, py)`; also returns the Gaussian factor.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64) -> (f64, f64) {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let q = &self.conic;
        let power = -0.5 * (q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy);
        let g = power.exp();
        (self.opacity * g, g)
    }
}

pub fn projection_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz * iz,
    )
}

/// Projects one world-space splat; `None` when culled (behind the near plane,
/// degenerate, or entirely off screen).
pub fn project(
    splat: &WorldSplat,
    index: usize,
    cam: &Camera,
    settings: &RenderSettings,
) -> Option<ProjectedSplat> {
    let p = cam.world_to_camera(&splat.mean);
    if !(p.z > settings.near) {
        return None;
    }
    let mean2d = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
    let j = projection_jacobian(cam, &p);
    let w = cam.rotation;
    let sigma_cam: Matrix3<f64> = w * splat.cov * w.transpose();
    let mut cov2d = j * sigma_cam * j.transpose();
    cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(1, 0)] = cov2d[(0, 1)];
    cov2d[(0, 0)] += settings.low_pass;
    cov2d[(1, 1)] += settings.low_pass;
    let det = cov2d.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = settings.cutoff_sigma * lambda_max.sqrt();
    if mean2d.x + radius < 0.0
        || mean2d.y + radius < 0.0
        || mean2d.x - radius > cam.width as f64
        || mean2d.y - radius > cam.height as f64
        || !radius.is_finite()
    {
        return None;
    }
    Some(ProjectedSplat {
        mean2d,
        cov2d,
        conic,
        depth: p.z,
        radius,
        opacity: splat.opacity,
        color: splat.color,
        index,
        cam_point: p,
        jacobian: j,
    })
}

/// Gradients flowing out of the screen-space quantities of one splat.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScreenGrad {
    pub mean2d: Vector2<f64>,
    /// `dL/dconic` as a full (symmetric) matrix.
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl ScreenGrad {
    pub fn add(&mut self, o: &ScreenGrad) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.opacity += o.opacity;
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
    }
}

/// Chains screen-space gradients back to the world mean and covariance.
pub fn project_backward(
    ps: &ProjectedSplat,
    cov_world: &Matrix3<f64>,
    cam: &Camera,
    g: &ScreenGrad,
) -> (Vector3<f64>, Matrix3<f64>) {
    let q = ps.conic;
    let d_cov2d = -(q * g.conic * q);
    let j = ps.jacobian;
    let w = cam.rotation;
    let sigma_cam = w * cov_world * w.transpose();
    let d_sigma_cam = j.transpose() * d_cov2d * j;
    let d_cov_world = w.transpose() * d_sigma_cam * w;
    let d_j: Matrix2x3<f64> =
        d_cov2d * j * sigma_cam.transpose() + d_cov2d.transpose() * j * sigma_cam;

    let p = ps.cam_point;
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (cam.fx, cam.fy);
    let mut d_p = Vector3::new(
        g.mean2d.x * fx * iz,
        g.mean2d.y * fy * iz,
        -g.mean2d.x * fx * p.x * iz2 - g.mean2d.y * fy * p.y * iz2,
    );
    d_p.x += d_j[(0, 2)] * (-fx * iz2);
    d_p.y += d_j[(1, 2)] * (-fy * iz2);
    d_p.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * p.x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * p.y * iz3);
    (w.transpose() * d_p, d_cov_world)
}
