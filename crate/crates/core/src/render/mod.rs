//! Splat rasterization.
//!
//! [`render_forward`] is the tiled renderer used for training and output,
//! [`render_backward`] its adjoint, and [`render_reference`] a brute-force
//! per-pixel renderer that shares the same alpha model and serves as the
//! correctness oracle for tiling and sorting.

mod camera;
mod image;
mod project;
mod reference;
mod tiled;

pub use camera::{Camera, Intrinsics};
pub use image::Image;
pub use project::{project, project_backward, projection_jacobian, ProjectedSplat, ScreenGrad};
pub use reference::render_reference;
pub use tiled::{render_backward, render_forward};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::gaussian::{covariance_backward, GaussianCloud};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Contributions with alpha below this are skipped.
    pub alpha_min: f64,
    /// Blending stops once transmittance falls below this.
    pub transmittance_min: f64,
    pub near: f64,
    /// Isotropic variance (pixels²) added to every 2D covariance.
    pub low_pass: f64,
    /// Support half-width in standard deviations.
    pub cutoff_sigma: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            near: 0.01,
            low_pass: 0.3,
            cutoff_sigma: 3.0,
        }
    }
}

impl RenderSettings {
    /// Skip and termination thresholds disabled (oracle comparisons).
    pub fn exact() -> Self {
        Self {
            alpha_min: 0.0,
            transmittance_min: 0.0,
            ..Self::default()
        }
    }
}

/// A splat ready to render: world mean and covariance plus activated
/// opacity and color. Warped Gaussians are rendered in this form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldSplat {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

pub fn cloud_splats(cloud: &GaussianCloud) -> Vec<WorldSplat> {
    (0..cloud.len())
        .map(|i| {
            let g = cloud.get(i);
            WorldSplat {
                mean: g.position,
                cov: g.covariance(),
                opacity: g.opacity(),
                color: g.color,
            }
        })
        .collect()
}

/// Per-splat state retained from a forward pass.
#[derive(Clone, Debug)]
pub(crate) struct ForwardContext {
    pub camera: Camera,
    pub settings: RenderSettings,
    pub background: [f64; 3],
    pub projected: Vec<ProjectedSplat>,
    /// Per tile, indices into `projected` in blending order.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub splat_count: usize,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// `H × W × 3`, composited over the background.
    pub color: Image,
    /// `H × W` accumulated opacity.
    pub alpha: Image,
    pub(crate) context: Option<ForwardContext>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Number of splats that survived culling.
    pub fn visible_count(&self) -> usize {
        self.context.as_ref().map_or(0, |c| c.projected.len())
    }

    /// Which input splats were projected (not culled).
    pub fn visibility(&self) -> Vec<bool> {
        let mut vis = vec![false; self.context.as_ref().map_or(0, |c| c.splat_count)];
        if let Some(ctx) = &self.context {
            for p in &ctx.projected {
                vis[p.index] = true;
            }
        }
        vis
    }
}

/// Gradients with respect to world-space splats.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub mean: Vec<Vector3<f64>>,
    /// `dL/dΣ` as full matrices.
    pub cov: Vec<Matrix3<f64>>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// Norm of the screen-space mean gradient in NDC units.
    pub view_grad_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl SplatGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vector3::zeros(); n],
            cov: vec![Matrix3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            view_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Adds another set of gradients (same splats, e.g. a second view).
    pub fn add(&mut self, o: &SplatGrads) {
        for i in 0..self.len() {
            self.mean[i] += o.mean[i];
            self.cov[i] += o.cov[i];
            self.opacity[i] += o.opacity[i];
            for k in 0..3 {
                self.color[i][k] += o.color[i][k];
            }
            self.view_grad_norm[i] += o.view_grad_norm[i];
            self.visible[i] |= o.visible[i];
        }
    }

    pub fn scale(&mut self, s: f64) {
        for i in 0..self.len() {
            self.mean[i] *= s;
            self.cov[i] *= s;
            self.opacity[i] *= s;
            for k in 0..3 {
                self.color[i][k] *= s;
            }
        }
    }
}

/// Gradients with respect to the cloud's unconstrained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub position: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub view_grad_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl RenderGrads {
    pub fn is_finite(&self) -> bool {
        self.position.iter().flatten().all(|v| v.is_finite())
            && self.rotation.iter().flatten().all(|v| v.is_finite())
            && self.log_scale.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logit.iter().all(|v| v.is_finite())
            && self.color.iter().flatten().all(|v| v.is_finite())
    }

    /// Adds these gradients into the cloud's gradient buffers.
    pub fn accumulate_into(&self, cloud: &mut GaussianCloud) {
        let flat3 = |v: &[[f64; 3]]| v.iter().flatten().copied().collect::<Vec<_>>();
        let flat4 = |v: &[[f64; 4]]| v.iter().flatten().copied().collect::<Vec<_>>();
        cloud.positions.accumulate_grad(&flat3(&self.position)).expect("shape");
        cloud.rotations.accumulate_grad(&flat4(&self.rotation)).expect("shape");
        cloud.log_scales.accumulate_grad(&flat3(&self.log_scale)).expect("shape");
        cloud.opacity_logits.accumulate_grad(&self.opacity_logit).expect("shape");
        cloud.colors.accumulate_grad(&flat3(&self.color)).expect("shape");
    }
}

/// Maps world-splat gradients of an unwarped cloud render to cloud parameters.
pub fn cloud_grads(cloud: &GaussianCloud, g: &SplatGrads) -> RenderGrads {
    let per: Vec<([f64; 4], [f64; 3], f64)> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let gs = cloud.get(i);
            let (dq, ds) = covariance_backward(&gs.rotation, &gs.log_scale, &g.cov[i]);
            let o = gs.opacity();
            (dq, [ds.x, ds.y, ds.z], g.opacity[i] * o * (1.0 - o))
        })
        .collect();
    RenderGrads {
        position: g.mean.iter().map(|m| [m.x, m.y, m.z]).collect(),
        rotation: per.iter().map(|p| p.0).collect(),
        log_scale: per.iter().map(|p| p.1).collect(),
        opacity_logit: per.iter().map(|p| p.2).collect(),
        color: g.color.clone(),
        view_grad_norm: g.view_grad_norm.clone(),
        visible: g.visible.clone(),
    }
}

/// Renders the cloud as-is and returns cloud-parameter gradients for the given
/// upstream image gradients.
pub fn render_cloud_backward(
    cloud: &GaussianCloud,
    out: &RenderOutput,
    d_color: &Image,
    d_alpha: &Image,
) -> crate::Result<RenderGrads> {
    let splats = cloud_splats(cloud);
    let g = render_backward(out, &splats, d_color, d_alpha)?;
    Ok(cloud_grads(cloud, &g))
}
