use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::{BonePose, PoseGrad};
use crate::error::{Error, Result};
use crate::gaussian::{covariance_backward, Gaussian, GaussianCloud};
use crate::render::{RenderGrads, SplatGrads, WorldSplat};

/// Rigid motion `x ↦ R x + t` from a canonical bone frame to a target one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoneDelta {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl BoneDelta {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }
}

pub fn bone_delta_transforms(canonical: &BonePose, target: &BonePose) -> Result<Vec<BoneDelta>> {
    if canonical.len() != target.len() {
        return Err(Error::Dimension(format!(
            "canonical has {} bones, target {}",
            canonical.len(),
            target.len()
        )));
    }
    Ok((0..canonical.len())
        .map(|b| {
            let r = target.rotations[b] * canonical.rotations[b].transpose();
            BoneDelta {
                rotation: r,
                translation: target.centers[b] - r * canonical.centers[b],
            }
        })
        .collect())
}

/// `ω = softmax(-W)` with `W_b = (x-C_b)ᵀ M_bᵀ D_b M_b (x-C_b)`.
pub fn skinning_weights(x: &Vector3<f64>, pose: &BonePose) -> Vec<f64> {
    let p: Vec<Matrix3<f64>> = (0..pose.len()).map(|b| pose.precision_matrix(b)).collect();
    let w: Vec<f64> = (0..pose.len())
        .map(|b| {
            let d = x - pose.centers[b];
            d.dot(&(p[b] * d))
        })
        .collect();
    softmax_neg(&w)
}

fn softmax_neg(w: &[f64]) -> Vec<f64> {
    let m = w.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = w.iter().map(|v| (m - v).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub weights: Vec<f64>,
    /// Linear part of the blended transform `Σ ω_b ΔB_b`.
    pub blend_linear: Matrix3<f64>,
    pub blend_translation: Vector3<f64>,
    /// Spatial Jacobian of `x ↦ Σ ω_b(x) ΔB_b x` at the mean.
    pub jacobian: Matrix3<f64>,
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

struct Bone {
    center: Vector3<f64>,
    precision: Matrix3<f64>,
    delta: BoneDelta,
}

fn bones(canonical: &BonePose, deltas: &[BoneDelta]) -> Result<Vec<Bone>> {
    if canonical.len() != deltas.len() {
        return Err(Error::Dimension("bone count mismatch".into()));
    }
    Ok((0..deltas.len())
        .map(|b| Bone {
            center: canonical.centers[b],
            precision: canonical.precision_matrix(b),
            delta: deltas[b],
        })
        .collect())
}

/// Forward intermediates for one point.
struct Local {
    weights: Vec<f64>,
    offsets: Vec<Vector3<f64>>,
    /// `∂(-W_b)/∂x = -2 P_b (x - C_b)`
    grads: Vec<Vector3<f64>>,
    mean_grad: Vector3<f64>,
    moved: Vec<Vector3<f64>>,
    y: Vector3<f64>,
    jacobian: Matrix3<f64>,
    blend_linear: Matrix3<f64>,
    blend_translation: Vector3<f64>,
}

fn local(x: &Vector3<f64>, bones: &[Bone]) -> Local {
    let offsets: Vec<Vector3<f64>> = bones.iter().map(|b| x - b.center).collect();
    let pd: Vec<Vector3<f64>> = bones.iter().zip(&offsets).map(|(b, d)| b.precision * d).collect();
    let w: Vec<f64> = offsets.iter().zip(&pd).map(|(d, p)| d.dot(p)).collect();
    let weights = softmax_neg(&w);
    let grads: Vec<Vector3<f64>> = pd.iter().map(|p| -2.0 * p).collect();
    let mean_grad: Vector3<f64> = weights.iter().zip(&grads).map(|(w, g)| *w * g).sum();
    let moved: Vec<Vector3<f64>> = bones.iter().map(|b| b.delta.apply(x)).collect();
    // Written as displacements from x (Σω = 1, Σh = 0) so identity bones
    // give exactly the identity warp.
    let mut y = *x;
    let mut blend_linear = Matrix3::zeros();
    let mut blend_translation = Vector3::zeros();
    let mut jacobian = Matrix3::identity();
    for (k, b) in bones.iter().enumerate() {
        let wk = weights[k];
        let disp = moved[k] - x;
        y += wk * disp;
        blend_linear += wk * b.delta.rotation;
        blend_translation += wk * b.delta.translation;
        let h = wk * (grads[k] - mean_grad);
        jacobian += wk * (b.delta.rotation - Matrix3::identity()) + disp * h.transpose();
    }
    if bones.len() == 1 {
        y = moved[0];
        jacobian = bones[0].delta.rotation;
    }
    Local {
        weights,
        offsets,
        grads,
        mean_grad,
        moved,
        y,
        jacobian,
        blend_linear,
        blend_translation,
    }
}

/// Warps one canonical Gaussian. Weights are evaluated against the canonical
/// pose at the Gaussian mean.
pub fn warp_gaussian(g: &Gaussian, canonical: &BonePose, deltas: &[BoneDelta]) -> Result<WarpResult> {
    let bones = bones(canonical, deltas)?;
    let l = local(&g.position, &bones);
    if !l.jacobian.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("warp Jacobian"));
    }
    let cov = l.jacobian * g.covariance() * l.jacobian.transpose();
    Ok(WarpResult {
        weights: l.weights,
        blend_linear: l.blend_linear,
        blend_translation: l.blend_translation,
        jacobian: l.jacobian,
        mean: l.y,
        covariance: (cov + cov.transpose()) * 0.5,
    })
}

/// A warped cloud plus what its backward pass needs.
#[derive(Clone, Debug)]
pub struct CloudWarp {
    pub splats: Vec<WorldSplat>,
    pub jacobians: Vec<Matrix3<f64>>,
    /// `N × B` row-major skinning weights.
    pub weights: Vec<f64>,
    pub canonical: BonePose,
    pub target: BonePose,
    pub deltas: Vec<BoneDelta>,
}

pub fn warp_cloud(cloud: &GaussianCloud, canonical: &BonePose, target: &BonePose) -> Result<CloudWarp> {
    let deltas = bone_delta_transforms(canonical, target)?;
    let (splats, jacobians, weights) = warp_parts(cloud, canonical, &deltas)?;
    Ok(CloudWarp {
        splats,
        jacobians,
        weights,
        canonical: canonical.clone(),
        target: target.clone(),
        deltas,
    })
}

/// Warps the cloud by explicit per-bone transforms (no pose, no backward).
/// Returns the warped splats and their warp Jacobians.
pub fn warp_cloud_with_deltas(
    cloud: &GaussianCloud,
    canonical: &BonePose,
    deltas: &[BoneDelta],
) -> Result<(Vec<WorldSplat>, Vec<Matrix3<f64>>)> {
    let (splats, jacobians, _) = warp_parts(cloud, canonical, deltas)?;
    Ok((splats, jacobians))
}

type WarpParts = (Vec<WorldSplat>, Vec<Matrix3<f64>>, Vec<f64>);

fn warp_parts(cloud: &GaussianCloud, canonical: &BonePose, deltas: &[BoneDelta]) -> Result<WarpParts> {
    let bones = bones(canonical, deltas)?;
    let per: Vec<(WorldSplat, Matrix3<f64>, Vec<f64>)> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let g = cloud.get(i);
            let l = local(&g.position, &bones);
            let cov = l.jacobian * g.covariance() * l.jacobian.transpose();
            (
                WorldSplat {
                    mean: l.y,
                    cov: (cov + cov.transpose()) * 0.5,
                    opacity: g.opacity(),
                    color: g.color,
                },
                l.jacobian,
                l.weights,
            )
        })
        .collect();
    if per.iter().any(|p| !p.1.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("warp Jacobian"));
    }
    let mut splats = Vec::with_capacity(per.len());
    let mut jacobians = Vec::with_capacity(per.len());
    let mut weights = Vec::with_capacity(per.len() * deltas.len());
    for (s, j, w) in per {
        splats.push(s);
        jacobians.push(j);
        weights.extend(w);
    }
    Ok((splats, jacobians, weights))
}

#[derive(Clone, Debug)]
pub struct WarpGrads {
    pub cloud: RenderGrads,
    pub canonical: PoseGrad,
    pub target: PoseGrad,
}

/// Per-bone sums gathered over Gaussians before mapping to pose parameters.
#[derive(Clone)]
struct BoneAcc {
    rot: Vec<Matrix3<f64>>,
    trans: Vec<Vector3<f64>>,
    center: Vec<Vector3<f64>>,
    precision: Vec<Matrix3<f64>>,
}

impl BoneAcc {
    fn zeros(b: usize) -> Self {
        Self {
            rot: vec![Matrix3::zeros(); b],
            trans: vec![Vector3::zeros(); b],
            center: vec![Vector3::zeros(); b],
            precision: vec![Matrix3::zeros(); b],
        }
    }

    fn add(&mut self, o: &BoneAcc) {
        for k in 0..self.rot.len() {
            self.rot[k] += o.rot[k];
            self.trans[k] += o.trans[k];
            self.center[k] += o.center[k];
            self.precision[k] += o.precision[k];
        }
    }
}

const CHUNK: usize = 256;

/// Adjoint of [`warp_cloud`]. `d_splats` are gradients on the warped splats;
/// `d_jacobians` optionally adds gradients on the warp Jacobians directly.
pub fn warp_backward(
    warp: &CloudWarp,
    cloud: &GaussianCloud,
    d_splats: &SplatGrads,
    d_jacobians: Option<&[Matrix3<f64>]>,
) -> Result<WarpGrads> {
    let n = cloud.len();
    if warp.splats.len() != n || d_splats.len() != n {
        return Err(Error::Dimension(format!(
            "warp backward: cloud {n}, forward {}, grads {}",
            warp.splats.len(),
            d_splats.len()
        )));
    }
    if let Some(dj) = d_jacobians {
        if dj.len() != n {
            return Err(Error::Dimension("Jacobian gradient count".into()));
        }
    }
    let nb = warp.deltas.len();
    let bones = bones(&warp.canonical, &warp.deltas)?;

    type PerGaussian = ([f64; 3], [f64; 4], [f64; 3], f64);
    let chunks: Vec<(Vec<PerGaussian>, BoneAcc)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = BoneAcc::zeros(nb);
            let mut out = Vec::with_capacity(CHUNK);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let g = cloud.get(i);
                let x = g.position;
                let sigma = g.covariance();
                let l = local(&x, &bones);
                let j = l.jacobian;
                let d_cov_t = d_splats.cov[i];
                let mut dj = (d_cov_t + d_cov_t.transpose()) * j * sigma;
                if let Some(extra) = d_jacobians {
                    dj += extra[i];
                }
                let d_sigma = j.transpose() * d_cov_t * j;
                let dy = d_splats.mean[i];

                let mut dx = Vector3::zeros();
                let mut dw = vec![0.0; nb];
                let mut dh = vec![Vector3::zeros(); nb];
                for k in 0..nb {
                    let h = l.weights[k] * (l.grads[k] - l.mean_grad);
                    // J = Σ ω R + Σ y_b h_bᵀ ; y = Σ ω y_b
                    dw[k] += dj.dot(&bones[k].delta.rotation) + dy.dot(&l.moved[k]);
                    acc.rot[k] += l.weights[k] * dj;
                    let dyk = dj * h + l.weights[k] * dy;
                    dh[k] = dj.transpose() * l.moved[k];
                    // y_b = R_b x + T_b
                    acc.rot[k] += dyk * x.transpose();
                    acc.trans[k] += dyk;
                    dx += bones[k].delta.rotation.transpose() * dyk;
                }
                // h_b = ω_b (g_b − ḡ), ḡ = Σ ω g
                let wdh: Vector3<f64> = (0..nb).map(|k| l.weights[k] * dh[k]).sum();
                let mut dgrads = vec![Vector3::zeros(); nb];
                for k in 0..nb {
                    dw[k] += dh[k].dot(&(l.grads[k] - l.mean_grad)) - wdh.dot(&l.grads[k]);
                    dgrads[k] = l.weights[k] * (dh[k] - wdh);
                }
                // softmax of -W
                let mean_dw: f64 = (0..nb).map(|k| l.weights[k] * dw[k]).sum();
                for k in 0..nb {
                    let d_big_w = -l.weights[k] * (dw[k] - mean_dw);
                    let d = l.offsets[k];
                    let p = &bones[k].precision;
                    // g_b = -2 P d ; W_b = dᵀ P d
                    let dd = -2.0 * p * dgrads[k] + 2.0 * d_big_w * (p * d);
                    acc.precision[k] += -2.0 * dgrads[k] * d.transpose() + d_big_w * d * d.transpose();
                    dx += dd;
                    acc.center[k] -= dd;
                }
                let (dq, ds) = covariance_backward(&g.rotation, &g.log_scale, &d_sigma);
                let o = g.opacity();
                out.push(([dx.x, dx.y, dx.z], dq, [ds.x, ds.y, ds.z], d_splats.opacity[i] * o * (1.0 - o)));
            }
            (out, acc)
        })
        .collect();

    let mut acc = BoneAcc::zeros(nb);
    let mut per = Vec::with_capacity(n);
    for (out, a) in chunks {
        per.extend(out);
        acc.add(&a);
    }

    let can = &warp.canonical;
    let tgt = &warp.target;
    let mut canonical = PoseGrad::zeros(nb);
    let mut target = PoseGrad::zeros(nb);
    for k in 0..nb {
        let r = warp.deltas[k].rotation;
        let dt = acc.trans[k];
        // T = C^t − R C^c
        let dr = acc.rot[k] - dt * can.centers[k].transpose();
        target.centers[k] = dt;
        canonical.centers[k] = acc.center[k] - r.transpose() * dt;
        // R = M^t M^cᵀ
        target.rotations[k] = dr * can.rotations[k];
        let m = can.rotations[k];
        let dp = acc.precision[k];
        let d = Matrix3::from_diagonal(&can.precisions[k]);
        // P = Mᵀ D M
        canonical.rotations[k] = dr.transpose() * tgt.rotations[k] + d * m * (dp + dp.transpose());
        canonical.precisions[k] = (m * dp * m.transpose()).diagonal();
    }

    let cloud_grads = RenderGrads {
        position: per.iter().map(|p| p.0).collect(),
        rotation: per.iter().map(|p| p.1).collect(),
        log_scale: per.iter().map(|p| p.2).collect(),
        opacity_logit: per.iter().map(|p| p.3).collect(),
        color: d_splats.color.clone(),
        view_grad_norm: d_splats.view_grad_norm.clone(),
        visible: d_splats.visible.clone(),
    };
    Ok(WarpGrads {
        cloud: cloud_grads,
        canonical,
        target,
    })
}
