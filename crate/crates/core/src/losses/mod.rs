//! Training objectives. Every loss returns its value together with the
//! gradient of that value with respect to its first input.

mod sds;
mod ssim;

pub use sds::{
    camera_to_wire, sds_step, GroundTruthFn, OracleProvider, PriorGradient, PriorProvider, PriorRequest,
    RemoteConfig, RemoteProvider, SdsOutcome, WireCamera, ZeroProvider,
};
pub use ssim::{perceptual_loss, MsSsim, PerceptualMetric};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::svd3;
use crate::render::Image;

/// Weights of the five objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sds: f64,
    pub rigid: f64,
    pub perceptual: f64,
    pub l1: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sds: 1e-4,
            rigid: 1e-1,
            perceptual: 1e-1,
            l1: 1e-1,
            mask: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            sds: 0.0,
            rigid: 0.0,
            perceptual: 0.0,
            l1: 0.0,
            mask: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sds", self.sds),
            ("rigid", self.rigid),
            ("perceptual", self.perceptual),
            ("l1", self.l1),
            ("mask", self.mask),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Unweighted term values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sds: f64,
    pub rigid: f64,
    pub perceptual: f64,
    pub l1: f64,
    pub mask: f64,
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    w.sds * terms.sds + w.rigid * terms.rigid + w.perceptual * terms.perceptual + w.l1 * terms.l1 + w.mask * terms.mask
}

/// Mean absolute error over masked pixel-channels, mask values used as weights.
pub fn l1_loss(render: &Image, target: &Image, mask: &Image) -> Result<(f64, Image)> {
    render.ensure_same_shape(target, "l1 target")?;
    if mask.width != render.width || mask.height != render.height || mask.channels != 1 {
        return Err(Error::Dimension("l1 mask must be H×W×1 matching the render".into()));
    }
    let msum: f64 = mask.data.iter().sum();
    if msum <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let c = render.channels;
    let norm = msum * c as f64;
    let mut grad = Image::new(render.width, render.height, c);
    let mut total = 0.0;
    for p in 0..render.pixel_count() {
        let m = mask.data[p];
        if m == 0.0 {
            continue;
        }
        for ch in 0..c {
            let k = p * c + ch;
            let d = render.data[k] - target.data[k];
            total += m * d.abs();
            grad.data[k] = if d > 0.0 {
                m / norm
            } else if d < 0.0 {
                -m / norm
            } else {
                0.0
            };
        }
    }
    Ok((total / norm, grad))
}

/// Mean absolute difference between accumulated alpha and the mask.
pub fn mask_loss(alpha: &Image, mask: &Image) -> Result<(f64, Image)> {
    alpha.ensure_same_shape(mask, "mask")?;
    let n = alpha.data.len() as f64;
    let mut grad = Image::new(alpha.width, alpha.height, alpha.channels);
    let mut total = 0.0;
    for (k, (a, m)) in alpha.data.iter().zip(&mask.data).enumerate() {
        let d = a - m;
        total += d.abs();
        grad.data[k] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((total / n, grad))
}

/// Mean over matrices of `‖J − R*‖₁`, `R*` the nearest proper rotation,
/// treated as a constant in the gradient.
pub fn rigid_loss(jacobians: &[Matrix3<f64>]) -> Result<(f64, Vec<Matrix3<f64>>)> {
    if jacobians.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = jacobians.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(jacobians.len());
    for j in jacobians {
        let r = nearest_rotation(j)?;
        let d = j - r;
        total += d.abs().sum();
        grads.push(d.map(|v| {
            if v > 0.0 {
                1.0 / n
            } else if v < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        }));
    }
    Ok((total / n, grads))
}

/// Nearest proper rotation; a matrix that already is one (to rounding) is
/// returned unchanged so the loss on rotations is exactly zero.
pub fn nearest_rotation(j: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = svd3(j)?;
    if (j.transpose() * j - Matrix3::identity()).abs().max() <= 1e-12 && j.determinant() > 0.0 {
        return Ok(*j);
    }
    Ok(svd.nearest_rotation())
}

/// Reconstruction terms on one rendered frame and their routed image gradients.
pub struct Reconstruction {
    pub terms: LossTerms,
    /// `dL/dcolor` with weights applied.
    pub d_color: Image,
    /// `dL/dalpha` with weights applied.
    pub d_alpha: Image,
}

/// L1, perceptual and mask terms for a frame, weighted and summed into
/// image gradients. Terms with zero weight are skipped.
pub fn reconstruction_loss(
    color: &Image,
    alpha: &Image,
    target: &Image,
    mask: &Image,
    weights: &LossWeights,
    perceptual: &dyn PerceptualMetric,
) -> Result<Reconstruction> {
    let mut terms = LossTerms::default();
    let mut d_color = Image::new(color.width, color.height, color.channels);
    let mut d_alpha = Image::new(alpha.width, alpha.height, alpha.channels);
    if weights.l1 > 0.0 {
        let (v, g) = l1_loss(color, target, mask)?;
        terms.l1 = v;
        d_color.add_assign(&g.scaled(weights.l1));
    }
    if weights.perceptual > 0.0 {
        let (v, g) = perceptual.loss(color, target)?;
        terms.perceptual = v;
        d_color.add_assign(&g.scaled(weights.perceptual));
    }
    if weights.mask > 0.0 {
        let (v, g) = mask_loss(alpha, mask)?;
        terms.mask = v;
        d_alpha.add_assign(&g.scaled(weights.mask));
    }
    Ok(Reconstruction { terms, d_color, d_alpha })
}
