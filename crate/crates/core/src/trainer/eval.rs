use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::schedule::Stage;
use crate::error::Result;
use crate::io::{Dataset, Frame};
use crate::losses::rigid_loss;
use crate::render::{render_forward, Image};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Peak signal-to-noise ratio (peak 1) over all pixel-channels, capped.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Intersection over union of `alpha > 0.5` and `mask ≥ 0.5`; 1 when both are empty.
pub fn mask_iou(alpha: &Image, mask: &Image) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, m) in alpha.data.iter().zip(&mask.data) {
        let (p, g) = (*a > 0.5, *m >= 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub iou: f64,
    pub rigid_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: Stage,
    pub iteration: usize,
    /// Means over training frames.
    pub psnr: f64,
    pub iou: f64,
    pub rigid_loss: f64,
    /// Mean over held-out views, if the dataset has any.
    pub heldout_psnr: Option<f64>,
    pub frames: Vec<FrameMetrics>,
    pub heldout: Vec<f64>,
}

fn render_frame(model: &Model, f: &Frame, root_frame: usize) -> Result<(Image, Image)> {
    let splats = model.splats(f.t_norm, root_frame)?;
    let out = render_forward(&splats, &f.camera, model.background, &model.settings);
    Ok((out.color, out.alpha))
}

/// PSNR and mask IoU on every training frame, mean rigid loss of the warp at
/// each frame time, and PSNR on the held-out views.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalReport> {
    let frames: Vec<FrameMetrics> = dataset
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let (color, alpha) = render_frame(model, f, i)?;
            let (rigid, _) = rigid_loss(&model.jacobians(f.t_norm)?)?;
            Ok(FrameMetrics {
                psnr: psnr(&color, &f.image),
                iou: mask_iou(&alpha, &f.mask),
                rigid_loss: rigid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let heldout: Vec<f64> = dataset
        .heldout
        .par_iter()
        .map(|f| {
            let (color, _) = render_frame(model, f, model.frame_for_time(f.t_norm))?;
            Ok(psnr(&color, &f.image))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |v: &mut dyn Iterator<Item = f64>, n: usize| v.sum::<f64>() / n.max(1) as f64;
    let n = frames.len();
    Ok(EvalReport {
        stage: Stage::Done,
        iteration: 0,
        psnr: mean(&mut frames.iter().map(|m| m.psnr), n),
        iou: mean(&mut frames.iter().map(|m| m.iou), n),
        rigid_loss: mean(&mut frames.iter().map(|m| m.rigid_loss), n),
        heldout_psnr: (!heldout.is_empty()).then(|| mean(&mut heldout.iter().copied(), heldout.len())),
        frames,
        heldout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_identical_is_capped() {
        let a = Image::filled(4, 4, &[0.3, 0.2, 0.1]);
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        let b = Image::filled(4, 4, &[0.4, 0.3, 0.2]);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn iou_cases() {
        let mask = Image::from_data(2, 2, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(mask_iou(&mask, &mask), 1.0);
        assert_eq!(mask_iou(&Image::new(2, 2, 1), &mask), 0.0);
        let half = Image::from_data(2, 2, 1, vec![0.9, 0.2, 0.7, 0.0]).unwrap();
        assert!((mask_iou(&half, &mask) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&Image::new(2, 2, 1), &Image::new(2, 2, 1)), 1.0);
    }
}
