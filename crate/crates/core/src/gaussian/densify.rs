use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Gaussian, GaussianCloud};
use crate::error::{Error, Result};
use crate::numeric::quat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyThresholds {
    /// Mean view-space positional gradient (NDC units) that triggers densification.
    pub grad_threshold: f64,
    /// Fraction of the scene extent separating "small" (clone) from "large" (split).
    pub percent_dense: f64,
    pub scene_extent: f64,
    pub min_opacity: f64,
    /// Children of a split get `scale / split_shrink`.
    pub split_shrink: f64,
}

impl Default for DensifyThresholds {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            scene_extent: 1.0,
            min_opacity: 0.005,
            split_shrink: 1.6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// For each row of the new cloud, the old row it continues (`None` for new splats).
    pub sources: Vec<Option<usize>>,
}

/// Clone small high-gradient splats, split large ones, then drop
/// near-transparent ones. Statistics are reset afterwards.
pub fn densify_and_prune<R: Rng + ?Sized>(
    cloud: &mut GaussianCloud,
    thresholds: &DensifyThresholds,
    rng: &mut R,
) -> Result<DensifyOutcome> {
    let n = cloud.len();
    let split_size = thresholds.percent_dense * thresholds.scene_extent;
    let mut rows: Vec<(Gaussian, Option<usize>)> = Vec::with_capacity(n * 2);
    let mut appended: Vec<Gaussian> = Vec::new();
    let mut outcome = DensifyOutcome::default();

    for i in 0..n {
        let g = cloud.get(i);
        let count = cloud.view_grad_count[i];
        let mean_grad = if count > 0 {
            cloud.view_grad_accum[i] / count as f64
        } else {
            0.0
        };
        if mean_grad < thresholds.grad_threshold {
            rows.push((g, Some(i)));
            continue;
        }
        let scale = g.scale();
        let max_scale = scale.max();
        if max_scale <= split_size {
            let dir = Vector3::from(cloud.world_grad_accum[i]);
            let offset = if dir.norm() > 0.0 {
                -dir.normalize() * 0.5 * max_scale
            } else {
                Vector3::zeros()
            };
            let mut copy = g;
            copy.position += offset;
            rows.push((g, Some(i)));
            appended.push(copy);
            outcome.cloned += 1;
        } else {
            let r = quat::to_matrix(&g.rotation);
            for _ in 0..2 {
                let z = Vector3::from_fn(|_, _| {
                    let v: f64 = StandardNormal.sample(rng);
                    v
                });
                let mut child = g;
                child.position = g.position + r * scale.component_mul(&z);
                child.log_scale = g.log_scale.map(|s| s - thresholds.split_shrink.ln());
                appended.push(child);
            }
            outcome.split += 1;
        }
    }
    rows.extend(appended.into_iter().map(|g| (g, None)));

    let before = rows.len();
    rows.retain(|(g, _)| g.opacity() >= thresholds.min_opacity);
    outcome.pruned = before - rows.len();
    if rows.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let (gs, sources): (Vec<Gaussian>, Vec<Option<usize>>) = rows.into_iter().unzip();
    *cloud = cloud.rebuild(&gs);
    outcome.sources = sources;
    Ok(outcome)
}
