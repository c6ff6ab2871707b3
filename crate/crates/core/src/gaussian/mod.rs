//! Canonical-space Gaussian cloud.

mod covariance;
mod densify;
mod init;

pub use covariance::{build_covariance, covariance_backward, covariance_from_parts};
pub use densify::{densify_and_prune, DensifyOutcome, DensifyThresholds};
pub use init::init_from_mask;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{quat, sigmoid, DenseArray};

/// One splat in unconstrained parameter space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// `[w, x, y, z]`, kept unit length.
    pub rotation: quat::Quat,
    /// Per-axis log standard deviation.
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        build_covariance(self)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Structure-of-arrays storage plus the densification statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    /// `[N, 3]`
    pub positions: DenseArray,
    /// `[N, 4]`
    pub rotations: DenseArray,
    /// `[N, 3]`
    pub log_scales: DenseArray,
    /// `[N, 1]`
    pub opacity_logits: DenseArray,
    /// `[N, 3]`
    pub colors: DenseArray,
    /// Summed view-space positional gradient norms.
    pub view_grad_accum: Vec<f64>,
    /// Summed world-space positional gradients (direction for clones).
    pub world_grad_accum: Vec<[f64; 3]>,
    pub view_grad_count: Vec<u32>,
}

impl GaussianCloud {
    pub fn from_gaussians(gs: &[Gaussian]) -> Self {
        let n = gs.len();
        let mut pos = Vec::with_capacity(n * 3);
        let mut rot = Vec::with_capacity(n * 4);
        let mut ls = Vec::with_capacity(n * 3);
        let mut op = Vec::with_capacity(n);
        let mut col = Vec::with_capacity(n * 3);
        for g in gs {
            pos.extend(g.position.iter());
            rot.extend(quat::normalize(&g.rotation));
            ls.extend(g.log_scale.iter());
            op.push(g.opacity_logit);
            col.extend(g.color);
        }
        Self {
            positions: DenseArray::from_vec(&[n, 3], pos).unwrap(),
            rotations: DenseArray::from_vec(&[n, 4], rot).unwrap(),
            log_scales: DenseArray::from_vec(&[n, 3], ls).unwrap(),
            opacity_logits: DenseArray::from_vec(&[n, 1], op).unwrap(),
            colors: DenseArray::from_vec(&[n, 3], col).unwrap(),
            view_grad_accum: vec![0.0; n],
            world_grad_accum: vec![[0.0; 3]; n],
            view_grad_count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Gaussian {
        let p = self.positions.row(i);
        let r = self.rotations.row(i);
        let s = self.log_scales.row(i);
        let c = self.colors.row(i);
        Gaussian {
            position: Vector3::new(p[0], p[1], p[2]),
            rotation: [r[0], r[1], r[2], r[3]],
            log_scale: Vector3::new(s[0], s[1], s[2]),
            opacity_logit: self.opacity_logits.values()[i],
            color: [c[0], c[1], c[2]],
        }
    }

    pub fn gaussians(&self) -> Vec<Gaussian> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        let p = self.positions.row(i);
        Vector3::new(p[0], p[1], p[2])
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let n = self.len().max(1) as f64;
        (0..self.len()).map(|i| self.position(i)).sum::<Vector3<f64>>() / n
    }

    /// Radius of the bounding sphere around the centroid.
    pub fn extent(&self) -> f64 {
        let c = self.centroid();
        (0..self.len())
            .map(|i| (self.position(i) - c).norm())
            .fold(0.0, f64::max)
    }

    pub fn params(&self) -> [&DenseArray; 5] {
        [
            &self.positions,
            &self.rotations,
            &self.log_scales,
            &self.opacity_logits,
            &self.colors,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut DenseArray; 5] {
        [
            &mut self.positions,
            &mut self.rotations,
            &mut self.log_scales,
            &mut self.opacity_logits,
            &mut self.colors,
        ]
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Pulls parameters back inside their valid ranges after an optimizer step:
    /// unit quaternions, scales at most `max_scale`, colors in `[0, 1]`.
    pub fn enforce_invariants(&mut self, max_scale: f64) {
        let max_log = max_scale.ln();
        for i in 0..self.len() {
            let r = self.rotations.row_mut(i);
            let q = quat::normalize(&[r[0], r[1], r[2], r[3]]);
            r.copy_from_slice(&q);
        }
        for s in self.log_scales.values_mut() {
            if *s > max_log {
                *s = max_log;
            }
        }
        for c in self.colors.values_mut() {
            *c = c.clamp(0.0, 1.0);
        }
        for o in self.opacity_logits.values_mut() {
            *o = o.clamp(-20.0, 20.0);
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for p in self.params() {
            p.check_finite("gaussian cloud")?;
        }
        if self.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Ok(())
    }

    pub fn reset_densify_stats(&mut self) {
        let n = self.len();
        self.view_grad_accum = vec![0.0; n];
        self.world_grad_accum = vec![[0.0; 3]; n];
        self.view_grad_count = vec![0; n];
    }

    /// Adds one render's view-space gradient norms to the statistics.
    /// Only Gaussians marked visible are counted.
    pub fn accumulate_view_grads(
        &mut self,
        view_norms: &[f64],
        world_pos_grads: &[[f64; 3]],
        visible: &[bool],
    ) {
        for i in 0..self.len() {
            if visible[i] {
                self.view_grad_accum[i] += view_norms[i];
                for k in 0..3 {
                    self.world_grad_accum[i][k] += world_pos_grads[i][k];
                }
                self.view_grad_count[i] += 1;
            }
        }
    }

    /// Keeps rows by source index; `None` is not allowed here.
    pub(crate) fn rebuild(&self, rows: &[Gaussian]) -> Self {
        Self::from_gaussians(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_enforced() {
        let g = Gaussian {
            position: Vector3::zeros(),
            rotation: [2.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::new(5.0, 0.0, -1.0),
            opacity_logit: 0.0,
            color: [1.5, -0.2, 0.5],
        };
        let mut c = GaussianCloud::from_gaussians(&[g]);
        c.rotations.values_mut()[0] = 3.0;
        c.enforce_invariants(2.0);
        let g = c.get(0);
        assert!((quat::norm(&g.rotation) - 1.0).abs() < 1e-12);
        assert!(g.scale().x <= 2.0 + 1e-12);
        assert_eq!(g.color, [1.0, 0.0, 0.5]);
    }
}
