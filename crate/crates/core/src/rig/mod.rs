//! Neural bones: time-conditioned MLPs predict per-bone centers, precisions
//! and rotations; Gaussians are moved by blending the bones' rigid motions
//! with Mahalanobis skinning weights.

mod warp;

pub use warp::{
    bone_delta_transforms, skinning_weights, warp_backward, warp_cloud, warp_cloud_with_deltas, warp_gaussian, BoneDelta,
    CloudWarp, WarpGrads, WarpResult,
};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{quat, Activation, DenseArray, Mlp, MlpTape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoneRigConfig {
    pub bones: usize,
    /// Number of sin/cos frequency pairs in the time embedding.
    pub frequencies: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Frame times mapped to `[0, 1]` are `(t - start) / (end - start)`.
    pub time_range: (f64, f64),
    /// Scale of the final layer's initial weights.
    pub final_layer_scale: f64,
}

impl Default for BoneRigConfig {
    fn default() -> Self {
        Self {
            bones: 16,
            frequencies: 6,
            hidden_layers: 4,
            hidden_width: 128,
            time_range: (0.0, 1.0),
            final_layer_scale: 1e-3,
        }
    }
}

impl BoneRigConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bones == 0 {
            return Err(Error::Config("bone count must be at least 1".into()));
        }
        if self.frequencies == 0 {
            return Err(Error::Config("embedding frequency count must be at least 1".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        let (a, b) = self.time_range;
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(Error::Config(format!("bad time range ({a}, {b})")));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.frequencies
    }

    /// Maps a frame time into `[0, 1]`, clamping rounding overshoot.
    pub fn normalize_time(&self, t: f64) -> Result<f64> {
        let (a, b) = self.time_range;
        let u = (t - a) / (b - a);
        if !(-1e-9..=1.0 + 1e-9).contains(&u) {
            return Err(Error::InvalidInput(format!(
                "time {t} outside range ({a}, {b})"
            )));
        }
        Ok(u.clamp(0.0, 1.0))
    }
}

/// `(sin(2^k π t), cos(2^k π t))` for `k = 0..L`, sines first per pair.
pub fn time_embedding(t: f64, frequencies: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("time {t} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(2 * frequencies);
    for k in 0..frequencies {
        let a = (1u64 << k) as f64 * std::f64::consts::PI * t;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// Per-bone state. `precisions` holds the diagonal of `D_b`; `quats` the raw
/// quaternions that `rotations` were built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonePose {
    pub centers: Vec<Vector3<f64>>,
    pub precisions: Vec<Vector3<f64>>,
    pub quats: Vec<quat::Quat>,
    pub rotations: Vec<Matrix3<f64>>,
}

/// Bone pose in canonical space, predicted from the learnable embedding.
pub type CanonicalBonePose = BonePose;

impl BonePose {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn from_parts(
        centers: Vec<Vector3<f64>>,
        precisions: Vec<Vector3<f64>>,
        quats: Vec<quat::Quat>,
    ) -> Result<Self> {
        if centers.len() != precisions.len() || centers.len() != quats.len() {
            return Err(Error::Dimension("bone pose parts differ in length".into()));
        }
        if precisions.iter().any(|d| d.iter().any(|&v| !(v > 0.0 && v.is_finite()))) {
            return Err(Error::InvalidInput("bone precisions must be positive".into()));
        }
        let rotations = quats.iter().map(quat::to_matrix).collect();
        Ok(Self {
            centers,
            precisions,
            quats,
            rotations,
        })
    }

    /// `M_bᵀ D_b M_b`
    pub fn precision_matrix(&self, b: usize) -> Matrix3<f64> {
        let m = &self.rotations[b];
        m.transpose() * Matrix3::from_diagonal(&self.precisions[b]) * m
    }
}

/// Gradients with respect to a [`BonePose`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoseGrad {
    pub centers: Vec<Vector3<f64>>,
    pub precisions: Vec<Vector3<f64>>,
    pub rotations: Vec<Matrix3<f64>>,
}

impl PoseGrad {
    pub fn zeros(bones: usize) -> Self {
        Self {
            centers: vec![Vector3::zeros(); bones],
            precisions: vec![Vector3::zeros(); bones],
            rotations: vec![Matrix3::zeros(); bones],
        }
    }

    pub fn add(&mut self, o: &PoseGrad) {
        for b in 0..self.centers.len() {
            self.centers[b] += o.centers[b];
            self.precisions[b] += o.precisions[b];
            self.rotations[b] += o.rotations[b];
        }
    }

    pub fn is_zero(&self) -> bool {
        self.centers.iter().all(|v| v.iter().all(|&x| x == 0.0))
            && self.precisions.iter().all(|v| v.iter().all(|&x| x == 0.0))
            && self.rotations.iter().all(|m| m.iter().all(|&x| x == 0.0))
    }
}

/// Activations retained by [`BoneRig::pose_taped`].
#[derive(Clone, Debug)]
pub struct PoseTape {
    input: Vec<f64>,
    tapes: [MlpTape; 3],
    pose: BonePose,
}

impl PoseTape {
    pub fn pose(&self) -> &BonePose {
        &self.pose
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoneRig {
    pub config: BoneRigConfig,
    pub center_mlp: Mlp,
    pub precision_mlp: Mlp,
    pub rotation_mlp: Mlp,
    /// Input that produces the canonical pose.
    pub canonical_embedding: DenseArray,
}

impl BoneRig {
    /// Output biases start at `centers`, isotropic precision
    /// `(extent / B)^-2` and identity rotations; the canonical embedding
    /// starts at the embedding of `reference_time` (normalized).
    pub fn new<R: Rng + ?Sized>(
        config: BoneRigConfig,
        centers: &[Vector3<f64>],
        extent: f64,
        reference_time: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let b = config.bones;
        if centers.len() != b {
            return Err(Error::Dimension(format!(
                "{} initial centers for {b} bones",
                centers.len()
            )));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::InvalidInput(format!("scene extent {extent}")));
        }
        let mlp = |out: usize, rng: &mut R| {
            let mut dims = vec![config.embedding_dim()];
            dims.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
            dims.push(out);
            Mlp::new(&dims, Activation::Softplus, config.final_layer_scale, rng)
        };
        let mut center_mlp = mlp(3 * b, rng)?;
        let mut precision_mlp = mlp(3 * b, rng)?;
        let mut rotation_mlp = mlp(4 * b, rng)?;
        let c_bias: Vec<f64> = centers.iter().flat_map(|c| [c.x, c.y, c.z]).collect();
        center_mlp.set_output_bias(&c_bias)?;
        let log_d = (extent / b as f64).powi(-2).ln();
        precision_mlp.set_output_bias(&vec![log_d; 3 * b])?;
        let q_bias: Vec<f64> = (0..b).flat_map(|_| quat::IDENTITY).collect();
        rotation_mlp.set_output_bias(&q_bias)?;
        let t_ref = config.normalize_time(reference_time)?;
        let canonical_embedding = DenseArray::vector(time_embedding(t_ref, config.frequencies)?);
        Ok(Self {
            config,
            center_mlp,
            precision_mlp,
            rotation_mlp,
            canonical_embedding,
        })
    }

    pub fn bones(&self) -> usize {
        self.config.bones
    }

    /// Pose for an MLP input vector (a time embedding or the canonical embedding).
    pub fn pose_taped(&self, input: &[f64]) -> Result<(BonePose, PoseTape)> {
        let (c, tc) = self.center_mlp.forward_taped(input)?;
        let (d, td) = self.precision_mlp.forward_taped(input)?;
        let (m, tm) = self.rotation_mlp.forward_taped(input)?;
        if c.iter().chain(&d).chain(&m).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bone MLP output"));
        }
        let b = self.bones();
        let centers = (0..b).map(|i| Vector3::new(c[3 * i], c[3 * i + 1], c[3 * i + 2])).collect();
        let precisions: Vec<Vector3<f64>> = (0..b)
            .map(|i| Vector3::new(d[3 * i].exp(), d[3 * i + 1].exp(), d[3 * i + 2].exp()))
            .collect();
        if precisions.iter().any(|p| p.iter().any(|&v| !(v > 0.0 && v.is_finite()))) {
            return Err(Error::NonFinite("bone precision"));
        }
        let quats: Vec<quat::Quat> = (0..b)
            .map(|i| [m[4 * i], m[4 * i + 1], m[4 * i + 2], m[4 * i + 3]])
            .collect();
        if quats.iter().any(|q| quat::norm(q) < 1e-12) {
            return Err(Error::NonFinite("degenerate bone quaternion"));
        }
        let pose = BonePose::from_parts(centers, precisions, quats)?;
        Ok((
            pose.clone(),
            PoseTape {
                input: input.to_vec(),
                tapes: [tc, td, tm],
                pose,
            },
        ))
    }

    /// Pose at a normalized time in `[0, 1]`.
    pub fn pose_at_taped(&self, t: f64) -> Result<(BonePose, PoseTape)> {
        self.pose_taped(&time_embedding(t, self.config.frequencies)?)
    }

    pub fn canonical_pose_taped(&self) -> Result<(CanonicalBonePose, PoseTape)> {
        self.pose_taped(self.canonical_embedding.values())
    }

    pub fn canonical_pose(&self) -> Result<CanonicalBonePose> {
        Ok(self.canonical_pose_taped()?.0)
    }

    /// Accumulates MLP parameter gradients and returns the input gradient.
    pub fn pose_backward(&mut self, tape: &PoseTape, grad: &PoseGrad) -> Result<Vec<f64>> {
        let b = self.bones();
        if grad.centers.len() != b || grad.precisions.len() != b || grad.rotations.len() != b {
            return Err(Error::Dimension("pose gradient bone count".into()));
        }
        let pose = &tape.pose;
        let dc: Vec<f64> = grad.centers.iter().flat_map(|c| [c.x, c.y, c.z]).collect();
        let dd: Vec<f64> = (0..b)
            .flat_map(|i| {
                let g = grad.precisions[i].component_mul(&pose.precisions[i]);
                [g.x, g.y, g.z]
            })
            .collect();
        let dm: Vec<f64> = (0..b)
            .flat_map(|i| quat::to_matrix_backward(&pose.quats[i], &grad.rotations[i]))
            .collect();
        let mut din = self.center_mlp.backward_taped(&tape.tapes[0], &dc)?;
        let g1 = self.precision_mlp.backward_taped(&tape.tapes[1], &dd)?;
        let g2 = self.rotation_mlp.backward_taped(&tape.tapes[2], &dm)?;
        for ((a, x), y) in din.iter_mut().zip(&g1).zip(&g2) {
            *a += x + y;
        }
        debug_assert_eq!(din.len(), tape.input.len());
        Ok(din)
    }

    /// Backward for a canonical pose; the input gradient lands on the embedding.
    pub fn canonical_backward(&mut self, tape: &PoseTape, grad: &PoseGrad) -> Result<()> {
        let g = self.pose_backward(tape, grad)?;
        self.canonical_embedding.accumulate_grad(&g)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut DenseArray> {
        self.center_mlp
            .params_mut()
            .chain(self.precision_mlp.params_mut())
            .chain(self.rotation_mlp.params_mut())
            .chain(std::iter::once(&mut self.canonical_embedding))
    }

    pub fn params(&self) -> impl Iterator<Item = &DenseArray> {
        self.center_mlp
            .params()
            .chain(self.precision_mlp.params())
            .chain(self.rotation_mlp.params())
            .chain(std::iter::once(&self.canonical_embedding))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for p in self.params() {
            p.check_finite("bone rig parameters")?;
        }
        Ok(())
    }
}

/// Pose at a normalized time in `[0, 1]`.
pub fn predict_bone_pose(rig: &BoneRig, t: f64) -> Result<BonePose> {
    Ok(rig.pose_at_taped(t)?.0)
}

/// `count` centers spread over `points` by farthest-point sampling from a
/// random start. Points are reused if there are fewer than `count`.
pub fn farthest_point_centers<R: Rng + ?Sized>(
    points: &[Vector3<f64>],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vector3<f64>>> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut chosen = vec![rng.gen_range(0..points.len())];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[chosen[0]]).norm_squared()).collect();
    while chosen.len() < count.min(points.len()) {
        let next = dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("non-empty");
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    let mut out: Vec<Vector3<f64>> = chosen.iter().map(|&i| points[i]).collect();
    let mut k = 0;
    while out.len() < count {
        out.push(out[k]);
        k += 1;
    }
    Ok(out)
}
