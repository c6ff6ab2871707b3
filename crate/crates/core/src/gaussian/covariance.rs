use nalgebra::{Matrix3, Vector3};

use super::Gaussian;
use crate::numeric::quat;

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn build_covariance(g: &Gaussian) -> Matrix3<f64> {
    covariance_from_parts(&g.rotation, &g.log_scale)
}

pub fn covariance_from_parts(rotation: &quat::Quat, log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat::to_matrix(rotation);
    let d = Matrix3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));
    let sigma = r * d * r.transpose();
    // exact symmetry
    (sigma + sigma.transpose()) * 0.5
}

/// Gradients of a loss with respect to the raw quaternion and log-scale, given
/// `dL/dΣ` (treated as a general matrix).
pub fn covariance_backward(
    rotation: &quat::Quat,
    log_scale: &Vector3<f64>,
    d_sigma: &Matrix3<f64>,
) -> (quat::Quat, Vector3<f64>) {
    let r = quat::to_matrix(rotation);
    let var = log_scale.map(|s| (2.0 * s).exp());
    let d = Matrix3::from_diagonal(&var);
    let g = d_sigma + d_sigma.transpose();
    let d_r = g * r * d;
    let inner = r.transpose() * d_sigma * r;
    let d_s = Vector3::new(
        inner[(0, 0)] * 2.0 * var.x,
        inner[(1, 1)] * 2.0 * var.y,
        inner[(2, 2)] * 2.0 * var.z,
    );
    (quat::to_matrix_backward(rotation, &d_r), d_s)
}
