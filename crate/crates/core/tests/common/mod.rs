#![allow(dead_code)]

pub mod checks;

use bags::gaussian::{logit, Gaussian, GaussianCloud};
use bags::numeric::quat;
use bags::render::Camera;
use nalgebra::Vector3;
use rand::Rng;

pub fn camera(size: usize) -> Camera {
    Camera::look_at(
        Vector3::new(0.3, -0.4, -4.0),
        Vector3::zeros(),
        Vector3::y(),
        50.0,
        size,
        size,
    )
}

pub fn random_gaussian<R: Rng>(rng: &mut R, spread: f64, scale: (f64, f64)) -> Gaussian {
    Gaussian {
        position: Vector3::from_fn(|_, _| rng.gen_range(-spread..spread)),
        rotation: quat::normalize(&std::array::from_fn(|_| rng.gen_range(-1.0..1.0))),
        log_scale: Vector3::from_fn(|_, _| rng.gen_range(scale.0..scale.1)),
        opacity_logit: logit(rng.gen_range(0.2..0.9)),
        color: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
    }
}

pub fn random_cloud<R: Rng>(rng: &mut R, n: usize, spread: f64, scale: (f64, f64)) -> GaussianCloud {
    let gs: Vec<Gaussian> = (0..n).map(|_| random_gaussian(rng, spread, scale)).collect();
    GaussianCloud::from_gaussians(&gs)
}

/// Central-difference comparison: passes if within `rel` relative error or
/// `abs_floor` absolute error.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= abs_floor || err <= rel * analytic.abs().max(numeric.abs())
}
