//! Renders a handful of Gaussians with the tiled rasterizer, checks it
//! against the per-pixel reference and writes a PNG.
//!
//! cargo run --release --example render_splats -- out.png

use bags::gaussian::{logit, Gaussian, GaussianCloud};
use bags::numeric::quat;
use bags::render::{cloud_splats, render_forward, render_reference, Camera, RenderSettings};
use nalgebra::Vector3;

fn main() -> bags::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "splats.png".into());
    let blob = |x: f64, y: f64, z: f64, s: [f64; 3], color: [f64; 3]| Gaussian {
        position: Vector3::new(x, y, z),
        rotation: quat::from_axis_angle([0.0, 0.0, 1.0], x),
        log_scale: Vector3::from(s.map(f64::ln)),
        opacity_logit: logit(0.8),
        color,
    };
    let cloud = GaussianCloud::from_gaussians(&[
        blob(-0.5, 0.0, 0.0, [0.3, 0.1, 0.1], [0.9, 0.2, 0.2]),
        blob(0.0, 0.2, 0.3, [0.15, 0.15, 0.15], [0.2, 0.8, 0.3]),
        blob(0.45, -0.1, -0.2, [0.1, 0.35, 0.1], [0.2, 0.3, 0.9]),
    ]);
    let cam = Camera::look_at(Vector3::new(0.0, 0.0, 3.0), Vector3::zeros(), Vector3::y(), 45.0, 160, 120);
    let splats = cloud_splats(&cloud);

    let tiled = render_forward(&splats, &cam, [1.0; 3], &RenderSettings::default());
    let reference = render_reference(&splats, &cam, [1.0; 3], &RenderSettings::default());
    println!("visible splats: {}", tiled.visible_count());
    println!("max |tiled - reference|: {:.2e}", tiled.color.max_abs_diff(&reference.color));

    std::fs::write(&out, tiled.color.to_png()?).map_err(|e| bags::Error::io(&out, e))?;
    println!("wrote {out}");
    Ok(())
}
