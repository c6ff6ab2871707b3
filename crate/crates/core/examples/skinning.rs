//! Two bones, one bent: skinning weights along the limb, warped means, and
//! the warp Jacobian against central differences of the warp map.
//!
//! cargo run --example skinning

use bags::gaussian::Gaussian;
use bags::losses::rigid_loss;
use bags::numeric::quat;
use bags::rig::{bone_delta_transforms, skinning_weights, warp_gaussian, BonePose};
use nalgebra::{Matrix3, Vector3};

fn main() -> bags::Result<()> {
    let centers = vec![Vector3::new(-0.5, 0.0, 0.0), Vector3::new(0.5, 0.0, 0.0)];
    let precisions = vec![Vector3::new(2.0, 8.0, 8.0); 2];
    let canonical = BonePose::from_parts(centers.clone(), precisions.clone(), vec![quat::IDENTITY; 2])?;

    // second bone turned 60° about z and carried along with the first's tip
    let bend = quat::from_axis_angle([0.0, 0.0, 1.0], 60f64.to_radians());
    let r = quat::to_matrix(&bend);
    let elbow = Vector3::zeros();
    let moved = vec![centers[0], elbow + r * (centers[1] - elbow)];
    let target = BonePose::from_parts(moved, precisions, vec![quat::IDENTITY, bend])?;
    let deltas = bone_delta_transforms(&canonical, &target)?;

    println!("   x     w0     w1    warped mean               rigid");
    let mut jacobians = Vec::new();
    for i in 0..=8 {
        let x = -1.0 + 0.25 * i as f64;
        let g = Gaussian {
            position: Vector3::new(x, 0.05, 0.0),
            rotation: quat::IDENTITY,
            log_scale: Vector3::repeat(-3.0),
            opacity_logit: 0.0,
            color: [0.5; 3],
        };
        let w = skinning_weights(&g.position, &canonical);
        let out = warp_gaussian(&g, &canonical, &deltas)?;
        let (rig, _) = rigid_loss(&[out.jacobian])?;
        println!(
            "{x:5.2}  {:.3}  {:.3}   ({:6.3}, {:6.3}, {:6.3})   {rig:.4}",
            w[0], w[1], out.mean.x, out.mean.y, out.mean.z
        );
        jacobians.push((g, out.jacobian));
    }

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (g, j) in &jacobians {
        let mut fd = Matrix3::zeros();
        for k in 0..3 {
            let shifted = |d: f64| {
                let mut p = *g;
                p.position[k] += d;
                warp_gaussian(&p, &canonical, &deltas).map(|o| o.mean)
            };
            fd.set_column(k, &((shifted(h)? - shifted(-h)?) / (2.0 * h)));
        }
        worst = worst.max((fd - j).abs().max());
    }
    println!("max |J - finite differences|: {worst:.2e}");
    Ok(())
}
