//! The rigidity penalty on a few hand-picked linear maps.
//!
//! cargo run --example rigid_loss

use bags::losses::{nearest_rotation, rigid_loss};
use bags::numeric::quat;
use nalgebra::Matrix3;

fn main() -> bags::Result<()> {
    let rot = quat::to_matrix(&quat::from_axis_angle([1.0, 2.0, 0.5], 0.7));
    let cases = [
        ("rotation", rot),
        ("2 I", Matrix3::identity() * 2.0),
        ("shear", Matrix3::new(1.0, 0.3, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)),
        ("stretched rotation", rot * Matrix3::from_diagonal(&nalgebra::Vector3::new(1.2, 1.0, 0.9))),
        ("reflection", Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, -1.0))),
    ];
    for (name, j) in cases {
        let (loss, grad) = rigid_loss(&[j])?;
        let r = nearest_rotation(&j)?;
        println!("{name:>20}: loss {loss:.6}  det R* {:+.3}  |grad|_1 {:.0}", r.determinant(), grad[0].abs().sum());
    }
    Ok(())
}
