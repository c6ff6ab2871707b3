use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera; `rotation`/`translation` map world to camera space
/// (x right, y down, z forward).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            width: intrinsics.width,
            height: intrinsics.height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `fov_deg` is the horizontal field of view.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_deg: f64,
        width: usize,
        height: usize,
    ) -> Self {
        Self::look_at_with(eye, target, up, Intrinsics::from_fov(fov_deg, width, height))
    }

    pub fn look_at_with(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intr: Intrinsics,
    ) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-12 {
            // looking along `up`
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
            if x.norm() < 1e-12 {
                x = z.cross(&Vector3::new(0.0, 0.0, 1.0));
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            rotation,
            translation,
        }
    }

    /// Looks at `center` from `radius` away; azimuth 0 is +z, elevation
    /// raises the eye towards +y.
    pub fn orbit(center: Vector3<f64>, radius: f64, azimuth_deg: f64, elevation_deg: f64, intr: Intrinsics) -> Self {
        let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = center + radius * Vector3::new(e.cos() * a.sin(), e.sin(), e.cos() * a.cos());
        Self::look_at_with(eye, center, Vector3::new(0.0, 1.0, 0.0), intr)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be non-zero".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if ortho > 1e-8 || (self.rotation.determinant() - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidInput(
                "camera rotation is not orthonormal".into(),
            ));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Same pose, different image size (intrinsics scaled).
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels, centered principal point, horizontal field of view.
    pub fn from_fov(fov_deg: f64, width: usize, height: usize) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }
}
