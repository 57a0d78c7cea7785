use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera with a world-to-camera pose `x_cam = R x_world + t`.
///
/// Camera frame follows the OpenCV convention: +x right, +y down, +z forward.
/// Pixel `(u, v)` covers `[u, u+1) x [v, v+1)`, so its center sits at
/// `(u + 0.5, v + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let name = name.into();
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Invalid(format!("camera {name}: focal lengths must be positive")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("camera {name}: empty resolution")));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "camera {name}: pose rotation is not a proper rotation (det {det})"
            )));
        }
        Ok(Self {
            name,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        })
    }

    /// Builds a camera from a row-major camera-to-world matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn from_c2w(
        name: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        c2w: &Matrix4<f64>,
    ) -> Result<Self> {
        let r_c2w: Matrix3<f64> = c2w.fixed_view::<3, 3>(0, 0).into_owned();
        let pos: Vector3<f64> = c2w.fixed_view::<3, 1>(0, 3).into_owned();
        let rotation = r_c2w.transpose();
        let translation = -(rotation * pos);
        Self::new(name, fx, fy, cx, cy, width, height, rotation, translation)
    }

    /// Camera at `eye` looking at `target`, with image "up" along `up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        name: impl Into<String>,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            name,
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center `p_v` in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn c2w(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.transpose());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position());
        m
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Continuous pixel coordinates of a camera-frame point (no culling).
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}
