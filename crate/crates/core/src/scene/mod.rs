//! Gaussian clouds and cameras.
//!
//! Every Gaussian stores *activated* parameters: a unit quaternion, positive
//! scales, an opacity in `(0, 1]` and a DC-only RGB color in `[0, 1]`. The raw
//! encodings used by the PLY layout live in [`ply`].

mod camera;
pub mod manifest;
pub mod ply;

pub use camera::Camera;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Quaternion norm tolerance accepted without renormalizing.
pub const QUAT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: Vector3::repeat(scale),
            opacity,
            color,
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let finite = self.mean.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.color.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data {
                index,
                field: "parameters".into(),
            });
        }
        let norm = quat_norm(&self.rotation);
        if (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(Error::Invalid(format!(
                "gaussian {index}: quaternion norm {norm} is not 1"
            )));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Invalid(format!("gaussian {index}: non-positive scale")));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::Invalid(format!(
                "gaussian {index}: opacity {} outside (0, 1]",
                self.opacity
            )));
        }
        if self.color.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::Invalid(format!("gaussian {index}: color outside [0, 1]")));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    /// `Σ = R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale);
        m * m.transpose()
    }
}

pub fn covariance(g: &Gaussian) -> Matrix3<f64> {
    g.covariance()
}

pub(crate) fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rotation matrix of `q / |q|`, `q = (w, x, y, z)`.
pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = quat_norm(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// An ordered scene. `added[i]` marks Gaussians that came from depth
/// initialization rather than the source scene.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    gaussians: Vec<Gaussian>,
    added: Vec<bool>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        let added = vec![false; gaussians.len()];
        Self { gaussians, added }
    }

    pub fn with_markers(gaussians: Vec<Gaussian>, added: Vec<bool>) -> Result<Self> {
        if gaussians.len() != added.len() {
            return Err(Error::Shape(format!(
                "{} gaussians but {} source markers",
                gaussians.len(),
                added.len()
            )));
        }
        Ok(Self { gaussians, added })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn added(&self) -> &[bool] {
        &self.added
    }

    pub fn validate(&self) -> Result<()> {
        self.gaussians
            .iter()
            .enumerate()
            .try_for_each(|(i, g)| g.validate(i))
    }

    /// Appends `delta`, flagging every appended Gaussian as added.
    pub fn merge(&self, delta: &GaussianCloud) -> GaussianCloud {
        let mut gaussians = self.gaussians.clone();
        gaussians.extend(delta.gaussians.iter().cloned());
        let mut added = self.added.clone();
        added.extend(std::iter::repeat_n(true, delta.len()));
        GaussianCloud { gaussians, added }
    }

    /// Centroid and radius of the bounding sphere around the centroid.
    pub fn extent(&self) -> (Vector3<f64>, f64) {
        if self.is_empty() {
            return (Vector3::zeros(), 0.0);
        }
        let centroid = self
            .gaussians
            .iter()
            .fold(Vector3::zeros(), |acc, g| acc + g.mean)
            / self.len() as f64;
        let radius = self
            .gaussians
            .iter()
            .map(|g| (g.mean - centroid).norm())
            .fold(0.0, f64::max);
        (centroid, radius)
    }
}

impl FromIterator<Gaussian> for GaussianCloud {
    fn from_iter<I: IntoIterator<Item = Gaussian>>(iter: I) -> Self {
        GaussianCloud::new(iter.into_iter().collect())
    }
}

pub fn merge(cloud: &GaussianCloud, delta: &GaussianCloud) -> GaussianCloud {
    cloud.merge(delta)
}
