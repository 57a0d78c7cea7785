use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{Prepared, Splat, MAX_SIGMA, MIN_TRANSMITTANCE};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{RgbImage, ScalarImage};
use crate::scene::{quat_norm, rotation_matrix, Camera, Gaussian, GaussianCloud};

/// Gradient of a scalar loss with respect to the activated parameters of one
/// Gaussian. `rotation` is taken with respect to the stored (possibly
/// unnormalized) quaternion components.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    pub fn is_zero(&self) -> bool {
        self.mean == Vector3::zeros()
            && self.rotation == [0.0; 4]
            && self.scale == Vector3::zeros()
            && self.opacity == 0.0
            && self.color == Vector3::zeros()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
}

impl std::ops::AddAssign for SplatGrad {
    fn add_assign(&mut self, o: Self) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

struct Contribution {
    slot: usize,
    sigma: f64,
    g: f64,
    delta: Vector2<f64>,
    clamped: bool,
    t: f64,
}

pub fn backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    background: [f64; 3],
    grad_color: &RgbImage,
    grad_depth: &ScalarImage,
) -> Result<Vec<GaussianGrad>> {
    backward_with(cloud, camera, background, grad_color, grad_depth, Exec::default())
}

/// Analytic gradients of the compositing chain, given upstream gradients of
/// the loss with respect to the rendered color and depth images.
pub fn backward_with(
    cloud: &GaussianCloud,
    camera: &Camera,
    background: [f64; 3],
    grad_color: &RgbImage,
    grad_depth: &ScalarImage,
    exec: Exec,
) -> Result<Vec<GaussianGrad>> {
    for (what, (w, h)) in [
        ("color gradient", (grad_color.width, grad_color.height)),
        ("depth gradient", (grad_depth.width, grad_depth.height)),
    ] {
        if (w, h) != (camera.width, camera.height) {
            return Err(Error::Shape(format!(
                "{what} is {w}x{h}, camera is {}x{}",
                camera.width, camera.height
            )));
        }
    }
    let prep = Prepared::new(cloud, camera, exec);
    let bg = Vector3::from(background);

    let per_tile = exec.map_range(prep.tiles.len(), |tile| {
        let list = &prep.tiles[tile];
        let mut acc = vec![SplatGrad::default(); list.len()];
        let mut contribs: Vec<Contribution> = Vec::new();
        for (x, y) in prep.tile_pixels(tile) {
            let gc = Vector3::from(*grad_color.get(x, y));
            let gd = *grad_depth.get(x, y);
            if gc == Vector3::zeros() && gd == 0.0 {
                continue;
            }
            contribs.clear();
            let mut t = 1.0;
            for (slot, &k) in list.iter().enumerate() {
                let s = &prep.splats[k as usize];
                if !s.covers(x, y) {
                    continue;
                }
                let (sigma, g, delta) = s.evaluate(x, y);
                if sigma <= 0.0 {
                    continue;
                }
                contribs.push(Contribution {
                    slot,
                    sigma,
                    g,
                    delta,
                    clamped: s.opacity * g >= MAX_SIGMA,
                    t,
                });
                t *= 1.0 - sigma;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            // Contributions behind each splat, starting from the background.
            let mut after_c = bg * t;
            let mut after_d = 0.0;
            for c in contribs.iter().rev() {
                let s: &Splat = &prep.splats[list[c.slot] as usize];
                let w = c.sigma * c.t;
                let a = &mut acc[c.slot];
                a.color += gc * w;
                a.depth += gd * w;
                let one_minus = 1.0 - c.sigma;
                let d_sigma = gc.dot(&(s.color * c.t - after_c / one_minus))
                    + gd * (s.depth * c.t - after_d / one_minus);
                after_c += s.color * w;
                after_d += s.depth * w;
                if c.clamped {
                    continue;
                }
                a.opacity += d_sigma * c.g;
                // σ = α exp(-½ Δᵀ Q Δ), Δ = p - μ.
                let ds = d_sigma * c.sigma;
                a.mean2d += s.conic * c.delta * ds;
                a.conic += c.delta * c.delta.transpose() * (-0.5 * ds);
            }
        }
        acc
    });

    let mut splat_grads = vec![SplatGrad::default(); prep.splats.len()];
    for (tile, acc) in per_tile.into_iter().enumerate() {
        for (slot, g) in acc.into_iter().enumerate() {
            splat_grads[prep.tiles[tile][slot] as usize] += g;
        }
    }

    let chained = exec.map_range(prep.splats.len(), |k| {
        let s = &prep.splats[k];
        (s.src, chain_to_gaussian(camera, &cloud.gaussians()[s.src], s, &splat_grads[k]))
    });
    let mut grads = vec![GaussianGrad::default(); cloud.len()];
    for (src, g) in chained {
        grads[src] = g;
    }
    Ok(grads)
}

fn chain_to_gaussian(camera: &Camera, g: &Gaussian, s: &Splat, sg: &SplatGrad) -> GaussianGrad {
    let w = camera.rotation();
    let t = s.cam_point;
    let j: &Matrix2x3<f64> = &s.jacobian;
    let q = &s.conic;

    // Q = cov2d⁻¹  =>  dL/dcov2d = -Q (dL/dQ) Q.
    let g_cov2d = -(q * sg.conic * q);
    // cov2d = J V Jᵀ + λI with V = W Σ Wᵀ.
    let g_v: Matrix3<f64> = j.transpose() * g_cov2d * j;
    let g_j: Matrix2x3<f64> = (g_cov2d + g_cov2d.transpose()) * j * s.cov_cam;
    let g_sigma3d: Matrix3<f64> = w.transpose() * g_v * w;

    // Σ = M Mᵀ, M = R S.
    let r = rotation_matrix(&g.rotation);
    let m = r * Matrix3::from_diagonal(&g.scale);
    let g_m = (g_sigma3d + g_sigma3d.transpose()) * m;
    let mut scale = Vector3::zeros();
    let mut g_r = Matrix3::zeros();
    for i in 0..3 {
        for k in 0..3 {
            scale[k] += g_m[(i, k)] * r[(i, k)];
            g_r[(i, k)] = g_m[(i, k)] * g.scale[k];
        }
    }

    // Camera-frame point: projection, depth and Jacobian all depend on it.
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_t = Vector3::new(
        sg.mean2d.x * fx * iz,
        sg.mean2d.y * fy * iz,
        -sg.mean2d.x * fx * t.x * iz2 - sg.mean2d.y * fy * t.y * iz2 + sg.depth,
    );
    g_t.x += g_j[(0, 2)] * (-fx * iz2);
    g_t.y += g_j[(1, 2)] * (-fy * iz2);
    g_t.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);

    GaussianGrad {
        mean: w.transpose() * g_t,
        rotation: quaternion_grad(&g.rotation, &g_r),
        scale,
        opacity: sg.opacity,
        color: sg.color,
    }
}

/// Pulls `dL/dR` back through `R(q / |q|)`.
fn quaternion_grad(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let norm = quat_norm(q);
    let [w, x, y, z] = q.map(|v| v / norm);
    let dn = [
        2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]),
        2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)]
            - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]),
        2.0 * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)]
            + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]),
        2.0 * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]),
    ];
    let n = [w, x, y, z];
    let radial: f64 = n.iter().zip(&dn).map(|(a, b)| a * b).sum();
    std::array::from_fn(|i| (dn[i] - n[i] * radial) / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Grid;

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cam = Camera::new(
            "c",
            16.0,
            16.0,
            8.0,
            8.0,
            16,
            16,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap();
        let cloud = GaussianCloud::new(vec![Gaussian::isotropic(
            Vector3::new(0.0, 0.0, 3.0),
            0.3,
            0.6,
            Vector3::new(0.2, 0.4, 0.6),
        )]);
        let grads = backward(
            &cloud,
            &cam,
            [0.0; 3],
            &Grid::filled(16, 16, [0.0; 3]),
            &Grid::filled(16, 16, 0.0),
        )
        .unwrap();
        assert!(grads.iter().all(GaussianGrad::is_zero));
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let cam = Camera::new(
            "c",
            16.0,
            16.0,
            8.0,
            8.0,
            16,
            16,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap();
        let err = backward(
            &GaussianCloud::default(),
            &cam,
            [0.0; 3],
            &Grid::filled(15, 16, [0.0; 3]),
            &Grid::filled(16, 16, 0.0),
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn quaternion_grad_is_tangent() {
        let q = [0.5, 0.5, -0.5, 0.5];
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.7, 0.1, -0.4, 0.9, 0.5, -0.6);
        let d = quaternion_grad(&q, &g);
        let dot: f64 = q.iter().zip(&d).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
    }
}
