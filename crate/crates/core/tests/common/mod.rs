//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use gsedit_core::image::{Grid, RgbImage, ScalarImage};
use gsedit_core::render::{project, MAX_SIGMA, MIN_TRANSMITTANCE};
use gsedit_core::scene::{Camera, Gaussian, GaussianCloud};
use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit_quaternion(r: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 {
            return q.map(|v| v / n);
        }
    }
}

/// Camera at distance `dist` from the origin looking at it, slightly off-axis.
pub fn random_camera(r: &mut impl Rng, w: usize, h: usize) -> Camera {
    let theta = r.random_range(-0.6..0.6f64);
    let phi = r.random_range(-0.3..0.3f64);
    let dist = r.random_range(3.0..5.0);
    let eye = Vector3::new(dist * theta.sin() * phi.cos(), dist * phi.sin(), -dist * theta.cos() * phi.cos());
    let f = r.random_range(14.0..24.0);
    Camera::look_at("rand", eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), f, f * r.random_range(0.9..1.1), w, h).unwrap()
}

pub fn random_gaussian(r: &mut impl Rng, opacity: (f64, f64)) -> Gaussian {
    Gaussian {
        mean: Vector3::new(r.random_range(-0.8..0.8), r.random_range(-0.8..0.8), r.random_range(-0.8..0.8)),
        rotation: random_unit_quaternion(r),
        scale: Vector3::new(r.random_range(0.08..0.4), r.random_range(0.08..0.4), r.random_range(0.08..0.4)),
        opacity: r.random_range(opacity.0..opacity.1),
        color: Vector3::new(r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)),
    }
}

pub fn random_scene(r: &mut impl Rng, n: usize, opacity: (f64, f64)) -> GaussianCloud {
    (0..n).map(|_| random_gaussian(r, opacity)).collect()
}

/// Per-pixel compositor: evaluates every projected Gaussian at every pixel
/// center, sorts by depth and composites, with no tiling or footprint culling.
pub fn brute_force_render(cloud: &GaussianCloud, cam: &Camera, bg: [f64; 3]) -> (RgbImage, ScalarImage, ScalarImage) {
    let splats: Vec<_> = cloud.gaussians().iter().enumerate().filter_map(|(i, g)| project(cam, g).map(|s| (i, s))).collect();
    let mut color = Grid::filled(cam.width, cam.height, [0.0; 3]);
    let mut depth = Grid::filled(cam.width, cam.height, 0.0);
    let mut alpha = Grid::filled(cam.width, cam.height, 0.0);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut hits: Vec<(f64, usize, f64, Vector3<f64>)> = splats
                .iter()
                .map(|(i, s)| {
                    let inv = s.cov2d.try_inverse().unwrap();
                    let d = p - s.pixel_mean;
                    let q = d.dot(&(inv * d));
                    let sigma = (s.opacity * (-0.5 * q).exp()).min(MAX_SIGMA);
                    (s.view_depth, *i, sigma, s.color)
                })
                .collect();
            hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut t = 1.0;
            let mut c = Vector3::zeros();
            let mut dd = 0.0;
            for (z, _, sigma, col) in hits {
                c += col * sigma * t;
                dd += z * sigma * t;
                t *= 1.0 - sigma;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            c += Vector3::from(bg) * t;
            *color.get_mut(x, y) = [c.x, c.y, c.z];
            *depth.get_mut(x, y) = dd;
            *alpha.get_mut(x, y) = 1.0 - t;
        }
    }
    (color, depth, alpha)
}

/// Flattened parameter vector used for finite differences:
/// mean(3) rotation(4) scale(3) opacity(1) color(3).
pub const PARAMS: usize = 14;

pub fn get_param(g: &Gaussian, k: usize) -> f64 {
    match k {
        0..=2 => g.mean[k],
        3..=6 => g.rotation[k - 3],
        7..=9 => g.scale[k - 7],
        10 => g.opacity,
        _ => g.color[k - 11],
    }
}

pub fn set_param(g: &mut Gaussian, k: usize, v: f64) {
    match k {
        0..=2 => g.mean[k] = v,
        3..=6 => g.rotation[k - 3] = v,
        7..=9 => g.scale[k - 7] = v,
        10 => g.opacity = v,
        _ => g.color[k - 11] = v,
    }
}

pub fn grad_param(g: &gsedit_core::render::GaussianGrad, k: usize) -> f64 {
    match k {
        0..=2 => g.mean[k],
        3..=6 => g.rotation[k - 3],
        7..=9 => g.scale[k - 7],
        10 => g.opacity,
        _ => g.color[k - 11],
    }
}

/// Central finite differences of `loss` over every parameter of every Gaussian.
pub fn fd_gradients(cloud: &GaussianCloud, h: f64, loss: impl Fn(&GaussianCloud) -> f64) -> Vec<[f64; PARAMS]> {
    (0..cloud.len())
        .map(|i| {
            std::array::from_fn(|k| {
                let mut plus = cloud.clone();
                let mut minus = cloud.clone();
                let v = get_param(&cloud.gaussians()[i], k);
                set_param(&mut plus.gaussians_mut()[i], k, v + h);
                set_param(&mut minus.gaussians_mut()[i], k, v - h);
                (loss(&plus) - loss(&minus)) / (2.0 * h)
            })
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, guard)`.
pub fn guarded_rel_err(a: f64, n: f64, guard: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(guard)
}

/// Eight Gaussians: a four-splat backdrop behind a four-splat object at the
/// origin.
pub fn synthetic_scene() -> GaussianCloud {
    let mut g = Vec::new();
    for (i, (x, y)) in [(-0.55, -0.55), (0.55, -0.55), (-0.55, 0.55), (0.55, 0.55)].into_iter().enumerate() {
        g.push(Gaussian {
            mean: Vector3::new(x, y, 1.2),
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: Vector3::new(0.8, 0.8, 0.05),
            opacity: 0.99,
            color: Vector3::new(0.2 + 0.15 * i as f64, 0.5, 0.7 - 0.1 * i as f64),
        });
    }
    for (i, (x, y, z)) in [(-0.12, -0.1, 0.0), (0.12, -0.1, 0.05), (0.0, 0.13, -0.05), (0.0, 0.0, 0.12)]
        .into_iter()
        .enumerate()
    {
        g.push(Gaussian {
            mean: Vector3::new(x, y, z),
            rotation: {
                let q = [0.9, 0.1 * i as f64, 0.2, -0.1];
                let n = q.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
                q.map(|v| v / n)
            },
            scale: Vector3::new(0.2, 0.16, 0.18),
            opacity: 0.98,
            color: Vector3::new(0.3, 0.75 - 0.1 * i as f64, 0.35),
        });
    }
    GaussianCloud::new(g)
}

/// `n` views on a horizontal arc in front of the origin.
pub fn arc_cameras(n: usize, size: usize) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let theta = -0.45 + 0.9 * i as f64 / (n.max(2) - 1) as f64;
            let eye = Vector3::new(4.0 * theta.sin(), -0.3, -4.0 * theta.cos());
            let f = size as f64 * 1.1;
            Camera::look_at(format!("arc{i}"), eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), f, f, size, size)
                .unwrap()
        })
        .collect()
}

pub fn max_abs_diff_outside(a: &RgbImage, b: &RgbImage, region: &Grid<bool>) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .zip(&region.data)
        .filter(|(_, &r)| !r)
        .flat_map(|((p, q), _)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .fold(0.0, f64::max)
}

/// PSNR over the pixels of `region`, peak 1.
pub fn region_psnr(img: &RgbImage, target: &RgbImage, region: &Grid<bool>) -> f64 {
    let (mut se, mut n) = (0.0, 0.0);
    for ((p, q), &m) in img.data.iter().zip(&target.data).zip(&region.data) {
        if m {
            for c in 0..3 {
                se += (p[c] - q[c]).powi(2);
                n += 1.0;
            }
        }
    }
    if se == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * (se / n).log10()
    }
}

/// PSNR over the union of all view regions, pooled across views.
pub fn pooled_region_psnr(cloud: &GaussianCloud, cams: &[Camera], targets: &[RgbImage], regions: &[Grid<bool>]) -> f64 {
    let (mut se, mut n) = (0.0, 0.0);
    for ((cam, target), region) in cams.iter().zip(targets).zip(regions) {
        let r = gsedit_core::render::render(cloud, cam, [0.0; 3]);
        for ((p, q), &m) in r.color.data.iter().zip(&target.data).zip(&region.data) {
            if m {
                for c in 0..3 {
                    se += (p[c] - q[c]).powi(2);
                    n += 1.0;
                }
            }
        }
    }
    -10.0 * (se / n).log10()
}
