//! Point-based volumetric rendering of color and depth.
//!
//! Gaussians are projected with the EWA approximation, sorted globally
//! front-to-back by camera-frame depth, and alpha-composited per pixel:
//!
//! ```text
//! C(x) = Σ c_i σ_i T_i + T_N · bg      D(x) = Σ d_i σ_i T_i
//! σ_i = min(α_i · exp(-½ Δᵀ Σ2d⁻¹ Δ), 0.99)      T_i = Π_{j<i} (1 - σ_j)
//! ```
//!
//! Compositing stops once the transmittance falls below [`MIN_TRANSMITTANCE`].
//! Pixels are grouped into square tiles only to bound the per-pixel candidate
//! lists; every tile keeps the global depth order.

mod backward;

pub use backward::{backward, backward_with, GaussianGrad};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{Grid, RgbImage, ScalarImage};
use crate::scene::{Camera, Gaussian, GaussianCloud};

/// Gaussians at or closer than this camera-frame depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Low-pass term added to the diagonal of every 2D covariance (px²).
pub const LOW_PASS: f64 = 0.3;
/// Upper clamp on per-splat opacity at a pixel.
pub const MAX_SIGMA: f64 = 0.99;
/// Compositing stops once the residual transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Splat footprints are truncated where `α·G` falls below this value.
pub const FOOTPRINT_EPS: f64 = 1e-12;

const TILE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SplattedGaussian {
    pub pixel_mean: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Camera-frame z of the mean.
    pub view_depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// Jacobian of the perspective projection at a camera-frame point.
pub(crate) fn projection_jacobian(camera: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * t.x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * t.y * iz * iz,
    )
}

/// Projects one Gaussian; `None` when its mean lies at or behind the near plane.
pub fn project(camera: &Camera, g: &Gaussian) -> Option<SplattedGaussian> {
    let t = camera.world_to_camera(&g.mean);
    if t.z <= NEAR_PLANE {
        return None;
    }
    let j = projection_jacobian(camera, &t);
    let w = camera.rotation();
    let cov_cam = w * g.covariance() * w.transpose();
    let cov2d = j * cov_cam * j.transpose() + Matrix2::identity() * LOW_PASS;
    Some(SplattedGaussian {
        pixel_mean: camera.project_camera_point(&t),
        cov2d,
        view_depth: t.z,
        opacity: g.opacity,
        color: g.color,
    })
}

#[derive(Debug, Clone)]
pub(crate) struct Splat {
    /// Index into the source cloud.
    pub src: usize,
    pub mean: Vector2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Inclusive pixel ranges `[x0, x1] x [y0, y1]`.
    pub bbox: [usize; 4],
    pub cam_point: Vector3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub jacobian: Matrix2x3<f64>,
}

impl Splat {
    fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.bbox[0] && x <= self.bbox[1] && y >= self.bbox[2] && y <= self.bbox[3]
    }

    /// Returns `(σ, G, clamped)` at the center of pixel `(x, y)`.
    #[inline]
    pub fn evaluate(&self, x: usize, y: usize) -> (f64, f64, Vector2<f64>) {
        let d = Vector2::new(x as f64 + 0.5, y as f64 + 0.5) - self.mean;
        let power = -0.5 * (d.transpose() * self.conic * d)[0];
        let g = power.exp();
        ((self.opacity * g).min(MAX_SIGMA), g, d)
    }
}

fn splat_of(camera: &Camera, src: usize, g: &Gaussian) -> Option<Splat> {
    let t = camera.world_to_camera(&g.mean);
    if t.z <= NEAR_PLANE || g.opacity <= FOOTPRINT_EPS {
        return None;
    }
    let jacobian = projection_jacobian(camera, &t);
    let w = camera.rotation();
    let cov_cam = w * g.covariance() * w.transpose();
    let cov2d = jacobian * cov_cam * jacobian.transpose() + Matrix2::identity() * LOW_PASS;
    let det = cov2d.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = cov2d.try_inverse()?;
    let mean = camera.project_camera_point(&t);
    let k = 2.0 * (g.opacity / FOOTPRINT_EPS).ln();
    let ex = (k * cov2d[(0, 0)]).sqrt();
    let ey = (k * cov2d[(1, 1)]).sqrt();
    let lo_x = (mean.x - ex - 0.5).ceil().max(0.0);
    let hi_x = (mean.x + ex - 0.5).floor();
    let lo_y = (mean.y - ey - 0.5).ceil().max(0.0);
    let hi_y = (mean.y + ey - 0.5).floor();
    if !(hi_x >= lo_x && hi_y >= lo_y && hi_x >= 0.0 && hi_y >= 0.0) {
        return None;
    }
    if lo_x > (camera.width - 1) as f64 || lo_y > (camera.height - 1) as f64 {
        return None;
    }
    let bbox = [
        lo_x as usize,
        (hi_x as usize).min(camera.width - 1),
        lo_y as usize,
        (hi_y as usize).min(camera.height - 1),
    ];
    Some(Splat {
        src,
        mean,
        conic,
        depth: t.z,
        opacity: g.opacity,
        color: g.color,
        bbox,
        cam_point: t,
        cov_cam,
        jacobian,
    })
}

/// Sorted splats binned into tiles.
pub(crate) struct Prepared {
    pub splats: Vec<Splat>,
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub width: usize,
    pub height: usize,
}

impl Prepared {
    pub fn new(cloud: &GaussianCloud, camera: &Camera, exec: Exec) -> Self {
        let mut splats: Vec<Splat> = exec
            .map_range(cloud.len(), |i| splat_of(camera, i, &cloud.gaussians()[i]))
            .into_iter()
            .flatten()
            .collect();
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.src.cmp(&b.src)));
        let tiles_x = camera.width.div_ceil(TILE);
        let tiles_y = camera.height.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (k, s) in splats.iter().enumerate() {
            for ty in s.bbox[2] / TILE..=s.bbox[3] / TILE {
                for tx in s.bbox[0] / TILE..=s.bbox[1] / TILE {
                    tiles[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Self {
            splats,
            tiles,
            tiles_x,
            width: camera.width,
            height: camera.height,
        }
    }

    pub fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let (x0, y0) = (tx * TILE, ty * TILE);
        let (x1, y1) = ((x0 + TILE).min(self.width), (y0 + TILE).min(self.height));
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    /// Walks the splats covering pixel `(x, y)` front to back, calling
    /// `visit(slot, σ, T)` where `slot` indexes the tile list. Returns the
    /// final transmittance.
    #[inline]
    pub fn composite(
        &self,
        list: &[u32],
        x: usize,
        y: usize,
        mut visit: impl FnMut(usize, f64, f64),
    ) -> f64 {
        let mut t = 1.0;
        for (slot, &k) in list.iter().enumerate() {
            let s = &self.splats[k as usize];
            if !s.covers(x, y) {
                continue;
            }
            let (sigma, _, _) = s.evaluate(x, y);
            if sigma <= 0.0 {
                continue;
            }
            visit(slot, sigma, t);
            t *= 1.0 - sigma;
            if t < MIN_TRANSMITTANCE {
                break;
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
    /// Depth of the splat at which transmittance first drops to 0.5 or
    /// below; 0 where it never does.
    pub median_depth: ScalarImage,
}

pub fn render(cloud: &GaussianCloud, camera: &Camera, background: [f64; 3]) -> RenderOutput {
    render_with(cloud, camera, background, Exec::default())
}

pub fn render_with(
    cloud: &GaussianCloud,
    camera: &Camera,
    background: [f64; 3],
    exec: Exec,
) -> RenderOutput {
    let prep = Prepared::new(cloud, camera, exec);
    let per_tile = exec.map_range(prep.tiles.len(), |tile| {
        let list = &prep.tiles[tile];
        prep.tile_pixels(tile)
            .map(|(x, y)| {
                let mut c = Vector3::zeros();
                let mut d = 0.0;
                let mut median = 0.0;
                let t = prep.composite(list, x, y, |slot, sigma, t| {
                    let s = &prep.splats[list[slot] as usize];
                    let w = sigma * t;
                    c += s.color * w;
                    d += s.depth * w;
                    if t > 0.5 && t * (1.0 - sigma) <= 0.5 {
                        median = s.depth;
                    }
                });
                c += Vector3::from(background) * t;
                (x, y, [c.x, c.y, c.z], d, 1.0 - t, median)
            })
            .collect::<Vec<_>>()
    });
    let (w, h) = (camera.width, camera.height);
    let mut out = RenderOutput {
        color: Grid::filled(w, h, [0.0; 3]),
        depth: Grid::filled(w, h, 0.0),
        alpha: Grid::filled(w, h, 0.0),
        median_depth: Grid::filled(w, h, 0.0),
    };
    for (x, y, c, d, a, m) in per_tile.into_iter().flatten() {
        *out.color.get_mut(x, y) = c;
        *out.depth.get_mut(x, y) = d;
        *out.alpha.get_mut(x, y) = a;
        *out.median_depth.get_mut(x, y) = m;
    }
    out
}

/// Composites a per-Gaussian scalar in place of color, with no background.
pub fn render_gaussian_mask(
    cloud: &GaussianCloud,
    values: &[f64],
    camera: &Camera,
) -> Result<ScalarImage> {
    if values.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} gaussians",
            values.len(),
            cloud.len()
        )));
    }
    let prep = Prepared::new(cloud, camera, Exec::default());
    let per_tile = Exec::default().map_range(prep.tiles.len(), |tile| {
        let list = &prep.tiles[tile];
        prep.tile_pixels(tile)
            .map(|(x, y)| {
                let mut v = 0.0;
                prep.composite(list, x, y, |slot, sigma, t| {
                    v += values[prep.splats[list[slot] as usize].src] * sigma * t;
                });
                (x, y, v)
            })
            .collect::<Vec<_>>()
    });
    let mut out = Grid::filled(camera.width, camera.height, 0.0);
    for (x, y, v) in per_tile.into_iter().flatten() {
        *out.get_mut(x, y) = v;
    }
    Ok(out)
}

/// For every Gaussian, sums `w · value(p)` and `w` over all pixels `p`, where
/// `w` is its compositing weight `σ_i T_i` at `p`.
pub fn accumulate_weights(
    cloud: &GaussianCloud,
    camera: &Camera,
    pixel_values: &ScalarImage,
    exec: Exec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if pixel_values.width != camera.width || pixel_values.height != camera.height {
        return Err(Error::Shape(format!(
            "pixel values {}x{} vs camera {}x{}",
            pixel_values.width, pixel_values.height, camera.width, camera.height
        )));
    }
    let prep = Prepared::new(cloud, camera, exec);
    let per_tile = exec.map_range(prep.tiles.len(), |tile| {
        let list = &prep.tiles[tile];
        let mut acc = vec![(0.0, 0.0); list.len()];
        for (x, y) in prep.tile_pixels(tile) {
            let v = *pixel_values.get(x, y);
            prep.composite(list, x, y, |slot, sigma, t| {
                let w = sigma * t;
                acc[slot].0 += w * v;
                acc[slot].1 += w;
            });
        }
        acc
    });
    let mut weighted = vec![0.0; cloud.len()];
    let mut total = vec![0.0; cloud.len()];
    for (tile, acc) in per_tile.into_iter().enumerate() {
        for (slot, (wv, w)) in acc.into_iter().enumerate() {
            let src = prep.splats[prep.tiles[tile][slot] as usize].src;
            weighted[src] += wv;
            total[src] += w;
        }
    }
    Ok((weighted, total))
}
