//! Stage 1: per-view relevance masks from noise-prediction differences, lifted
//! to a per-Gaussian mask by weighted voting.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{read_png_mask, write_png_mask, Grid, RgbImage, ScalarImage, Tensor3};
use crate::oracle::{substream, NoisePredictor, NoiseRequest};
use crate::render::accumulate_weights;
use crate::scene::{Camera, GaussianCloud};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationConfig {
    pub tau: u32,
    pub gamma: f64,
    pub filter_sigma: f64,
    pub vote_threshold: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            tau: 600,
            gamma: 0.6,
            filter_sigma: 3.0,
            vote_threshold: 0.6,
        }
    }
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=1000).contains(&self.tau) {
            return Err(Error::Invalid(format!("tau {} outside [1, 1000]", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Invalid(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.filter_sigma >= 0.0) {
            return Err(Error::Invalid(format!("filter_sigma {} is negative", self.filter_sigma)));
        }
        if !(self.vote_threshold > 0.0 && self.vote_threshold < 1.0) {
            return Err(Error::Invalid(format!(
                "vote_threshold {} outside (0, 1)",
                self.vote_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask2D {
    pub values: Grid<bool>,
    pub view_index: usize,
    pub raw_relevance: ScalarImage,
}

impl Mask2D {
    pub fn sum(&self) -> usize {
        self.values.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask3D {
    pub values: Vec<bool>,
    /// Normalized vote per Gaussian, before binarization.
    pub vote_weights: Vec<f64>,
}

impl Mask3D {
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }
}

/// Channel-mean absolute difference, bilinearly upsampled to `width × height`
/// and min-max normalized. A constant difference maps to all zeros.
pub fn relevance_from_noise(cond: &Tensor3, uncond: &Tensor3, width: usize, height: usize) -> Result<ScalarImage> {
    if cond.shape() != uncond.shape() {
        return Err(Error::Shape(format!(
            "conditional {:?} vs unconditional {:?}",
            cond.shape(),
            uncond.shape()
        )));
    }
    let (c, lh, lw) = cond.shape();
    if c == 0 || lh == 0 || lw == 0 {
        return Err(Error::Shape(format!("empty noise tensor {:?}", cond.shape())));
    }
    let latent = Grid::from_fn(lw, lh, |x, y| {
        (0..c).map(|k| (cond.at(k, y, x) - uncond.at(k, y, x)).abs()).sum::<f64>() / c as f64
    });
    let up = upsample_bilinear(&latent, width, height);
    let (lo, hi) = up
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    Ok(up.map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 }))
}

/// Half-pixel-centered bilinear resampling with edge clamping.
pub fn upsample_bilinear(src: &ScalarImage, width: usize, height: usize) -> ScalarImage {
    let coord = |dst: usize, dst_n: usize, src_n: usize| {
        let s = ((dst as f64 + 0.5) * src_n as f64 / dst_n as f64 - 0.5).clamp(0.0, (src_n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_n - 1);
        (i0, i1, s - i0 as f64)
    };
    Grid::from_fn(width, height, |x, y| {
        let (x0, x1, fx) = coord(x, width, src.width);
        let (y0, y1, fy) = coord(y, height, src.height);
        let top = src.get(x0, y0) * (1.0 - fx) + src.get(x1, y0) * fx;
        let bottom = src.get(x0, y1) * (1.0 - fx) + src.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Separable normalized Gaussian blur truncated at 3σ, replicating edges.
pub fn gaussian_blur(img: &ScalarImage, sigma: f64) -> ScalarImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (w, h) = (img.width as isize, img.height as isize);
    let pass = |src: &ScalarImage, horizontal: bool| {
        Grid::from_fn(src.width, src.height, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| {
                    let o = k as isize - r;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, w - 1), y as isize)
                    } else {
                        (x as isize, (y as isize + o).clamp(0, h - 1))
                    };
                    kv * src.get(sx as usize, sy as usize)
                })
                .sum()
        })
    };
    pass(&pass(img, true), false)
}

/// Slack on the threshold comparison, absorbing kernel-sum rounding.
pub const THRESHOLD_SLACK: f64 = 1e-12;

pub fn smooth_and_threshold(relevance: &ScalarImage, cfg: &LocalizationConfig, view_index: usize) -> Mask2D {
    let blurred = gaussian_blur(relevance, cfg.filter_sigma);
    Mask2D {
        values: blurred.map(|&v| v >= cfg.gamma - THRESHOLD_SLACK),
        view_index,
        raw_relevance: relevance.clone(),
    }
}

pub fn locate_2d(
    view: usize,
    image: &RgbImage,
    prompt: &str,
    noise: &dyn NoisePredictor,
    cfg: &LocalizationConfig,
    seed: u64,
) -> Result<Mask2D> {
    let eps_seed = substream(seed, "locate", &[view as u64, u64::from(cfg.tau)]);
    let request = |prompt| NoiseRequest {
        view,
        image,
        prompt,
        tau: cfg.tau,
        seed: eps_seed,
    };
    let oracle_err = |source| Error::Oracle { view, source };
    let cond = noise.predict_noise(&request(prompt)).map_err(oracle_err)?;
    let uncond = noise.predict_noise(&request("")).map_err(oracle_err)?;
    let relevance = relevance_from_noise(&cond, &uncond, image.width, image.height)?;
    Ok(smooth_and_threshold(&relevance, cfg, view))
}

/// Runs [`locate_2d`] for every view, in view order.
pub fn locate_views(
    images: &[RgbImage],
    prompt: &str,
    noise: &dyn NoisePredictor,
    cfg: &LocalizationConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Mask2D>> {
    let views: Vec<(usize, &RgbImage)> = images.iter().enumerate().collect();
    exec.map(&views, |&(v, img)| locate_2d(v, img, prompt, noise, cfg, seed))
        .into_iter()
        .collect()
}

pub fn inverse_render_masks(
    cloud: &GaussianCloud,
    cameras: &[Camera],
    masks: &[Mask2D],
    cfg: &LocalizationConfig,
    exec: Exec,
) -> Result<Mask3D> {
    if masks.is_empty() {
        return Err(Error::Invalid("inverse rendering needs at least one mask".into()));
    }
    let mut weighted = vec![0.0; cloud.len()];
    let mut total = vec![0.0; cloud.len()];
    for mask in masks {
        let camera = cameras.get(mask.view_index).ok_or_else(|| {
            Error::Invalid(format!("mask for view {} but only {} cameras", mask.view_index, cameras.len()))
        })?;
        let values = mask.values.map(|&b| f64::from(u8::from(b)));
        let (wv, w) = accumulate_weights(cloud, camera, &values, exec)?;
        for i in 0..cloud.len() {
            weighted[i] += wv[i];
            total[i] += w[i];
        }
    }
    let vote_weights: Vec<f64> = weighted
        .iter()
        .zip(&total)
        .map(|(&a, &t)| if t > 0.0 { (a / t).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    Ok(Mask3D {
        values: vote_weights.iter().map(|&v| v >= cfg.vote_threshold).collect(),
        vote_weights,
    })
}

/// View with the largest mask area; ties go to the lowest index.
pub fn select_frontal(masks: &[Mask2D]) -> Result<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, m) in masks.iter().enumerate() {
        let s = m.sum();
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    match best {
        Some((i, s)) if s > 0 => Ok(masks[i].view_index),
        _ => Err(Error::LocalizationFailed),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskSidecar {
    view_index: usize,
    gamma: f64,
    tau: u32,
}

/// Writes `<stem>.png` and `<stem>.json`.
pub fn save_mask_2d(mask: &Mask2D, cfg: &LocalizationConfig, stem: &Path) -> Result<()> {
    write_png_mask(&mask.values, stem.with_extension("png"))?;
    let sidecar = MaskSidecar {
        view_index: mask.view_index,
        gamma: cfg.gamma,
        tau: cfg.tau,
    };
    let path = stem.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Reads a mask saved by [`save_mask_2d`]. The raw relevance is not persisted
/// and comes back as zeros.
pub fn load_mask_2d(stem: &Path) -> Result<(Mask2D, f64, u32)> {
    let values = read_png_mask(stem.with_extension("png"))?;
    let path = stem.with_extension("json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let s: MaskSidecar = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let raw_relevance = Grid::filled(values.width, values.height, 0.0);
    Ok((
        Mask2D {
            values,
            view_index: s.view_index,
            raw_relevance,
        },
        s.gamma,
        s.tau,
    ))
}

/// `u64` little-endian count followed by one byte per Gaussian.
pub fn write_mask_3d(mask: &Mask3D, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(&(mask.values.len() as u64).to_le_bytes())?;
    let bytes: Vec<u8> = mask.values.iter().map(|&b| u8::from(b)).collect();
    w.write_all(&bytes)
}

pub fn read_mask_3d(mut r: impl Read) -> Result<Vec<bool>> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(|e| Error::Format(format!("mask header: {e}")))?;
    let n = usize::try_from(u64::from_le_bytes(head)).map_err(|_| Error::Format("mask count overflows".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Format(format!("mask body: {e}")))?;
    if bytes.len() != n {
        return Err(Error::Format(format!("mask declares {n} entries, holds {}", bytes.len())));
    }
    bytes
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("mask byte {other} is not 0 or 1"))),
        })
        .collect()
}
