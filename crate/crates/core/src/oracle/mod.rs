//! Learned 2D priors behind narrow traits, the forward-noising schedule they
//! share, and deterministic stand-ins for tests and offline runs.

pub mod mock;
pub mod remote;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, OracleError, Result};
use crate::image::{RgbImage, ScalarImage, Tensor3};

pub const NUM_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Cumulative noise levels `ᾱ_t` for `t ∈ [0, 1000]`, with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear()
    }
}

impl NoiseSchedule {
    /// Linear betas from `1e-4` at `t = 1` to `2e-2` at `t = 1000`.
    pub fn linear() -> Self {
        let mut alpha_bars = Vec::with_capacity(NUM_TIMESTEPS + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for i in 0..NUM_TIMESTEPS {
            let beta = BETA_START + (BETA_END - BETA_START) * i as f64 / (NUM_TIMESTEPS - 1) as f64;
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        Self { alpha_bars }
    }

    /// Adopts a table reported by a bridge handshake. Accepts either 1000
    /// entries (`t = 1..=1000`) or 1001 entries starting at `ᾱ_0 = 1`.
    pub fn from_alpha_bars(table: &[f64]) -> Result<Self> {
        let mut alpha_bars = match table.len() {
            n if n == NUM_TIMESTEPS => {
                let mut v = vec![1.0];
                v.extend_from_slice(table);
                v
            }
            n if n == NUM_TIMESTEPS + 1 => table.to_vec(),
            n => {
                return Err(Error::Invalid(format!(
                    "alpha_bars table has {n} entries, expected {NUM_TIMESTEPS}"
                )))
            }
        };
        alpha_bars[0] = 1.0;
        if alpha_bars.windows(2).any(|w| !(w[1] < w[0])) || alpha_bars.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Invalid("alpha_bars must be positive and strictly decreasing".into()));
        }
        Ok(Self { alpha_bars })
    }

    pub fn alpha_bar(&self, t: u32) -> Result<f64> {
        self.alpha_bars
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("timestep {t} outside [0, {NUM_TIMESTEPS}]")))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `√ᾱ_t · signal + √(1 − ᾱ_t) · eps`.
pub fn add_noise(signal: &Tensor3, t: u32, eps: &Tensor3, schedule: &NoiseSchedule) -> Result<Tensor3> {
    if signal.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "signal {:?} vs noise {:?}",
            signal.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor3 {
        data: signal.data.iter().zip(&eps.data).map(|(s, e)| a * s + b * e).collect(),
        ..*signal
    })
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a named sub-seed, e.g. `substream(seed, "locate", &[view, tau])`.
pub fn substream(seed: u64, name: &str, parts: &[u64]) -> u64 {
    let mut h = mix(seed);
    for b in name.bytes() {
        h = mix(h ^ u64::from(b));
    }
    for &p in parts {
        h = mix(h ^ p);
    }
    h
}

/// Standard normal tensor drawn from a counter-based stream keyed by `seed`.
pub fn gaussian_noise(seed: u64, channels: usize, height: usize, width: usize) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor3::zeros(channels, height, width);
    for v in &mut t.data {
        *v = StandardNormal.sample(&mut rng);
    }
    t
}

#[derive(Debug, Clone, Copy)]
pub struct EditRequest<'a> {
    pub view: usize,
    /// Original, unedited view `x_v`.
    pub source: &'a RgbImage,
    /// Coarse view `x̃_v` whose noised latent seeds denoising.
    pub coarse: &'a RgbImage,
    pub prompt: &'a str,
    pub start_t: u32,
    pub guidance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseRequest<'a> {
    pub view: usize,
    pub image: &'a RgbImage,
    /// Empty for the unconditional prediction.
    pub prompt: &'a str,
    pub tau: u32,
    /// Seeds `ε`; conditional and unconditional calls share it.
    pub seed: u64,
}

/// Instruction-conditioned image editor.
pub trait Editor: Sync {
    fn edit(&self, req: &EditRequest<'_>) -> Result<RgbImage, OracleError>;
}

/// Noise prediction `ε_θ(z_τ, x, c)` of the editor's denoiser, at latent
/// resolution.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, req: &NoiseRequest<'_>) -> Result<Tensor3, OracleError>;
}

/// Monocular depth estimator returning raw (uncalibrated) disparity.
pub trait DepthEstimator: Sync {
    fn disparity(&self, view: usize, image: &RgbImage) -> Result<ScalarImage, OracleError>;
}

/// Differentiable perceptual distance: returns the distance and its gradient
/// with respect to the first image.
pub trait Perceptual: Sync {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<(f64, RgbImage), OracleError>;
}

/// The full set of priors a pipeline run needs.
#[derive(Clone, Copy)]
pub struct Oracles<'a> {
    pub editor: &'a dyn Editor,
    pub noise: &'a dyn NoisePredictor,
    pub depth: &'a dyn DepthEstimator,
    pub perceptual: Option<&'a dyn Perceptual>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(seed: u64) -> Tensor3 {
        gaussian_noise(seed, 3, 4, 5)
    }

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::linear();
        assert_eq!(s.alpha_bars().len(), 1001);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!((s.alpha_bar(1).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn t_zero_is_identity() {
        let s = NoiseSchedule::linear();
        let x = tensor(1);
        let e = tensor(2);
        assert_eq!(add_noise(&x, 0, &e, &s).unwrap(), x);
    }

    #[test]
    fn t_max_is_mostly_noise() {
        let s = NoiseSchedule::linear();
        // ᾱ_1000 = Π (1 - β_t), recomputed directly in log space.
        let log_ab: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!((s.alpha_bar(1000).unwrap() - log_ab.exp()).abs() < 1e-15);
        let x = tensor(3);
        let e = tensor(4);
        let out = add_noise(&x, 1000, &e, &s).unwrap();
        let num: f64 = out.data.iter().zip(&e.data).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = e.data.iter().map(|b| b * b).sum();
        assert!((num / den).sqrt() < 0.05);
    }

    #[test]
    fn mid_t_matches_formula() {
        let s = NoiseSchedule::linear();
        let x = tensor(5);
        let e = tensor(6);
        let ab = s.alpha_bar(600).unwrap();
        let out = add_noise(&x, 600, &e, &s).unwrap();
        for i in 0..x.data.len() {
            let want = ab.sqrt() * x.data[i] + (1.0 - ab).sqrt() * e.data[i];
            assert!((out.data[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn add_noise_is_linear() {
        let s = NoiseSchedule::linear();
        let (x1, x2, e1, e2) = (tensor(7), tensor(8), tensor(9), tensor(10));
        let sum = |a: &Tensor3, b: &Tensor3| Tensor3 {
            data: a.data.iter().zip(&b.data).map(|(p, q)| p + 2.5 * q).collect(),
            ..*a
        };
        let lhs = add_noise(&sum(&x1, &x2), 300, &sum(&e1, &e2), &s).unwrap();
        let r1 = add_noise(&x1, 300, &e1, &s).unwrap();
        let r2 = add_noise(&x2, 300, &e2, &s).unwrap();
        for i in 0..lhs.data.len() {
            assert!((lhs.data[i] - (r1.data[i] + 2.5 * r2.data[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_and_range_errors() {
        let s = NoiseSchedule::linear();
        let x = tensor(1);
        let e = gaussian_noise(1, 3, 4, 4);
        assert!(matches!(add_noise(&x, 10, &e, &s), Err(Error::Shape(_))));
        assert!(add_noise(&x, 1001, &x, &s).is_err());
    }

    #[test]
    fn handshake_table() {
        let lin = NoiseSchedule::linear();
        let s = NoiseSchedule::from_alpha_bars(&lin.alpha_bars()[1..]).unwrap();
        assert_eq!(s, lin);
        assert!(NoiseSchedule::from_alpha_bars(&[0.5; 1000]).is_err());
        assert!(NoiseSchedule::from_alpha_bars(&[0.5; 10]).is_err());
    }

    #[test]
    fn substreams_are_distinct_and_stable() {
        assert_eq!(substream(1, "locate", &[2, 600]), substream(1, "locate", &[2, 600]));
        assert_ne!(substream(1, "locate", &[2, 600]), substream(1, "locate", &[3, 600]));
        assert_ne!(substream(1, "locate", &[2]), substream(1, "refine", &[2]));
        assert_eq!(tensor(42), tensor(42));
    }
}
