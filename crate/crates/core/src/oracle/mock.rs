//! Deterministic stand-ins for the learned priors.
//!
//! Each mock is driven by per-view specs registered up front. Outputs depend
//! only on the request and the registered specs, so repeated calls are
//! bit-identical.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{
    add_noise, gaussian_noise, DepthEstimator, EditRequest, Editor, NoisePredictor, NoiseRequest,
    NoiseSchedule, Perceptual,
};
use crate::depth_init::surface_depth;
use crate::error::OracleError;
use crate::image::{Grid, RgbImage, ScalarImage, Tensor3};
use crate::render::{render, render_gaussian_mask};
use crate::scene::{Camera, Gaussian, GaussianCloud};

/// Start timestep at which the mock editor reaches its target fully.
pub const FULL_EDIT_T: f64 = 750.0;

#[derive(Debug, Clone)]
pub struct EditSpec {
    pub target: RgbImage,
    pub region: Grid<bool>,
}

/// Blends toward a registered target inside a registered region:
/// `out = coarse + min(1, t / 750) · (target − coarse)` there, `coarse`
/// elsewhere.
#[derive(Debug, Clone, Default)]
pub struct MockEditor {
    specs: BTreeMap<usize, EditSpec>,
}

impl MockEditor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, view: usize, spec: EditSpec) {
        self.specs.insert(view, spec);
    }

    /// Identity editor: every view returns its coarse input.
    pub fn identity(cameras: &[Camera]) -> Self {
        let mut e = Self::new();
        for (v, c) in cameras.iter().enumerate() {
            e.register(
                v,
                EditSpec {
                    target: Grid::filled(c.width, c.height, [0.0; 3]),
                    region: Grid::filled(c.width, c.height, false),
                },
            );
        }
        e
    }
}

impl Editor for MockEditor {
    fn edit(&self, req: &EditRequest<'_>) -> Result<RgbImage, OracleError> {
        let spec = self
            .specs
            .get(&req.view)
            .ok_or_else(|| OracleError::NoSpec(format!("edit of view {}", req.view)))?;
        if !spec.target.same_shape(req.coarse) || !spec.region.same_shape(req.coarse) {
            return Err(OracleError::Protocol(format!(
                "view {}: registered spec does not match image size",
                req.view
            )));
        }
        let f = (f64::from(req.start_t) / FULL_EDIT_T).min(1.0);
        let mut out = req.coarse.clone();
        for (i, px) in out.data.iter_mut().enumerate() {
            if spec.region.data[i] && f > 0.0 {
                let t = spec.target.data[i];
                *px = std::array::from_fn(|c| px[c] + f * (t[c] - px[c]));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct BlobSpec {
    /// Region at image resolution.
    pub region: Grid<bool>,
    pub amplitude: f64,
}

/// Noise predictor whose text-conditioned output differs from the
/// unconditional one by `amplitude` in latent channel 0 inside a blob.
///
/// The latent is an average-pooled encoding of the image (RGB plus their mean),
/// noised to `τ` with `ε` drawn from the request seed. The prediction is that
/// noised latent, so the unconditional output is a seeded pseudo-random
/// tensor and conditional/unconditional calls share it.
#[derive(Debug, Clone)]
pub struct MockNoisePredictor {
    pub latent_factor: usize,
    schedule: NoiseSchedule,
    blobs: BTreeMap<usize, BlobSpec>,
}

pub const MOCK_LATENT_CHANNELS: usize = 4;

impl MockNoisePredictor {
    pub fn new(latent_factor: usize) -> Self {
        Self {
            latent_factor: latent_factor.max(1),
            schedule: NoiseSchedule::linear(),
            blobs: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, view: usize, blob: BlobSpec) {
        self.blobs.insert(view, blob);
    }

    pub fn encode(&self, image: &RgbImage) -> Tensor3 {
        let f = self.latent_factor;
        let (lw, lh) = (image.width.div_ceil(f), image.height.div_ceil(f));
        let mut t = Tensor3::zeros(MOCK_LATENT_CHANNELS, lh, lw);
        for ly in 0..lh {
            for lx in 0..lw {
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                for y in ly * f..((ly + 1) * f).min(image.height) {
                    for x in lx * f..((lx + 1) * f).min(image.width) {
                        let p = image.get(x, y);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                        n += 1.0;
                    }
                }
                let mean = acc.map(|v| v / n);
                for c in 0..3 {
                    let i = t.idx(c, ly, lx);
                    t.data[i] = mean[c];
                }
                let i = t.idx(3, ly, lx);
                t.data[i] = (mean[0] + mean[1] + mean[2]) / 3.0;
            }
        }
        t
    }

    fn latent_in_region(&self, region: &Grid<bool>, lx: usize, ly: usize) -> bool {
        let f = self.latent_factor;
        let x = (lx * f + f / 2).min(region.width - 1);
        let y = (ly * f + f / 2).min(region.height - 1);
        *region.get(x, y)
    }
}

impl NoisePredictor for MockNoisePredictor {
    fn predict_noise(&self, req: &NoiseRequest<'_>) -> Result<Tensor3, OracleError> {
        let latent = self.encode(req.image);
        let (c, h, w) = latent.shape();
        let eps = gaussian_noise(req.seed, c, h, w);
        let mut out = add_noise(&latent, req.tau, &eps, &self.schedule)
            .map_err(|e| OracleError::Protocol(e.to_string()))?;
        if !req.prompt.is_empty() {
            if let Some(blob) = self.blobs.get(&req.view) {
                for ly in 0..h {
                    for lx in 0..w {
                        if self.latent_in_region(&blob.region, lx, ly) {
                            let i = out.idx(0, ly, lx);
                            out.data[i] += blob.amplitude;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct DepthSpec {
    /// Image the unedited disparity belongs to.
    pub reference: RgbImage,
    /// True disparity of the unedited view.
    pub unedited: ScalarImage,
    /// True disparity after the edit; `None` when the edit keeps geometry.
    pub edited: Option<ScalarImage>,
}

/// Returns `(δ_true − b₀) / a₀`, so calibration has to recover `(a₀, b₀)`.
#[derive(Debug, Clone)]
pub struct MockDepth {
    pub a0: f64,
    pub b0: f64,
    specs: BTreeMap<usize, DepthSpec>,
}

impl MockDepth {
    pub fn new(a0: f64, b0: f64) -> Self {
        Self {
            a0,
            b0,
            specs: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, view: usize, spec: DepthSpec) {
        self.specs.insert(view, spec);
    }
}

impl DepthEstimator for MockDepth {
    fn disparity(&self, view: usize, image: &RgbImage) -> Result<ScalarImage, OracleError> {
        let spec = self
            .specs
            .get(&view)
            .ok_or_else(|| OracleError::NoSpec(format!("depth of view {view}")))?;
        let truth = match &spec.edited {
            Some(edited) if *image != spec.reference => edited,
            _ => &spec.unedited,
        };
        Ok(truth.map(|&d| (d - self.b0) / self.a0))
    }
}

/// Mean squared error between 2×2 average-pooled images.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockPerceptual;

impl Perceptual for MockPerceptual {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<(f64, RgbImage), OracleError> {
        if !a.same_shape(b) {
            return Err(OracleError::Protocol("perceptual inputs differ in size".into()));
        }
        let (pw, ph) = (a.width / 2, a.height / 2);
        let mut grad = Grid::filled(a.width, a.height, [0.0; 3]);
        if pw == 0 || ph == 0 {
            return Ok((0.0, grad));
        }
        let n = (pw * ph * 3) as f64;
        let mut value = 0.0;
        for py in 0..ph {
            for px in 0..pw {
                let block = [(0, 0), (1, 0), (0, 1), (1, 1)].map(|(dx, dy)| (2 * px + dx, 2 * py + dy));
                for c in 0..3 {
                    let diff: f64 = block
                        .iter()
                        .map(|&(x, y)| a.get(x, y)[c] - b.get(x, y)[c])
                        .sum::<f64>()
                        / 4.0;
                    value += diff * diff / n;
                    for &(x, y) in &block {
                        grad.get_mut(x, y)[c] += 2.0 * diff / n / 4.0;
                    }
                }
            }
        }
        Ok((value, grad))
    }
}

/// Parameters of the built-in recoloring scenario: Gaussians whose means lie
/// inside a sphere are recolored, and every mock is derived from renders of
/// the source and recolored scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecolorSpec {
    /// Sphere center; defaults to the scene centroid.
    pub center: Option<[f64; 3]>,
    /// Sphere radius; defaults to a quarter of the scene extent.
    pub radius: Option<f64>,
    pub color: [f64; 3],
    /// Affine corruption `(a₀, b₀)` applied by the mock depth estimator.
    pub depth_affine: [f64; 2],
    pub amplitude: f64,
    /// Pixels of dilation around the recolored footprint.
    pub dilate: usize,
    pub latent_factor: usize,
}

impl Default for RecolorSpec {
    fn default() -> Self {
        Self {
            center: None,
            radius: None,
            color: [1.0, 0.1, 0.1],
            depth_affine: [2.5, -0.3],
            amplitude: 1.0,
            dilate: 2,
            latent_factor: 1,
        }
    }
}

pub struct MockScenario {
    pub editor: MockEditor,
    pub noise: MockNoisePredictor,
    pub depth: MockDepth,
    pub perceptual: MockPerceptual,
    /// Ground truth the edit should converge to.
    pub edited_scene: GaussianCloud,
    pub targets: Vec<RgbImage>,
    pub regions: Vec<Grid<bool>>,
}

impl MockScenario {
    pub fn oracles(&self) -> super::Oracles<'_> {
        super::Oracles {
            editor: &self.editor,
            noise: &self.noise,
            depth: &self.depth,
            perceptual: Some(&self.perceptual),
        }
    }
}

/// Minimum compositing weight of the recolored Gaussians for a pixel to count
/// as part of the edited footprint.
pub const FOOTPRINT_WEIGHT: f64 = 2e-3;

/// Weight above which the edited Gaussians are the main content of a pixel.
/// The mock noise predictor only reacts to the prompt there.
pub const BODY_WEIGHT: f64 = 0.3;

pub fn dilate(mask: &Grid<bool>, radius: usize) -> Grid<bool> {
    let r = radius as isize;
    Grid::from_fn(mask.width, mask.height, |x, y| {
        (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0
                    && ny >= 0
                    && (nx as usize) < mask.width
                    && (ny as usize) < mask.height
                    && *mask.get(nx as usize, ny as usize)
            })
        })
    })
}

/// True disparity of a render: inverse surface depth where alpha ≥ 0.5, and
/// half the smallest valid disparity elsewhere.
pub fn render_disparity(depth: &ScalarImage, alpha: &ScalarImage) -> ScalarImage {
    let expected = surface_depth(depth, alpha);
    let valid = |i: usize| expected.valid.data[i];
    let min = (0..depth.data.len())
        .filter(|&i| valid(i))
        .map(|i| 1.0 / expected.values.data[i])
        .fold(f64::INFINITY, f64::min);
    let fill = if min.is_finite() { 0.5 * min } else { 1e-3 };
    Grid {
        width: depth.width,
        height: depth.height,
        data: (0..depth.data.len())
            .map(|i| if valid(i) { 1.0 / expected.values.data[i] } else { fill })
            .collect(),
    }
}

pub fn recolor_scenario(
    scene: &GaussianCloud,
    cameras: &[Camera],
    background: [f64; 3],
    spec: &RecolorSpec,
) -> MockScenario {
    let (centroid, extent) = scene.extent();
    let center = spec.center.map(Vector3::from).unwrap_or(centroid);
    let radius = spec.radius.unwrap_or(0.25 * extent.max(1e-9));
    let selected: Vec<f64> = scene
        .gaussians()
        .iter()
        .map(|g| f64::from(u8::from((g.mean - center).norm() <= radius)))
        .collect();
    let mut edited_scene = scene.clone();
    for (g, &s) in edited_scene.gaussians_mut().iter_mut().zip(&selected) {
        if s > 0.0 {
            g.color = Vector3::from(spec.color);
        }
    }
    let knobs = Knobs {
        depth_affine: spec.depth_affine,
        amplitude: spec.amplitude,
        dilate: spec.dilate,
        latent_factor: spec.latent_factor,
        depth_changes: false,
    };
    build_scenario(scene, edited_scene, &selected, cameras, background, &knobs)
}

/// Parameters of the built-in shape-adding scenario: a cluster of seven
/// Gaussians is inserted around `center`, and the mock depth estimator sees
/// the added geometry in edited images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtrudeSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
    pub depth_affine: [f64; 2],
    pub amplitude: f64,
    pub dilate: usize,
    pub latent_factor: usize,
}

impl Default for ProtrudeSpec {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, -0.4],
            radius: 0.3,
            color: [0.95, 0.8, 0.1],
            depth_affine: [2.5, -0.3],
            amplitude: 1.0,
            dilate: 2,
            latent_factor: 1,
        }
    }
}

pub fn protrude_scenario(
    scene: &GaussianCloud,
    cameras: &[Camera],
    background: [f64; 3],
    spec: &ProtrudeSpec,
) -> MockScenario {
    let c = Vector3::from(spec.center);
    let h = 0.5 * spec.radius;
    let offsets = [
        Vector3::zeros(),
        Vector3::x(),
        -Vector3::x(),
        Vector3::y(),
        -Vector3::y(),
        Vector3::z(),
        -Vector3::z(),
    ];
    let shape: GaussianCloud = offsets
        .iter()
        .map(|o| Gaussian::isotropic(c + o * h, 0.4 * spec.radius, 0.98, Vector3::from(spec.color)))
        .collect();
    let edited_scene = scene.merge(&shape);
    let selected: Vec<f64> = (0..edited_scene.len())
        .map(|i| f64::from(u8::from(i >= scene.len())))
        .collect();
    let knobs = Knobs {
        depth_affine: spec.depth_affine,
        amplitude: spec.amplitude,
        dilate: spec.dilate,
        latent_factor: spec.latent_factor,
        depth_changes: true,
    };
    build_scenario(scene, edited_scene, &selected, cameras, background, &knobs)
}

/// Scenario selection as it appears in a run configuration, tagged by
/// `"kind"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockSpec {
    Recolor(RecolorSpec),
    Protrude(ProtrudeSpec),
}

impl Default for MockSpec {
    fn default() -> Self {
        MockSpec::Recolor(RecolorSpec::default())
    }
}

impl MockSpec {
    pub fn build(&self, scene: &GaussianCloud, cameras: &[Camera], background: [f64; 3]) -> MockScenario {
        match self {
            MockSpec::Recolor(spec) => recolor_scenario(scene, cameras, background, spec),
            MockSpec::Protrude(spec) => protrude_scenario(scene, cameras, background, spec),
        }
    }
}

struct Knobs {
    depth_affine: [f64; 2],
    amplitude: f64,
    dilate: usize,
    latent_factor: usize,
    depth_changes: bool,
}

/// Derives every mock from renders of the source and edited scenes.
/// `selected` weights the Gaussians of `edited_scene` that make up the edit.
fn build_scenario(
    scene: &GaussianCloud,
    edited_scene: GaussianCloud,
    selected: &[f64],
    cameras: &[Camera],
    background: [f64; 3],
    knobs: &Knobs,
) -> MockScenario {
    let mut editor = MockEditor::new();
    let mut noise = MockNoisePredictor::new(knobs.latent_factor);
    let mut depth = MockDepth::new(knobs.depth_affine[0], knobs.depth_affine[1]);
    let mut targets = Vec::with_capacity(cameras.len());
    let mut regions = Vec::with_capacity(cameras.len());
    for (v, cam) in cameras.iter().enumerate() {
        let source = render(scene, cam, background);
        let edited = render(&edited_scene, cam, background);
        let coverage = render_gaussian_mask(&edited_scene, selected, cam).expect("sizes match");
        let region = dilate(&coverage.map(|&w| w >= FOOTPRINT_WEIGHT), knobs.dilate);
        editor.register(
            v,
            EditSpec {
                target: edited.color.clone(),
                region: region.clone(),
            },
        );
        noise.register(
            v,
            BlobSpec {
                region: coverage.map(|&w| w >= BODY_WEIGHT),
                amplitude: knobs.amplitude,
            },
        );
        depth.register(
            v,
            DepthSpec {
                reference: source.color.clone(),
                unedited: render_disparity(&source.median_depth, &source.alpha),
                edited: knobs
                    .depth_changes
                    .then(|| render_disparity(&edited.median_depth, &edited.alpha)),
            },
        );
        targets.push(edited.color);
        regions.push(region);
    }
    MockScenario {
        editor,
        noise,
        depth,
        perceptual: MockPerceptual,
        edited_scene,
        targets,
        regions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req<'a>(coarse: &'a RgbImage, t: u32) -> EditRequest<'a> {
        EditRequest {
            view: 0,
            source: coarse,
            coarse,
            prompt: "p",
            start_t: t,
            guidance: 7.5,
            seed: 0,
        }
    }

    fn editor(region_all: bool) -> MockEditor {
        let mut e = MockEditor::new();
        e.register(
            0,
            EditSpec {
                target: Grid::filled(4, 2, [1.0, 0.0, 0.5]),
                region: Grid::from_fn(4, 2, |x, _| region_all || x < 2),
            },
        );
        e
    }

    #[test]
    fn editor_blend_factors() {
        let coarse = Grid::filled(4, 2, [0.2, 0.4, 0.6]);
        assert_eq!(editor(true).edit(&req(&coarse, 0)).unwrap(), coarse);
        assert_eq!(
            editor(true).edit(&req(&coarse, 750)).unwrap(),
            Grid::filled(4, 2, [1.0, 0.0, 0.5])
        );
        let half = editor(false).edit(&req(&coarse, 375)).unwrap();
        for y in 0..2 {
            for x in 0..4 {
                let p = half.get(x, y);
                if x < 2 {
                    for (c, (a, b)) in [(0.2, 1.0), (0.4, 0.0), (0.6, 0.5)].iter().enumerate() {
                        assert!((p[c] - 0.5 * (a + b)).abs() < 1e-15);
                    }
                } else {
                    assert_eq!(*p, [0.2, 0.4, 0.6]);
                }
            }
        }
    }

    #[test]
    fn editor_without_spec_fails() {
        let coarse = Grid::filled(4, 2, [0.0; 3]);
        let mut r = req(&coarse, 100);
        r.view = 3;
        assert!(matches!(editor(true).edit(&r), Err(OracleError::NoSpec(_))));
    }

    #[test]
    fn noise_predictor_blob_and_determinism() {
        let img = Grid::from_fn(6, 4, |x, y| [x as f64 / 6.0, y as f64 / 4.0, 0.3]);
        let mut m = MockNoisePredictor::new(1);
        m.register(
            0,
            BlobSpec {
                region: Grid::from_fn(6, 4, |x, y| x >= 3 && y < 2),
                amplitude: 2.0,
            },
        );
        let nr = |prompt| NoiseRequest {
            view: 0,
            image: &img,
            prompt,
            tau: 600,
            seed: 99,
        };
        let u1 = m.predict_noise(&nr("")).unwrap();
        let u2 = m.predict_noise(&nr("")).unwrap();
        assert_eq!(u1, u2);
        let c = m.predict_noise(&nr("add a hat")).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let d = c.at(0, y, x) - u1.at(0, y, x);
                let want = if x >= 3 && y < 2 { 2.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
                for ch in 1..4 {
                    assert_eq!(c.at(ch, y, x), u1.at(ch, y, x));
                }
            }
        }
    }

    #[test]
    fn depth_affine_corruption() {
        let truth = Grid::from_fn(3, 3, |x, y| 0.2 + 0.1 * (x + y) as f64);
        let img = Grid::filled(3, 3, [0.5; 3]);
        let mut m = MockDepth::new(1.0, 0.0);
        m.register(
            0,
            DepthSpec {
                reference: img.clone(),
                unedited: truth.clone(),
                edited: None,
            },
        );
        assert_eq!(m.disparity(0, &img).unwrap(), truth);
        let mut m2 = MockDepth::new(2.5, -0.3);
        m2.register(
            0,
            DepthSpec {
                reference: img.clone(),
                unedited: truth.clone(),
                edited: None,
            },
        );
        let d = m2.disparity(0, &img).unwrap();
        for (a, b) in d.data.iter().zip(&truth.data) {
            assert!((a - (b + 0.3) / 2.5).abs() < 1e-15);
        }
        // Monotone map: ordering preserved.
        assert!(d.data.windows(2).zip(truth.data.windows(2)).all(|(a, b)| (a[0] < a[1]) == (b[0] < b[1])));
        assert!(m2.disparity(1, &img).is_err());
    }

    #[test]
    fn depth_switches_on_edited_image() {
        let img = Grid::filled(2, 2, [0.5; 3]);
        let mut m = MockDepth::new(1.0, 0.0);
        m.register(
            0,
            DepthSpec {
                reference: img.clone(),
                unedited: Grid::filled(2, 2, 1.0),
                edited: Some(Grid::filled(2, 2, 2.0)),
            },
        );
        assert_eq!(m.disparity(0, &img).unwrap().data[0], 1.0);
        let other = Grid::filled(2, 2, [0.6; 3]);
        assert_eq!(m.disparity(0, &other).unwrap().data[0], 2.0);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let a = Grid::from_fn(4, 4, |x, y| [0.1 * x as f64, 0.2 * y as f64, 0.3]);
        let b = Grid::from_fn(4, 4, |x, y| [0.05 * y as f64, 0.1 * x as f64, 0.7]);
        let (v, g) = MockPerceptual.distance(&a, &b).unwrap();
        assert!(v > 0.0);
        let h = 1e-6;
        for i in [0usize, 5, 15] {
            for c in 0..3 {
                let mut p = a.clone();
                let mut m = a.clone();
                p.data[i][c] += h;
                m.data[i][c] -= h;
                let fd = (MockPerceptual.distance(&p, &b).unwrap().0
                    - MockPerceptual.distance(&m, &b).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g.data[i][c]).abs() < 1e-8);
            }
        }
        assert_eq!(MockPerceptual.distance(&a, &a).unwrap().0, 0.0);
    }

    #[test]
    fn mock_spec_json_defaults() {
        let spec: MockSpec = serde_json::from_str(r#"{"kind":"protrude","radius":0.2}"#).unwrap();
        let MockSpec::Protrude(p) = &spec else { panic!("{spec:?}") };
        assert_eq!(p.radius, 0.2);
        assert_eq!(p.center, ProtrudeSpec::default().center);
        let back: MockSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<MockSpec>(r#"{"kind":"melt"}"#).is_err());
    }

    #[test]
    fn protrude_scenario_adds_geometry_the_depth_mock_sees() {
        use crate::scene::Gaussian;
        let scene: GaussianCloud = vec![Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.8, 0.99, Vector3::repeat(0.5))]
            .into_iter()
            .collect();
        let cam = Camera::look_at("c", Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 20.0, 20.0, 16, 16)
            .unwrap();
        let sc = MockSpec::Protrude(ProtrudeSpec::default()).build(&scene, std::slice::from_ref(&cam), [0.0; 3]);
        assert_eq!(sc.edited_scene.len(), 8);
        assert_eq!(sc.edited_scene.added().iter().filter(|&&a| a).count(), 7);
        let source = render(&scene, &cam, [0.0; 3]).color;
        let before = sc.depth.disparity(0, &source).unwrap();
        let after = sc.depth.disparity(0, &sc.targets[0]).unwrap();
        let (cx, cy) = (8, 8);
        assert!(sc.regions[0].get(cx, cy));
        assert!(after.get(cx, cy) > before.get(cx, cy));
    }
}
