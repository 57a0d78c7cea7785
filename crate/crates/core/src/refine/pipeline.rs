use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::FinetuneJob;
use super::{finetune, refine_view, select_adjacent, EditedView, LossConfig, LossWeights, OptimizerConfig, RefineRequest};
use crate::depth_init::{initialize, Calibration, FrontalView};
use crate::error::{Error, Result, Stage};
use crate::exec::Exec;
use crate::image::{read_pfm_rgb, write_pfm_rgb, write_png_rgb, RgbImage};
use crate::localize::{
    inverse_render_masks, locate_views, save_mask_2d, select_frontal, write_mask_3d, LocalizationConfig, Mask2D,
    Mask3D,
};
use crate::oracle::{substream, Oracles};
use crate::render::{render_with, RenderOutput};
use crate::scene::ply::{load_ply, quantize, save_ply};
use crate::scene::{Camera, GaussianCloud};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    pub m: usize,
    pub start_t: u32,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub prompt: String,
    pub gamma: f64,
    pub tau: u32,
    pub filter_sigma: f64,
    pub vote_threshold: f64,
    pub cycles: Vec<CycleConfig>,
    pub guidance_w: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub background: [f64; 3],
    /// Start timestep of the first frontal edit.
    pub initial_t: u32,
    pub use_depth_init: bool,
    pub init_stride: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let loc = LocalizationConfig::default();
        Self {
            prompt: String::new(),
            gamma: loc.gamma,
            tau: loc.tau,
            filter_sigma: loc.filter_sigma,
            vote_threshold: loc.vote_threshold,
            cycles: [750, 500, 250]
                .into_iter()
                .map(|start_t| CycleConfig {
                    m: 20,
                    start_t,
                    iters: 500,
                })
                .collect(),
            guidance_w: 7.5,
            seed: 0,
            loss: LossWeights::default(),
            background: [0.0; 3],
            initial_t: 1000,
            use_depth_init: true,
            init_stride: 1,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn localization(&self) -> LocalizationConfig {
        LocalizationConfig {
            tau: self.tau,
            gamma: self.gamma,
            filter_sigma: self.filter_sigma,
            vote_threshold: self.vote_threshold,
        }
    }

    pub fn total_iters(&self) -> usize {
        self.cycles.iter().map(|c| c.iters).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.localization().validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.cycles.is_empty() {
            return Err(Error::Invalid("at least one refinement cycle is required".into()));
        }
        for (k, c) in self.cycles.iter().enumerate() {
            if c.m == 0 || c.iters == 0 || c.start_t > 1000 {
                return Err(Error::Invalid(format!(
                    "cycle {k}: need m ≥ 1, iters ≥ 1 and start_t ≤ 1000, got {c:?}"
                )));
            }
        }
        if self.cycles.windows(2).any(|w| w[1].start_t > w[0].start_t) {
            return Err(Error::Invalid("cycle start timesteps must be non-increasing".into()));
        }
        if self.initial_t > 1000 {
            return Err(Error::Invalid(format!("initial_t {} exceeds 1000", self.initial_t)));
        }
        if !self.guidance_w.is_finite() || self.background.iter().any(|b| !b.is_finite()) {
            return Err(Error::Invalid("guidance and background must be finite".into()));
        }
        Ok(())
    }
}

/// Everything needed to continue a run after a completed cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    pub cloud: GaussianCloud,
    pub cycles_completed: usize,
    pub iterations_done: usize,
    pub v_first: usize,
    pub mask_sums: Vec<usize>,
    pub frontal_history: Vec<usize>,
    /// Latest coarse and refined image per edited view.
    pub views: BTreeMap<usize, (RgbImage, RgbImage)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    cycle_completed: usize,
    iterations_done: usize,
    v_first: usize,
    mask_sums: Vec<usize>,
    frontal_history: Vec<usize>,
    edited_views: Vec<usize>,
}

fn view_file(dir: &Path, kind: &str, v: usize) -> PathBuf {
    dir.join(format!("{kind}_{v:04}.pfm"))
}

impl PipelineState {
    /// Writes `scene.ply`, `state.json` and one PFM per stored image.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_ply(&self.cloud, dir.join("scene.ply"))?;
        for (&v, (coarse, refined)) in &self.views {
            write_pfm_rgb(coarse, view_file(dir, "coarse", v))?;
            write_pfm_rgb(refined, view_file(dir, "refined", v))?;
        }
        let state = StateFile {
            cycle_completed: self.cycles_completed,
            iterations_done: self.iterations_done,
            v_first: self.v_first,
            mask_sums: self.mask_sums.clone(),
            frontal_history: self.frontal_history.clone(),
            edited_views: self.views.keys().copied().collect(),
        };
        let path = dir.join("state.json");
        let text = serde_json::to_string_pretty(&state).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("state.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let s: StateFile =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut views = BTreeMap::new();
        for v in s.edited_views {
            views.insert(
                v,
                (
                    read_pfm_rgb(view_file(dir, "coarse", v))?,
                    read_pfm_rgb(view_file(dir, "refined", v))?,
                ),
            );
        }
        Ok(Self {
            cloud: load_ply(dir.join("scene.ply"))?,
            cycles_completed: s.cycle_completed,
            iterations_done: s.iterations_done,
            v_first: s.v_first,
            mask_sums: s.mask_sums,
            frontal_history: s.frontal_history,
            views,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub locate: f64,
    pub init: f64,
    pub refine: f64,
}

#[derive(Default)]
pub struct PipelineOptions<'a> {
    pub exec: Exec,
    /// Run directory for masks/, coarse/, refined/ and checkpoints/.
    pub artifacts: Option<PathBuf>,
    pub resume: Option<PipelineState>,
    /// Called with the global iteration count: once before the first cycle
    /// and after every optimizer step.
    pub observer: Option<&'a mut dyn FnMut(usize, &GaussianCloud)>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub cloud: GaussianCloud,
    pub state: PipelineState,
    /// Absent when resuming.
    pub masks: Option<Vec<Mask2D>>,
    pub mask3d: Option<Mask3D>,
    pub calibration: Option<Calibration>,
    pub added: usize,
    pub skipped: usize,
    pub losses: Vec<f64>,
    pub timings: StageTimings,
}

/// Rounds every channel through `f32`, the precision of stored images.
fn snap(img: RgbImage) -> RgbImage {
    img.map(|p| p.map(|c| f64::from(c as f32)))
}

fn write_png(dir: &Path, name: &str, img: &RgbImage) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png_rgb(img, dir.join(name))
}

pub struct Localized {
    pub masks: Vec<Mask2D>,
    pub mask3d: Mask3D,
    pub frontal: usize,
}

/// Localization over the original renders, with mask files written under
/// `artifacts/masks` when a run directory is given.
pub fn locate_stage(
    scene: &GaussianCloud,
    cameras: &[Camera],
    images: &[RgbImage],
    cfg: &PipelineConfig,
    oracles: Oracles<'_>,
    exec: Exec,
    artifacts: Option<&Path>,
) -> Result<Localized> {
    let loc = cfg.localization();
    (|| {
        let masks = locate_views(images, &cfg.prompt, oracles.noise, &loc, cfg.seed, exec)?;
        let mask3d = inverse_render_masks(scene, cameras, &masks, &loc, exec)?;
        if let Some(dir) = artifacts {
            let mdir = dir.join("masks");
            std::fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
            for m in &masks {
                save_mask_2d(m, &loc, &mdir.join(format!("view_{:04}", m.view_index)))?;
            }
            let path = mdir.join("mask3d.bin");
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_mask_3d(&mask3d, std::io::BufWriter::new(file)).map_err(|e| Error::io(&path, e))?;
        }
        let frontal = select_frontal(&masks)?;
        Ok(Localized { masks, mask3d, frontal })
    })()
    .map_err(|e: Error| e.in_stage(Stage::Locate))
}

pub struct Initialized {
    /// State before the first cycle: the merged cloud and the frontal edit.
    pub state: PipelineState,
    pub calibration: Option<Calibration>,
    pub added: usize,
    pub skipped: usize,
}

/// Edits the frontal view from its original render and, unless disabled,
/// merges the depth-initialized Gaussians into the scene.
pub fn init_stage(
    scene: &GaussianCloud,
    cameras: &[Camera],
    originals: &[RenderOutput],
    masks: &[Mask2D],
    frontal: usize,
    cfg: &PipelineConfig,
    oracles: Oracles<'_>,
) -> Result<Initialized> {
    (|| {
        if masks.len() != cameras.len() || originals.len() != cameras.len() || frontal >= cameras.len() {
            return Err(Error::Invalid(format!(
                "{} masks and {} renders for {} cameras, frontal view {frontal}",
                masks.len(),
                originals.len(),
                cameras.len()
            )));
        }
        let orig = &originals[frontal];
        let edited = snap(refine_view(
            &RefineRequest {
                view: frontal,
                original: &orig.color,
                coarse: &orig.color,
                prompt: &cfg.prompt,
                start_t: cfg.initial_t,
                guidance: cfg.guidance_w,
                seed: substream(cfg.seed, "init", &[frontal as u64]),
            },
            oracles.editor,
        )?);
        let mut out = Initialized {
            state: PipelineState {
                cloud: scene.clone(),
                cycles_completed: 0,
                iterations_done: 0,
                v_first: frontal,
                mask_sums: masks.iter().map(Mask2D::sum).collect(),
                frontal_history: Vec::new(),
                views: BTreeMap::new(),
            },
            calibration: None,
            added: 0,
            skipped: 0,
        };
        if cfg.use_depth_init {
            let init = initialize(
                &FrontalView {
                    view: frontal,
                    camera: &cameras[frontal],
                    unedited_image: &orig.color,
                    edited_image: &edited,
                    mask: &masks[frontal],
                    rendered_depth: &orig.median_depth,
                    rendered_alpha: &orig.alpha,
                },
                oracles.depth,
                cfg.init_stride,
            )?;
            out.calibration = Some(init.calibration);
            out.added = init.delta.cloud.len();
            out.skipped = init.delta.skipped;
            out.state.cloud = scene.merge(&init.delta.cloud);
        }
        out.state.cloud = quantize(&out.state.cloud);
        out.state.views.insert(frontal, (orig.color.clone(), edited));
        Ok(out)
    })()
    .map_err(|e: Error| e.in_stage(Stage::Init))
}

pub fn run_pipeline(
    scene: &GaussianCloud,
    cameras: &[Camera],
    cfg: &PipelineConfig,
    oracles: Oracles<'_>,
    mut opts: PipelineOptions<'_>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    scene.validate()?;
    if cameras.is_empty() {
        return Err(Error::Invalid("no cameras".into()));
    }
    let exec = opts.exec;
    let originals: Vec<RenderOutput> = exec.map(cameras, |c| render_with(scene, c, cfg.background, exec));
    let mut timings = StageTimings::default();
    let (mut out_masks, mut out_mask3d, mut calibration) = (None, None, None);
    let (mut added, mut skipped) = (0, 0);

    let mut state = match opts.resume.take() {
        Some(s) => {
            if s.mask_sums.len() != cameras.len() || s.cycles_completed > cfg.cycles.len() {
                return Err(Error::Invalid("checkpoint does not match this run".into()));
            }
            s
        }
        None => {
            let t0 = Instant::now();
            let images: Vec<RgbImage> = originals.iter().map(|o| o.color.clone()).collect();
            let loc = locate_stage(scene, cameras, &images, cfg, oracles, exec, opts.artifacts.as_deref())?;
            timings.locate = t0.elapsed().as_secs_f64();

            let t0 = Instant::now();
            let init = init_stage(scene, cameras, &originals, &loc.masks, loc.frontal, cfg, oracles)?;
            timings.init = t0.elapsed().as_secs_f64();
            calibration = init.calibration;
            added = init.added;
            skipped = init.skipped;
            out_masks = Some(loc.masks);
            out_mask3d = Some(loc.mask3d);
            init.state
        }
    };

    if let Some(obs) = opts.observer.as_deref_mut() {
        obs(state.iterations_done, &state.cloud);
    }

    let t0 = Instant::now();
    let mut losses = Vec::new();
    let max_sum = state.mask_sums.iter().copied().max().unwrap_or(0);
    for (k, cycle) in cfg.cycles.iter().enumerate().skip(state.cycles_completed) {
        let step = (|| {
            let frontal = if k == 0 {
                state.v_first
            } else {
                let candidates: Vec<usize> = state
                    .views
                    .keys()
                    .copied()
                    .filter(|&v| 2 * state.mask_sums[v] > max_sum)
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "frontal", &[k as u64]));
                if candidates.is_empty() {
                    state.v_first
                } else {
                    candidates[rng.random_range(0..candidates.len())]
                }
            };
            let m = cycle.m.min(cameras.len() - 1);
            let mut targets = vec![frontal];
            if m > 0 {
                targets.extend(select_adjacent(cameras, frontal, m)?);
            }
            let refined: Vec<Result<(usize, RgbImage, RgbImage)>> = exec.map(&targets, |&v| {
                let coarse = snap(render_with(&state.cloud, &cameras[v], cfg.background, exec).color);
                let refined = snap(refine_view(
                    &RefineRequest {
                        view: v,
                        original: &originals[v].color,
                        coarse: &coarse,
                        prompt: &cfg.prompt,
                        start_t: cycle.start_t,
                        guidance: cfg.guidance_w,
                        seed: substream(cfg.seed, "refine", &[k as u64, v as u64]),
                    },
                    oracles.editor,
                )?);
                Ok((v, coarse, refined))
            });
            for r in refined {
                let (v, coarse, refined) = r?;
                if let Some(dir) = &opts.artifacts {
                    write_png(&dir.join("coarse"), &format!("cycle{k}_view_{v:04}.png"), &coarse)?;
                    write_png(&dir.join("refined"), &format!("cycle{k}_view_{v:04}.png"), &refined)?;
                }
                state.views.insert(v, (coarse, refined));
            }

            let edited: Vec<EditedView> = state
                .views
                .iter()
                .map(|(&v, (coarse, refined))| EditedView {
                    view_index: v,
                    original: originals[v].color.clone(),
                    coarse: coarse.clone(),
                    refined: refined.clone(),
                })
                .collect();
            let job = FinetuneJob {
                views: &edited,
                cameras,
                background: cfg.background,
                iters: cycle.iters,
                loss: LossConfig {
                    weights: cfg.loss,
                    perceptual: oracles.perceptual,
                },
                optimizer: cfg.optimizer,
                first_iteration: state.iterations_done,
                exec,
            };
            let (cloud, report) = finetune(&state.cloud, &job, opts.observer.as_deref_mut())?;
            state.cloud = quantize(&cloud);
            state.iterations_done += cycle.iters;
            state.cycles_completed = k + 1;
            state.frontal_history.push(frontal);
            losses.extend(report.losses);
            if let Some(dir) = &opts.artifacts {
                state.save(&dir.join("checkpoints").join(format!("cycle_{k}")))?;
            }
            Ok(())
        })();
        step.map_err(|e: Error| e.in_stage(Stage::Refine))?;
    }
    timings.refine = t0.elapsed().as_secs_f64();

    Ok(PipelineOutput {
        cloud: state.cloud.clone(),
        state,
        masks: out_masks,
        mask3d: out_mask3d,
        calibration,
        added,
        skipped,
        losses,
        timings,
    })
}
