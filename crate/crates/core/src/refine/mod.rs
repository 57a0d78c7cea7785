//! Stage 3: conditional refinement of frontal and adjacent views, and
//! fine-tuning of the whole cloud against the refined images.

mod optim;
pub mod pipeline;

pub use optim::{finetune, FinetuneJob, FinetuneReport, OptimizerConfig};
pub use pipeline::{
    init_stage, locate_stage, run_pipeline, CycleConfig, Initialized, Localized, PipelineConfig,
    PipelineOptions, PipelineOutput, PipelineState, StageTimings,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::oracle::{EditRequest, Editor, Perceptual};
use crate::scene::Camera;

/// The `m` views whose camera centers are closest to the frontal one, nearest
/// first, ties by index.
pub fn select_adjacent(cameras: &[Camera], frontal: usize, m: usize) -> Result<Vec<usize>> {
    if frontal >= cameras.len() {
        return Err(Error::Invalid(format!(
            "frontal view {frontal} out of range for {} cameras",
            cameras.len()
        )));
    }
    if m == 0 || m >= cameras.len() {
        return Err(Error::Invalid(format!(
            "cannot select {m} adjacent views among {} cameras",
            cameras.len()
        )));
    }
    let p = cameras[frontal].position();
    let mut others: Vec<(f64, usize)> = cameras
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != frontal)
        .map(|(i, c)| ((c.position() - p).norm(), i))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(others.into_iter().take(m).map(|(_, i)| i).collect())
}

pub struct RefineRequest<'a> {
    pub view: usize,
    pub original: &'a RgbImage,
    pub coarse: &'a RgbImage,
    pub prompt: &'a str,
    pub start_t: u32,
    pub guidance: f64,
    pub seed: u64,
}

/// Edits the coarse render of a view, conditioned on its original. A start
/// timestep of 0 means no denoising, so the coarse image comes back as is.
pub fn refine_view(req: &RefineRequest<'_>, editor: &dyn Editor) -> Result<RgbImage> {
    req.original.check_shape(req.coarse, "coarse view")?;
    if req.start_t == 0 {
        return Ok(req.coarse.clone());
    }
    editor
        .edit(&EditRequest {
            view: req.view,
            source: req.original,
            coarse: req.coarse,
            prompt: req.prompt,
            start_t: req.start_t,
            guidance: req.guidance,
            seed: req.seed,
        })
        .map_err(|source| Error::Oracle { view: req.view, source })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditedView {
    pub view_index: usize,
    pub original: RgbImage,
    pub coarse: RgbImage,
    pub refined: RgbImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            perceptual: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1 >= 0.0 && self.perceptual >= 0.0) || self.l1 + self.perceptual <= 0.0 {
            return Err(Error::Invalid(format!(
                "loss weights must be non-negative and not both zero, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
pub struct LossConfig<'a> {
    pub weights: LossWeights,
    /// Without an oracle the perceptual term is dropped.
    pub perceptual: Option<&'a dyn Perceptual>,
}
