use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{EditedView, LossConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::Grid;
use crate::render::{backward_with, render_with};
use crate::scene::ply::{logit, sigmoid};
use crate::scene::{Camera, Gaussian, GaussianCloud};

/// Adam settings. The mean rate is multiplied by the scene extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr_mean: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_mean: 1.6e-4,
            lr_color: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_mean, self.lr_color, self.lr_opacity, self.lr_scale, self.lr_rotation];
        let ok = rates.iter().all(|r| r.is_finite() && *r >= 0.0)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps.is_finite()
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Invalid(format!(
                "learning rates must be finite and non-negative, betas in [0, 1), eps positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-Gaussian parameters in optimization space: mean, raw quaternion, log
/// scale, opacity logit and color.
const DIM: usize = 14;

fn to_raw(g: &Gaussian) -> [f64; DIM] {
    let mut p = [0.0; DIM];
    p[0..3].copy_from_slice(g.mean.as_slice());
    p[3..7].copy_from_slice(&g.rotation);
    for k in 0..3 {
        p[7 + k] = g.scale[k].ln();
    }
    p[10] = logit(g.opacity);
    p[11..14].copy_from_slice(g.color.as_slice());
    p
}

fn from_raw(p: &[f64; DIM]) -> Gaussian {
    Gaussian {
        mean: Vector3::new(p[0], p[1], p[2]),
        rotation: [p[3], p[4], p[5], p[6]],
        scale: Vector3::new(p[7].exp(), p[8].exp(), p[9].exp()),
        opacity: sigmoid(p[10]),
        color: Vector3::new(p[11], p[12], p[13]),
    }
}

struct Adam {
    lr: [f64; DIM],
    cfg: OptimizerConfig,
    m: Vec<[f64; DIM]>,
    v: Vec<[f64; DIM]>,
    step: i32,
}

impl Adam {
    fn new(n: usize, cfg: OptimizerConfig, extent: f64) -> Self {
        let mut lr = [0.0; DIM];
        lr[0..3].fill(cfg.lr_mean * extent);
        lr[3..7].fill(cfg.lr_rotation);
        lr[7..10].fill(cfg.lr_scale);
        lr[10] = cfg.lr_opacity;
        lr[11..14].fill(cfg.lr_color);
        Self {
            lr,
            cfg,
            m: vec![[0.0; DIM]; n],
            v: vec![[0.0; DIM]; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [[f64; DIM]], grads: &[[f64; DIM]]) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for k in 0..DIM {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= self.lr[k] * mh / (vh.sqrt() + self.cfg.eps);
            }
            for c in &mut p[11..14] {
                *c = c.clamp(0.0, 1.0);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneReport {
    /// Total loss per iteration.
    pub losses: Vec<f64>,
}

pub struct FinetuneJob<'a> {
    pub views: &'a [EditedView],
    pub cameras: &'a [Camera],
    pub background: [f64; 3],
    pub iters: usize,
    pub loss: LossConfig<'a>,
    pub optimizer: OptimizerConfig,
    /// Offset added to iteration indices in errors and observer calls.
    pub first_iteration: usize,
    pub exec: Exec,
}

/// Fits every parameter of every Gaussian to the refined views, visiting
/// views round-robin. The Gaussian count never changes.
pub fn finetune(
    cloud: &GaussianCloud,
    job: &FinetuneJob<'_>,
    mut observer: Option<&mut (dyn FnMut(usize, &GaussianCloud) + '_)>,
) -> Result<(GaussianCloud, FinetuneReport)> {
    if job.views.is_empty() {
        return Err(Error::Invalid("fine-tuning needs at least one edited view".into()));
    }
    job.loss.weights.validate()?;
    for v in job.views {
        let cam = job.cameras.get(v.view_index).ok_or_else(|| {
            Error::Invalid(format!("edited view {} has no camera", v.view_index))
        })?;
        if (v.refined.width, v.refined.height) != (cam.width, cam.height) {
            return Err(Error::Shape(format!(
                "refined view {} is {}x{}, camera is {}x{}",
                v.view_index, v.refined.width, v.refined.height, cam.width, cam.height
            )));
        }
    }
    let (_, extent) = cloud.extent();
    let mut params: Vec<[f64; DIM]> = cloud.gaussians().iter().map(to_raw).collect();
    let mut adam = Adam::new(params.len(), job.optimizer, extent.max(1e-6));
    let mut current = cloud.clone();
    let mut report = FinetuneReport::default();
    let perceptual_weight = if job.loss.perceptual.is_some() {
        job.loss.weights.perceptual
    } else {
        0.0
    };

    for it in 0..job.iters {
        let iteration = job.first_iteration + it;
        let view = &job.views[it % job.views.len()];
        let cam = &job.cameras[view.view_index];
        let out = render_with(&current, cam, job.background, job.exec);
        let n = (cam.pixel_count() * 3) as f64;
        let mut loss = 0.0;
        let mut grad_color = Grid::filled(cam.width, cam.height, [0.0; 3]);
        if job.loss.weights.l1 > 0.0 {
            let w = job.loss.weights.l1;
            for (g, (r, t)) in grad_color
                .data
                .iter_mut()
                .zip(out.color.data.iter().zip(&view.refined.data))
            {
                for c in 0..3 {
                    let d = r[c] - t[c];
                    loss += w * d.abs() / n;
                    g[c] += w * sign(d) / n;
                }
            }
        }
        if let (Some(p), true) = (job.loss.perceptual, perceptual_weight > 0.0) {
            let (value, grad) = p
                .distance(&out.color, &view.refined)
                .map_err(|source| Error::Oracle { view: view.view_index, source })?;
            loss += perceptual_weight * value;
            for (g, pg) in grad_color.data.iter_mut().zip(&grad.data) {
                for c in 0..3 {
                    g[c] += perceptual_weight * pg[c];
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        report.losses.push(loss);

        let grad_depth = Grid::filled(cam.width, cam.height, 0.0);
        let grads = backward_with(&current, cam, job.background, &grad_color, &grad_depth, job.exec)?;
        let raw_grads: Vec<[f64; DIM]> = grads
            .iter()
            .zip(current.gaussians())
            .map(|(g, gs)| {
                let mut r = [0.0; DIM];
                r[0..3].copy_from_slice(g.mean.as_slice());
                r[3..7].copy_from_slice(&g.rotation);
                for k in 0..3 {
                    r[7 + k] = g.scale[k] * gs.scale[k];
                }
                r[10] = g.opacity * gs.opacity * (1.0 - gs.opacity);
                r[11..14].copy_from_slice(g.color.as_slice());
                r
            })
            .collect();
        adam.update(&mut params, &raw_grads);
        for (index, (g, p)) in current.gaussians_mut().iter_mut().zip(&params).enumerate() {
            *g = from_raw(p);
            let finite = g.mean.iter().chain(&g.scale).chain(&g.color).chain(&g.rotation).all(|v| v.is_finite());
            if !finite || !g.opacity.is_finite() {
                return Err(Error::NonFiniteParameters { iteration, index });
            }
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(iteration + 1, &current);
        }
    }
    Ok((current, report))
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}
