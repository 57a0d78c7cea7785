//! Localized text-driven editing of 3D Gaussian splatting scenes.
//!
//! The pipeline has three stages: [`localize`] finds the Gaussians an edit
//! prompt refers to, [`depth_init`] seeds new Gaussians from calibrated
//! monocular depth of the edited frontal view, and [`refine`] alternates
//! conditional view edits with fine-tuning. Learned 2D priors sit behind the
//! traits in [`oracle`].

pub mod depth_init;
pub mod error;
pub mod exec;
pub mod image;
pub mod localize;
pub mod oracle;
pub mod refine;
pub mod render;
pub mod scene;

pub use error::{Error, OracleError, Result, Stage};
pub use exec::Exec;
