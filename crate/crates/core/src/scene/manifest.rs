//! Camera manifest: `{"views":[{"name","fx","fy","cx","cy","width","height","c2w":[16]}]}`
//! with `c2w` row-major, OpenCV camera axes.

use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::Camera;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewEntry {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub c2w: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraManifest {
    pub views: Vec<ViewEntry>,
}

impl CameraManifest {
    pub fn from_cameras(cameras: &[Camera]) -> Self {
        let views = cameras
            .iter()
            .map(|c| {
                let m = c.c2w();
                ViewEntry {
                    name: c.name.clone(),
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                    width: c.width,
                    height: c.height,
                    c2w: (0..4)
                        .flat_map(|r| (0..4).map(move |col| (r, col)))
                        .map(|(r, col)| m[(r, col)])
                        .collect(),
                }
            })
            .collect();
        Self { views }
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.views
            .iter()
            .map(|v| {
                if v.c2w.len() != 16 {
                    return Err(Error::Format(format!(
                        "view {}: c2w must have 16 entries, found {}",
                        v.name,
                        v.c2w.len()
                    )));
                }
                let m = Matrix4::from_row_slice(&v.c2w);
                Camera::from_c2w(v.name.clone(), v.fx, v.fy, v.cx, v.cy, v.width, v.height, &m)
            })
            .collect()
    }
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CameraManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    manifest.cameras()
}

pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&CameraManifest::from_cameras(cameras))
        .map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
